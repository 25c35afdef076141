"""The pVAD classifier: 2x Conv1D over Mel bins, 2x GRU(4), FC(16)+ReLU, FC(1)+sigmoid.

Parameters live in an ordered dict of float64 arrays.  Two forward paths
exist:

* :func:`forward_frame` / :func:`forward_sequence` - one frame at a time,
  the streaming path used for inference;
* :func:`forward_batch` - vectorised over (batch, time) for training, paired
  with :func:`backward` for exact BPTT gradients.
"""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

MODEL_FORMAT_VERSION = 1
PRED_CLAMP = 1e-7


class ModelFormatError(ValueError):
    pass


class NumericError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    n_mels: int = 32
    conv1_out: int = 16
    conv2_out: int = 32
    kernel: int = 3
    stride: int = 2
    gru1_units: int = 4
    gru2_units: int = 4
    fc1_out: int = 16

    @property
    def conv1_len(self) -> int:
        return (self.n_mels - self.kernel) // self.stride + 1

    @property
    def conv2_len(self) -> int:
        return (self.conv1_len - self.kernel) // self.stride + 1

    @property
    def flat_dim(self) -> int:
        return self.conv2_out * self.conv2_len

    def shapes(self) -> "OrderedDict[str, tuple]":
        k = self.kernel
        s = OrderedDict()
        s["conv1.w"] = (self.conv1_out, 1, k)
        s["conv1.b"] = (self.conv1_out,)
        s["conv2.w"] = (self.conv2_out, self.conv1_out, k)
        s["conv2.b"] = (self.conv2_out,)
        for name, n_in, h in (("gru1", self.flat_dim, self.gru1_units),
                              ("gru2", self.gru1_units, self.gru2_units)):
            for g in "zrh":
                s[f"{name}.W_{g}"] = (h, n_in)
                s[f"{name}.U_{g}"] = (h, h)
                s[f"{name}.b_{g}"] = (h,)
        s["fc1.w"] = (self.fc1_out, self.gru2_units)
        s["fc1.b"] = (self.fc1_out,)
        s["fc2.w"] = (1, self.fc1_out)
        s["fc2.b"] = (1,)
        return s


CANONICAL_NET = NetConfig()


@dataclass
class NetParams:
    config: NetConfig
    tensors: "OrderedDict[str, np.ndarray]"

    def __getitem__(self, name):
        return self.tensors[name]

    def copy(self) -> "NetParams":
        return NetParams(self.config, OrderedDict((k, v.copy()) for k, v in self.tensors.items()))

    def zeros_like(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((k, np.zeros_like(v)) for k, v in self.tensors.items())


@dataclass
class GruState:
    h1: np.ndarray
    h2: np.ndarray

    @classmethod
    def zeros(cls, cfg: NetConfig = CANONICAL_NET, batch: int | None = None) -> "GruState":
        lead = () if batch is None else (batch,)
        return cls(np.zeros(lead + (cfg.gru1_units,)), np.zeros(lead + (cfg.gru2_units,)))

    def copy(self) -> "GruState":
        return GruState(self.h1.copy(), self.h2.copy())


def _glorot_bound(name: str, shape: tuple) -> float:
    if name.startswith("conv"):
        out_ch, in_ch, k = shape
        fan_in, fan_out = in_ch * k, out_ch * k
    else:
        fan_out, fan_in = shape
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def glorot_bounds(cfg: NetConfig = CANONICAL_NET) -> dict:
    return {n: _glorot_bound(n, s) for n, s in cfg.shapes().items() if len(s) > 1}


def init_params(cfg: NetConfig = CANONICAL_NET, seed: int = 0) -> NetParams:
    rng = np.random.default_rng(seed)
    tensors = OrderedDict()
    for name, shape in cfg.shapes().items():
        if len(shape) == 1:
            tensors[name] = np.zeros(shape)
        else:
            b = _glorot_bound(name, shape)
            tensors[name] = rng.uniform(-b, b, size=shape)
    return NetParams(cfg, tensors)


def param_count(params) -> int:
    tensors = params.tensors if isinstance(params, NetParams) else params
    return int(sum(np.asarray(v).size for v in tensors.values()))


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------

def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _patch_index(n_in: int, kernel: int, stride: int) -> np.ndarray:
    n_out = (n_in - kernel) // stride + 1
    return stride * np.arange(n_out)[:, None] + np.arange(kernel)[None, :]


def _conv(x: np.ndarray, w: np.ndarray, b: np.ndarray, stride: int):
    """Valid strided 1-D convolution; x is (..., in_ch, L). Returns (out, patches)."""
    idx = _patch_index(x.shape[-1], w.shape[-1], stride)
    patches = x[..., idx]                       # (..., in_ch, L_out, k)
    patches = np.moveaxis(patches, -3, -2)      # (..., L_out, in_ch, k)
    patches = patches.reshape(patches.shape[:-2] + (-1,))
    out = patches @ w.reshape(w.shape[0], -1).T + b   # (..., L_out, out_ch)
    return np.swapaxes(out, -1, -2), patches


def _conv_stack(params: NetParams, x: np.ndarray):
    cfg = params.config
    a1, p1 = _conv(x[..., None, :], params["conv1.w"], params["conv1.b"], cfg.stride)
    c1 = np.maximum(a1, 0.0)
    a2, p2 = _conv(c1, params["conv2.w"], params["conv2.b"], cfg.stride)
    c2 = np.maximum(a2, 0.0)
    flat = c2.reshape(c2.shape[:-2] + (-1,))
    return flat, (a1, p1, a2, p2)


def _gru_step(params: NetParams, name: str, x: np.ndarray, h: np.ndarray):
    t = params.tensors
    a_z = x @ t[f"{name}.W_z"].T + h @ t[f"{name}.U_z"].T + t[f"{name}.b_z"]
    a_r = x @ t[f"{name}.W_r"].T + h @ t[f"{name}.U_r"].T + t[f"{name}.b_r"]
    z, r = sigmoid(a_z), sigmoid(a_r)
    rh = r * h
    a_h = x @ t[f"{name}.W_h"].T + rh @ t[f"{name}.U_h"].T + t[f"{name}.b_h"]
    cand = np.tanh(a_h)
    h_new = (1.0 - z) * h + z * cand
    return h_new, (x, h, z, r, rh, cand, (a_z, a_r, a_h))


def _head(params: NetParams, h2: np.ndarray):
    a = h2 @ params["fc1.w"].T + params["fc1.b"]
    f = np.maximum(a, 0.0)
    logit = f @ params["fc2.w"].T + params["fc2.b"]
    return sigmoid(logit[..., 0]), (a, f)


# ---------------------------------------------------------------------------
# Streaming forward
# ---------------------------------------------------------------------------

def forward_frame(params: NetParams, state: GruState, x):
    """One frame through the network.  Returns ``(p, trace, new_state)``."""
    x = np.asarray(getattr(x, "values", x), dtype=np.float64)
    if x.shape != (params.config.n_mels,):
        raise ValueError(f"expected {params.config.n_mels} features, got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite input features")
    flat, conv_trace = _conv_stack(params, x)
    h1, g1 = _gru_step(params, "gru1", flat, state.h1)
    h2, g2 = _gru_step(params, "gru2", h1, state.h2)
    p, head = _head(params, h2)
    trace = {"conv": conv_trace, "flat": flat, "gru1": g1, "gru2": g2, "head": head}
    return float(p), trace, GruState(h1, h2)


def forward_sequence(params: NetParams, features, state: GruState | None = None):
    """Frame-by-frame pass over a (T, n_mels) sequence.  Returns ``(probs, state)``."""
    state = state if state is not None else GruState.zeros(params.config)
    features = np.asarray(features, dtype=np.float64)
    out = np.empty(features.shape[0])
    for i, x in enumerate(features):
        out[i], _, state = forward_frame(params, state, x)
    return out, state


# ---------------------------------------------------------------------------
# Batched forward, loss and BPTT
# ---------------------------------------------------------------------------

@dataclass
class Trace:
    features: np.ndarray
    conv: tuple
    flat: np.ndarray
    gru1: list = field(default_factory=list)
    gru2: list = field(default_factory=list)
    head: tuple = ()
    probs: np.ndarray | None = None


def forward_batch(params: NetParams, features, state: GruState | None = None):
    """Vectorised stateful pass over (B, T, n_mels).  Returns ``(probs, trace, state)``."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 2:
        features = features[None]
    B, T, _ = features.shape
    cfg = params.config
    state = state if state is not None else GruState.zeros(cfg, batch=B)
    flat, conv_trace = _conv_stack(params, features)       # (B, T, 224)
    h1, h2 = state.h1, state.h2
    g1s, g2s = [], []
    h2_seq = np.empty((B, T, cfg.gru2_units))
    for t in range(T):
        h1, g1 = _gru_step(params, "gru1", flat[:, t], h1)
        h2, g2 = _gru_step(params, "gru2", h1, h2)
        g1s.append(g1)
        g2s.append(g2)
        h2_seq[:, t] = h2
    probs, head = _head(params, h2_seq)
    trace = Trace(features, conv_trace, flat, g1s, g2s, (h2_seq,) + head, probs)
    return probs, trace, GruState(h1, h2)


def bce_loss(predictions, targets) -> float:
    p = np.clip(np.asarray(predictions, dtype=np.float64), PRED_CLAMP, 1.0 - PRED_CLAMP)
    z = np.asarray(targets, dtype=np.float64)
    if p.shape != z.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {z.shape}")
    if p.size == 0:
        raise ValueError("empty prediction sequence")
    return float(-np.mean(z * np.log(p) + (1.0 - z) * np.log(1.0 - p)))


def _gru_backward(params, name, cache, dh_new, grads):
    t = params.tensors
    x, h, z, r, rh, cand = cache[:6]
    dz = dh_new * (cand - h)
    dcand = dh_new * z
    dh = dh_new * (1.0 - z)
    da_h = dcand * (1.0 - cand * cand)
    grads[f"{name}.W_h"] += da_h.T @ x
    grads[f"{name}.U_h"] += da_h.T @ rh
    grads[f"{name}.b_h"] += da_h.sum(axis=0)
    drh = da_h @ t[f"{name}.U_h"]
    dx = da_h @ t[f"{name}.W_h"]
    dr = drh * h
    dh += drh * r
    da_z = dz * z * (1.0 - z)
    da_r = dr * r * (1.0 - r)
    for g, da in (("z", da_z), ("r", da_r)):
        grads[f"{name}.W_{g}"] += da.T @ x
        grads[f"{name}.U_{g}"] += da.T @ h
        grads[f"{name}.b_{g}"] += da.sum(axis=0)
        dx += da @ t[f"{name}.W_{g}"]
        dh += da @ t[f"{name}.U_{g}"]
    return dx, dh


def _conv_backward(x_shape, patches, w, da, stride):
    """Gradients of a valid strided conv.  da is (..., out_ch, L_out)."""
    out_ch, in_ch, k = w.shape
    da_t = np.swapaxes(da, -1, -2)                        # (..., L_out, out_ch)
    flat_da = da_t.reshape(-1, out_ch)
    dw = (flat_da.T @ patches.reshape(-1, in_ch * k)).reshape(w.shape)
    db = flat_da.sum(axis=0)
    dpatch = (da_t @ w.reshape(out_ch, -1)).reshape(da_t.shape[:-1] + (in_ch, k))
    dx = np.zeros(x_shape)
    idx = _patch_index(x_shape[-1], k, stride)
    for j in range(idx.shape[0]):
        dx[..., idx[j]] += dpatch[..., j, :, :]
    return dw, db, dx


def backward(params: NetParams, trace: Trace, targets) -> "OrderedDict[str, np.ndarray]":
    """Exact gradient of the mean BCE over every frame in the trace (full BPTT)."""
    if trace is None or trace.probs is None or not trace.gru1:
        raise ValueError("backward needs the trace of a forward_batch pass")
    cfg = params.config
    z = np.asarray(targets, dtype=np.float64).reshape(trace.probs.shape)
    B, T = trace.probs.shape
    grads = params.zeros_like()
    p = trace.probs
    inside = (p > PRED_CLAMP) & (p < 1.0 - PRED_CLAMP)
    dlogit = np.where(inside, (p - z) / (B * T), 0.0)        # (B, T)

    h2_seq, a_fc1, f_fc1 = trace.head
    grads["fc2.w"] += (dlogit.reshape(-1, 1).T @ f_fc1.reshape(-1, cfg.fc1_out))
    grads["fc2.b"] += dlogit.sum()
    da_fc1 = dlogit[..., None] * params["fc2.w"][0] * (a_fc1 > 0)
    grads["fc1.w"] += da_fc1.reshape(-1, cfg.fc1_out).T @ h2_seq.reshape(-1, cfg.gru2_units)
    grads["fc1.b"] += da_fc1.reshape(-1, cfg.fc1_out).sum(axis=0)
    dh2_head = da_fc1 @ params["fc1.w"]                     # (B, T, H2)

    dflat = np.empty_like(trace.flat)
    dh1 = np.zeros((B, cfg.gru1_units))
    dh2 = np.zeros((B, cfg.gru2_units))
    for t in range(T - 1, -1, -1):
        dx2, dh2 = _gru_backward(params, "gru2", trace.gru2[t], dh2 + dh2_head[:, t], grads)
        dx1, dh1 = _gru_backward(params, "gru1", trace.gru1[t], dh1 + dx2, grads)
        dflat[:, t] = dx1

    a1, p1, a2, p2 = trace.conv
    da2 = dflat.reshape(a2.shape) * (a2 > 0)
    dw2, db2, dc1 = _conv_backward(a1.shape, p2, params["conv2.w"], da2, cfg.stride)
    grads["conv2.w"] += dw2
    grads["conv2.b"] += db2
    da1 = dc1 * (a1 > 0)
    x_shape = trace.features.shape[:-1] + (1, cfg.n_mels)
    dw1, db1, _ = _conv_backward(x_shape, p1, params["conv1.w"], da1, cfg.stride)
    grads["conv1.w"] += dw1
    grads["conv1.b"] += db1
    return grads


# ---------------------------------------------------------------------------
# Model files
# ---------------------------------------------------------------------------

def save_params(params: NetParams, path, extra: dict | None = None) -> Path:
    """Write ``<path>.json`` (manifest) and ``<path>.bin`` (float32 LE, manifest order)."""
    path = Path(path).with_suffix("")
    layers = []
    blob = bytearray()
    for name, arr in params.tensors.items():
        layers.append({"name": name, "shape": list(arr.shape)})
        blob += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    manifest = {
        "format_version": MODEL_FORMAT_VERSION,
        "kind": "float",
        "config": asdict(params.config),
        "layers": layers,
        "param_count": param_count(params),
        "data_file": path.name + ".bin",
        **(extra or {}),
    }
    path.with_suffix(".bin").write_bytes(bytes(blob))
    json_path = path.with_suffix(".json")
    json_path.write_text(json.dumps(manifest, indent=2))
    return json_path


def load_params(path) -> NetParams:
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    manifest = json.loads(path.read_text())
    if manifest.get("format_version") != MODEL_FORMAT_VERSION or manifest.get("kind") != "float":
        raise ModelFormatError(f"{path}: not a version-{MODEL_FORMAT_VERSION} float model")
    cfg = NetConfig(**manifest["config"])
    blob = (path.parent / manifest["data_file"]).read_bytes()
    expected = cfg.shapes()
    tensors = OrderedDict()
    offset = 0
    for layer in manifest["layers"]:
        name, shape = layer["name"], tuple(layer["shape"])
        if expected.get(name) != shape:
            raise ModelFormatError(f"layer {name} has shape {shape}, expected {expected.get(name)}")
        n = int(np.prod(shape))
        if offset + 4 * n > len(blob):
            raise ModelFormatError("model data file is truncated")
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=offset) \
            .astype(np.float64).reshape(shape)
        offset += 4 * n
    if list(tensors) != list(expected):
        raise ModelFormatError("layer list does not match the configuration")
    return NetParams(cfg, tensors)


def model_metadata(path) -> dict:
    return json.loads(Path(path).with_suffix(".json").read_text())

