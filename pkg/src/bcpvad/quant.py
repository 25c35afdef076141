"""Post-training 8-bit quantization and the integer-only inference path.

Weights are symmetric per-tensor int8; activations are asymmetric int8 at
scales set from percentiles of a representative data set.  Accumulation is
int32-range in int64 containers, requantization uses fixed-point
multipliers (significand + right shift, rounding half away from zero), and
the sigmoid / tanh nonlinearities are lookup tables indexed by the quantized
pre-activation.  Between :func:`quantize_input` and the final output
dequantization no floating point is used.
"""

from __future__ import annotations

import json
import warnings
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .net import ModelFormatError, NetConfig, NetParams, _patch_index, forward_batch

QMODEL_FORMAT_VERSION = 1
GRUS = ("gru1", "gru2")


class CalibrationError(ValueError):
    pass


class DegenerateCalibrationWarning(UserWarning):
    pass


def qrange(bits: int) -> tuple[int, int]:
    return -(1 << (bits - 1)), (1 << (bits - 1)) - 1


@dataclass(frozen=True)
class QTensor:
    values: np.ndarray
    scale: float
    zero_point: int = 0

    def dequantize(self) -> np.ndarray:
        return self.scale * (self.values.astype(np.float64) - self.zero_point)


def quantize_symmetric(w, bits: int = 8) -> QTensor:
    w = np.asarray(w, dtype=np.float64)
    _, qmax = qrange(bits)
    peak = float(np.max(np.abs(w))) if w.size else 0.0
    scale = peak / qmax if peak > 0 else 1.0
    q = np.clip(np.round(w / scale), -qmax, qmax).astype(np.int64)
    return QTensor(q, scale, 0)


def affine_params(lo: float, hi: float, bits: int = 8, name: str = "") -> tuple[float, int]:
    """Scale and zero point for an activation range; the range is widened to include 0."""
    qmin, qmax = qrange(bits)
    lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
    scale = (hi - lo) / (qmax - qmin)
    if scale < 1e-8:
        warnings.warn(f"zero-width calibration range at {name or 'boundary'}; "
                      "scale floored at 1e-8", DegenerateCalibrationWarning, stacklevel=2)
        scale = 1e-8
    zp = int(np.clip(round(-lo / scale) + qmin, qmin, qmax))
    return scale, zp


def quantize_affine(x, scale: float, zero_point: int, bits: int = 8) -> np.ndarray:
    qmin, qmax = qrange(bits)
    return np.clip(np.round(np.asarray(x, dtype=np.float64) / scale) + zero_point,
                   qmin, qmax).astype(np.int64)


# ---------------------------------------------------------------------------
# Fixed-point requantization
# ---------------------------------------------------------------------------

def fixed_multiplier(m: float, mult_bits: int = 31) -> tuple[int, int]:
    """Represent a positive real as ``M0 * 2**-shift`` with a ``mult_bits`` significand."""
    if m <= 0:
        return 0, 0
    frac, exp = np.frexp(m)
    m0 = int(round(float(frac) * (1 << mult_bits)))
    shift = mult_bits - int(exp)
    if m0 == (1 << mult_bits):
        m0 //= 2
        shift -= 1
    return m0, shift


def requantize(acc, mult: tuple[int, int]) -> np.ndarray:
    """``round(acc * M0 / 2**shift)``, ties away from zero, in integer arithmetic."""
    m0, shift = mult
    prod = np.asarray(acc, dtype=np.int64) * np.int64(m0)
    if shift <= 0:
        return prod << np.int64(-shift)
    if shift >= 63:
        return np.zeros_like(prod)
    half = np.int64(1) << np.int64(shift - 1)
    mag = (np.abs(prod) + half) >> np.int64(shift)
    return np.where(prod < 0, -mag, mag)


# ---------------------------------------------------------------------------
# Calibration
# ---------------------------------------------------------------------------

@dataclass
class CalibrationStats:
    ranges: "OrderedDict[str, tuple[float, float]]"
    percentile: float = 0.1

    def __getitem__(self, name):
        return self.ranges[name]


def float_taps(params: NetParams, features) -> "OrderedDict[str, np.ndarray]":
    """Every quantization boundary of a float pass over one (T, n_mels) stream."""
    x = np.asarray(features, dtype=np.float64)[None]
    probs, trace, _ = forward_batch(params, x)
    a1, _, a2, _ = trace.conv
    taps = OrderedDict()
    taps["input"] = x
    taps["conv1"] = np.maximum(a1, 0.0)
    taps["conv2"] = np.maximum(a2, 0.0)
    for name, caches in (("gru1", trace.gru1), ("gru2", trace.gru2)):
        _, _, z, r, rh, _, pre = zip(*caches)
        a_z, a_r, a_h = zip(*pre)
        taps[f"{name}.z_pre"] = np.stack(a_z)
        taps[f"{name}.r_pre"] = np.stack(a_r)
        taps[f"{name}.h_pre"] = np.stack(a_h)
        taps[f"{name}.z"] = np.stack(z)
        taps[f"{name}.r"] = np.stack(r)
        taps[f"{name}.rh"] = np.stack(rh)
        taps[f"{name}.h"] = np.stack([(1.0 - c[2]) * c[1] + c[2] * c[5] for c in caches])
    h2_seq, a_fc1, f_fc1 = trace.head
    taps["fc1"] = f_fc1
    taps["fc2_pre"] = f_fc1 @ params["fc2.w"].T + params["fc2.b"]
    taps["output"] = probs
    return taps


def calibrate(params: NetParams, representative, percentile: float = 0.1) -> CalibrationStats:
    """Per-boundary [lo, hi] at the given lower/upper percentiles (0 means min/max)."""
    streams = [np.asarray(getattr(s, "features", s), dtype=np.float64) for s in representative]
    streams = [s for s in streams if s.size]
    if not streams or sum(len(s) for s in streams) < 100:
        raise CalibrationError("calibration needs at least 100 frames")
    pooled: dict = OrderedDict()
    for s in streams:
        for name, v in float_taps(params, s).items():
            pooled.setdefault(name, []).append(np.ravel(v))
    ranges = OrderedDict()
    for name, parts in pooled.items():
        v = np.concatenate(parts)
        lo, hi = np.percentile(v, [percentile, 100.0 - percentile])
        ranges[name] = (float(lo), float(hi))
    return CalibrationStats(ranges, percentile)


# ---------------------------------------------------------------------------
# Quantized network
# ---------------------------------------------------------------------------

@dataclass
class QNetParams:
    config: NetConfig
    bits: int
    weights: "OrderedDict[str, QTensor]" = field(default_factory=OrderedDict)
    biases: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    acts: "OrderedDict[str, tuple[float, int]]" = field(default_factory=OrderedDict)
    mults: "OrderedDict[str, tuple[int, int]]" = field(default_factory=OrderedDict)
    luts: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)

    @property
    def qmin(self) -> int:
        return qrange(self.bits)[0]

    @property
    def qmax(self) -> int:
        return qrange(self.bits)[1]

    @property
    def sig_scale(self) -> float:
        return 1.0 / ((1 << self.bits) - 1)

    @property
    def tanh_scale(self) -> float:
        return 1.0 / self.qmax


@dataclass
class QState:
    h1: np.ndarray
    h2: np.ndarray

    @classmethod
    def zeros(cls, q: QNetParams) -> "QState":
        return cls(np.full(q.config.gru1_units, q.acts["gru1.h"][1], dtype=np.int64),
                   np.full(q.config.gru2_units, q.acts["gru2.h"][1], dtype=np.int64))

    def copy(self) -> "QState":
        return QState(self.h1.copy(), self.h2.copy())


def _lut(fn, in_scale: float, in_zp: int, out_scale: float, out_zp: int, bits: int) -> np.ndarray:
    qmin, qmax = qrange(bits)
    grid = np.arange(qmin, qmax + 1)
    y = fn(in_scale * (grid - in_zp))
    return np.clip(np.round(y / out_scale) + out_zp, qmin, qmax).astype(np.int64)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def quantize_net(params: NetParams, stats: CalibrationStats, bits: int = 8) -> QNetParams:
    cfg = params.config
    missing = [b for b in _boundaries() if b not in stats.ranges]
    if missing:
        raise CalibrationError(f"calibration lacks boundaries {missing}")
    mult_bits = 31 if bits <= 8 else 22
    q = QNetParams(cfg, bits)
    for name in _boundaries():
        q.acts[name] = affine_params(*stats[name], bits=bits, name=name)
    for name, w in params.tensors.items():
        if w.ndim > 1:
            q.weights[name] = quantize_symmetric(w, bits)

    def bias(name, in_scale):
        b = params[name]
        return np.round(b / (in_scale * q.weights[name.replace(".b", ".w")].scale)).astype(np.int64)

    def mult(key, real):
        q.mults[key] = fixed_multiplier(real, mult_bits)

    s_in, _ = q.acts["input"]
    for layer, src in (("conv1", "input"), ("conv2", "conv1")):
        s_src = q.acts[src][0]
        q.biases[f"{layer}.b"] = bias(f"{layer}.b", s_src)
        mult(layer, s_src * q.weights[f"{layer}.w"].scale / q.acts[layer][0])

    for g, src in (("gru1", "conv2"), ("gru2", "gru1.h")):
        s_x = q.acts[src][0]
        s_h = q.acts[f"{g}.h"][0]
        for gate in "zrh":
            pre = f"{g}.{gate}_pre"
            s_pre = q.acts[pre][0]
            w = q.weights[f"{g}.W_{gate}"]
            u = q.weights[f"{g}.U_{gate}"]
            q.biases[f"{g}.b_{gate}"] = np.round(params[f"{g}.b_{gate}"] / (s_x * w.scale)).astype(np.int64)
            mult(f"{g}.W_{gate}", s_x * w.scale / s_pre)
            s_rec = q.acts[f"{g}.rh"][0] if gate == "h" else s_h
            mult(f"{g}.U_{gate}", s_rec * u.scale / s_pre)
            s_pre_zp = q.acts[pre]
            if gate == "h":
                q.luts[pre] = _lut(np.tanh, *s_pre_zp, q.tanh_scale, 0, bits)
            else:
                q.luts[pre] = _lut(_sigmoid, *s_pre_zp, q.sig_scale, q.qmin, bits)
        mult(f"{g}.rh", s_h * q.sig_scale / q.acts[f"{g}.rh"][0])
        mult(f"{g}.cand", q.tanh_scale / s_h)
        mult(f"{g}.gate", q.sig_scale)

    s_h2 = q.acts["gru2.h"][0]
    q.biases["fc1.b"] = bias("fc1.b", s_h2)
    mult("fc1", s_h2 * q.weights["fc1.w"].scale / q.acts["fc1"][0])
    s_f = q.acts["fc1"][0]
    q.biases["fc2.b"] = bias("fc2.b", s_f)
    mult("fc2", s_f * q.weights["fc2.w"].scale / q.acts["fc2_pre"][0])
    q.luts["fc2_pre"] = _lut(_sigmoid, *q.acts["fc2_pre"], q.sig_scale, q.qmin, bits)
    return q


def _boundaries() -> list[str]:
    names = ["input", "conv1", "conv2"]
    for g in GRUS:
        names += [f"{g}.{k}" for k in ("z_pre", "r_pre", "h_pre", "rh", "h")]
    return names + ["fc1", "fc2_pre"]


# ---------------------------------------------------------------------------
# Integer inference
# ---------------------------------------------------------------------------

def quantize_input(q: QNetParams, x) -> np.ndarray:
    s, zp = q.acts["input"]
    return quantize_affine(getattr(x, "values", x), s, zp, q.bits)


def _clamp(q: QNetParams, v, lo=None):
    return np.clip(v, q.qmin if lo is None else lo, q.qmax)


def _q_conv(q: QNetParams, layer: str, x_q: np.ndarray, src: str) -> np.ndarray:
    w = q.weights[f"{layer}.w"].values
    zp_in = q.acts[src][1]
    xc = x_q - zp_in
    if xc.ndim == 1:
        xc = xc[None, :]
    idx = _patch_index(xc.shape[-1], w.shape[-1], q.config.stride)
    patches = np.moveaxis(xc[:, idx], 0, 1).reshape(idx.shape[0], -1)   # (L_out, in*k)
    acc = patches @ w.reshape(w.shape[0], -1).T + q.biases[f"{layer}.b"]
    _, zp_out = q.acts[layer]
    out = requantize(acc, q.mults[layer]) + zp_out
    return _clamp(q, out, lo=zp_out).T                                  # ReLU at real 0


def _q_gru(q: QNetParams, g: str, x_q: np.ndarray, src: str, h_q: np.ndarray) -> np.ndarray:
    zp_x = q.acts[src][1]
    zp_h = q.acts[f"{g}.h"][1]
    xc = x_q - zp_x
    hc = h_q - zp_h

    def pre(gate, rec):
        w = q.weights[f"{g}.W_{gate}"].values
        u = q.weights[f"{g}.U_{gate}"].values
        acc_x = w @ xc + q.biases[f"{g}.b_{gate}"]
        acc_h = u @ rec
        _, zp = q.acts[f"{g}.{gate}_pre"]
        v = requantize(acc_x, q.mults[f"{g}.W_{gate}"]) \
            + requantize(acc_h, q.mults[f"{g}.U_{gate}"]) + zp
        return _clamp(q, v)

    z_int = q.luts[f"{g}.z_pre"][pre("z", hc) - q.qmin] - q.qmin      # z * (2^b - 1)
    r_int = q.luts[f"{g}.r_pre"][pre("r", hc) - q.qmin] - q.qmin
    _, zp_rh = q.acts[f"{g}.rh"]
    rh_q = _clamp(q, requantize(r_int * hc, q.mults[f"{g}.rh"]) + zp_rh)
    cand_q = q.luts[f"{g}.h_pre"][pre("h", rh_q - zp_rh) - q.qmin]      # tanh at 1/qmax
    cand_c = requantize(cand_q, q.mults[f"{g}.cand"])                  # in hidden-state units
    new_c = hc + requantize(z_int * (cand_c - hc), q.mults[f"{g}.gate"])
    return _clamp(q, new_c + zp_h)


def q_forward_frame(q: QNetParams, state: QState, x):
    """One frame through the integer network.  Returns ``(p, new_state)``."""
    x_q = quantize_input(q, x)
    c1 = _q_conv(q, "conv1", x_q, "input")
    c2 = _q_conv(q, "conv2", c1, "conv1").reshape(-1)
    h1 = _q_gru(q, "gru1", c2, "conv2", state.h1)
    h2 = _q_gru(q, "gru2", h1, "gru1.h", state.h2)
    zp_h2 = q.acts["gru2.h"][1]
    acc = q.weights["fc1.w"].values @ (h2 - zp_h2) + q.biases["fc1.b"]
    _, zp_f = q.acts["fc1"]
    f = _clamp(q, requantize(acc, q.mults["fc1"]) + zp_f, lo=zp_f)
    acc = q.weights["fc2.w"].values @ (f - zp_f) + q.biases["fc2.b"]
    _, zp_o = q.acts["fc2_pre"]
    logit_q = _clamp(q, requantize(acc, q.mults["fc2"]) + zp_o)
    p_q = int(q.luts["fc2_pre"][logit_q[0] - q.qmin])
    return (p_q - q.qmin) * q.sig_scale, QState(h1, h2)


def q_forward_sequence(q: QNetParams, features, state: QState | None = None):
    state = state if state is not None else QState.zeros(q)
    features = np.asarray(features, dtype=np.float64)
    out = np.empty(len(features))
    for i, x in enumerate(features):
        out[i], state = q_forward_frame(q, state, x)
    return out, state


# ---------------------------------------------------------------------------
# Accuracy comparison
# ---------------------------------------------------------------------------

def binary_accuracy(probs, labels, threshold: float = 0.5) -> float:
    probs, labels = np.asarray(probs), np.asarray(labels)
    return float(np.mean((probs > threshold) == (labels > threshold)))


def accuracy_delta(float_params: NetParams, qparams: QNetParams, test_data,
                   threshold: float = 0.5):
    """Frame-pooled binary accuracy of both paths; returns ``(acc_float, acc_q, delta)``
    in percentage points."""
    pf, pq, zs = [], [], []
    for x, z in zip(test_data.features, test_data.targets):
        n = min(len(x), len(z))
        p_float, _, _ = forward_batch(float_params, x[None, :n])
        p_quant, _ = q_forward_sequence(qparams, x[:n])
        pf.append(p_float[0])
        pq.append(p_quant)
        zs.append(z[:n])
    pf, pq, zs = map(np.concatenate, (pf, pq, zs))
    acc_f = 100.0 * binary_accuracy(pf, zs, threshold)
    acc_q = 100.0 * binary_accuracy(pq, zs, threshold)
    return acc_f, acc_q, acc_f - acc_q


# ---------------------------------------------------------------------------
# Quantized model files
# ---------------------------------------------------------------------------

def save_qparams(q: QNetParams, path) -> Path:
    """``<path>.json`` holds scales, zero points, multipliers and LUTs;
    ``<path>.bin`` holds the integer weight and bias sections."""
    path = Path(path).with_suffix("")
    wdtype = "<i1" if q.bits <= 8 else "<i2"
    bdtype = "<i4" if q.bits <= 8 else "<i8"
    sections, blob = [], bytearray()
    for name, t in q.weights.items():
        sections.append({"name": name, "kind": "weight", "dtype": wdtype,
                         "shape": list(t.values.shape), "offset": len(blob), "scale": t.scale})
        blob += t.values.astype(wdtype).tobytes()
    for name, b in q.biases.items():
        sections.append({"name": name, "kind": "bias", "dtype": bdtype,
                         "shape": list(b.shape), "offset": len(blob)})
        blob += b.astype(bdtype).tobytes()
    manifest = {
        "format_version": QMODEL_FORMAT_VERSION,
        "kind": "quantized",
        "bits": q.bits,
        "config": asdict(q.config),
        "activations": {k: {"scale": s, "zero_point": zp} for k, (s, zp) in q.acts.items()},
        "multipliers": {k: list(v) for k, v in q.mults.items()},
        "luts": {k: v.tolist() for k, v in q.luts.items()},
        "sections": sections,
        "data_file": path.name + ".bin",
    }
    path.with_suffix(".bin").write_bytes(bytes(blob))
    out = path.with_suffix(".json")
    out.write_text(json.dumps(manifest))
    return out


def load_qparams(path) -> QNetParams:
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    m = json.loads(path.read_text())
    if m.get("format_version") != QMODEL_FORMAT_VERSION or m.get("kind") != "quantized":
        raise ModelFormatError(f"{path}: not a version-{QMODEL_FORMAT_VERSION} quantized model")
    blob = (path.parent / m["data_file"]).read_bytes()
    q = QNetParams(NetConfig(**m["config"]), int(m["bits"]))
    for k, v in m["activations"].items():
        q.acts[k] = (float(v["scale"]), int(v["zero_point"]))
    for k, v in m["multipliers"].items():
        q.mults[k] = (int(v[0]), int(v[1]))
    for k, v in m["luts"].items():
        q.luts[k] = np.asarray(v, dtype=np.int64)
    for s in m["sections"]:
        dt = np.dtype(s["dtype"])
        n = int(np.prod(s["shape"]))
        arr = np.frombuffer(blob, dtype=dt, count=n, offset=s["offset"]) \
            .astype(np.int64).reshape(s["shape"])
        if s["kind"] == "weight":
            q.weights[s["name"]] = QTensor(arr, float(s["scale"]), 0)
        else:
            q.biases[s["name"]] = arr
    return q
