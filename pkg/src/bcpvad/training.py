"""Adam, plateau scheduling and the excerpt-based BPTT training loop."""

from __future__ import annotations

import csv
import logging
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import corpus, dsp
from .net import (CANONICAL_NET, NetConfig, NetParams, NumericError, backward, bce_loss,
                  forward_batch, init_params)

log = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 8
    steps_per_epoch: int = 2000
    max_epochs: int = 100
    lr_halve_patience: int = 3
    early_stop_patience: int = 5
    bptt_len: int = 300
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        for name in ("lr", "batch_size", "steps_per_epoch", "max_epochs", "lr_halve_patience",
                     "early_stop_patience", "bptt_len", "eps"):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"{name} must be positive")


DESK_TRAIN = TrainConfig(steps_per_epoch=200, max_epochs=5)


@dataclass
class AdamMoments:
    m: "OrderedDict[str, np.ndarray]"
    v: "OrderedDict[str, np.ndarray]"
    t: int = 0

    @classmethod
    def zeros(cls, params: NetParams) -> "AdamMoments":
        return cls(params.zeros_like(), params.zeros_like(), 0)


def adam_step(params: NetParams, grads, moments: AdamMoments, t: int,
              cfg: TrainConfig, lr: float | None = None):
    """One bias-corrected Adam update; returns new ``(params, moments)``."""
    lr = cfg.lr if lr is None else lr
    new = OrderedDict()
    m_new, v_new = OrderedDict(), OrderedDict()
    for name, w in params.tensors.items():
        g = grads[name]
        if g.shape != w.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, expected {w.shape}")
        m = cfg.beta1 * moments.m[name] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * moments.v[name] + (1.0 - cfg.beta2) * g * g
        m_hat = m / (1.0 - cfg.beta1 ** t)
        v_hat = v / (1.0 - cfg.beta2 ** t)
        new[name] = w - lr * m_hat / (np.sqrt(v_hat) + cfg.eps)
        m_new[name], v_new[name] = m, v
    return NetParams(params.config, new), AdamMoments(m_new, v_new, t)


@dataclass
class PlateauSchedule:
    """Halve the LR after ``halve_patience`` epochs without a new best test
    loss; stop after ``stop_patience`` such epochs."""

    lr: float
    halve_patience: int = 3
    stop_patience: int = 5
    best: float = float("inf")
    since_best: int = 0
    since_halve: int = 0

    def update(self, test_loss: float) -> bool:
        """Record one epoch; returns True when training should stop."""
        if test_loss < self.best:
            self.best = test_loss
            self.since_best = 0
            self.since_halve = 0
            return False
        self.since_best += 1
        self.since_halve += 1
        if self.since_halve >= self.halve_patience:
            self.lr *= 0.5
            self.since_halve = 0
        return self.since_best >= self.stop_patience


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------

@dataclass
class FeatureSet:
    features: list = field(default_factory=list)   # (T, n_mels) per clip
    targets: list = field(default_factory=list)    # smoothed labels per clip
    ids: list = field(default_factory=list)

    def __len__(self):
        return len(self.features)


def clip_features(clip_samples, fb=None, cfg: dsp.FrameConfig = dsp.CANONICAL):
    values, _ = dsp.extract_clip_features(clip_samples, fb, cfg)
    return values


def load_features(manifest: dict, split: str, channel: str = "bc",
                  cache: bool = True) -> FeatureSet:
    """Log-Mel features of every mixture in ``split`` for channel ``bc``/``ac``.

    Features are cached beside the manifest in ``features_<split>_<channel>.npz``.
    """
    if channel not in ("bc", "ac"):
        raise ConfigurationError(f"unknown channel {channel!r}")
    entries = corpus.split_entries(manifest, split)
    if not entries:
        raise ConfigurationError(f"split {split!r} is empty")
    root = Path(manifest["_root"])
    cache_path = root / f"features_{split}_{channel}.npz"
    ids = [e["id"] for e in entries]
    if cache and cache_path.exists():
        data = np.load(cache_path)
        if list(data["ids"]) == ids:
            return FeatureSet([data[f"x{i}"] for i in range(len(ids))],
                              [data[f"z{i}"] for i in range(len(ids))], ids)
    fb = dsp.build_mel_filterbank()
    fs = FeatureSet()
    for e in entries:
        clip = corpus.load_clip(manifest, e, stems=(f"y_{channel}",))
        fs.features.append(clip_features(getattr(clip, f"y_{channel}"), fb))
        fs.targets.append(clip.labels)
        fs.ids.append(e["id"])
    if cache:
        arrays = {f"x{i}": x for i, x in enumerate(fs.features)}
        arrays.update({f"z{i}": z for i, z in enumerate(fs.targets)})
        np.savez(cache_path, ids=np.array(ids), **arrays)
    return fs


def sample_batch(data: FeatureSet, rng: np.random.Generator, batch_size: int, length: int):
    xs, zs = [], []
    for _ in range(batch_size):
        k = int(rng.integers(len(data)))
        x, z = data.features[k], data.targets[k]
        n = min(len(x), len(z))
        span = min(length, n)
        start = int(rng.integers(0, n - span + 1))
        xs.append(x[start:start + span])
        zs.append(z[start:start + span])
    span = min(len(x) for x in xs)
    return np.stack([x[:span] for x in xs]), np.stack([z[:span] for z in zs])


def evaluate_loss(params: NetParams, data: FeatureSet) -> float:
    """Mean BCE over all frames of all clips, each run from a zero state."""
    total, count = 0.0, 0
    for x, z in zip(data.features, data.targets):
        n = min(len(x), len(z))
        p, _, _ = forward_batch(params, x[None, :n])
        total += bce_loss(p[0], z[:n]) * n
        count += n
    return total / count


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    test_loss: float
    lr: float
    seconds: float


def train(train_data: FeatureSet, test_data: FeatureSet, cfg: TrainConfig = TrainConfig(),
          net_cfg: NetConfig = CANONICAL_NET, model_seed: int = 0,
          params: NetParams | None = None, progress=None):
    """Train from scratch; returns ``(best_params, [EpochLog, ...])``.

    The parameters with the lowest test loss are returned.  Epoch 0 in the log
    is the untrained model.
    """
    if len(train_data) == 0 or len(test_data) == 0:
        raise ConfigurationError("train and test splits must be non-empty")
    params = params if params is not None else init_params(net_cfg, model_seed)
    rng = np.random.default_rng(cfg.seed)
    moments = AdamMoments.zeros(params)
    sched = PlateauSchedule(cfg.lr, cfg.lr_halve_patience, cfg.early_stop_patience)
    history = [EpochLog(0, float("nan"), evaluate_loss(params, test_data), cfg.lr, 0.0)]
    best = params
    best_loss = history[0].test_loss
    t = 0
    for epoch in range(1, cfg.max_epochs + 1):
        start = time.perf_counter()
        lr = sched.lr
        losses = []
        for _ in range(cfg.steps_per_epoch):
            x, z = sample_batch(train_data, rng, cfg.batch_size, cfg.bptt_len)
            p, trace, _ = forward_batch(params, x)
            loss = bce_loss(p, z)
            if not np.isfinite(loss):
                raise NumericError(f"training diverged at step {t + 1}")
            grads = backward(params, trace, z)
            t += 1
            params, moments = adam_step(params, grads, moments, t, cfg, lr)
            losses.append(loss)
        test_loss = evaluate_loss(params, test_data)
        if not np.isfinite(test_loss):
            raise NumericError("non-finite test loss")
        entry = EpochLog(epoch, float(np.mean(losses)), test_loss, lr,
                         time.perf_counter() - start)
        history.append(entry)
        log.info("epoch %d train %.4f test %.4f lr %.2e", epoch, entry.train_loss,
                 test_loss, lr)
        if progress is not None:
            progress(entry)
        if test_loss < best_loss:
            best, best_loss = params, test_loss
        if sched.update(test_loss):
            break
    return best, history


def write_log_csv(history, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "train_loss", "test_loss", "lr", "seconds"])
        for e in history:
            w.writerow([e.epoch, f"{e.train_loss:.6f}", f"{e.test_loss:.6f}", f"{e.lr:.6g}",
                        f"{e.seconds:.3f}"])


def read_log_csv(path) -> list[EpochLog]:
    with open(path, newline="") as f:
        return [EpochLog(int(r["epoch"]), float(r["train_loss"]), float(r["test_loss"]),
                         float(r["lr"]), float(r["seconds"])) for r in csv.DictReader(f)]
