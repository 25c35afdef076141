"""Streaming engine: sample ingestion, per-hop features, energy gating and
inference dispatch for float or quantized models."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass

import numpy as np

from . import audio, dsp, evaluation
from .audio import LevelMode
from .net import GruState, NetParams, forward_frame
from .power import SocProfile, load_profile, worst_case_latency_ms
from .quant import QNetParams, QState, binary_accuracy, q_forward_frame

__all__ = ["GateConfig", "GatePolicy", "Prediction", "StreamState", "VadStream",
           "gate_decision", "skip_mask", "gated_predict", "gate_sweep", "worst_case_latency_ms",
           "write_predictions_csv", "write_sweep_csv"]

SWEEP_SNR_DB = 10.0
SWEEP_PEAK_DBFS = -15.0


class ConfigurationError(ValueError):
    pass


class GatePolicy(enum.Enum):
    HOLD = "hold"      # skipped frames leave the recurrent state untouched
    RESET = "reset"    # skipped frames zero the recurrent state


@dataclass(frozen=True)
class GateConfig:
    """Frame qualification.

    ``skip_output=None`` repeats the last emitted probability instead of a
    fixed value.  ``hangover_frames`` delays skipping until that many
    sub-threshold frames have already been processed in a row.
    """
    enabled: bool = False
    threshold_db: float = -60.0
    skip_output: float | None = 0.0
    policy: GatePolicy = GatePolicy.HOLD
    hangover_frames: int = 0

    def __post_init__(self):
        if self.enabled and math.isnan(self.threshold_db):
            raise ConfigurationError("gate threshold must not be NaN")
        if self.skip_output is not None and not 0.0 <= self.skip_output <= 1.0:
            raise ConfigurationError("skip_output must lie in [0, 1]")
        if self.hangover_frames < 0:
            raise ConfigurationError("hangover_frames must be non-negative")
        if not isinstance(self.policy, GatePolicy):
            object.__setattr__(self, "policy", GatePolicy(self.policy))


UNGATED = GateConfig()


def gate_decision(energy_db: float, cfg: GateConfig) -> bool:
    """True when the frame is below threshold (skip, before any hangover)."""
    return bool(cfg.enabled and energy_db < cfg.threshold_db)


def skip_mask(energy_db, cfg: GateConfig) -> np.ndarray:
    """Per-frame skip decisions including the hangover."""
    below = np.array([gate_decision(e, cfg) for e in np.asarray(energy_db)], dtype=bool)
    if cfg.hangover_frames == 0 or not below.any():
        return below
    # length of the sub-threshold run ending at each frame
    run = np.zeros(len(below), dtype=np.int64)
    count = 0
    for i, b in enumerate(below):
        count = count + 1 if b else 0
        run[i] = count
    return run > cfg.hangover_frames


@dataclass(frozen=True)
class Prediction:
    frame_index: int
    probability: float
    label: int
    skipped: bool
    latency_ms: float
    energy_db: float


def _zero_state(model):
    if isinstance(model, NetParams):
        return GruState.zeros(model.config)
    if isinstance(model, QNetParams):
        return QState.zeros(model)
    raise TypeError(f"unsupported model type {type(model).__name__}")


def _step(model, state, x):
    if isinstance(model, NetParams):
        p, _, state = forward_frame(model, state, x)
        return p, state
    return q_forward_frame(model, state, x)


@dataclass
class StreamState:
    buffer: np.ndarray
    frame_index: int
    gru: object
    frames_total: int = 0
    frames_skipped: int = 0
    last_probability: float = 0.0
    below_run: int = 0

    @property
    def skip_fraction(self) -> float:
        return self.frames_skipped / self.frames_total if self.frames_total else 0.0


class VadStream:
    """One audio stream.  Not thread-safe; use one instance per stream."""

    def __init__(self, model, gate: GateConfig = UNGATED, timing: SocProfile | None = None,
                 cfg: dsp.FrameConfig = dsp.CANONICAL, fb: dsp.MelFilterbank | None = None):
        self.model = model
        self.gate = gate
        self.cfg = cfg
        self.fb = fb if fb is not None else dsp.build_mel_filterbank(cfg)
        if timing is None:
            timing, _ = load_profile("apollo4")
        self.latency_ms = worst_case_latency_ms(timing)
        self.state = self._fresh()

    def _fresh(self) -> StreamState:
        return StreamState(np.zeros(0), 0, _zero_state(self.model))

    def reset(self) -> None:
        self.state = self._fresh()

    @property
    def pending(self) -> int:
        """Samples received but not yet part of an emitted hop."""
        st, cfg = self.state, self.cfg
        if st.frame_index == 0:
            return len(st.buffer)
        return len(st.buffer) - (cfg.frame_len - cfg.hop)

    def push_samples(self, samples) -> list[Prediction]:
        st, cfg = self.state, self.cfg
        x = np.asarray(samples, dtype=np.float64).reshape(-1)
        buf = np.concatenate([st.buffer, x])
        out = []
        start = 0
        while len(buf) - start >= cfg.frame_len:
            out.append(self._process(buf[start:start + cfg.frame_len]))
            start += cfg.hop
        st.buffer = buf[start:].copy()
        return out

    def _process(self, frame) -> Prediction:
        st = self.state
        fv = dsp.extract_features(frame, self.fb, self.cfg, st.frame_index)
        st.below_run = st.below_run + 1 if gate_decision(fv.energy_db, self.gate) else 0
        skipped = st.below_run > self.gate.hangover_frames
        if skipped:
            st.frames_skipped += 1
            if self.gate.policy is GatePolicy.RESET:
                st.gru = _zero_state(self.model)
            p = st.last_probability if self.gate.skip_output is None else self.gate.skip_output
        else:
            p, st.gru = _step(self.model, st.gru, fv.values)
        st.frames_total += 1
        st.last_probability = p
        pred = Prediction(st.frame_index, float(p), int(p > 0.5), skipped,
                          self.latency_ms, fv.energy_db)
        st.frame_index += 1
        return pred


def run_stream(model, samples, gate: GateConfig = UNGATED, chunk: int | None = None,
               **kwargs) -> tuple[list[Prediction], StreamState]:
    vs = VadStream(model, gate, **kwargs)
    samples = np.asarray(samples, dtype=np.float64)
    chunk = chunk or max(len(samples), 1)
    preds = []
    for i in range(0, len(samples), chunk):
        preds.extend(vs.push_samples(samples[i:i + chunk]))
    return preds, vs.state


def gated_predict(model, features, energy_db, gate: GateConfig):
    """Batch equivalent of the streaming gate over precomputed features.

    Processed runs go through the model in one pass; under the hold policy the
    state carries across skipped frames, under reset each run starts from zero.
    Returns ``(probabilities, skipped_mask)``.
    """
    features = np.asarray(features)
    energy_db = np.asarray(energy_db)
    skip = skip_mask(energy_db, gate)
    probs = np.empty(len(features))
    keep = ~skip
    if gate.policy is GatePolicy.HOLD or not skip.any():
        if keep.any():
            probs[keep] = evaluation.predict(model, features[keep])
    else:
        edges = np.flatnonzero(np.diff(np.r_[0, keep.astype(int), 0]))
        for a, b in zip(edges[::2], edges[1::2]):
            probs[a:b] = evaluation.predict(model, features[a:b])
    if gate.skip_output is not None:
        probs[skip] = gate.skip_output
    else:
        last = 0.0
        for i in range(len(probs)):
            if skip[i]:
                probs[i] = last
            last = probs[i]
    return probs, skip


def sweep_mixture(stems: dict, snr_db: float = SWEEP_SNR_DB,
                  peak_dbfs: float = SWEEP_PEAK_DBFS) -> np.ndarray:
    beta = audio.snr_gain(stems["s_bc"], stems["n_bc"], snr_db)
    y = stems["s_bc"] + beta * stems["n_bc"]
    return audio.rescale_to_level(y, peak_dbfs, LevelMode.PEAK_DBFS)


@dataclass(frozen=True)
class SweepRow:
    threshold_db: float
    skip_fraction: float
    accuracy: float


def gate_sweep(model, stems: list[dict], thresholds, skip_output: float | None = 0.0,
               policy: GatePolicy = GatePolicy.HOLD, hangover_frames: int = 0,
               snr_db: float = SWEEP_SNR_DB) -> list[SweepRow]:
    """Skip fraction and frame accuracy of the gated BC pipeline per threshold."""
    thresholds = list(thresholds)
    if not thresholds:
        raise ConfigurationError("threshold list must not be empty")
    fb = dsp.build_mel_filterbank()
    clips = []
    for st in stems:
        x, e = dsp.extract_clip_features(sweep_mixture(st, snr_db), fb)
        n = min(len(x), len(st["labels"]))
        clips.append((x[:n], e[:n], st["labels"][:n]))
    rows = []
    for thr in thresholds:
        gate = GateConfig(True, float(thr), skip_output, policy, hangover_frames)
        ps, sk, zs = [], [], []
        for x, e, z in clips:
            p, s = gated_predict(model, x, e, gate)
            ps.append(p)
            sk.append(s)
            zs.append(z)
        p, s, z = map(np.concatenate, (ps, sk, zs))
        rows.append(SweepRow(float(thr), float(s.mean()), binary_accuracy(p, z)))
    return rows


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["threshold_db", "skip_fraction", "accuracy"])
        for r in rows:
            w.writerow([r.threshold_db, f"{r.skip_fraction:.6f}", f"{r.accuracy:.6f}"])


def write_predictions_csv(preds, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["frame_index", "probability", "label", "skipped", "energy_db"])
        for p in preds:
            w.writerow([p.frame_index, f"{p.probability:.6f}", p.label, int(p.skipped),
                        f"{p.energy_db:.3f}"])
