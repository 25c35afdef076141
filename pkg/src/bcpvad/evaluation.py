"""Detection metrics and the two SNR evaluation harnesses.

Equal environment: speech and noise stems of both channels are scaled by the
same (alpha, beta), chosen so the air-conduction mixture hits the grid SNR.
The bone channel then enjoys whatever SNR advantage its coupling provides.

Equal SNR: each channel gets its own (alpha, beta) so both mixtures sit at
the grid SNR.
"""

from __future__ import annotations

import csv
import enum
from dataclasses import asdict, dataclass

import numpy as np

from . import audio, corpus, dsp
from .audio import LevelMode
from .net import NetParams, forward_batch
from .quant import QNetParams, q_forward_sequence

_trapezoid = getattr(np, "trapezoid", None) or np.trapz

MISS_WEIGHT = 0.75
FA_WEIGHT = 0.25


class AucUndefinedError(ValueError):
    """ROC AUC needs both classes present."""


class HarnessMode(enum.Enum):
    EQUAL_ENVIRONMENT = "equal-env"
    EQUAL_SNR = "equal-snr"


@dataclass(frozen=True)
class MetricsReport:
    auc: float | None
    dcf: float
    acc: float
    miss_rate: float
    fa_rate: float
    n_frames: int


def dcf(miss_rate: float, fa_rate: float) -> float:
    return MISS_WEIGHT * miss_rate + FA_WEIGHT * fa_rate


def roc_curve(scores, labels):
    """False/true positive rates over every distinct score threshold (descending)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(labels.sum()), int((~labels).sum())
    if n_pos == 0 or n_neg == 0:
        raise AucUndefinedError("ROC needs at least one positive and one negative frame")
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], labels[order]
    # last index of each run of tied scores
    cut = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]
    tp = np.cumsum(y)[cut]
    fp = (cut + 1) - tp
    tpr = np.r_[0.0, tp / n_pos]
    fpr = np.r_[0.0, fp / n_neg]
    return fpr, tpr, s[cut]


def roc_auc(scores, labels) -> float:
    fpr, tpr, _ = roc_curve(scores, labels)
    return float(_trapezoid(tpr, fpr))


def compute_metrics(probabilities, labels, threshold: float = 0.5) -> MetricsReport:
    """Frame-level metrics; labels may be soft, they are binarised at ``threshold``."""
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64) > threshold
    if p.shape != y.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {y.shape}")
    pred = p > threshold
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    miss = float(np.sum(~pred & y) / n_pos) if n_pos else 0.0
    fa = float(np.sum(pred & ~y) / n_neg) if n_neg else 0.0
    try:
        auc = roc_auc(p, y)
    except AucUndefinedError:
        auc = None
    return MetricsReport(auc=auc, dcf=dcf(miss, fa), acc=float(np.mean(pred == y)),
                         miss_rate=miss, fa_rate=fa, n_frames=int(p.size))


# ---------------------------------------------------------------------------
# Model dispatch
# ---------------------------------------------------------------------------

def predict(model, features) -> np.ndarray:
    """Per-frame probabilities of a float or quantized model over one clip."""
    if isinstance(model, NetParams):
        p, _, _ = forward_batch(model, np.asarray(features)[None])
        return p[0]
    if isinstance(model, QNetParams):
        return q_forward_sequence(model, features)[0]
    raise TypeError(f"unsupported model type {type(model).__name__}")


# ---------------------------------------------------------------------------
# Harnesses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class HarnessRow:
    snr_db: float
    model: str
    auc: float | None
    dcf: float
    acc: float
    miss: float
    fa: float
    n_frames: int
    mean_snr_bc: float
    mean_snr_ac: float


def remix(s, n, alpha: float, beta: float, level_dbfs: float | None = None) -> np.ndarray:
    y = alpha * np.asarray(s) + beta * np.asarray(n)
    if level_dbfs is not None:
        y = audio.rescale_to_level(y, level_dbfs, LevelMode.RMS_DBFS)
    return y


def harness_coefficients(stems: dict, snr_db: float, mode: HarnessMode) -> dict:
    """(alpha, beta) per channel for one clip at one grid point."""
    beta_ac = audio.snr_gain(stems["s_ac"], stems["n_ac"], snr_db)
    if mode is HarnessMode.EQUAL_ENVIRONMENT:
        return {"ac": (1.0, beta_ac), "bc": (1.0, beta_ac)}
    beta_bc = audio.snr_gain(stems["s_bc"], stems["n_bc"], snr_db)
    return {"ac": (1.0, beta_ac), "bc": (1.0, beta_bc)}


def load_test_stems(manifest: dict, split: str = "test") -> list[dict]:
    stems = []
    for e in corpus.split_entries(manifest, split):
        c = corpus.load_clip(manifest, e, stems=("s_ref", "s_bc", "n_bc", "n_ac"))
        stems.append({"id": e["id"], "s_bc": c.s_bc.samples, "s_ac": c.s_ref.samples,
                      "n_bc": c.n_bc.samples, "n_ac": c.n_ac.samples,
                      "labels": c.labels, "level_dbfs": c.mix.level_dbfs})
    if not stems:
        raise corpus.ManifestError(f"split {split!r} has no clips")
    return stems


def run_harness(models: dict, stems: list[dict], snr_grid, mode: HarnessMode,
                level_dbfs: float | None = None) -> list[HarnessRow]:
    """Evaluate ``models`` ({"bc": model, "ac": model}) at each grid SNR.

    Each mixture is rescaled to the clip's level (or ``level_dbfs`` when given)
    before feature extraction.  Metrics pool frames across clips.
    """
    snr_grid = list(snr_grid)
    if not snr_grid:
        raise ValueError("SNR grid must not be empty")
    fb = dsp.build_mel_filterbank()
    rows = []
    for snr in snr_grid:
        probs = {ch: [] for ch in models}
        labels = {ch: [] for ch in models}
        realized = {"bc": [], "ac": []}
        for st in stems:
            coef = harness_coefficients(st, snr, mode)
            for ch in ("bc", "ac"):
                a, b = coef[ch]
                realized[ch].append(audio.snr_db(a * st[f"s_{ch}"], b * st[f"n_{ch}"]))
            for ch, model in models.items():
                a, b = coef[ch]
                y = remix(st[f"s_{ch}"], st[f"n_{ch}"], a, b,
                          level_dbfs if level_dbfs is not None else st["level_dbfs"])
                x, _ = dsp.extract_clip_features(y, fb)
                n = min(len(x), len(st["labels"]))
                probs[ch].append(predict(model, x[:n]))
                labels[ch].append(st["labels"][:n])
        for ch in models:
            m = compute_metrics(np.concatenate(probs[ch]), np.concatenate(labels[ch]))
            rows.append(HarnessRow(float(snr), f"{ch}-pvad", m.auc, m.dcf, m.acc,
                                   m.miss_rate, m.fa_rate, m.n_frames,
                                   float(np.mean(realized["bc"])),
                                   float(np.mean(realized["ac"]))))
    return rows


def equal_environment_harness(bc_model, ac_model, stems, snr_ac_grid):
    return run_harness({"bc": bc_model, "ac": ac_model}, stems, snr_ac_grid,
                       HarnessMode.EQUAL_ENVIRONMENT)


def equal_snr_harness(bc_model, ac_model, stems, snr_grid):
    return run_harness({"bc": bc_model, "ac": ac_model}, stems, snr_grid,
                       HarnessMode.EQUAL_SNR)


def write_harness_csv(rows, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["snr_db", "model", "auc", "dcf", "acc", "miss", "fa",
                    "mean_snr_bc", "mean_snr_ac"])
        for r in rows:
            w.writerow([r.snr_db, r.model, "" if r.auc is None else f"{r.auc:.6f}",
                        f"{r.dcf:.6f}", f"{r.acc:.6f}", f"{r.miss:.6f}", f"{r.fa:.6f}",
                        f"{r.mean_snr_bc:.3f}", f"{r.mean_snr_ac:.3f}"])


def rows_as_dicts(rows) -> list[dict]:
    return [asdict(r) for r in rows]
