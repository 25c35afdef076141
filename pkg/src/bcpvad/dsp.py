"""Frame-based log-Mel front end.

20 ms Hamming-windowed frames with 50 % overlap, zero-padded to a 512-point
real FFT, warped onto 32 triangular Mel filters and log-compressed.  Each
frame also carries its spectral energy, which the streaming gate uses to
reject frames after the FFT.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .audio import SAMPLE_RATE, AudioClip

LOG_EPS = 1e-6


@dataclass(frozen=True)
class FrameConfig:
    frame_len: int = 320
    hop: int = 160
    fft_len: int = 512
    n_mels: int = 32
    sample_rate_hz: int = SAMPLE_RATE
    use_log: bool = True

    def __post_init__(self):
        if self.frame_len > self.fft_len:
            raise ValueError("frame_len must not exceed fft_len")
        if self.hop * 2 != self.frame_len:
            raise ValueError("hop must be half the frame length")

    @property
    def n_bins(self) -> int:
        return self.fft_len // 2 + 1

    @property
    def hop_ms(self) -> float:
        return 1000.0 * self.hop / self.sample_rate_hz


CANONICAL = FrameConfig()


@dataclass(frozen=True)
class MelFilterbank:
    weights: np.ndarray        # (n_mels, n_bins)
    band_edges_hz: np.ndarray  # (n_mels + 2,)

    @property
    def centers_hz(self) -> np.ndarray:
        return self.band_edges_hz[1:-1]


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    frame_index: int
    energy_db: float


def n_frames(n_samples: int, cfg: FrameConfig = CANONICAL) -> int:
    if n_samples < cfg.frame_len:
        return 0
    return (n_samples - cfg.frame_len) // cfg.hop + 1


def frame_stream(clip, cfg: FrameConfig = CANONICAL) -> np.ndarray:
    """Frames as rows of a (n_frames, frame_len) array; the partial tail is dropped."""
    x = clip.samples if isinstance(clip, AudioClip) else np.asarray(clip, dtype=np.float64)
    if isinstance(clip, AudioClip) and clip.sample_rate_hz != cfg.sample_rate_hz:
        raise ValueError(f"clip is {clip.sample_rate_hz} Hz, expected {cfg.sample_rate_hz} Hz")
    count = n_frames(len(x), cfg)
    if count == 0:
        return np.zeros((0, cfg.frame_len))
    idx = np.arange(cfg.frame_len)[None, :] + cfg.hop * np.arange(count)[:, None]
    return x[idx]


@lru_cache(maxsize=8)
def _hamming(n: int) -> np.ndarray:
    w = 0.54 - 0.46 * np.cos(2.0 * np.pi * np.arange(n) / (n - 1))
    w.setflags(write=False)
    return w


def hamming_window(frame, cfg: FrameConfig = CANONICAL) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.shape[-1] != cfg.frame_len:
        raise ValueError(f"frame length {frame.shape[-1]} != {cfg.frame_len}")
    return frame * _hamming(cfg.frame_len)


def rfft_mag(windowed, cfg: FrameConfig = CANONICAL) -> np.ndarray:
    """One-sided magnitude spectrum of the frame zero-padded to fft_len.

    Works on a single frame or on a stack of frames (last axis).
    """
    windowed = np.asarray(windowed, dtype=np.float64)
    if windowed.shape[-1] != cfg.frame_len:
        raise ValueError(f"frame length {windowed.shape[-1]} != {cfg.frame_len}")
    return np.abs(np.fft.rfft(windowed, n=cfg.fft_len, axis=-1))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def bin_frequencies(cfg: FrameConfig = CANONICAL) -> np.ndarray:
    return np.arange(cfg.n_bins) * cfg.sample_rate_hz / cfg.fft_len


def build_mel_filterbank(cfg: FrameConfig = CANONICAL) -> MelFilterbank:
    """HTK-style triangles with peak 1, edges uniform in Mel from 0 Hz to Nyquist."""
    edges_mel = np.linspace(0.0, hz_to_mel(cfg.sample_rate_hz / 2.0), cfg.n_mels + 2)
    edges = mel_to_hz(edges_mel)
    f = bin_frequencies(cfg)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (f[None, :] - lo) / (mid - lo)
    falling = (hi - f[None, :]) / (hi - mid)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    weights.setflags(write=False)
    edges.setflags(write=False)
    return MelFilterbank(weights=weights, band_edges_hz=edges)


def frame_energy_db(mag: np.ndarray, cfg: FrameConfig = CANONICAL) -> np.ndarray:
    """Frame energy from a one-sided magnitude spectrum via Parseval.

    The one-sided spectrum is unfolded to the full two-sided sum, so the
    result equals 10*log10(sum(x_windowed**2) + eps).
    """
    p = mag * mag
    two_sided = 2.0 * p.sum(axis=-1) - p[..., 0] - p[..., -1]
    return 10.0 * np.log10(two_sided / cfg.fft_len + LOG_EPS)


def _mel_values(mag, fb: MelFilterbank, cfg: FrameConfig):
    mel = mag @ fb.weights.T
    return np.log(mel + LOG_EPS) if cfg.use_log else mel


def extract_features(frame, fb: MelFilterbank, cfg: FrameConfig = CANONICAL,
                     frame_index: int = 0) -> FeatureVector:
    mag = rfft_mag(hamming_window(frame, cfg), cfg)
    return FeatureVector(values=_mel_values(mag, fb, cfg), frame_index=frame_index,
                         energy_db=float(frame_energy_db(mag, cfg)))


def extract_clip_features(clip, fb: MelFilterbank | None = None,
                          cfg: FrameConfig = CANONICAL):
    """Vectorised front end over a whole clip.

    Returns ``(values, energy_db)`` with shapes (n_frames, n_mels) and
    (n_frames,).  Used for training and batch evaluation; the streaming
    pipeline goes through :func:`extract_features` frame by frame.
    """
    fb = fb if fb is not None else build_mel_filterbank(cfg)
    frames = frame_stream(clip, cfg)
    mag = rfft_mag(hamming_window(frames, cfg), cfg)
    return _mel_values(mag, fb, cfg), frame_energy_db(mag, cfg)
