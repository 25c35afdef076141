"""Audio clips, WAV I/O, resampling and level/SNR scaling."""

from __future__ import annotations

import enum
import struct
import wave
from dataclasses import dataclass, replace
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import signal

SAMPLE_RATE = 16000
SUPPORTED_RATES = (8000, 16000, 22050, 44100, 48000)


class AudioFormatError(ValueError):
    """Malformed or unreadable WAV data."""


class UnsupportedFormatError(AudioFormatError):
    """WAV encoding other than PCM16 / float32."""


class UnsupportedRateError(ValueError):
    pass


class UndefinedLevelError(ValueError):
    """Level of an all-zero clip is -inf."""


class DegenerateInputError(ValueError):
    pass


class Channel(enum.Enum):
    BC = "bc"
    AC = "ac"
    AC_REF = "ac_ref"


class Role(enum.Enum):
    TARGET_SPEECH = "target_speech"
    EXTERNAL_SPEECH = "external_speech"
    EXTERNAL_NOISE = "external_noise"
    MIXTURE = "mixture"


class LevelMode(enum.Enum):
    PEAK_DBFS = "peak"
    RMS_DBFS = "rms"


@dataclass(frozen=True)
class AudioClip:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE
    channel: Channel = Channel.AC
    role: Role = Role.MIXTURE

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError("AudioClip holds mono samples only")
        x.setflags(write=False)
        object.__setattr__(self, "samples", x)
        if self.sample_rate_hz <= 0:
            raise ValueError("sample rate must be positive")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz

    def with_samples(self, samples, **changes) -> "AudioClip":
        return replace(self, samples=samples, **changes)


def _as_array(x) -> np.ndarray:
    return x.samples if isinstance(x, AudioClip) else np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------

_WAVE_FORMAT_PCM = 1
_WAVE_FORMAT_IEEE_FLOAT = 3
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE


def _parse_chunks(data: bytes):
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise AudioFormatError("not a RIFF/WAVE file")
    pos = 12
    fmt = None
    payload = None
    while pos + 8 <= len(data):
        cid = data[pos:pos + 4]
        (size,) = struct.unpack("<I", data[pos + 4:pos + 8])
        body = data[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            fmt = body
        elif cid == b"data":
            payload = body
        pos += 8 + size + (size & 1)
    if fmt is None or len(fmt) < 16:
        raise AudioFormatError("missing or short fmt chunk")
    if payload is None:
        raise AudioFormatError("missing data chunk")
    return fmt, payload


def read_wav(path) -> AudioClip:
    """Read a PCM16 or float32 WAV file; returns the first channel in [-1, 1].

    The stdlib ``wave`` module rejects IEEE-float files, so the RIFF chunks
    are walked by hand.
    """
    data = Path(path).read_bytes()
    fmt, payload = _parse_chunks(data)
    tag, n_channels, rate, _, block_align, bits = struct.unpack("<HHIIHH", fmt[:16])
    if tag == _WAVE_FORMAT_EXTENSIBLE and len(fmt) >= 26:
        (tag,) = struct.unpack("<H", fmt[24:26])
    if n_channels < 1 or rate <= 0 or block_align == 0:
        raise AudioFormatError("invalid fmt chunk")
    if tag == _WAVE_FORMAT_PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif tag == _WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise UnsupportedFormatError(f"unsupported WAV encoding (format {tag}, {bits} bit)")
    n_frames = len(payload) // (dtype.itemsize * n_channels)
    frames = np.frombuffer(payload[:n_frames * n_channels * dtype.itemsize], dtype=dtype)
    first = frames.reshape(n_frames, n_channels)[:, 0].astype(np.float64) * scale
    return AudioClip(first, sample_rate_hz=int(rate))


def write_wav(clip: AudioClip, path) -> None:
    """Write 16-bit PCM mono; samples outside [-1, 1] are clamped."""
    x = np.clip(clip.samples, -1.0, 1.0)
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(int(clip.sample_rate_hz))
        w.writeframes(pcm.tobytes())


# ---------------------------------------------------------------------------
# Resampling
# ---------------------------------------------------------------------------

KAISER_BETA = 8.0


def resample_to_16k(clip: AudioClip) -> AudioClip:
    """Polyphase resampling with a Kaiser-windowed sinc (scipy ``resample_poly``)."""
    rate = clip.sample_rate_hz
    if rate == SAMPLE_RATE:
        return clip
    if rate not in SUPPORTED_RATES:
        raise UnsupportedRateError(f"cannot resample from {rate} Hz")
    ratio = Fraction(SAMPLE_RATE, rate)
    y = signal.resample_poly(clip.samples, ratio.numerator, ratio.denominator,
                             window=("kaiser", KAISER_BETA))
    return clip.with_samples(y, sample_rate_hz=SAMPLE_RATE)


# ---------------------------------------------------------------------------
# Levels and SNR
# ---------------------------------------------------------------------------

def measure_level(clip, mode: LevelMode = LevelMode.RMS_DBFS) -> float:
    x = _as_array(clip)
    if x.size == 0 or not np.any(x):
        raise UndefinedLevelError("level of an empty or all-zero clip is undefined")
    if mode is LevelMode.PEAK_DBFS:
        return float(20.0 * np.log10(np.max(np.abs(x))))
    return float(20.0 * np.log10(np.sqrt(np.mean(x * x))))


def rescale_to_level(clip, target_dbfs: float, mode: LevelMode = LevelMode.RMS_DBFS):
    gain = 10.0 ** ((target_dbfs - measure_level(clip, mode)) / 20.0)
    if isinstance(clip, AudioClip):
        return clip.with_samples(clip.samples * gain)
    return np.asarray(clip, dtype=np.float64) * gain


def energy(x) -> float:
    x = _as_array(x)
    return float(np.dot(x, x))


def snr_db(signal_, noise) -> float:
    """10*log10(||s||^2 / ||n||^2)."""
    es, en = energy(signal_), energy(noise)
    if es <= 0 or en <= 0:
        raise DegenerateInputError("SNR needs non-zero signal and noise")
    return float(10.0 * np.log10(es / en))


def snr_gain(signal_, noise, target_snr_db: float) -> float:
    """Noise gain so that signal + gain*noise has the requested SNR."""
    s, n = _as_array(signal_), _as_array(noise)
    if s.shape != n.shape:
        raise ValueError(f"length mismatch: {s.shape} vs {n.shape}")
    es, en = energy(s), energy(n)
    if es <= 0 or en <= 0:
        raise DegenerateInputError("zero-energy signal or noise")
    return float(np.sqrt(es / (en * 10.0 ** (target_snr_db / 10.0))))
