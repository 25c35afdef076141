"""Synthetic dual-channel (bone / air conduction) corpus.

The target speaker is modelled by a harmonic speech surrogate; the bone
conduction channel sees it through a 4th-order low-pass.  External speech
and noise reach the bone channel attenuated and low-passed.  Mixtures follow

    eta = e + noise,    y = s + gamma * eta

with gamma set on the bone channel to hit a drawn SNR, and voice-activity
labels come from thresholded STFT frame norms of the clean reference.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from scipy import signal

from . import audio
from .audio import AudioClip, Channel, LevelMode, Role, SAMPLE_RATE
from .dsp import CANONICAL, FrameConfig, frame_stream, hamming_window, rfft_mag

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
LABEL_ALPHA = 0.3
SMOOTH_FRAMES = 20  # 0.2 s at a 10 ms hop
STEM_LEVEL_DBFS = -28.0

# Calibrated with calibrate_bc_attenuation() over 100 clips (seed 0) so the
# mean BC-over-AC SNR advantage is 15 dB.
DEFAULT_BC_ATTENUATION_DB = 14.43


class InsufficientDataError(ValueError):
    pass


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    seed: int = 0
    n_speakers: int = 20
    n_test_speakers: int = 4
    clip_len_s: float = 30.0
    speech_f0_range_hz: tuple = (85.0, 255.0)
    bc_lowpass_cutoff_hz: float = 2000.0
    bc_external_attenuation_db: float = DEFAULT_BC_ATTENUATION_DB
    train_hours: float = 0.5
    test_hours: float = 0.1

    def __post_init__(self):
        if not 0 < self.n_test_speakers < self.n_speakers:
            raise ValueError("n_test_speakers must leave at least one training speaker")
        if self.clip_len_s < 1.0:
            raise ValueError("clip_len_s must be at least 1 s")
        if self.train_hours < 0 or self.test_hours < 0:
            raise ValueError("hours must be non-negative")

    def n_clips(self, split: str) -> int:
        hours = self.train_hours if split == "train" else self.test_hours
        return int(round(hours * 3600.0 / self.clip_len_s))

    def speakers(self, split: str) -> list[int]:
        n_train = self.n_speakers - self.n_test_speakers
        ids = range(n_train) if split == "train" else range(n_train, self.n_speakers)
        return list(ids)

    def external_speakers(self, split: str) -> list[int]:
        # disjoint id range from the target speakers, split 8 / 2
        base = 1000
        n_train = 8
        return list(range(base, base + n_train)) if split == "train" \
            else list(range(base + n_train, base + n_train + 2))


@dataclass(frozen=True)
class MixSpec:
    target_snr_db: float
    level_dbfs: float
    gamma: float = 1.0
    alpha: float = 1.0
    beta: float = 1.0

    @classmethod
    def draw(cls, rng: np.random.Generator) -> "MixSpec":
        snr = float(np.clip(rng.normal(15.0, 5.0), 0.0, 30.0))
        level = float(np.clip(rng.normal(-28.0, 10.0), -50.0, -10.0))
        return cls(target_snr_db=snr, level_dbfs=level)


@dataclass(frozen=True)
class TargetSpeech:
    s_bc: AudioClip
    s_ac: AudioClip
    s_ref: AudioClip
    active: np.ndarray  # per-sample burst mask

    def __iter__(self):
        return iter((self.s_bc, self.s_ac, self.s_ref))


@dataclass
class LabeledClip:
    y_bc: AudioClip
    y_ac: AudioClip
    s_ref: AudioClip
    labels: np.ndarray | None = None
    raw_labels: np.ndarray | None = None
    # stems kept for the SNR harnesses
    s_bc: AudioClip | None = None
    s_ac: AudioClip | None = None
    n_bc: AudioClip | None = None
    n_ac: AudioClip | None = None
    mix: MixSpec | None = None


# ---------------------------------------------------------------------------
# Signal generators
# ---------------------------------------------------------------------------

def _lowpass(x: np.ndarray, cutoff_hz: float) -> np.ndarray:
    sos = signal.butter(4, cutoff_hz, btype="low", fs=SAMPLE_RATE, output="sos")
    return signal.sosfilt(sos, x)


def _speaker_traits(spec: SynthSpec, speaker_id: int) -> dict:
    rng = np.random.default_rng([spec.seed, speaker_id, 7])
    lo, hi = spec.speech_f0_range_hz
    return {
        "f0": rng.uniform(lo, hi),
        "f1": rng.uniform(400.0, 800.0),
        "f2": rng.uniform(1000.0, 2400.0),
        "tilt": rng.uniform(0.85, 0.95),
    }


def _burst_mask(n: int, rng: np.random.Generator) -> list[tuple[int, int]]:
    bursts = []
    t = int(rng.uniform(0.0, 1.0) * SAMPLE_RATE)
    while t < n:
        length = int(rng.uniform(0.3, 2.0) * SAMPLE_RATE)
        bursts.append((t, min(n, t + length)))
        t += length + int(rng.uniform(0.2, 1.0) * SAMPLE_RATE)
    return [(a, b) for a, b in bursts if b - a > SAMPLE_RATE // 20]


def _pulse_train(phase: np.ndarray, n_harmonics: int) -> np.ndarray:
    """Sum of cos(k*phase) for k = 1..K in closed form (Dirichlet kernel)."""
    half = np.sin(phase / 2.0)
    safe = np.abs(half) > 1e-9
    num = np.sin((n_harmonics + 0.5) * phase)
    out = np.full_like(phase, float(n_harmonics))
    out[safe] = num[safe] / (2.0 * half[safe]) - 0.5
    return out


def _resonator(freq: float, bandwidth: float) -> np.ndarray:
    r = np.exp(-np.pi * bandwidth / SAMPLE_RATE)
    theta = 2.0 * np.pi * freq / SAMPLE_RATE
    b = np.array([1.0 - r, 0.0, 0.0])
    a = np.array([1.0, -2.0 * r * np.cos(theta), r * r])
    return np.concatenate([b, a])[None, :]


def _voiced_burst(n: int, traits: dict, rng: np.random.Generator) -> np.ndarray:
    """One utterance: jittered harmonic source shaped by two formants."""
    t = np.arange(n) / SAMPLE_RATE
    f0 = traits["f0"] * (1.0 + 0.06 * np.sin(2 * np.pi * rng.uniform(0.5, 2.0) * t
                                             + rng.uniform(0, 2 * np.pi)))
    f0 *= np.exp(np.cumsum(rng.normal(0.0, 4e-4, n)))  # pitch jitter (random walk)
    phase = 2.0 * np.pi * np.cumsum(f0) / SAMPLE_RATE
    source = _pulse_train(phase, int(7800.0 / f0.max()))
    source = signal.lfilter([1.0], [1.0, -traits["tilt"]], source)

    # formants held per syllable, filter state carried across syllables
    out = np.empty(n)
    seg = int(0.2 * SAMPLE_RATE)
    zi1 = zi2 = np.zeros((1, 2))
    for a in range(0, n, seg):
        b = min(n, a + seg)
        f1 = traits["f1"] * rng.uniform(0.8, 1.25)
        f2 = traits["f2"] * rng.uniform(0.8, 1.25)
        y1, zi1 = signal.sosfilt(_resonator(f1, 90.0), source[a:b], zi=zi1)
        y2, zi2 = signal.sosfilt(_resonator(f2, 120.0), source[a:b], zi=zi2)
        out[a:b] = y1 + 0.6 * y2 + 0.02 * source[a:b]

    syll_rate = rng.uniform(3.0, 6.0)
    env = 0.6 + 0.4 * np.sin(np.pi * syll_rate * t + rng.uniform(0, np.pi)) ** 2
    ramp = min(n // 2, int(0.02 * SAMPLE_RATE))
    edge = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
    env[:ramp] *= edge
    env[n - ramp:] *= edge[::-1]
    gain = 10.0 ** (rng.uniform(-6.0, 0.0) / 20.0)
    return out * env * gain


def _speech_surrogate(spec: SynthSpec, speaker_id: int, n: int,
                      rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    traits = _speaker_traits(spec, speaker_id)
    x = np.zeros(n)
    active = np.zeros(n, dtype=bool)
    for a, b in _burst_mask(n, rng):
        x[a:b] = _voiced_burst(b - a, traits, rng)
        active[a:b] = True
    if not active.any():
        a, b = 0, min(n, SAMPLE_RATE // 2)
        x[a:b] = _voiced_burst(b - a, traits, rng)
        active[a:b] = True
    return audio.rescale_to_level(x, STEM_LEVEL_DBFS, LevelMode.RMS_DBFS), active


def synth_target_speech(spec: SynthSpec, speaker_id: int, duration_s: float,
                        rng_seed) -> TargetSpeech:
    if duration_s < 1.0:
        raise ValueError("duration must be at least 1 s")
    n = int(round(duration_s * SAMPLE_RATE))
    rng = np.random.default_rng([spec.seed, speaker_id, *np.atleast_1d(rng_seed).tolist()])
    s, active = _speech_surrogate(spec, speaker_id, n, rng)
    s_bc = _lowpass(s, spec.bc_lowpass_cutoff_hz)
    return TargetSpeech(
        s_bc=AudioClip(s_bc, channel=Channel.BC, role=Role.TARGET_SPEECH),
        s_ac=AudioClip(s, channel=Channel.AC, role=Role.TARGET_SPEECH),
        s_ref=AudioClip(s, channel=Channel.AC_REF, role=Role.TARGET_SPEECH),
        active=active,
    )


def pink_noise(n: int, rng: np.random.Generator) -> np.ndarray:
    """Gaussian noise with a 1/f power spectral density."""
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
    shape = np.ones_like(f)
    shape[1:] = 1.0 / np.sqrt(f[1:])
    shape[0] = 0.0
    return np.fft.irfft(spec * shape, n)


def _bc_from_ac(x_ac: np.ndarray, spec: SynthSpec) -> np.ndarray:
    gain = 10.0 ** (-spec.bc_external_attenuation_db / 20.0)
    return _lowpass(x_ac * gain, spec.bc_lowpass_cutoff_hz)


def synth_external(spec: SynthSpec, kind: Role, duration_s: float, rng_seed,
                   speaker_pool=None) -> tuple[AudioClip, AudioClip]:
    """External speech or noise as an ``(bc, ac)`` pair."""
    if duration_s < 1.0:
        raise ValueError("duration must be at least 1 s")
    n = int(round(duration_s * SAMPLE_RATE))
    seed = [spec.seed, 99, *np.atleast_1d(rng_seed).tolist()]
    rng = np.random.default_rng(seed)
    pool = list(speaker_pool) if speaker_pool is not None else spec.external_speakers("train")
    if kind is Role.EXTERNAL_SPEECH:
        x, _ = _speech_surrogate(spec, int(rng.choice(pool)), n, rng)
    elif kind is Role.EXTERNAL_NOISE:
        w = rng.dirichlet([1.0, 1.0, 1.0])
        white = rng.standard_normal(n)
        pink = pink_noise(n, rng)
        babble = sum(_speech_surrogate(spec, int(sp), n, rng)[0]
                     for sp in rng.choice(pool, size=4))
        parts = [audio.rescale_to_level(p, STEM_LEVEL_DBFS) for p in (white, pink, babble)]
        x = w[0] * parts[0] + w[1] * parts[1] + w[2] * parts[2]
        x = audio.rescale_to_level(x, STEM_LEVEL_DBFS)
    else:
        raise ValueError(f"not an external source kind: {kind}")
    return (AudioClip(_bc_from_ac(x, spec), channel=Channel.BC, role=kind),
            AudioClip(x, channel=Channel.AC, role=kind))


# ---------------------------------------------------------------------------
# Mixing and labels
# ---------------------------------------------------------------------------

def make_mixture(target: TargetSpeech, external: tuple, noise: tuple,
                 mix: MixSpec) -> LabeledClip:
    """Mix one clip; the noise gain is solved on the BC channel and reused for AC."""
    s_bc, s_ac, s_ref = target
    e_bc, e_ac = external
    nt_bc, nt_ac = noise
    n_bc = e_bc.samples + nt_bc.samples
    n_ac = e_ac.samples + nt_ac.samples
    gamma = audio.snr_gain(s_bc, n_bc, mix.target_snr_db)
    y_bc = s_bc.samples + gamma * n_bc
    y_ac = s_ac.samples + gamma * n_ac
    y_bc = audio.rescale_to_level(y_bc, mix.level_dbfs, LevelMode.RMS_DBFS)
    y_ac = audio.rescale_to_level(y_ac, mix.level_dbfs, LevelMode.RMS_DBFS)
    resolved = MixSpec(mix.target_snr_db, mix.level_dbfs, gamma, mix.alpha, mix.beta)
    return LabeledClip(
        y_bc=AudioClip(y_bc, channel=Channel.BC, role=Role.MIXTURE),
        y_ac=AudioClip(y_ac, channel=Channel.AC, role=Role.MIXTURE),
        s_ref=s_ref, s_bc=s_bc, s_ac=s_ac,
        n_bc=AudioClip(n_bc, channel=Channel.BC, role=Role.EXTERNAL_NOISE),
        n_ac=AudioClip(n_ac, channel=Channel.AC, role=Role.EXTERNAL_NOISE),
        mix=resolved,
    )


def label_threshold(norms, alpha: float = LABEL_ALPHA) -> float:
    norms = np.asarray(norms, dtype=np.float64)
    return float(norms.min() + alpha * norms.mean())


def labels_from_norms(norms, alpha: float = LABEL_ALPHA) -> np.ndarray:
    norms = np.asarray(norms, dtype=np.float64)
    if norms.size < 2:
        raise InsufficientDataError("need at least two frames to set a threshold")
    return (norms > label_threshold(norms, alpha)).astype(np.int8)


def stft_frame_norms(clip, cfg: FrameConfig = CANONICAL) -> np.ndarray:
    mag = rfft_mag(hamming_window(frame_stream(clip, cfg), cfg), cfg)
    return np.sqrt(np.sum(mag * mag, axis=-1))


def generate_labels(s_ref, cfg: FrameConfig = CANONICAL,
                    alpha: float = LABEL_ALPHA) -> np.ndarray:
    """Raw 0/1 activity per frame from the clean reference channel."""
    return labels_from_norms(stft_frame_norms(s_ref, cfg), alpha)


def smooth_labels(raw, cfg: FrameConfig = CANONICAL,
                  n_frames: int = SMOOTH_FRAMES) -> np.ndarray:
    """Causal moving average over the last ``n_frames`` frames, truncated at the start."""
    raw = np.asarray(raw, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(raw)])
    idx = np.arange(raw.size)
    lo = np.maximum(0, idx - n_frames + 1)
    return (c[idx + 1] - c[lo]) / (idx + 1 - lo)


def active_mask_to_frames(active: np.ndarray, cfg: FrameConfig = CANONICAL) -> np.ndarray:
    """Frame-level ground truth: a frame counts as active if most samples are."""
    return frame_stream(active.astype(np.float64), cfg).mean(axis=1) > 0.5


def snr_advantage_db(target: TargetSpeech, noise_bc, noise_ac) -> float:
    """SNR_BC - SNR_AC for the same speech and noise realisation."""
    return audio.snr_db(target.s_bc, noise_bc) - audio.snr_db(target.s_ac, noise_ac)


# ---------------------------------------------------------------------------
# Dataset generation
# ---------------------------------------------------------------------------

def _clip_seed(spec: SynthSpec, split: str, index: int) -> int:
    ss = np.random.SeedSequence([spec.seed, 0 if split == "train" else 1, index])
    return int(ss.generate_state(1)[0])


def synth_clip(spec: SynthSpec, split: str, index: int) -> tuple[LabeledClip, dict]:
    """Generate one labelled clip; pure function of (spec, split, index)."""
    seed = _clip_seed(spec, split, index)
    rng = np.random.default_rng(seed)
    speaker = int(rng.choice(spec.speakers(split)))
    pool = spec.external_speakers(split)
    target = synth_target_speech(spec, speaker, spec.clip_len_s, [seed, 1])
    ext = synth_external(spec, Role.EXTERNAL_SPEECH, spec.clip_len_s, [seed, 2], pool)
    noise = synth_external(spec, Role.EXTERNAL_NOISE, spec.clip_len_s, [seed, 3], pool)
    # relative level of the diffuse noise against the external talker
    g = 10.0 ** (rng.uniform(-10.0, 5.0) / 20.0)
    noise = tuple(c.with_samples(c.samples * g) for c in noise)
    clip = make_mixture(target, ext, noise, MixSpec.draw(rng))
    clip.raw_labels = generate_labels(clip.s_ref)
    clip.labels = smooth_labels(clip.raw_labels)
    meta = {"seed": seed, "speaker_id": speaker}
    return clip, meta


_STEMS = ("y_bc", "y_ac", "s_ref", "s_bc", "n_bc", "n_ac")


def write_labels_csv(path, raw, smoothed) -> None:
    with open(path, "w") as f:
        f.write("frame_index,raw,smoothed\n")
        for i, (r, s) in enumerate(zip(raw, smoothed)):
            f.write(f"{i},{int(r)},{s:.6f}\n")


def read_labels_csv(path) -> tuple[np.ndarray, np.ndarray]:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data[:, 1].astype(np.int8), data[:, 2]


def active_frame_report(fractions) -> dict:
    f = np.asarray(fractions, dtype=np.float64)
    n = max(1, f.size)
    return {
        "low_lt_25": float(np.sum(f < 0.25) / n),
        "medium_25_60": float(np.sum((f >= 0.25) & (f <= 0.60)) / n),
        "high_gt_60": float(np.sum(f > 0.60) / n),
        "mean_active_fraction": float(f.mean()) if f.size else 0.0,
    }


def build_dataset(spec: SynthSpec, out_dir) -> dict:
    """Write every clip's stems, labels and a JSON manifest under ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for split in ("train", "test"):
        (out / split).mkdir(exist_ok=True)
        for i in range(spec.n_clips(split)):
            clip, meta = synth_clip(spec, split, i)
            cid = f"{split}_{i:05d}"
            paths = {}
            for stem in _STEMS:
                rel = f"{split}/{cid}_{stem}.wav"
                audio.write_wav(getattr(clip, stem), out / rel)
                paths[stem] = rel
            lab = f"{split}/{cid}_labels.csv"
            write_labels_csv(out / lab, clip.raw_labels, clip.labels)
            entries.append({
                "id": cid, "split": split, "index": i, **meta,
                "mix": asdict(clip.mix), "paths": paths, "labels": lab,
                "active_fraction": float(np.mean(clip.labels > 0.5)),
            })
            log.info("wrote %s", cid)
    manifest = {
        "format_version": MANIFEST_VERSION,
        "spec": asdict(spec),
        "clips": entries,
        "active_frames": {
            split: active_frame_report([e["active_fraction"] for e in entries
                                        if e["split"] == split])
            for split in ("train", "test")
        },
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))
    return manifest


def manifest_digest(manifest: dict) -> str:
    return hashlib.sha256(json.dumps(manifest, sort_keys=True).encode()).hexdigest()


def load_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: {exc}") from exc
    if manifest.get("format_version") != MANIFEST_VERSION:
        raise ManifestError(f"{path}: unsupported manifest version "
                            f"{manifest.get('format_version')}")
    manifest["_root"] = str(path.parent)
    return manifest


def spec_from_manifest(manifest: dict) -> SynthSpec:
    d = dict(manifest["spec"])
    d["speech_f0_range_hz"] = tuple(d["speech_f0_range_hz"])
    return SynthSpec(**d)


def split_entries(manifest: dict, split: str) -> list[dict]:
    return [e for e in manifest["clips"] if e["split"] == split]


def load_clip(manifest: dict, entry: dict, stems=_STEMS) -> LabeledClip:
    root = Path(manifest["_root"])
    missing = [s for s in stems if s not in entry["paths"]]
    if missing:
        raise ManifestError(f"clip {entry['id']} lacks stems {missing}")
    clips = {s: audio.read_wav(root / entry["paths"][s]) for s in stems}
    raw, smoothed = read_labels_csv(root / entry["labels"])
    m = entry["mix"]
    return LabeledClip(
        y_bc=clips.get("y_bc"), y_ac=clips.get("y_ac"), s_ref=clips.get("s_ref"),
        labels=smoothed, raw_labels=raw,
        s_bc=clips.get("s_bc"), s_ac=clips.get("s_ref"),
        n_bc=clips.get("n_bc"), n_ac=clips.get("n_ac"),
        mix=MixSpec(**m),
    )


def calibrate_bc_attenuation(spec: SynthSpec, n_clips: int = 100, target_db: float = 15.0,
                             duration_s: float | None = None) -> float:
    """Attenuation that makes the mean BC SNR advantage equal ``target_db``.

    The advantage is affine in the attenuation with unit slope, so one batch
    measured at zero attenuation fixes it.
    """
    probe = SynthSpec(**{**asdict(spec), "bc_external_attenuation_db": 0.0})
    return target_db - mean_snr_advantage(probe, n_clips, duration_s)


def mean_snr_advantage(spec: SynthSpec, n_clips: int = 100,
                       duration_s: float | None = None) -> float:
    duration = duration_s or spec.clip_len_s
    adv = []
    pool = spec.external_speakers("train")
    for i in range(n_clips):
        rng = np.random.default_rng([spec.seed, 31337, i])
        speaker = int(rng.choice(spec.speakers("train")))
        target = synth_target_speech(spec, speaker, duration, [i, 1])
        e_bc, e_ac = synth_external(spec, Role.EXTERNAL_SPEECH, duration, [31337, i, 2], pool)
        n_bc, n_ac = synth_external(spec, Role.EXTERNAL_NOISE, duration, [31337, i, 3], pool)
        g = 10.0 ** (rng.uniform(-10.0, 5.0) / 20.0)
        adv.append(snr_advantage_db(target, e_bc.samples + g * n_bc.samples,
                                    e_ac.samples + g * n_ac.samples))
    return float(np.mean(adv))
