"""Duty-cycle power, energy, latency and battery-life model for the SoC targets.

Per 10 ms hop the SoC wakes, runs the FFT stage and (unless the frame is
rejected by the energy gate) the inference stage, then sleeps.  With a
fraction ``f`` of frames skipped after the FFT::

    P_avg = P_sleep + (t_fft + (1 - f) * t_infer) / hop * P_compute
    I_bat = P_avg / (V_bat * efficiency)
    life  = capacity / I_bat
"""

from __future__ import annotations

import csv
import json
import sys
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


class RangeError(ValueError):
    pass


@dataclass(frozen=True)
class BatteryModel:
    capacity_mah: float = 32.0
    voltage_v: float = 3.8
    converter_efficiency: float = 0.95

    def __post_init__(self):
        if self.capacity_mah <= 0 or self.voltage_v <= 0:
            raise RangeError("battery capacity and voltage must be positive")
        if not 0 < self.converter_efficiency <= 1:
            raise RangeError("converter efficiency must lie in (0, 1]")


@dataclass(frozen=True)
class SocProfile:
    name: str
    p_sleep_mw: float
    p_compute_mw: float
    t_fft_ms: float
    t_infer_ms: float
    hop_ms: float = 10.0

    def __post_init__(self):
        for k in ("p_sleep_mw", "p_compute_mw", "t_fft_ms", "t_infer_ms"):
            if getattr(self, k) < 0:
                raise RangeError(f"{k} must be non-negative")
        if self.hop_ms <= 0:
            raise RangeError("hop_ms must be positive")
        if self.t_total_ms > self.hop_ms:
            raise RangeError(f"{self.name}: {self.t_total_ms} ms per frame exceeds the "
                             f"{self.hop_ms} ms hop")

    @property
    def t_total_ms(self) -> float:
        return self.t_fft_ms + self.t_infer_ms


@dataclass(frozen=True)
class PowerReport:
    profile: str
    skip_fraction: float
    duty_cycle: float
    avg_power_mw: float
    avg_current_ua: float
    energy_per_inference_uj: float
    worst_latency_ms: float
    battery_life_h: float


def duty_cycle(soc: SocProfile, skip_fraction: float = 0.0) -> float:
    _check_fraction(skip_fraction)
    return (soc.t_fft_ms + (1.0 - skip_fraction) * soc.t_infer_ms) / soc.hop_ms


def _check_fraction(f):
    if not 0.0 <= f <= 1.0:
        raise RangeError(f"skip fraction {f} outside [0, 1]")


def avg_power(soc: SocProfile, skip_fraction: float = 0.0) -> float:
    """Average platform power in mW."""
    return soc.p_sleep_mw + duty_cycle(soc, skip_fraction) * soc.p_compute_mw


def energy_per_inference(soc: SocProfile) -> float:
    """Compute energy above sleep for one processed frame, in uJ (mW * ms).

    Covers both stages: the quoted per-inference energy is the full frame
    processing burst.
    """
    return soc.p_compute_mw * soc.t_total_ms


def worst_case_latency_ms(soc: SocProfile) -> float:
    """Speech arriving just after a hop boundary waits one hop plus processing."""
    return soc.hop_ms + soc.t_total_ms


def battery_current_ma(avg_power_mw: float, bat: BatteryModel = BatteryModel()) -> float:
    if avg_power_mw <= 0:
        raise RangeError("average power must be positive")
    return avg_power_mw / (bat.voltage_v * bat.converter_efficiency)


def battery_life(avg_power_mw: float, bat: BatteryModel = BatteryModel()) -> float:
    """Hours of operation on one charge."""
    return bat.capacity_mah / battery_current_ma(avg_power_mw, bat)


def report(soc: SocProfile, bat: BatteryModel = BatteryModel(),
           skip_fraction: float = 0.0) -> PowerReport:
    p = avg_power(soc, skip_fraction)
    return PowerReport(
        profile=soc.name,
        skip_fraction=skip_fraction,
        duty_cycle=duty_cycle(soc, skip_fraction),
        avg_power_mw=p,
        avg_current_ua=1000.0 * battery_current_ma(p, bat),
        energy_per_inference_uj=energy_per_inference(soc),
        worst_latency_ms=worst_case_latency_ms(soc),
        battery_life_h=battery_life(p, bat),
    )


def skip_sweep(soc: SocProfile, bat: BatteryModel = BatteryModel(), fractions=(0.0, 0.2, 0.4)):
    return [report(soc, bat, f) for f in fractions]


def fit_stage_split(soc: SocProfile, bat: BatteryModel = BatteryModel(),
                    gains_h: dict | None = None) -> SocProfile:
    """Choose t_infer (t_fft = total - t_infer) so skip-sweep battery gains
    match ``gains_h`` ({fraction: hours}) in the least-squares relative sense."""
    from scipy.optimize import minimize_scalar

    gains_h = gains_h or {0.2: 4.0, 0.4: 8.0}
    total = soc.t_total_ms

    def profile(t_inf):
        return SocProfile(soc.name, soc.p_sleep_mw, soc.p_compute_mw,
                          total - t_inf, t_inf, soc.hop_ms)

    def cost(t_inf):
        prof = profile(t_inf)
        base = battery_life(avg_power(prof, 0.0), bat)
        return sum((battery_life(avg_power(prof, f), bat) - base - g) ** 2 / g ** 2
                   for f, g in gains_h.items())

    res = minimize_scalar(cost, bounds=(0.0, total), method="bounded")
    return profile(float(res.x))


# ---------------------------------------------------------------------------
# Profile files
# ---------------------------------------------------------------------------

BUILTIN_PROFILES = ("apollo4", "nrf5340")


def load_profile(name_or_path) -> tuple[SocProfile, BatteryModel]:
    """Load a TOML profile by built-in name (``apollo4``, ``nrf5340``) or path."""
    if str(name_or_path) in BUILTIN_PROFILES:
        text = resources.files("bcpvad.profiles").joinpath(f"{name_or_path}.toml").read_text()
    else:
        text = Path(name_or_path).read_text()
    data = tomllib.loads(text)
    bat = BatteryModel(**data.pop("battery", {}))
    return SocProfile(**data), bat


def write_reports_csv(reports, path) -> None:
    fields = list(PowerReport.__dataclass_fields__)
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=fields)
        w.writeheader()
        for r in reports:
            w.writerow(asdict(r))


def reports_json(reports) -> str:
    return json.dumps([asdict(r) for r in reports], indent=2)
