"""
Power budget and battery life
=============================

Duty-cycle arithmetic for the two SoC profiles, the effect of skipping
inference on quiet frames, and how the fitted FFT/inference split was found.
"""

from bcpvad import power

for name in power.BUILTIN_PROFILES:
    soc, bat = power.load_profile(name)
    print("%s: sleep %.3f mW, compute +%.2f mW, %.2f ms per 10 ms hop"
          % (soc.name, soc.p_sleep_mw, soc.p_compute_mw, soc.t_total_ms))
    for r in power.skip_sweep(soc, bat, (0.0, 0.1, 0.2, 0.3, 0.4)):
        print("  skip %3.0f%%  duty %.3f  %.3f mW  %6.1f uA  %.2f h"
              % (100 * r.skip_fraction, r.duty_cycle, r.avg_power_mw, r.avg_current_ua,
                 r.battery_life_h))

# only the 2.80 ms total is measured on the Apollo part; the split between the
# always-run FFT stage and the skippable inference stage is fitted to the
# battery gains at 20% and 40% skips
soc, bat = power.load_profile("apollo4")
fitted = power.fit_stage_split(soc, bat)
print("fitted split: FFT %.2f ms, inference %.2f ms" % (fitted.t_fft_ms, fitted.t_infer_ms))

# sensitivity of the 40% gain to that split
base = soc.t_total_ms
for t_inf in (1.5, 2.0, 2.07, 2.24, 2.5, 2.8):
    s = power.SocProfile("x", soc.p_sleep_mw, soc.p_compute_mw, base - t_inf, t_inf)
    rows = power.skip_sweep(s, bat, (0.0, 0.4))
    print("  t_infer %.2f ms -> +%.2f h at 40%%" % (t_inf, rows[1].battery_life_h - rows[0].battery_life_h))

# battery: 32 mAh at 3.8 V through a 95% efficient converter
print("energy per frame on apollo4: %.2f uJ, worst-case latency %.1f ms"
      % (power.energy_per_inference(soc), power.worst_case_latency_ms(soc)))
