"""
BC vs AC channel, and the energy gate
=====================================

Uses the desk corpus and the two desk-trained models that the test suite
builds (``pytest tests/test_acceptance.py`` once, about ten minutes).  They
live in ``.pytest_cache/d/bcpvad_desk`` unless BCPVAD_DESK_DIR says otherwise.
"""

import os
from pathlib import Path

import numpy as np

from bcpvad import corpus, evaluation, net, pipeline

root = Path(os.environ.get("BCPVAD_DESK_DIR", ".pytest_cache/d/bcpvad_desk"))
if not (root / "model_bc.json").exists():
    raise SystemExit(f"no desk models in {root}; run the acceptance tests first")

bc = net.load_params(root / "model_bc.json")
ac = net.load_params(root / "model_ac.json")
stems = evaluation.load_test_stems(corpus.load_manifest(root / "data"))
print(len(stems), "test clips")

# equal environment: one noise gain per clip, set by the AC SNR; the BC
# channel then sees ~15 dB more SNR because it barely picks up airborne sound
rows = evaluation.equal_environment_harness(bc, ac, stems, [-10, 0, 10, 20])
print("\nequal environment (x axis: SNR on the AC channel)")
for r in rows:
    print("  %5.0f dB  %-8s acc %.3f  auc %.3f  dcf %.3f  (SNR_BC %.1f)"
          % (r.snr_db, r.model, r.acc, r.auc, r.dcf, r.mean_snr_bc))

# equal SNR: both channels forced to the same SNR; the gap mostly closes and
# reverses at 0 dB, where the band-limited BC signal carries less to go on
rows = evaluation.equal_snr_harness(bc, ac, stems, [0, 10])
print("\nequal SNR on both channels")
for r in rows:
    print("  %5.0f dB  %-8s acc %.3f  auc %.3f" % (r.snr_db, r.model, r.acc, r.auc))

# gate sweep on the BC model: skips grow with the threshold; a short hangover
# keeps the frames right after each offset, which the smoothed labels still
# call speech
thresholds = [-60, -40, -30, -24, -21, -18, -15]
plain = pipeline.gate_sweep(bc, stems, thresholds)
held = pipeline.gate_sweep(bc, stems, thresholds, hangover_frames=10)
base = pipeline.gate_sweep(bc, stems, [-np.inf])[0].accuracy
print("\ngate sweep, ungated accuracy %.4f" % base)
print("  threshold   plain: skip  drop    hangover 10: skip  drop")
for a, b in zip(plain, held):
    print("  %6.0f dB   %10.1f%% %5.2f   %17.1f%% %5.2f"
          % (a.threshold_db, 100 * a.skip_fraction, 100 * (base - a.accuracy),
             100 * b.skip_fraction, 100 * (base - b.accuracy)))
