"""
Train, quantize and stream a small model
========================================

A tour of under a minute: build a tiny synthetic corpus, train the 4585-parameter
network for a few hundred steps, convert it to int8 and run both versions
sample by sample through the streaming pipeline with the energy gate on.
Use the desk settings (see the README) for a model worth evaluating.
"""

import tempfile
from pathlib import Path

import numpy as np

from bcpvad import corpus, net, pipeline, quant, training

work = Path(tempfile.mkdtemp(prefix="bcpvad_demo_"))

# 12 training clips and 3 test clips of 10 s
spec = corpus.SynthSpec(seed=5, clip_len_s=10.0, train_hours=120 / 3600, test_hours=30 / 3600)
corpus.build_dataset(spec, work / "data")
manifest = corpus.load_manifest(work / "data")
print("corpus in", work / "data")

train = training.load_features(manifest, "train", "bc")
test = training.load_features(manifest, "test", "bc")
print("train frames", sum(len(x) for x in train.features), "test frames", sum(len(x) for x in test.features))

cfg = training.TrainConfig(steps_per_epoch=60, max_epochs=4, bptt_len=200)
params, history = training.train(train, test, cfg, progress=lambda e: print(
    "epoch %d  train %.3f  test %.3f" % (e.epoch, e.train_loss, e.test_loss)))
print("parameters:", net.param_count(params))

# post-training quantization, calibrated on the training clips
stats = quant.calibrate(params, train.features)
q = quant.quantize_net(params, stats)
acc_f, acc_q, drop = quant.accuracy_delta(params, q, test)
print("binary accuracy  float %.2f%%  int8 %.2f%%  drop %.2f points" % (acc_f, acc_q, drop))

# stream one test mixture in 10 ms chunks, gate at -30 dB with a short hangover
entry = corpus.split_entries(manifest, "test")[0]
clip = corpus.load_clip(manifest, entry, stems=("y_bc",))
gate = pipeline.GateConfig(enabled=True, threshold_db=-30.0, hangover_frames=5)
for name, model in (("float", params), ("int8", q)):
    preds, state = pipeline.run_stream(model, clip.y_bc.samples, gate, chunk=160)
    p = np.array([r.probability for r in preds])
    print("%-5s frames %d  skipped %.1f%%  speech frames %d  latency %.1f ms"
          % (name, state.frames_total, 100 * state.skip_fraction, int(np.sum(p > 0.5)),
             preds[0].latency_ms))

net.save_params(params, work / "model_bc")
quant.save_qparams(q, work / "model_bc_q8")
print("models saved in", work)
