"""
From samples to log-Mel frames
==============================

One synthetic clip through the front end: framing, spectrum, Mel
filterbank and the per-frame energy the gate looks at.
"""

import numpy as np

from bcpvad import corpus, dsp

spec = corpus.SynthSpec(seed=1, clip_len_s=5.0)
clip, meta = corpus.synth_clip(spec, "train", 0)
print("speaker %d, mixture SNR %.1f dB, level %.1f dBFS"
      % (meta["speaker_id"], clip.mix.target_snr_db, clip.mix.level_dbfs))

# 20 ms frames every 10 ms; a 5 s clip gives 499 frames
x = clip.y_bc.samples
frames = dsp.frame_stream(x)
print("samples", len(x), "frames", frames.shape)

# the filterbank is built once and reused for every frame
fb = dsp.build_mel_filterbank()
print("first Mel centres (Hz):", np.round(fb.centers_hz[:5], 1))

values, energy = dsp.extract_clip_features(x, fb)
print("feature matrix", values.shape)

# energy is low between bursts and high inside them
labels = clip.labels > 0.5
print("mean energy, speech frames:  %.1f dB" % energy[labels].mean())
print("mean energy, silent frames:  %.1f dB" % energy[~labels].mean())

# a crude text plot of the energy track and the labels
for k in range(0, 200, 10):
    bar = "#" * int(max(energy[k] + 70, 0) / 2)
    print("%4d %6.1f %s %s" % (k, energy[k], "S" if labels[k] else ".", bar))
