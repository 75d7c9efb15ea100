"""Frequency-pattern attention, inspected.

The log-mel feature is segmented along time; each head computes a
row-stochastic M x M map weighting every frequency bin against every other.
This script shows the algebraic identities the module guarantees and writes
a pattern export (tensor file + CSV) like the one the CLI produces.
"""

import tempfile
from pathlib import Path

import numpy as np

import afpa.tensor as T
from afpa import attention, corpus, dsp
from afpa.attention import AfpaParams
from afpa.tensor import Tensor

spec = corpus.SynthMachineSpec("pump", "id_00", 170.0, (1.0, 0.7, 0.15, 0.25), 0.010)
wave = corpus.synth_clip(spec, anomalous=True, seed=1)
feature = dsp.log_mel(wave, dsp.mel_filterbank())
x = Tensor(feature.data)

params = AfpaParams.create(n_frames=312, heads=6, rng=np.random.default_rng(0))
enhanced, pattern = attention.residual_enhance(x, params)
print(f"input {x.shape} -> enhanced {enhanced.shape}, {len(pattern.maps)} attention maps")

row_sums = pattern.maps[0].sum(axis=1)
print(f"map rows sum to 1: max deviation {np.abs(row_sums - 1).max():.2e}")
print(f"pooled map shape {pattern.pooled.shape}, uniform would be {1/128:.5f}, "
      f"observed max {pattern.pooled.max():.5f}")

# Residual identity: zero value projection leaves the spectrogram untouched.
frozen = AfpaParams(params.w_q, params.w_k, Tensor(np.zeros((312, 312))), heads=6)
identity, _ = attention.residual_enhance(x, frozen)
print(f"residual identity holds exactly: {np.array_equal(identity.values, x.values)}")

# Segmentation is lossless.
back = T.concat(attention.segment(x, 6), axis=1)
print(f"segment + concat reconstructs:  {np.array_equal(back.values, x.values)}")

# Export the maps the way the CLI does.
out = Path(tempfile.mkdtemp())
attention.export_pattern(pattern, out / "demo.pattern.aft", out / "demo.pattern.csv")
size = (out / "demo.pattern.aft").stat().st_size
print(f"exported {size} bytes of maps plus a {128}x{128} CSV under {out}")
