"""From waveform to the two feature channels.

A synthetic machine clip is rendered, reduced to its log-mel spectrogram,
and encoded by the learnable temporal network. Both features share the same
M x N geometry so they can be stacked into the fused representation.
"""

import numpy as np

from afpa import corpus, dsp, tgram
from afpa.attention import fuse
from afpa.tensor import Tensor

spec = corpus.SynthMachineSpec(
    machine_type="fan", machine_id="id_00", fundamental_hz=95.0,
    harmonic_amps=(1.0, 0.55, 0.30, 0.12), noise_level=0.012)

normal = corpus.synth_clip(spec, anomalous=False, seed=0)
defect = corpus.synth_clip(spec, anomalous=True, seed=0)
print(f"clip: {len(normal)} samples at {normal.sample_rate} Hz")

fb = dsp.mel_filterbank()
feat_normal = dsp.log_mel(normal, fb)
feat_defect = dsp.log_mel(defect, fb)
print(f"log-mel feature: {feat_normal.data.shape} (mel bins x time frames)")

# The defect is a high-frequency tone; compare band energies.
centers = fb.mel_centers_hz[1:-1]
band = np.abs(centers - 6000.0) < 500.0
print(f"defect band covers mel bins {np.nonzero(band)[0].min()}..{np.nonzero(band)[0].max()}")
print(f"  normal clip band energy : {feat_normal.data[band].mean():+.2f} (log scale)")
print(f"  defect clip band energy : {feat_defect.data[band].mean():+.2f}")

# The temporal channel comes from a strided wide convolution over raw samples.
params = tgram.TgramNetParams.create(rng=np.random.default_rng(0), dtype=np.float64)
temporal = tgram.tgram_forward(normal, params)
print(f"temporal feature: {temporal.shape} (same geometry)")

fused = fuse(Tensor(feat_normal.data), temporal)
print(f"fused representation: {fused.shape} (spectral channel 0, temporal channel 1)")
