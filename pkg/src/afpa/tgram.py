"""Learnable temporal encoder: raw waveform to an M x N feature.

A wide strided 1-D convolution (kernel = FFT size, stride = hop) makes the
frame grid line up with the log-mel feature, followed by three blocks of
per-frame channel normalization, leaky ReLU, and a narrow convolution. The
output is fully differentiable and shaped exactly like the spectral feature
so the two can be fused channel-wise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .dsp import DEFAULT_FRAMES, DEFAULT_HOP, DEFAULT_N_FFT, Waveform
from .errors import ShapeError
from .tensor import Tensor

LEAKY_SLOPE = 0.01


@dataclass
class TgramBlock:
    ln_gain: Tensor
    ln_bias: Tensor
    conv_w: Tensor
    conv_b: Tensor


@dataclass
class TgramNetParams:
    """Front conv [M, 1, n_fft] at stride hop, then 3 norm/act/conv blocks."""

    front_w: Tensor
    front_b: Tensor
    blocks: list[TgramBlock]
    stride: int
    slope: float = LEAKY_SLOPE

    @classmethod
    def create(cls, n_mels: int = 128, n_fft: int = DEFAULT_N_FFT, hop: int = DEFAULT_HOP,
               rng: np.random.Generator | None = None, dtype=np.float64,
               n_blocks: int = 3) -> "TgramNetParams":
        rng = rng or np.random.default_rng(0)

        def conv_init(c_out, c_in, k):
            scale = np.sqrt(2.0 / (c_in * k))
            return Tensor((scale * rng.standard_normal((c_out, c_in, k))).astype(dtype),
                          requires_grad=True)

        blocks = [
            TgramBlock(
                ln_gain=Tensor(np.ones(n_mels, dtype=dtype), requires_grad=True),
                ln_bias=Tensor(np.zeros(n_mels, dtype=dtype), requires_grad=True),
                conv_w=conv_init(n_mels, n_mels, 3),
                conv_b=Tensor(np.zeros(n_mels, dtype=dtype), requires_grad=True),
            )
            for _ in range(n_blocks)
        ]
        return cls(
            front_w=conv_init(n_mels, 1, n_fft),
            front_b=Tensor(np.zeros(n_mels, dtype=dtype), requires_grad=True),
            blocks=blocks,
            stride=hop,
        )

    @property
    def n_mels(self) -> int:
        return self.front_w.shape[0]

    @property
    def kernel(self) -> int:
        return self.front_w.shape[2]

    def named(self, prefix: str = "tgram") -> dict[str, Tensor]:
        out = {f"{prefix}.front.w": self.front_w, f"{prefix}.front.b": self.front_b}
        for i, blk in enumerate(self.blocks):
            out[f"{prefix}.block{i}.ln_gain"] = blk.ln_gain
            out[f"{prefix}.block{i}.ln_bias"] = blk.ln_bias
            out[f"{prefix}.block{i}.conv.w"] = blk.conv_w
            out[f"{prefix}.block{i}.conv.b"] = blk.conv_b
        return out


def fit_time(x: Tensor, n_frames: int) -> Tensor:
    """Crop trailing frames or repeat the last one, same policy as the log-mel path."""
    have = x.shape[1]
    if have >= n_frames:
        return T.narrow(x, 1, 0, n_frames)
    last = T.narrow(x, 1, have - 1, 1)
    return T.concat([x] + [last] * (n_frames - have), axis=1)


def tgram_forward(x: Waveform | np.ndarray, params: TgramNetParams,
                  n_frames: int = DEFAULT_FRAMES, dtype=None) -> Tensor:
    """Encode a waveform into a [M, n_frames] temporal feature."""
    samples = x.samples if isinstance(x, Waveform) else np.asarray(x)
    if samples.ndim != 1:
        raise ShapeError(f"tgram_forward: need a mono sample vector, got shape {samples.shape}")
    if dtype is None:
        dtype = params.front_w.dtype
    signal = Tensor(samples.astype(dtype).reshape(1, -1))

    out = T.conv1d(signal, params.front_w, stride=params.stride,
                   padding=params.kernel // 2, bias=params.front_b)
    out = fit_time(out, n_frames)
    for blk in params.blocks:
        normed = T.affine(T.layer_norm(out, axis=0), blk.ln_gain, blk.ln_bias, axis=0)
        activated = T.leaky_relu(normed, params.slope)
        out = T.conv1d(activated, blk.conv_w, stride=1, padding=1, bias=blk.conv_b)
    return out
