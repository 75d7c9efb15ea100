"""Frequency-pattern attention: the trainable filter over mel bins.

The log-mel feature (M frequency rows, N time columns) is split along time
into I equal segments. Shared N x N projections map the whole feature to
Q, K, V; each head takes its own column block of those and runs scaled
dot-product attention ACROSS FREQUENCIES, so the attention map D_i is an
M x M row-stochastic matrix weighting every frequency against every other.
Head outputs are re-concatenated along time, and a residual add keeps the
original spectrogram content. There is no output projection and no
positional encoding; the attention maps themselves are the interpretable
product and can be exported for inspection.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .corpus import tensor_write
from .errors import ConfigError, ContractError, ShapeError
from .tensor import Tensor

DEFAULT_HEADS = 6
# Projection init: scaled identity plus noise, so initial attention follows the
# input's own frequency correlations. The scale keeps pre-softmax logits of
# typical log-mel features in a trainable range instead of saturating. The key
# projection starts sign-flipped: log-magnitude features are predominantly
# negative, so a negative key map makes high-energy frequency columns attract
# mass from the start instead of repelling it.
DEFAULT_QK_INIT_SCALE = 0.05
DEFAULT_INIT_NOISE = 0.02


@dataclass
class AfpaParams:
    """Shared Q/K/V projections ([N, N]) and the head count."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    heads: int

    @classmethod
    def create(cls, n_frames: int, heads: int = DEFAULT_HEADS,
               rng: np.random.Generator | None = None, dtype=np.float64,
               qk_scale: float = DEFAULT_QK_INIT_SCALE,
               noise: float = DEFAULT_INIT_NOISE) -> "AfpaParams":
        if heads < 1 or n_frames % heads != 0:
            raise ConfigError(f"AfpaParams: {n_frames} frames not divisible into {heads} heads")
        rng = rng or np.random.default_rng(0)
        eye = np.eye(n_frames)

        def init(scale):
            w = scale * (eye + noise * rng.standard_normal((n_frames, n_frames)))
            return Tensor(w.astype(dtype), requires_grad=True)

        return cls(w_q=init(qk_scale), w_k=init(-qk_scale), w_v=init(1.0), heads=heads)

    @property
    def n_frames(self) -> int:
        return self.w_q.shape[0]

    @property
    def segment_width(self) -> int:
        return self.n_frames // self.heads

    def named(self, prefix: str = "afpa") -> dict[str, Tensor]:
        return {f"{prefix}.w_q": self.w_q, f"{prefix}.w_k": self.w_k, f"{prefix}.w_v": self.w_v}


@dataclass
class FrequencyPattern:
    """Per-head M x M attention maps and their elementwise mean."""

    maps: list[np.ndarray]
    pooled: np.ndarray
    clip_id: str = ""

    def __post_init__(self):
        if not self.maps:
            raise ContractError("FrequencyPattern: no attention maps")
        m = self.maps[0].shape[0]
        for d in self.maps:
            if d.shape != (m, m):
                raise ContractError(f"FrequencyPattern: map shape {d.shape} is not square ({m})")
            sums = d.sum(axis=1)
            if np.max(np.abs(sums - 1.0)) > 1e-6 or d.min() < 0 or d.max() > 1:
                raise ContractError("FrequencyPattern: maps must be row-stochastic in [0, 1]")
        if np.max(np.abs(self.pooled - np.mean(self.maps, axis=0))) > 1e-12:
            raise ContractError("FrequencyPattern: pooled map is not the mean of the head maps")

    @property
    def n_bins(self) -> int:
        return self.pooled.shape[0]


def segment(x: Tensor, heads: int) -> list[Tensor]:
    """Split the time axis into ``heads`` equal column blocks."""
    m, n = x.shape
    if heads < 1 or n % heads != 0:
        raise ConfigError(f"segment: {n} time frames not divisible by {heads} heads")
    width = n // heads
    return [T.narrow(x, 1, i * width, width) for i in range(heads)]


def project_qkv(x: Tensor, params: AfpaParams) -> tuple[Tensor, Tensor, Tensor]:
    """Q = X W_q, K = X W_k, V = X W_v on the full feature (heads split later)."""
    if x.shape[1] != params.n_frames:
        raise ShapeError(f"project_qkv: feature {x.shape} vs projections {params.w_q.shape}")
    return T.matmul(x, params.w_q), T.matmul(x, params.w_k), T.matmul(x, params.w_v)


def attention_head(q_i: Tensor, k_i: Tensor, v_i: Tensor) -> tuple[Tensor, Tensor]:
    """One head: D = softmax(Q Kᵀ / sqrt(n)) over rows, output D V.

    Returns (output [M, n], attention map [M, M]) so the map can be exported
    without recomputation. The scale is the segment width n.
    """
    if q_i.shape != k_i.shape or q_i.shape != v_i.shape:
        raise ShapeError(f"attention_head: shapes differ: {q_i.shape}, {k_i.shape}, {v_i.shape}")
    n = q_i.shape[1]
    logits = T.mul(T.matmul(q_i, T.transpose(k_i)), 1.0 / math.sqrt(n))
    d = T.softmax_rows(logits)
    return T.matmul(d, v_i), d


def mhsa(x: Tensor, params: AfpaParams, clip_id: str = "") -> tuple[Tensor, FrequencyPattern]:
    """Multi-head attention output [M, N] plus the collected frequency patterns."""
    q, k, v = project_qkv(x, params)
    outputs = []
    maps = []
    for q_i, k_i, v_i in zip(segment(q, params.heads), segment(k, params.heads), segment(v, params.heads)):
        a_i, d_i = attention_head(q_i, k_i, v_i)
        outputs.append(a_i)
        maps.append(d_i.values.astype(np.float64, copy=True))
    pooled = np.mean(maps, axis=0)
    return T.concat(outputs, axis=1), FrequencyPattern(maps, pooled, clip_id=clip_id)


def residual_enhance(x: Tensor, params: AfpaParams, clip_id: str = "") -> tuple[Tensor, FrequencyPattern]:
    """Attention output plus the input: keeps global spectrogram content."""
    out, pattern = mhsa(x, params, clip_id=clip_id)
    return T.add(out, x), pattern


def fuse(x_spec: Tensor, x_temporal: Tensor) -> Tensor:
    """Stack spectral (channel 0) and temporal (channel 1) features into [2, M, N]."""
    if x_spec.shape != x_temporal.shape:
        raise ShapeError(f"fuse: shapes differ: {x_spec.shape} vs {x_temporal.shape}")
    m, n = x_spec.shape
    return T.concat([T.reshape(x_spec, (1, m, n)), T.reshape(x_temporal, (1, m, n))], axis=0)


def export_pattern(pattern: FrequencyPattern, aft_path, csv_path=None):
    """Write pooled + per-head maps as a tensor file and the pooled map as CSV."""
    arrays = {"pooled": pattern.pooled}
    for i, d in enumerate(pattern.maps):
        arrays[f"head_{i:02d}"] = d
    tensor_write(aft_path, arrays)
    if csv_path is None:
        csv_path = Path(aft_path).with_suffix(".csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in pattern.pooled:
            writer.writerow([f"{v:.9g}" for v in row])


def read_pattern(aft_path) -> FrequencyPattern:
    """Load a pattern written by export_pattern."""
    from .corpus import tensor_read

    arrays = tensor_read(aft_path)
    heads = sorted(k for k in arrays if k.startswith("head_"))
    maps = [arrays[k].astype(np.float64) for k in heads]
    return FrequencyPattern(maps, np.mean(maps, axis=0))
