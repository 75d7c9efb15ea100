"""Machine-ID classifier head and angular-margin objective.

The fused [2, M, N] representation goes through a small depthwise-separable
CNN (a stand-in for a heavier face-recognition backbone; the stack is a
named config so a different one can be slotted in), global average pooling,
and a linear map to a fixed-size embedding. Classification logits come from
cosine similarity between the L2-normalized embedding and per-class weight
rows, with an additive angular margin applied to the target class during
training. The anomaly score of a clip is the negative log posterior of its
claimed machine ID under the margin-free logits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, ShapeError
from .tensor import Tensor

DEFAULT_MARGIN = 1.0   # radians
DEFAULT_SCALE = 30.0
DEFAULT_EMBED_DIM = 128
DEFAULT_CHANNELS = (32, 64, 64, 128, 128)  # stem out + four block outputs
DEFAULT_BLOCK_STRIDES = (2, 2, 2, 1)
LEAKY_SLOPE = 0.01
COS_CLAMP = 1e-7


@dataclass
class SeparableBlock:
    dw_w: Tensor   # [C, 1, 3, 3]
    dw_b: Tensor
    pw_w: Tensor   # [C_out, C, 1, 1]
    pw_b: Tensor
    norm_gain: Tensor
    norm_bias: Tensor
    stride: int


@dataclass
class ClassifierParams:
    """Conv stem, depthwise-separable blocks, pooled linear embedding, class weights."""

    stem_w: Tensor
    stem_b: Tensor
    stem_gain: Tensor
    stem_bias: Tensor
    blocks: list[SeparableBlock]
    head_w: Tensor           # [embed_dim, C_last]
    head_b: Tensor
    class_w: Tensor          # [n_classes, embed_dim]
    margin: float = DEFAULT_MARGIN
    scale: float = DEFAULT_SCALE

    @classmethod
    def create(cls, n_classes: int, channels=DEFAULT_CHANNELS,
               block_strides=DEFAULT_BLOCK_STRIDES, embed_dim: int = DEFAULT_EMBED_DIM,
               margin: float = DEFAULT_MARGIN, scale: float = DEFAULT_SCALE,
               rng: np.random.Generator | None = None, dtype=np.float64) -> "ClassifierParams":
        if n_classes < 2:
            raise ContractError(f"ClassifierParams: need >= 2 classes, got {n_classes}")
        if len(block_strides) != len(channels) - 1:
            raise ContractError("ClassifierParams: one stride per block is required")
        rng = rng or np.random.default_rng(0)

        def conv(c_out, c_in, kh, kw):
            scale_w = np.sqrt(2.0 / (c_in * kh * kw))
            return Tensor((scale_w * rng.standard_normal((c_out, c_in, kh, kw))).astype(dtype),
                          requires_grad=True)

        def vec(n, value=0.0):
            return Tensor(np.full(n, value, dtype=dtype), requires_grad=True)

        stem_out = channels[0]
        blocks = []
        for c_in, c_out, stride in zip(channels[:-1], channels[1:], block_strides):
            blocks.append(SeparableBlock(
                dw_w=conv(c_in, 1, 3, 3), dw_b=vec(c_in),
                pw_w=conv(c_out, c_in, 1, 1), pw_b=vec(c_out),
                norm_gain=vec(c_out, 1.0), norm_bias=vec(c_out),
                stride=stride,
            ))
        head_scale = np.sqrt(1.0 / channels[-1])
        class_scale = np.sqrt(1.0 / embed_dim)
        return cls(
            stem_w=conv(stem_out, 2, 3, 3), stem_b=vec(stem_out),
            stem_gain=vec(stem_out, 1.0), stem_bias=vec(stem_out),
            blocks=blocks,
            head_w=Tensor((head_scale * rng.standard_normal((embed_dim, channels[-1]))).astype(dtype),
                          requires_grad=True),
            head_b=vec(embed_dim),
            class_w=Tensor((class_scale * rng.standard_normal((n_classes, embed_dim))).astype(dtype),
                           requires_grad=True),
            margin=margin, scale=scale,
        )

    @property
    def n_classes(self) -> int:
        return self.class_w.shape[0]

    @property
    def embed_dim(self) -> int:
        return self.class_w.shape[1]

    def named(self, prefix: str = "clf") -> dict[str, Tensor]:
        out = {
            f"{prefix}.stem.w": self.stem_w, f"{prefix}.stem.b": self.stem_b,
            f"{prefix}.stem.gain": self.stem_gain, f"{prefix}.stem.bias": self.stem_bias,
            f"{prefix}.head.w": self.head_w, f"{prefix}.head.b": self.head_b,
            f"{prefix}.arcface.w": self.class_w,
        }
        for i, blk in enumerate(self.blocks):
            out[f"{prefix}.block{i}.dw.w"] = blk.dw_w
            out[f"{prefix}.block{i}.dw.b"] = blk.dw_b
            out[f"{prefix}.block{i}.pw.w"] = blk.pw_w
            out[f"{prefix}.block{i}.pw.b"] = blk.pw_b
            out[f"{prefix}.block{i}.norm.gain"] = blk.norm_gain
            out[f"{prefix}.block{i}.norm.bias"] = blk.norm_bias
        return out


def _norm_act(x: Tensor, gain: Tensor, bias: Tensor) -> Tensor:
    # per-channel normalization over the spatial axes: batch-free, deterministic
    if x.shape[1] * x.shape[2] < 2:
        raise ShapeError(
            f"classifier: spatial field collapsed to {x.shape[1]}x{x.shape[2]}; "
            "reduce the block strides for inputs this small"
        )
    normed = T.affine(T.layer_norm(x, axis=(1, 2)), gain, bias, axis=0)
    return T.leaky_relu(normed, LEAKY_SLOPE)


def classifier_forward(x: Tensor, params: ClassifierParams) -> Tensor:
    """Map a fused [2, M, N] tensor to an unnormalized embedding vector."""
    if len(x.shape) != 3 or x.shape[0] != 2:
        raise ShapeError(f"classifier_forward: need [2, M, N] input, got {x.shape}")
    out = T.conv2d(x, params.stem_w, stride=2, padding=1, bias=params.stem_b)
    out = _norm_act(out, params.stem_gain, params.stem_bias)
    for blk in params.blocks:
        c_in = blk.dw_w.shape[0]
        out = T.conv2d(out, blk.dw_w, stride=blk.stride, padding=1, bias=blk.dw_b, groups=c_in)
        out = T.conv2d(out, blk.pw_w, stride=1, padding=0, bias=blk.pw_b)
        out = _norm_act(out, blk.norm_gain, blk.norm_bias)
    pooled = T.global_avg_pool(out)
    return T.linear(pooled, params.head_w, params.head_b)


def cosine_logits(embedding: Tensor, params: ClassifierParams) -> Tensor:
    """Clamped cosine similarity between the normalized embedding and class rows."""
    if embedding.shape != (params.embed_dim,):
        raise ShapeError(f"cosine_logits: embedding {embedding.shape} vs weights {params.class_w.shape}")
    e_hat = T.l2_normalize_rows(T.reshape(embedding, (1, params.embed_dim)))
    w_hat = T.l2_normalize_rows(params.class_w)
    cos = T.reshape(T.matmul(w_hat, T.transpose(e_hat)), (params.n_classes,))
    return T.clamp(cos, -1.0 + COS_CLAMP, 1.0 - COS_CLAMP)


def arcface_logits(embedding: Tensor, params: ClassifierParams,
                   target: int | None = None) -> Tensor:
    """Scaled cosine logits; with a target, its angle is widened by the margin.

    The target logit is s * cos(theta + m). Past the wrap-around point
    (theta + m > pi) the standard monotone fallback s * (cos(theta) - m sin(m))
    is used so the logit keeps decreasing in theta.
    """
    cos = cosine_logits(embedding, params)
    if target is None:
        return T.mul(cos, params.scale)
    if not (0 <= target < params.n_classes):
        raise ContractError(f"arcface_logits: target {target} out of range [0, {params.n_classes})")
    m = params.margin
    sin_theta = T.sqrt(T.add(T.neg(T.mul(cos, cos)), 1.0))
    with_margin = T.add(T.mul(cos, math.cos(m)), T.neg(T.mul(sin_theta, math.sin(m))))
    fallback = T.add(cos, -m * math.sin(m))
    safe = cos.values > math.cos(math.pi - m)
    margined = T.where(safe, with_margin, fallback)
    onehot = np.zeros(params.n_classes, dtype=bool)
    onehot[target] = True
    return T.mul(T.where(onehot, margined, cos), params.scale)


def id_loss(logits: Tensor, target: int) -> Tensor:
    """Cross entropy over the (already margined) logits."""
    return T.cross_entropy_with_logits(logits, target)


def anomaly_score(x: Tensor, params: ClassifierParams, claimed_id: int) -> float:
    """Negative log posterior of the claimed machine ID; higher is more anomalous."""
    if not (0 <= claimed_id < params.n_classes):
        raise ContractError(f"anomaly_score: claimed id {claimed_id} out of range")
    with T.no_grad():
        embedding = classifier_forward(x, params)
        logits = arcface_logits(embedding, params, target=None)
        return T.cross_entropy_with_logits(logits, claimed_id).item()


def score_from_logits(logits: np.ndarray, claimed_id: int) -> float:
    """Same scoring rule applied to precomputed margin-free logits."""
    z = np.asarray(logits, dtype=np.float64)
    m = z.max()
    lse = m + math.log(np.sum(np.exp(z - m)))
    return float(lse - z[claimed_id])
