"""End-to-end model bundle: parameters, forward path, checkpoints.

A bundle holds the temporal encoder, the (optional) frequency attention, the
classifier, and the class map tying machine identities to class indices.
Checkpoints are a tensor file with every parameter plus a JSON manifest
(class map, flags, the full config, and its hash); loading rebuilds an
identical bundle.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import attention, dsp, model, tgram
from . import tensor as T
from .attention import AfpaParams, FrequencyPattern
from .config import RunConfig, config_from_dict
from .corpus import tensor_read, tensor_write
from .dsp import MelFilterbank, Waveform
from .errors import ConfigError, DataError
from .model import ClassifierParams
from .tensor import Tensor
from .tgram import TgramNetParams

CHECKPOINT_FORMAT_VERSION = 1


@dataclass
class ModelBundle:
    config: RunConfig
    class_map: list[tuple[str, str]]
    tgram_params: TgramNetParams
    attn_params: AfpaParams | None
    clf_params: ClassifierParams
    use_afpa: bool
    _filterbank: MelFilterbank | None = None

    @property
    def class_index(self) -> dict[tuple[str, str], int]:
        return {pair: i for i, pair in enumerate(self.class_map)}

    def filterbank(self) -> MelFilterbank:
        if self._filterbank is None:
            d = self.config.dsp
            self._filterbank = dsp.mel_filterbank(
                n_mels=d.n_mels, n_fft=d.n_fft, sample_rate=d.sample_rate,
                f_min=d.f_min, f_max=d.f_max)
        return self._filterbank

    def named_params(self) -> dict[str, Tensor]:
        out = {}
        out.update(self.tgram_params.named())
        if self.use_afpa:
            out.update(self.attn_params.named())
        out.update(self.clf_params.named())
        return out

    def dtype(self):
        return self.clf_params.class_w.dtype


def create_bundle(config: RunConfig, class_map: list[tuple[str, str]],
                  use_afpa: bool | None = None, dtype=None) -> ModelBundle:
    """Fresh parameters; component init streams are independent of use_afpa."""
    if use_afpa is None:
        use_afpa = config.train.use_afpa
    if dtype is None:
        dtype = np.float32 if config.train.dtype == "float32" else np.float64
    if len(class_map) < 2:
        raise ConfigError("create_bundle: need at least two machine identities")
    d, a, m = config.dsp, config.attention, config.model
    ss = np.random.SeedSequence(config.train.seed)
    tgram_ss, attn_ss, clf_ss = ss.spawn(3)

    tgram_params = TgramNetParams.create(
        n_mels=d.n_mels, n_fft=d.n_fft, hop=d.hop,
        rng=np.random.default_rng(tgram_ss), dtype=dtype)
    attn_params = None
    if use_afpa:
        attn_params = AfpaParams.create(
            d.n_frames, heads=a.heads, rng=np.random.default_rng(attn_ss),
            dtype=dtype, qk_scale=a.qk_init_scale, noise=a.init_noise)
    clf_params = ClassifierParams.create(
        n_classes=len(class_map), channels=m.channels, block_strides=m.block_strides,
        embed_dim=m.embed_dim, margin=m.margin, scale=m.scale,
        rng=np.random.default_rng(clf_ss), dtype=dtype)
    return ModelBundle(config=config, class_map=list(class_map),
                       tgram_params=tgram_params, attn_params=attn_params,
                       clf_params=clf_params, use_afpa=use_afpa)


# ---------------------------------------------------------------------------
# forward path


def extract_feature(bundle: ModelBundle, wave: Waveform) -> np.ndarray:
    """Log-mel matrix for one clip, in the bundle's dtype."""
    d = bundle.config.dsp
    feature = dsp.log_mel(wave, bundle.filterbank(), n_fft=d.n_fft, hop=d.hop,
                          n_frames=d.n_frames)
    return feature.data.astype(bundle.dtype())


def forward_clip(bundle: ModelBundle, samples: np.ndarray,
                 feature: np.ndarray | None = None, wave: Waveform | None = None,
                 clip_id: str = "") -> tuple[Tensor, Tensor, FrequencyPattern | None]:
    """Full forward pass; returns (embedding, enhanced spectral feature, pattern).

    ``feature`` may be a precomputed log-mel matrix (training caches these);
    otherwise it is derived from ``wave``.
    """
    if feature is None:
        if wave is None:
            wave = Waveform(np.asarray(samples, dtype=np.float64),
                            sample_rate=bundle.config.dsp.sample_rate, source_id=clip_id)
        feature = extract_feature(bundle, wave)
    x_f = Tensor(np.asarray(feature, dtype=bundle.dtype()))
    x_t = tgram.tgram_forward(np.asarray(samples), bundle.tgram_params,
                              n_frames=bundle.config.dsp.n_frames, dtype=bundle.dtype())
    pattern = None
    spectral = x_f
    if bundle.use_afpa:
        spectral, pattern = attention.residual_enhance(x_f, bundle.attn_params, clip_id=clip_id)
    fused = attention.fuse(spectral, x_t)
    embedding = model.classifier_forward(fused, bundle.clf_params)
    return embedding, spectral, pattern


def clip_loss(bundle: ModelBundle, samples: np.ndarray, target: int,
              feature: np.ndarray | None = None) -> Tensor:
    embedding, _, _ = forward_clip(bundle, samples, feature=feature)
    logits = model.arcface_logits(embedding, bundle.clf_params, target=target)
    return model.id_loss(logits, target)


def score_clip(bundle: ModelBundle, samples: np.ndarray, claimed: int,
               feature: np.ndarray | None = None) -> float:
    """Anomaly score: negative log posterior of the claimed ID (margin free)."""
    with T.no_grad():
        embedding, _, _ = forward_clip(bundle, samples, feature=feature)
        logits = model.arcface_logits(embedding, bundle.clf_params, target=None)
        return model.score_from_logits(logits.values, claimed)


def clip_pattern(bundle: ModelBundle, samples: np.ndarray, wave: Waveform | None = None,
                 clip_id: str = "") -> tuple[np.ndarray, FrequencyPattern]:
    """Enhanced spectral feature and attention pattern for one clip."""
    if not bundle.use_afpa:
        raise ConfigError("this model was trained without the attention stage")
    with T.no_grad():
        _, spectral, pattern = forward_clip(bundle, samples, wave=wave, clip_id=clip_id)
    return spectral.values.copy(), pattern


# ---------------------------------------------------------------------------
# checkpoints


def manifest_path(checkpoint_path) -> Path:
    return Path(checkpoint_path).with_suffix(".manifest.json")


def save_checkpoint(bundle: ModelBundle, path) -> Path:
    path = Path(path)
    arrays = {name: t.values for name, t in bundle.named_params().items()}
    tensor_write(path, arrays)
    manifest = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "class_map": [list(pair) for pair in bundle.class_map],
        "use_afpa": bundle.use_afpa,
        "config": bundle.config.to_dict(),
        "config_hash": bundle.config.config_hash(),
    }
    manifest_path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_checkpoint(path, dtype=np.float32) -> ModelBundle:
    path = Path(path)
    mpath = manifest_path(path)
    if not path.exists() or not mpath.exists():
        raise DataError(f"checkpoint incomplete: need {path} and {mpath}")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise DataError(f"{mpath}: unsupported checkpoint format version")
    config = config_from_dict(manifest["config"])
    class_map = [tuple(pair) for pair in manifest["class_map"]]
    bundle = create_bundle(config, class_map, use_afpa=manifest["use_afpa"], dtype=dtype)
    arrays = tensor_read(path)
    params = bundle.named_params()
    missing = set(params) - set(arrays)
    extra = set(arrays) - set(params)
    if missing or extra:
        raise DataError(f"{path}: parameter names do not match manifest "
                        f"(missing {sorted(missing)}, extra {sorted(extra)})")
    for name, tensor in params.items():
        stored = arrays[name].astype(dtype)
        if stored.shape != tensor.shape:
            raise DataError(f"{path}: shape mismatch for {name}: {stored.shape} vs {tensor.shape}")
        tensor.values = stored
    return bundle
