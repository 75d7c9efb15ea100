"""Training loop: Adam with cosine-annealed learning rate over ID classification.

Only normal clips are used. Each epoch shuffles the training clips, pads the
last batch by replicating clips, averages the per-clip gradient over each
batch, and takes one Adam step at the cosine-annealed rate. A held-out slice
of normal clips is monitored (no early stopping). With the attention stage
disabled the spectral channel is the raw log-mel feature, which is exactly
the non-attention baseline.
"""

from __future__ import annotations

import math
import time
from concurrent.futures import ThreadPoolExecutor

from threadpoolctl import threadpool_limits
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import dsp, pipeline
from . import tensor as T
from .config import RunConfig, TrainSettings
from .corpus import read_dataset
from .errors import ContractError, DataError, NumericError
from .pipeline import ModelBundle
from .tensor import Tensor


def cosine_lr(step: int, total_steps: int, cfg: TrainSettings) -> float:
    """Annealed rate: lr_min + (lr_max - lr_min)(1 + cos(pi step/total))/2."""
    if total_steps < 1:
        raise ContractError("cosine_lr: total_steps must be >= 1")
    if not (0 <= step <= total_steps):
        raise ContractError(f"cosine_lr: step {step} outside [0, {total_steps}]")
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class AdamState:
    """First/second moment estimates per parameter plus the shared step count."""

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0

    def ensure(self, name: str, tensor: Tensor):
        if name not in self.m:
            self.m[name] = np.zeros(tensor.shape, dtype=tensor.dtype)
            self.v[name] = np.zeros(tensor.shape, dtype=tensor.dtype)


def adam_step(params: dict[str, Tensor], state: AdamState, lr: float, cfg: TrainSettings):
    """In-place bias-corrected Adam update; missing gradients count as zero."""
    state.t += 1
    bc1 = 1.0 - cfg.beta1 ** state.t
    bc2 = 1.0 - cfg.beta2 ** state.t
    for name in sorted(params):
        p = params[name]
        state.ensure(name, p)
        g = p.grad
        if g is None:
            g = np.zeros(p.shape, dtype=p.dtype)
        elif not np.all(np.isfinite(g)):
            raise NumericError(f"adam_step: non-finite gradient for parameter {name!r}")
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p.values -= (lr / bc1) * m / (np.sqrt(v / bc2) + cfg.eps)


# ---------------------------------------------------------------------------
# data handling


@dataclass
class TrainClip:
    samples: np.ndarray      # float32 waveform samples
    feature: np.ndarray      # cached log-mel matrix
    target: int
    clip_id: str


@dataclass
class TrainData:
    clips: list[TrainClip]
    class_map: list[tuple[str, str]]


def load_training_data(root, bundle_or_config) -> TrainData:
    """Materialize train-split clips with cached features and class indices."""
    config = bundle_or_config.config if isinstance(bundle_or_config, ModelBundle) else bundle_or_config
    entries = [(w, lbl, split, label) for w, lbl, split, label in read_dataset(root)
               if split == "train_normal"]
    if not entries:
        raise DataError(f"no training clips under {root}")
    for _, _, _, label in entries:
        if label != "normal":
            raise DataError("training split contains anomalous clips")
    class_map = sorted({(lbl.machine_type, lbl.machine_id) for _, lbl, _, _ in entries})
    if len(class_map) < 2:
        raise DataError("training data must cover at least two machine identities")
    index = {pair: i for i, pair in enumerate(class_map)}

    d = config.dsp
    fb = dsp.mel_filterbank(n_mels=d.n_mels, n_fft=d.n_fft, sample_rate=d.sample_rate,
                            f_min=d.f_min, f_max=d.f_max)
    clips = []
    for wave, lbl, _, _ in entries:
        feature = dsp.log_mel(wave, fb, n_fft=d.n_fft, hop=d.hop, n_frames=d.n_frames)
        clips.append(TrainClip(
            samples=wave.samples.astype(np.float32),
            feature=feature.data.astype(np.float32),
            target=index[(lbl.machine_type, lbl.machine_id)],
            clip_id=wave.source_id,
        ))
    return TrainData(clips=clips, class_map=class_map)


def _split_validation(data: TrainData, fraction: float, rng: np.random.Generator):
    """Per-class held-out slice for loss monitoring."""
    by_class: dict[int, list[int]] = {}
    for i, clip in enumerate(data.clips):
        by_class.setdefault(clip.target, []).append(i)
    train_idx, val_idx = [], []
    for target in sorted(by_class):
        idx = by_class[target]
        n_val = int(fraction * len(idx))
        chosen = set(rng.permutation(len(idx))[:n_val].tolist())
        for j, i in enumerate(idx):
            (val_idx if j in chosen else train_idx).append(i)
    return sorted(train_idx), sorted(val_idx)


@dataclass
class TrainResult:
    checkpoint: Path
    log_rows: list[tuple[int, float, float]]  # (epoch, mean_loss, lr)
    val_losses: list[float]
    seconds: float


def train(bundle: ModelBundle, data, out_checkpoint, log_path=None,
          verbose: bool = False, workers: int = 1) -> TrainResult:
    """Run the full optimization and write checkpoint + training-log CSV.

    ``workers`` > 1 computes per-clip gradients of a batch on a thread pool
    (parameters are read-only during the sweep); accumulation happens on the
    calling thread in clip order, so results are bit-identical for any
    worker count.
    """
    cfg = bundle.config.train
    if not isinstance(data, TrainData):
        data = load_training_data(data, bundle)
    if data.class_map != bundle.class_map:
        raise DataError("training data classes do not match the model's class map")

    rng = np.random.default_rng(cfg.seed)
    train_idx, val_idx = _split_validation(data, cfg.val_fraction, rng)
    if not train_idx:
        raise DataError("no clips left to train on after the validation split")
    batches_per_epoch = math.ceil(len(train_idx) / cfg.batch_size)
    total_steps = cfg.epochs * batches_per_epoch

    params = bundle.named_params()
    param_names = sorted(params)
    param_list = [params[name] for name in param_names]
    state = AdamState()
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None

    def clip_backward(i):
        clip = data.clips[i]
        loss = pipeline.clip_loss(bundle, clip.samples, clip.target, feature=clip.feature)
        grads = T.collect_grads(T.mul(loss, 1.0 / cfg.batch_size), param_list)
        return loss.item(), grads

    start = time.perf_counter()
    log_rows = []
    val_losses = []
    step = 0
    # the pipeline is many small GEMMs; BLAS-internal threading only thrashes
    limits = threadpool_limits(limits=1, user_api="blas")
    for epoch in range(cfg.epochs):
        order = [train_idx[i] for i in rng.permutation(len(train_idx))]
        epoch_losses = []
        for b in range(batches_per_epoch):
            batch = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            short_by = len(batch)
            while len(batch) < cfg.batch_size:  # pad last batch by clip replication
                batch.append(batch[len(batch) % short_by])
            lr = cosine_lr(step, total_steps, cfg)
            for t in param_list:
                t.zero_grad()
            if pool is not None:
                results = list(pool.map(clip_backward, batch))
            else:
                results = [clip_backward(i) for i in batch]
            for clip_pos, (value, grads) in zip(batch, results):
                if not math.isfinite(value):
                    raise NumericError(
                        f"non-finite loss at epoch {epoch}, step {step}, "
                        f"clip {data.clips[clip_pos].clip_id!r}")
                epoch_losses.append(value)
                for t, g in zip(param_list, grads):
                    if g is not None:
                        t.grad = g if t.grad is None else t.grad + g
            adam_step(params, state, lr, cfg)
            step += 1
        mean_loss = float(np.mean(epoch_losses))
        log_rows.append((epoch, mean_loss, cosine_lr(step - 1, total_steps, cfg)))
        val_loss = float("nan")
        if val_idx:
            with T.no_grad():
                vals = [pipeline.clip_loss(bundle, data.clips[i].samples, data.clips[i].target,
                                           feature=data.clips[i].feature).item()
                        for i in val_idx]
            val_loss = float(np.mean(vals))
        val_losses.append(val_loss)
        if verbose:
            print(f"epoch {epoch:3d}  loss {mean_loss:.4f}  val {val_loss:.4f}  "
                  f"lr {log_rows[-1][2]:.2e}", flush=True)

    limits.unregister()
    if pool is not None:
        pool.shutdown()
    out_checkpoint = Path(out_checkpoint)
    pipeline.save_checkpoint(bundle, out_checkpoint)
    if log_path is None:
        log_path = out_checkpoint.with_suffix(".train_log.csv")
    with open(log_path, "w", newline="") as fh:
        fh.write("epoch,mean_loss,lr\n")
        for epoch, mean_loss, lr in log_rows:
            fh.write(f"{epoch},{mean_loss!r},{lr!r}\n")
    return TrainResult(checkpoint=out_checkpoint, log_rows=log_rows,
                       val_losses=val_losses, seconds=time.perf_counter() - start)
