"""Anomalous machine-sound detection with attention-based frequency pattern analysis.

The pipeline: raw waveform -> log-mel + learnable temporal features ->
segmented multi-head self-attention over frequency bins -> fused two-channel
representation -> angular-margin machine-ID classifier -> anomaly scores and
AUC / pAUC reports. Everything trainable runs on the package's own
reverse-mode autodiff core (numpy arrays underneath).
"""

from . import attention, config, corpus, dsp, metrics, model, pipeline, tensor, tgram, trainer
from .attention import AfpaParams, FrequencyPattern, fuse, mhsa, residual_enhance
from .config import RunConfig, load_config
from .corpus import SynthMachineSpec, build_corpus, read_dataset, tensor_read, tensor_write
from .dsp import MelFilterbank, SpectralFeature, Waveform, load_wav, log_mel, mel_filterbank
from .metrics import MetricReport, ScoreRecord, auc, pauc, report
from .model import ClassifierParams, anomaly_score, arcface_logits, id_loss
from .pipeline import ModelBundle, create_bundle, load_checkpoint, save_checkpoint
from .tensor import Tensor, backward, grad_check
from .tgram import TgramNetParams, tgram_forward
from .trainer import TrainResult, adam_step, cosine_lr, train

__version__ = "0.1.0"
