"""Machine-ID self-supervised anomalous sound detection toolkit."""

__version__ = "0.1.0"

from .augment import MixedBatch, mixup, mixup_batch, sample_lambda
from .config import ConfigError, RunConfig, load_config
from .corpus import (
    AudioClip,
    Batch,
    ClipMetadata,
    CorpusError,
    DatasetManifest,
    load_clip,
    make_batches,
    scan_dataset,
    synth_generate,
)
from .evaluation import EvalReport, anomaly_score, auc, evaluate, mauc, pauc
from .features import (
    FeatureStack,
    StftConfig,
    TFgramNet,
    TgramNet,
    log_mel,
    stack_features,
)
from .losses import ContrastiveConfig, noisy_arcmix_loss, supcon_noise_loss, total_loss
from .model import (
    ArcFaceHead,
    BackboneConfig,
    FeaturePerturbationHead,
    MobileFaceNet,
    OSSCLModel,
    ToyBackbone,
    arcface_logits,
    count_params,
    load_checkpoint,
    save_checkpoint,
)
from .training import EmaState, TrainConfig, cosine_lr, ema_init, ema_update, train

__all__ = [
    "AudioClip",
    "ArcFaceHead",
    "BackboneConfig",
    "Batch",
    "ClipMetadata",
    "ConfigError",
    "ContrastiveConfig",
    "CorpusError",
    "DatasetManifest",
    "EmaState",
    "EvalReport",
    "FeaturePerturbationHead",
    "FeatureStack",
    "MixedBatch",
    "MobileFaceNet",
    "OSSCLModel",
    "RunConfig",
    "StftConfig",
    "TFgramNet",
    "TgramNet",
    "ToyBackbone",
    "TrainConfig",
    "anomaly_score",
    "arcface_logits",
    "auc",
    "cosine_lr",
    "count_params",
    "ema_init",
    "ema_update",
    "evaluate",
    "load_checkpoint",
    "load_clip",
    "load_config",
    "log_mel",
    "make_batches",
    "mauc",
    "mixup",
    "mixup_batch",
    "noisy_arcmix_loss",
    "pauc",
    "sample_lambda",
    "save_checkpoint",
    "scan_dataset",
    "stack_features",
    "supcon_noise_loss",
    "synth_generate",
    "total_loss",
    "train",
]
