"""Self-supervised pre-training for bi-temporal change detection."""
from .adapter import AdapterBundle, AdapterTrainConfig, freeze, load_adapter, save_adapter, train_adapter, transfer_view
from .data import (DatasetManifest, DilutionSpec, StyleShift, SynthSceneConfig, dilute, format_transform,
                   load_manifest, load_pairs, synth_generate)
from .encoder import ClipSpec, ClippedEncoder, ResUNetEncoder, clip_encoder, encode
from .estimators import ChangeDetector, DomainAdapter, SSLChangePretrainer
from .exceptions import (ArchitectureError, ConfigurationError, DataError, ShapeError, SSLChangeError,
                         StageMismatchError, StateError, TrainingDivergedError)
from .finetune import ChangeDetectionNet, FinetuneConfig, FusionSpec, finetune
from .head import HierarchicalContrastiveHead, channel_loss, neg_cos, spatial_loss, total_loss
from .metrics import ConfusionCounts, Metrics, accumulate, compute_metrics
from .pipeline import RunConfig, load_config, reproduce_ablation, run_pipeline
from .pretrain import PretrainConfig, SSLChangeModel, collapse_monitor, pretrain

__version__ = "0.1.0"
