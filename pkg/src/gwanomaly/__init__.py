"""Gravitational-wave anomaly detection with a residual-difference 1-D CNN."""
from .autodiff import DiffArray, Tape, backward, finite_diff_check
from .augment import AugmentPlan, augment_class, augment_dataset, average_signals, merge_augmented
from .dataio import (LabeledDataset, SplitSpec, SynthConfig, batches, generate_synthetic, load_manifest,
                     read_gwad, split, write_gwad)
from .errors import (ConfigError, CorruptCheckpointError, CorruptFileError, DomainError, FormatError,
                     GWError, NumericsError, ShapeError, UndefinedMetricError)
from .metrics import EvalReport, build_report, confusion, cross_entropy, pairwise_auc, roc_auc, tnr
from .model import Model, ModelCheckpoint, ModelConfig, build_model, load_checkpoint, save_checkpoint
from .optim import EarlyStopper, NAdam, PlateauScheduler
from .trainer import TrainConfig, TrainHistory, evaluate, train

__version__ = "0.1.0"
