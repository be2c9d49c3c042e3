"""Class-incremental learning on streams with emerging and vanishing classes."""
from .data import Dataset, Standardizer, gen_synthetic, load_csv, load_idx, parse_csv, parse_idx
from .detector import DetectionConfig, PacingConfig, WeightingConfig, estimate_classes
from .encoder import EncoderConfig, EncoderModel, forward, init_model, load_checkpoint, save_checkpoint
from .errors import CILFError
from .losses import LossConfig
from .optim import OptimizerConfig, sgd_nesterov_step
from .pipeline import RunConfig, run_pipeline, run_seed
from .prototypes import PrototypeSet
from .stream import build_manifest, next_window, query_labels
from .training import train_initial
from .updater import MemoryBuffer, incremental_update

__version__ = "0.1.0"
