"""Knowledge selection and alignment for CTR recommenders."""
from .data import (FeatureSchema, FieldSpec, Sample, SampleSet, binarize_rating, build_history, convert_movielens_1m,
                   chronological_split, load_interactions, prepare)
from .knowledge import KnowledgePack, assemble_knowledge, chunk, load_pack, unchunk, write_pack
from .model import CTRModel, ModelConfig, load_checkpoint, save_checkpoint
from .synthetic import SyntheticSpec, gen_synthetic_dataset
from .training import (MetricsReport, TrainConfig, compute_auc, compute_logloss, improvement,
                       train_all_params, train_base, train_extractor_only)

__version__ = "0.1.0"
