"""Multi-view imputation, adversarial refinement and attention fusion for incomplete longitudinal cohorts."""
from .data import Batch, Cohort, SubjectRecord, load_cohort, normalize, with_split, write_cohort
from .model import ModelConfig, forward, init_params
from .synth import SynthConfig, generate_cohort
from .training import TrainConfig, train

__all__ = [
    "Batch", "Cohort", "ModelConfig", "SubjectRecord", "SynthConfig", "TrainConfig",
    "forward", "generate_cohort", "init_params", "load_cohort", "normalize", "train",
    "with_split", "write_cohort",
]
__version__ = "0.1.0"
