"""Visual perturbation-aware collaborative learning for VQA on a synthetic prior-shift benchmark."""
from .estimator import PerturbationAwareVQA, check_split
from .synth import Dataset, SynthConfig, generate
from .training import TrainConfig, evaluate, train

__all__ = ["PerturbationAwareVQA", "check_split", "Dataset", "SynthConfig", "generate", "TrainConfig",
           "evaluate", "train"]
__version__ = "0.1.0"
