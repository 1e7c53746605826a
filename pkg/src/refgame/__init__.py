"""Speaker/listener referential game with a differentiable alignment penalty."""

from .config import ExperimentConfig, paper_params
from .game import Trainer

__version__ = "0.1.0"
__all__ = ["ExperimentConfig", "Trainer", "paper_params", "__version__"]
