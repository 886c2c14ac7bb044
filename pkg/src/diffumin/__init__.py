"""Multi-interest CTR model with orthogonal interest extraction, a conditional
diffusion interest generator and a contrastive calibrator, built on a small
numpy autodiff core."""

from .data import GeneratorConfig
from .harness import ablate, evaluate, train
from .metrics import auc, rela_impr
from .model import VARIANTS, DiffuMIN, ModelConfig, load_checkpoint, save_checkpoint

__all__ = ["GeneratorConfig", "ModelConfig", "DiffuMIN", "VARIANTS", "train", "evaluate",
           "ablate", "auc", "rela_impr", "save_checkpoint", "load_checkpoint"]
