"""Domain-robust atypical mitosis classification on a toy ViT.

Deep visual prompt tuning and LoRA adaptation of a frozen backbone, a
gradient-reversal scanner-domain branch, Macenko/Vahadane stain
normalisation and D4 x stain test-time augmentation.
"""
from .kernels import BACKEND

__version__ = "0.1.0"
__all__ = ["BACKEND", "__version__"]
