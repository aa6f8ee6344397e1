"""Dense retrieval with latent thinking tokens, trained by self-distillation
from an explicit reasoning view, on a from-scratch numpy transformer."""

__version__ = "0.1.0"
