"""Temporal smoothing of sequence embeddings with a Gaussian random-walk prior.

Submodules: ``tensor`` (reverse-mode autodiff), ``grw`` (the loss),
``adapters`` (where the loss attaches), ``scale_lab`` (1-D minimizer study),
``synthgen`` (rotating-body clips), ``trainer`` and ``cli``.
"""

from .grw import GrwConfig, LossBreakdown, smooth_loss, total_loss
from .tensor import Tape, Tensor, grad_check

__all__ = ["GrwConfig", "LossBreakdown", "Tape", "Tensor", "grad_check", "smooth_loss", "total_loss"]
__version__ = "0.1.0"
