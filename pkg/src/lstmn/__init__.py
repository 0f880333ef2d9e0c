"""Memory-tape recurrent sequence modeling with intra/inter attention.

The public surface mirrors the module layout: ``autodiff`` (engine),
``cells`` (recurrent steps), ``fusion`` (encoder-decoder coupling),
``heads`` (losses/metrics), ``optim`` (training mechanics), ``data``
(corpora), ``models``/``train``/``cli`` (workflows).
"""

from . import autodiff, cells, checkpoint, config, data, fusion, heads, models, optim, synthetic, train
from .autodiff import Tensor, backward, grad_check
from .config import RunConfig, build_config
from .heads import EvalMetrics

__version__ = "0.1.0"

__all__ = [
    "autodiff", "cells", "checkpoint", "config", "data", "fusion", "heads",
    "models", "optim", "synthetic", "train",
    "Tensor", "backward", "grad_check", "RunConfig", "build_config", "EvalMetrics",
]
