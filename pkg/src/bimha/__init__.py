"""Bimodal multi-head attention fusion network for video sentiment analysis.

Pipeline: unimodal encoders (LSTM for text, three-layer DNNs for audio and
video) -> pairwise outer-product fusion with private/shared projections ->
bimodal multi-head attention with a residual merge -> three-layer predictor.
Everything runs on a small numpy-backed reverse-mode autodiff engine.
"""

from .tensor import Tape, Tensor, backward

__all__ = ["Tape", "Tensor", "backward"]
__version__ = "0.1.0"
