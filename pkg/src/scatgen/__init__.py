"""Generative scattering networks.

Images are embedded with a fixed two-layer wavelet scattering transform
followed by a whitening projection, and a convolutional generator is trained
to invert that embedding.
"""

from .data import generate_polygon5, split_manifest
from .embedding import embed, fit_whitening
from .scattering import scatter
from .tensor_nn import forward, init_generator
from .training import TrainConfig, train
from .wavelet_bank import build_filter_bank

__version__ = "0.1.0"

__all__ = [
    "TrainConfig",
    "build_filter_bank",
    "embed",
    "fit_whitening",
    "forward",
    "generate_polygon5",
    "init_generator",
    "scatter",
    "split_manifest",
    "train",
]
