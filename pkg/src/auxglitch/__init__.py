"""Sparse 1D-convolutional classifiers for many-channel time series.

Library + CLI for training and evaluating binary event classifiers that
look at hundreds of mostly irrelevant time-series channels, with group
elastic-net channel selection and a ladder of architectures from fixed
features to deep conv nets.
"""

from .models import ArchitectureSpec, ModelParams, build, forward, output_shape


__all__ = [
    "ArchitectureSpec",
    "ModelParams",

    "build",

    "forward",

    "output_shape",

]

__version__ = "0.1.0"
