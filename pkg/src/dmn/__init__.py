"""Density matrix networks.

Convolutional filters taken from the eigenvectors of per-class patch
second-moment matrices, the backprop ConvNet they are compared with, and
diagnostics of spectra and SGD dynamics.
"""
from ._accel import backend_name, numba_enabled, set_numba, use_numba
from .builder import DmnLayer, SelectionPolicy, build_first_layer, build_next_layer, propagate, select_filters
from .config import RunConfig, ResultRecord, parse_architecture, parse_config
from .datasets import ImageBatch, SplitSpec, load_cifar, load_mnist, load_mnist_dir, subsample
from .density import TOTAL, DensityAccumulator, eigenvalue_convergence, fluctuation_series
from .diagnostics import emit_figure_csv, layer_convergence, norm_ratio_probe, relaxation_probe
from .errors import (DimensionError, DivergenceError, EmptySelectionError, FormatError,
                     InsufficientStatisticsError, NumericalError)
from .linalg import Spectrum, matmul, symmetric_eig
from .nets import (ConvNetBaseline, DenseHead, TrainConfig, conv_backprop_step, cross_entropy_loss,
                   softmax, softmax_grad, train_convnet, train_head)
from .patching import conv_forward, extract_patches, im2col, maxpool2

__version__ = "0.1.0"
