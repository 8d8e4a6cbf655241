"""Multi-task spatio-temporal forecasting with hybrid static/dynamic graphs.

Modules: ``numeric`` (tensor helpers and a finite-difference checker),
``graph`` (static prior), ``ctke`` (shared dynamic adjacency), ``hamg``
(task-gated hybrid adjacency), ``gstgc`` (group-wise graph convolution),
``model`` (network, loss, metrics), ``data`` (loading, windowing, synthetic
series), ``training`` and ``checkpoint``.  ``cli`` is the batch front end.
"""
from .config import Dims, LossConfig, ModelConfig, TrainConfig, VARIANTS
from .errors import ConfigError, DGSTMTLError, DimensionError, InputError, LoadError, NumericError
from .model import DGSTMTL

__version__ = "0.1.0"

__all__ = [
    "DGSTMTL", "Dims", "LossConfig", "ModelConfig", "TrainConfig", "VARIANTS",
    "DGSTMTLError", "ConfigError", "DimensionError", "InputError", "LoadError", "NumericError",
]
