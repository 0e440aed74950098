"""Desk-scale neural-operator lab built around low-rank spatial attention.

Dense float64 tensors with reverse-mode autodiff, attention and MLP
primitives, a low-rank mixing block with ablation variants, synthetic
1-d and 2-d operator-learning tasks, a small AdamW/one-cycle training
loop, and one-sided Jacobi SVD for spectral reports.
"""

import os as _os

# BLAS thread caps must be in the environment before numpy loads.
_threads = _os.environ.get("LRSA_THREADS")
if _threads:
    for _var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"

from .errors import (
    ContractError,
    ConvergenceError,
    DataError,
    DegeneracyError,
    DimensionError,
    ResourceError,
    TrainingError,
)
from .tensor import FlopCounter, Tensor, grad_check, no_grad, read_tns, write_tns
from .lrsa import (
    LRSAConfig,
    VARIANTS,
    backbone_forward,
    init_backbone_params,
    load_checkpoint,
    lrsa_block,
    save_checkpoint,
)
from .pde import OperatorDataset, PointSet, TASKS, make_dataset
from .spectral import spectral_report, svd
from .training import TrainConfig, evaluate, train

__all__ = [
    "ContractError",
    "ConvergenceError",
    "DataError",
    "DegeneracyError",
    "DimensionError",
    "FlopCounter",
    "LRSAConfig",
    "OperatorDataset",
    "PointSet",
    "ResourceError",
    "TASKS",
    "Tensor",
    "TrainConfig",
    "TrainingError",
    "VARIANTS",
    "backbone_forward",
    "evaluate",
    "grad_check",
    "init_backbone_params",
    "load_checkpoint",
    "lrsa_block",
    "make_dataset",
    "no_grad",
    "read_tns",
    "save_checkpoint",
    "spectral_report",
    "svd",
    "train",
    "write_tns",
    "__version__",
]
