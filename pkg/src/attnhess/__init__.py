"""Exact loss Hessians of single-layer self-attention, checked against finite differences."""

from .estimator import AttentionHessian
from .hessian import (
    HessianBlock,
    HessianGrid,
    TDecomposition,
    assemble,
    batch_mean,
    functional_block,
    linear_blocks,
    multihead_assemble,
    outer_block,
    single_matrix_block,
    t_decompose,
    temperature_prefactors,
)
from .model import AttentionSpec, Head, Sequence, forward, init_spec, total_loss
from .oracle import compare, fd_hessian, fd_jacobian

__all__ = [
    "AttentionHessian", "AttentionSpec", "Head", "HessianBlock", "HessianGrid", "Sequence",
    "TDecomposition", "assemble", "batch_mean", "compare", "fd_hessian", "fd_jacobian", "forward",
    "functional_block", "init_spec", "linear_blocks", "multihead_assemble", "outer_block",
    "single_matrix_block", "t_decompose", "temperature_prefactors", "total_loss",
]
__version__ = "0.1.0"
