"""Dense tensors, the reverse-mode tape, the optimizer, and verification tools."""

from .checkpoint import CheckpointError, load_blocks, save_blocks
from .gradcheck import GradCheckReport, grad_check
from .optim import Adam, NumericAbort, ParamSet
from .tensor import (
    DimensionError,
    DomainError,
    EmptyInputError,
    Graph,
    GraphError,
    Tensor,
    add,
    add_const,
    attn_mix,
    bmm_nt,
    clip,
    concat_cols,
    concat_rows,
    constant,
    current_graph,
    exp,
    gather_rows,
    layer_norm,
    log,
    matmul,
    mul,
    mul_rows,
    powc,
    reduce_max,
    reduce_mean,
    reduce_sum,
    relu,
    reshape,
    scale,
    scatter_rows,
    segment_max,
    sigmoid,
    slice_cols,
    softmax_rows,
    sub,
    transpose,
)

__all__ = [
    "Adam",
    "CheckpointError",
    "DimensionError",
    "DomainError",
    "EmptyInputError",
    "GradCheckReport",
    "Graph",
    "GraphError",
    "NumericAbort",
    "ParamSet",
    "Tensor",
    "add",
    "add_const",
    "attn_mix",
    "bmm_nt",
    "clip",
    "concat_cols",
    "concat_rows",
    "constant",
    "current_graph",
    "exp",
    "gather_rows",
    "grad_check",
    "layer_norm",
    "load_blocks",
    "log",
    "matmul",
    "mul",
    "mul_rows",
    "powc",
    "reduce_max",
    "reduce_mean",
    "reduce_sum",
    "relu",
    "reshape",
    "save_blocks",
    "scale",
    "scatter_rows",
    "segment_max",
    "sigmoid",
    "slice_cols",
    "softmax_rows",
    "sub",
    "transpose",
]
