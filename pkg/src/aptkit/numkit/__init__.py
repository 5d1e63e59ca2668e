from .flops import FlopCounter, count_flops
from .io import (
    FormatError,
    matrix_from_bytes,
    matrix_from_csv,
    matrix_to_bytes,
    matrix_to_csv,
    load_tensors,
    read_matrix,
    save_tensors,
    write_matrix,
)
from .ops import (
    ShapeError,
    add,
    argmax_flat,
    as_matrix,
    concat_rows,
    exp,
    global_max,
    matmul,
    mul,
    numerical_rank,
    relu,
    row_max,
    scale,
    softmax_rows,
    sub,
    transpose,
)

__all__ = [
    "FlopCounter",
    "FormatError",
    "ShapeError",
    "add",
    "argmax_flat",
    "as_matrix",
    "concat_rows",
    "count_flops",
    "exp",
    "global_max",
    "matmul",
    "matrix_from_bytes",
    "matrix_from_csv",
    "matrix_to_bytes",
    "matrix_to_csv",
    "mul",
    "numerical_rank",
    "load_tensors",
    "read_matrix",
    "save_tensors",
    "relu",
    "row_max",
    "scale",
    "softmax_rows",
    "sub",
    "transpose",
    "write_matrix",
]
