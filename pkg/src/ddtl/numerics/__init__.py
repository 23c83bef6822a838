from .optim import NonFiniteGradient, OptimState, step
from .tensor import (
    ShapeError,
    Tensor,
    add,
    as_tensor,
    backward,
    clamp_min,
    concat,
    conv2d,
    dense,
    dropout,
    exp,
    graph_ops,
    log,
    logsumexp,
    matmul,
    maxpool2,
    mean,
    mul,
    parameter,
    pick,
    relu,
    reshape,
    sigmoid,
    softmax,
    sq_dists,
    sqrt,
    square,
    sub,
    sum_axis,
    take_rows,
    tsum,
    upsample2,
    zero_grads,
)
