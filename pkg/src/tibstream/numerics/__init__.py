from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .gradcheck import grad_check
from .optim import Adam, AdamState, adam_step
from .tensor import (
    NumericError,
    ShapeError,
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    concat,
    cross_entropy,
    custom_op,
    dropout,
    embedding,
    expand,
    is_grad_enabled,
    layer_norm,
    log_softmax,
    masked_softmax,
    matmul,
    mean,
    mul,
    no_grad,
    relu,
    reshape,
    scale,
    sigmoid,
    slice_,
    sum_,
    tanh,
    transpose,
)
