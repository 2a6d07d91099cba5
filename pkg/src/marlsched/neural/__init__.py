from .checkpoint import CheckpointError, load_arrays, save_arrays
from .layers import Dense, EccLayer, GraphIndex, dense_forward, ecc_aggregate, ecc_update
from .optim import Adam, adam_step
from .tensor import NoFeasibleAction, Tensor, masked_log_softmax, masked_softmax, no_grad

__all__ = [
    "Adam",
    "CheckpointError",
    "Dense",
    "EccLayer",
    "GraphIndex",
    "NoFeasibleAction",
    "Tensor",
    "adam_step",
    "dense_forward",
    "ecc_aggregate",
    "ecc_update",
    "load_arrays",
    "masked_log_softmax",
    "masked_softmax",
    "no_grad",
    "save_arrays",
]
