"""
Minimal numpy autodiff: tensors, recurrent layers, Adam, gradient checks and
checkpoints.
"""
from .checkpoint import load_checkpoint, save_checkpoint
from .gradcheck import grad_check
from .layers import Embedding, GRUCell, Linear, Module, RecurrentStack, pad_sequences, rnn_embed
from .optim import Adam
from .tensor import Parameter, Tensor, graph_parameters, no_grad

__all__ = [
    "Adam",
    "Embedding",
    "GRUCell",
    "Linear",
    "Module",
    "Parameter",
    "RecurrentStack",
    "Tensor",
    "grad_check",
    "graph_parameters",
    "load_checkpoint",
    "no_grad",
    "pad_sequences",
    "rnn_embed",
    "save_checkpoint",
]
