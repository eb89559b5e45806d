"""
Comparison generators: Mobility Markov Chain, behaviour-cloning RNN and
Maximum-Entropy IRL (SVF and SAVF).
"""
from .bcrnn import BcRnnModel, bc_rnn_generate, bc_rnn_train
from .maxent import MaxEntModel, maxent_generate, maxent_train
from .mmc import MmcModel, mmc_fit, mmc_generate

__all__ = [
    "BcRnnModel",
    "MaxEntModel",
    "MmcModel",
    "bc_rnn_generate",
    "bc_rnn_train",
    "maxent_generate",
    "maxent_train",
    "mmc_fit",
    "mmc_generate",
]
