"""
Neural layers built on the autodiff Tensor: Linear, Embedding, a gated
recurrent cell and the stacked recurrent embedding shared by every model.
"""
import logging
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from ..errors import ContractViolation, NetworkLookupError
from .tensor import Parameter, Tensor, add, gather_rows, gru_cell, matmul, stack

logger = logging.getLogger(__name__)


def uniform_init(rng: np.random.Generator, fan_in: int, shape: Tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Module:
    """
    Base class tracking Parameters and sub-Modules in attribute order.

    Parameter names are dotted attribute paths, e.g. "stack.cells.0.w_h".
    """

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{name}.{i}.")

    def parameters(self) -> Dict[str, Parameter]:
        return dict(self.named_parameters())

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: Dict[str, np.ndarray]):
        """Copy arrays into parameters; names and shapes must match exactly"""
        own = self.parameters()
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ContractViolation(f"state mismatch: missing {missing[:5]}, unexpected {extra[:5]}")
        for name, p in own.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ContractViolation(f"{name}: expected shape {p.shape}, got {value.shape}")
            p.data = value.copy()

    def num_parameters(self) -> int:
        return int(sum(p.data.size for p in self.parameters().values()))


class Linear(Module):
    """y = x W + b"""

    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        self.weight = Parameter(uniform_init(rng, in_features, (in_features, out_features)))
        self.bias = Parameter(np.zeros(out_features))

    def __call__(self, x: Tensor) -> Tensor:
        return add(matmul(x, self.weight), self.bias)


class Embedding(Module):
    """Token embedding table, treated as a linear map of one-hot inputs"""

    def __init__(self, num_tokens: int, dim: int, rng: np.random.Generator):
        self.num_tokens = num_tokens
        self.table = Parameter(uniform_init(rng, num_tokens, (num_tokens, dim)))

    def __call__(self, tokens: np.ndarray) -> Tensor:
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.num_tokens):
            bad = tokens[(tokens < 0) | (tokens >= self.num_tokens)][0]
            raise NetworkLookupError(f"Unknown token index {int(bad)} (alphabet has {self.num_tokens})")
        return gather_rows(self.table, tokens)


class GRUCell(Module):
    """
    Gated recurrent cell with reset (r), update (z) and candidate (n) blocks.

    Weights are stored as combined blocks: w_i [in x 3H], w_h [H x 3H]. The
    step itself is one fused graph node (tensor.gru_cell).
    h' = (1 - z) * n + z * h
    """

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator):
        self.hidden_size = hidden_size
        self.w_i = Parameter(uniform_init(rng, input_size, (input_size, 3 * hidden_size)))
        self.w_h = Parameter(uniform_init(rng, hidden_size, (hidden_size, 3 * hidden_size)))
        self.b_i = Parameter(np.zeros(3 * hidden_size))
        self.b_h = Parameter(np.zeros(3 * hidden_size))

    def __call__(self, x: Tensor, h: Tensor, keep: Optional[np.ndarray] = None) -> Tensor:
        return gru_cell(x, h, self.w_i, self.w_h, self.b_i, self.b_h, keep=keep)


class RecurrentStack(Module):
    """
    Token embedding followed by num_layers stacked GRU cells.

    Batches are right-padded; a step only updates the hidden state of rows
    whose sequence is still running, so padding never changes a row's state.
    """

    def __init__(
        self,
        num_tokens: int,
        hidden_size: int,
        num_layers: int,
        rng: np.random.Generator,
        pad_token: Optional[int] = None,
    ):
        if hidden_size < 1 or num_layers < 1:
            raise ContractViolation(f"hidden_size and num_layers must be >= 1, got {hidden_size}, {num_layers}")
        self.num_tokens = num_tokens
        self.hidden_size = hidden_size
        self.num_layers = num_layers
        self.pad_token = num_tokens - 1 if pad_token is None else pad_token
        self.embedding = Embedding(num_tokens, hidden_size, rng)
        self.cells = [GRUCell(hidden_size, hidden_size, rng) for _ in range(num_layers)]

    def initial_state(self, batch: int) -> List[Tensor]:
        return [Tensor(np.zeros((batch, self.hidden_size))) for _ in range(self.num_layers)]

    def step(self, tokens: np.ndarray, state: List[Tensor], active: Optional[np.ndarray] = None) -> List[Tensor]:
        """
        Advance every layer by one token.

        Args:
            tokens: [B] token indices
            state: per-layer [B x H] hidden states
            active: [B] bool; inactive rows keep their state

        Returns:
            New per-layer states; the last entry is the top-layer belief
        """
        x = self.embedding(tokens)
        keep = None
        if active is not None and not np.all(active):
            keep = np.asarray(active, dtype=np.float64)
        new_state = []
        for cell, h in zip(self.cells, state):
            x = cell(x, h, keep=keep)
            new_state.append(x)
        return new_state

    def run(self, tokens: np.ndarray, lengths: Sequence[int]) -> Tensor:
        """
        Top-layer hidden state after every step.

        Args:
            tokens: [B x T] right-padded token indices
            lengths: [B] true lengths (>= 1)

        Returns:
            Tensor [B x T x H]; entry (b, t) is the belief after tokens[b, :t+1]
            (steps past a row's length repeat its final state)
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        lengths = np.asarray(lengths, dtype=np.int64)
        if tokens.ndim != 2 or lengths.shape != (tokens.shape[0],):
            raise ContractViolation(f"run: tokens {tokens.shape} with lengths {lengths.shape}")
        if tokens.shape[0] == 0 or (lengths < 1).any() or (lengths > tokens.shape[1]).any():
            raise ContractViolation("run: sequences must be non-empty and fit the padded width")
        state = self.initial_state(tokens.shape[0])
        outputs = []
        for t in range(tokens.shape[1]):
            state = self.step(tokens[:, t], state, active=lengths > t)
            outputs.append(state[-1])
        return stack(outputs, axis=1)

    def embed(self, tokens: np.ndarray, lengths: Sequence[int]) -> Tensor:
        """Final top-layer belief [B x H]"""
        tokens = np.asarray(tokens, dtype=np.int64)
        return self.run(tokens, lengths)[:, tokens.shape[1] - 1, :]


def pad_sequences(sequences: Sequence[Sequence[int]], pad_token: int) -> Tuple[np.ndarray, np.ndarray]:
    """Right-pad token sequences into [B x T] plus their lengths"""
    lengths = np.array([len(s) for s in sequences], dtype=np.int64)
    if len(sequences) == 0 or (lengths < 1).any():
        raise ContractViolation("pad_sequences needs non-empty sequences")
    tokens = np.full((len(sequences), int(lengths.max())), pad_token, dtype=np.int64)
    for i, seq in enumerate(sequences):
        tokens[i, : len(seq)] = seq
    return tokens, lengths


def rnn_embed(stack: RecurrentStack, sequences: Sequence[Sequence[int]]) -> Tensor:
    """Belief states [B x H] of a batch of token sequences"""
    tokens, lengths = pad_sequences(sequences, stack.pad_token)
    return stack.embed(tokens, lengths)
