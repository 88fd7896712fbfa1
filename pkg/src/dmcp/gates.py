"""Architecture parameters and the per-layer Markov retention chain.

A gate covers ``num_groups`` contiguous channel groups of one layer (or of
several layers sharing it). Group 1 is always kept; group ``k`` is kept
given group ``k-1`` with probability ``sigmoid(alpha[k-2])``. The marginal
retention probability of group ``k`` is the running product of those
transition probabilities, and it is what scales the activations in the
fused network.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor import ShapeError, Tensor, _record, channel_scale, repeat, sigmoid_np

DEFAULT_INIT_PROB = 0.9
DEFAULT_INIT_NOISE = 0.1


class GateMode(str, enum.Enum):
    MARKOV = "markov"
    BERNOULLI = "bernoulli"


@dataclass
class GateParams:
    """Architecture parameters of one gate.

    ``alpha`` holds one logit per group beyond the first (length G-1).
    """

    num_groups: int
    group_size: int
    alpha: Tensor = field(default=None)  # type: ignore[assignment]
    mode: GateMode = GateMode.MARKOV

    def __post_init__(self):
        if self.num_groups < 1 or self.group_size < 1:
            raise ValueError(f"gate needs num_groups>=1 and group_size>=1, got {self.num_groups}, {self.group_size}")
        if self.alpha is None:
            self.alpha = Tensor(np.zeros(self.num_groups - 1), requires_grad=True)
        elif not isinstance(self.alpha, Tensor):
            self.alpha = Tensor(self.alpha, requires_grad=True)
        if self.alpha.shape != (self.num_groups - 1,):
            raise ShapeError(f"alpha must have length {self.num_groups - 1}, got {self.alpha.shape}")
        self.mode = GateMode(self.mode)

    @property
    def channels(self) -> int:
        return self.num_groups * self.group_size

    def set_alpha(self, values) -> None:
        self.alpha.data[...] = np.asarray(values, dtype=np.float64)


def init_gate(
    num_groups: int,
    group_size: int,
    rng: np.random.Generator,
    init_prob: float = DEFAULT_INIT_PROB,
    noise: float = DEFAULT_INIT_NOISE,
    mode: GateMode = GateMode.MARKOV,
) -> GateParams:
    """Gate whose transitions start near ``init_prob`` (logit + uniform noise).

    Bernoulli gates get keep probabilities equal to the Markov marginals of the
    same draw, so both modes start from identical expected widths.
    """
    base = math.log(init_prob / (1.0 - init_prob))
    alpha = base + rng.uniform(-noise, noise, size=num_groups - 1)
    if GateMode(mode) is GateMode.BERNOULLI:
        m = np.clip(np.cumprod(sigmoid_np(alpha)), 1e-9, 1 - 1e-9)
        alpha = np.log(m / (1.0 - m))
    return GateParams(num_groups, group_size, Tensor(alpha, requires_grad=True), mode)


def transition_probs(g: GateParams) -> np.ndarray:
    """[1, sigmoid(alpha_2), ..., sigmoid(alpha_G)]."""
    return np.concatenate([[1.0], sigmoid_np(g.alpha.data)])


def marginal_probs(g: GateParams) -> np.ndarray:
    """Retention probability of every group under the chain."""
    if g.mode is GateMode.BERNOULLI:
        return bernoulli_marginals(g)
    return np.cumprod(transition_probs(g))


def bernoulli_marginals(g: GateParams) -> np.ndarray:
    """Independent per-group keep probabilities; group 1 always kept."""
    if g.mode is not GateMode.BERNOULLI:
        raise ValueError("bernoulli_marginals called on a Markov-mode gate")
    return np.concatenate([[1.0], sigmoid_np(g.alpha.data)])


def marginals(g: GateParams) -> Tensor:
    """Tape-recorded marginals, differentiable w.r.t. ``g.alpha``.

    Markov backward uses the closed form: with ``p_j = sigmoid(alpha_j)``,
    ``dm_k/dalpha_j = m_k (1 - p_j)`` for ``2 <= j <= k`` and 0 for ``j > k``.
    """
    p = transition_probs(g)
    if g.mode is GateMode.BERNOULLI:
        out = Tensor(p.copy())

        def rule(grad):
            return (grad[1:] * p[1:] * (1.0 - p[1:]),)

        return _record(out, (g.alpha,), rule)

    m = np.cumprod(p)
    out = Tensor(m)

    def rule(grad):
        # d/dalpha_j sum_k grad_k m_k = (1 - p_j) * sum_{k>=j} grad_k m_k
        tail = np.cumsum((grad * m)[::-1])[::-1]
        return (tail[1:] * (1.0 - p[1:]),)

    return _record(out, (g.alpha,), rule)


def fuse(x: Tensor, g: GateParams) -> Tensor:
    """Scale each channel group of a post-BN activation by its marginal."""
    if x.data.ndim < 2 or x.shape[1] != g.channels:
        raise ShapeError(f"fuse: activation has {x.shape[1] if x.data.ndim > 1 else '?'} channels, gate covers {g.channels}")
    return channel_scale(x, repeat(marginals(g), g.group_size))


def run_markov_sampling(g: GateParams, rng: np.random.Generator, size: Optional[int] = None):
    """Simulate the retention chain and return the number of kept groups.

    With ``size`` given, returns an int array of ``size`` independent draws.
    """
    p = transition_probs(g)
    if size is None:
        kept = 1
        while kept < g.num_groups and rng.random() < p[kept]:
            kept += 1
        return kept
    u = rng.random((size, g.num_groups - 1))
    alive = np.cumprod(u < p[1:], axis=1)
    return 1 + alive.sum(axis=1).astype(np.int64)


def bernoulli_sample(g: GateParams, rng: np.random.Generator, size: Optional[int] = None) -> np.ndarray:
    """Independent keep/drop per group; returns bool mask(s) of length G."""
    m = bernoulli_marginals(g)
    shape = (g.num_groups,) if size is None else (size, g.num_groups)
    mask = rng.random(shape) < m
    mask[..., 0] = True
    return mask


def retain_distribution(g: GateParams) -> np.ndarray:
    """P(exactly k groups kept), k = 1..G, for a Markov gate."""
    p = np.concatenate([transition_probs(g), [0.0]])
    m = np.cumprod(p[:-1])
    return m * (1.0 - p[1:])
