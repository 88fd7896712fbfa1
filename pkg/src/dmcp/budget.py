"""Expected-FLOPs accounting and the stage losses.

FLOPs are multiply-accumulate counts. A layer costs
``out_channels * in_channels / groups * out_h * out_w * k * k``; under the
gate distribution the channel counts are replaced by their expectations,
which keeps the cost differentiable in the architecture parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
import numpy as np

from . import tensor as T
from .gates import GateParams, marginal_probs, marginals
from .netdef import LayerShape, NetworkSpec
from .tensor import Tensor

DEFAULT_GAMMA = 0.95
DEFAULT_LAMBDA_REG = 0.1


@dataclass
class BudgetConfig:
    flops_target: float
    gamma: float = DEFAULT_GAMMA
    lambda_reg: float = DEFAULT_LAMBDA_REG

    def __post_init__(self):
        if not self.flops_target > 0:
            raise ValueError(f"flops_target must be positive, got {self.flops_target}")
        if not 0 < self.gamma < 1:
            raise ValueError(f"gamma must lie in (0, 1), got {self.gamma}")
        if self.lambda_reg < 0:
            raise ValueError(f"lambda_reg must be >= 0, got {self.lambda_reg}")

    @property
    def window(self) -> tuple:
        return self.gamma * self.flops_target, self.flops_target


def expected_channels(g: GateParams) -> Tensor:
    """group_size * sum of marginals, as a tape scalar."""
    return T.tsum(marginals(g)) * float(g.group_size)


def channel_op(shape: LayerShape, literal: bool = False) -> float:
    """Per in/out channel pair cost: output positions times kernel area.

    ``literal`` uses a single spatial factor ``(S_I + S_P - S_K)/stride + 1``
    instead of the squared output extent with padding on both sides.
    """
    k2 = shape.kernel * shape.kernel
    if literal:
        return ((shape.spatial_in + shape.padding - shape.kernel) / shape.stride + 1) * k2
    return shape.spatial_out * shape.spatial_out * k2


def _mul(a, b):
    if isinstance(a, Tensor) and isinstance(b, Tensor):
        return T.mul(a, b)
    if isinstance(a, Tensor):
        return a * float(b)
    if isinstance(b, Tensor):
        return b * float(a)
    return Tensor(float(a) * float(b))


def expected_layer_flops(shape: LayerShape, e_in, e_out, literal: bool = False) -> Tensor:
    """Expected cost of one layer; depthwise layers use groups = e_in.

    ``e_in``/``e_out`` may be tape scalars or plain numbers (fixed widths).
    """
    op = channel_op(shape, literal)
    if shape.groups_mode == "depthwise":
        return _mul(e_out, op)
    return _mul(_mul(e_out, e_in), op)


def expected_network_flops(net: NetworkSpec, gates: dict, literal: bool = False) -> Tensor:
    """Sum of expected layer costs over every conv and the linear head."""
    e = {g: expected_channels(gates[g]) for g in net.gate_info}
    total = None
    for layer in net.compute_layers:
        e_in = e[layer.in_gate] if layer.in_gate is not None else layer.shape.max_in_channels
        e_out = e[layer.out_gate] if layer.out_gate is not None else layer.shape.max_out_channels
        term = expected_layer_flops(layer.shape, e_in, e_out, literal)
        total = term if total is None else total + term
    return total


def layer_flops(shape: LayerShape, c_in: int, c_out: int) -> int:
    """Exact MAC count at integer channel widths."""
    op = shape.spatial_out * shape.spatial_out * shape.kernel * shape.kernel
    v = c_out * op if shape.groups_mode == "depthwise" else c_out * c_in * op
    return v if isinstance(v, np.ndarray) else int(v)


def network_flops(net: NetworkSpec, channels: dict) -> int:
    """Exact MACs with ``channels[gate]`` output channels per gate.

    Channel counts may be integer arrays (one structure per entry).
    """
    total = 0
    for layer in net.compute_layers:
        c_in = channels[layer.in_gate] if layer.in_gate is not None else layer.shape.max_in_channels
        c_out = channels[layer.out_gate] if layer.out_gate is not None else layer.shape.max_out_channels
        total += layer_flops(layer.shape, c_in, c_out)
    return total


def full_flops(net: NetworkSpec) -> int:
    return network_flops(net, {g: info[0] for g, info in net.gate_info.items()})


def min_flops(net: NetworkSpec) -> int:
    return network_flops(net, {g: info[2] for g, info in net.gate_info.items()})


def budget_value(e_flops: float, cfg: BudgetConfig) -> float:
    lo, hi = cfg.window
    if lo <= e_flops <= hi:
        return 0.0
    return math.log(max(abs(e_flops - cfg.flops_target), 1.0))


def budget_loss(e_flops: Tensor, cfg: BudgetConfig) -> Tensor:
    """log|E - T| outside the window [gamma*T, T], zero inside.

    The distance is floored at 1 so the loss never goes negative; inside that
    floor (and at the window edges) the gradient is zero.
    """
    e = e_flops.item()
    out = Tensor(budget_value(e, cfg))
    lo, hi = cfg.window
    d = e - cfg.flops_target
    slope = 0.0 if (lo <= e <= hi or abs(d) <= 1.0) else 1.0 / d

    return T._record(out, (e_flops,), lambda g: (g * slope,))


def arch_loss(cls_loss: Tensor, e_flops: Tensor, cfg: BudgetConfig) -> Tensor:
    """Task loss plus lambda_reg times the budget loss."""
    if cfg.lambda_reg == 0:
        return cls_loss
    return cls_loss + budget_loss(e_flops, cfg) * cfg.lambda_reg


def weight_loss(cls_loss: Tensor) -> Tensor:
    """Weights see only the task loss; the budget term never reaches them."""
    return cls_loss


def expected_groups(g: GateParams) -> float:
    return float(np.sum(marginal_probs(g)))
