"""Two-stage training: sandwich-rule weight updates and gate updates.

Stage 1 trains the shared weights on four sub-networks per batch (largest,
smallest and chain-sampled random widths) with accumulated gradients.
Stage 2 trains only the architecture parameters through the fused network
against task loss plus the budget term. Warmup runs stage 1 alone.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .budget import BudgetConfig, arch_loss, budget_loss, budget_value, expected_network_flops, weight_loss
from .data import Dataset, batches
from .gates import GateMode, bernoulli_sample, run_markov_sampling
from .netdef import (
    NetworkSpec,
    SubStructure,
    forward_fused,
    forward_full,
    forward_sliced,
    init_gates,
    init_params,
    max_sub,
    min_sub,
)

logger = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    """Raised when a loss becomes non-finite."""


@dataclass
class TrainConfig:
    warmup_epochs: int = 5
    total_epochs: int = 30
    batch_size: int = 64
    lr_init: float = 0.1
    lr_final: float = 0.01
    arch_lr_init: Optional[float] = 1.0  # None: follow lr_init/lr_final
    arch_lr_final: Optional[float] = 0.02
    weight_decay: float = 1e-4
    momentum: float = 0.9
    arch_momentum: Optional[float] = 0.5  # None: same as momentum
    arch_grad_clip: Optional[float] = 1.0  # global L2 norm cap on the alpha gradient
    num_random_archs: int = 2
    alternation_period: int = 1
    budget: BudgetConfig = field(default_factory=lambda: BudgetConfig(flops_target=1.0))
    gate_mode: str = "markov"
    init_prob: float = 0.9
    init_noise: float = 0.1
    update_weights: bool = True  # stage 1 after warmup
    arch_task_loss: bool = True
    arch_budget_loss: bool = True
    literal_flops: bool = False
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.budget, dict):
            self.budget = BudgetConfig(**self.budget)
        GateMode(self.gate_mode)
        if not 0 <= self.warmup_epochs <= self.total_epochs:
            raise ValueError("need 0 <= warmup_epochs <= total_epochs")
        if self.num_random_archs < 0 or self.alternation_period < 1 or self.batch_size < 1:
            raise ValueError("num_random_archs >= 0, alternation_period >= 1, batch_size >= 1 required")

    def to_dict(self) -> dict:
        return asdict(self)


def imagenet_preset(flops_target: float, **overrides) -> TrainConfig:
    """The ImageNet schedule constants, for reference runs at larger scale."""
    kw = dict(warmup_epochs=20, total_epochs=40, batch_size=1024, lr_init=0.2, lr_final=0.02,
              arch_lr_init=None, arch_lr_final=None, arch_momentum=None, arch_grad_clip=None,
              budget=BudgetConfig(flops_target, gamma=0.95, lambda_reg=0.1))
    kw.update(overrides)
    return TrainConfig(**kw)


class SGD:
    """Momentum SGD with optional L2 weight decay."""

    def __init__(self, params: list, lr: float, momentum: float = 0.9, weight_decay: float = 0.0,
                 grad_clip: Optional[float] = None):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.grad_clip = grad_clip
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        factor = 1.0
        if self.grad_clip is not None:
            norm = math.sqrt(sum(float((p.grad**2).sum()) for p in self.params if p.grad is not None))
            if norm > self.grad_clip:
                factor = self.grad_clip / norm
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad * factor if factor != 1.0 else p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= self.lr * v

    def state_arrays(self) -> list:
        return self.velocity

    def load_state_arrays(self, arrays) -> None:
        for v, a in zip(self.velocity, arrays):
            v[...] = a


def cosine_lr(lr_init: float, lr_final: float, progress: float) -> float:
    progress = min(max(progress, 0.0), 1.0)
    return lr_final + 0.5 * (lr_init - lr_final) * (1.0 + math.cos(math.pi * progress))


@dataclass
class TrainState:
    net: NetworkSpec
    params: dict
    buffers: dict
    gates: dict
    weight_opt: SGD
    arch_opt: SGD
    rng: np.random.Generator
    epoch: int = 0
    iteration: int = 0
    history: list = field(default_factory=list)

    @property
    def weights(self) -> list:
        return list(self.params.values())

    @property
    def alphas(self) -> list:
        return [g.alpha for g in self.gates.values()]


def init_state(net: NetworkSpec, cfg: TrainConfig, params=None, buffers=None) -> TrainState:
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params, buffers = init_params(net, rng)
    gates = init_gates(net, rng, mode=cfg.gate_mode, init_prob=cfg.init_prob, noise=cfg.init_noise)
    weight_opt = SGD(list(params.values()), cfg.lr_init, cfg.momentum, cfg.weight_decay)
    # architecture parameters never get weight decay
    arch_momentum = cfg.momentum if cfg.arch_momentum is None else cfg.arch_momentum
    arch_opt = SGD([g.alpha for g in gates.values()], _arch_lr(cfg, 0.0), arch_momentum, weight_decay=0.0,
                   grad_clip=cfg.arch_grad_clip)
    return TrainState(net, params, buffers, gates, weight_opt, arch_opt, rng)


def _arch_lr(cfg: TrainConfig, progress: float) -> float:
    lo = cfg.arch_lr_final if cfg.arch_lr_final is not None else cfg.lr_final
    hi = cfg.arch_lr_init if cfg.arch_lr_init is not None else cfg.lr_init
    return cosine_lr(hi, lo, progress)


def random_sub(net: NetworkSpec, gates: dict, rng: np.random.Generator) -> SubStructure:
    """Draw every gate's width independently from its own distribution."""
    counts, masks = {}, {}
    for name, g in gates.items():
        if g.mode is GateMode.BERNOULLI:
            mask = bernoulli_sample(g, rng)
            masks[name] = tuple(int(i) for i in np.flatnonzero(mask))
            counts[name] = len(masks[name])
        else:
            counts[name] = int(run_markov_sampling(g, rng))
    return SubStructure(counts, masks or None)


def _check_batch(batch) -> None:
    x, y = batch
    if len(y) == 0 or len(x) != len(y):
        raise ValueError("empty or inconsistent batch")


def sandwich_step(state: TrainState, batch, num_random_archs: int = 2) -> list:
    """One weight update from accumulated max/min/random sub-network grads."""
    _check_batch(batch)
    x, y = batch
    net = state.net
    subs = [max_sub(net), min_sub(net)]
    subs += [random_sub(net, state.gates, state.rng) for _ in range(num_random_archs)]
    state.weight_opt.zero_grad()
    losses = []
    for sub in subs:
        with T.Tape() as tape:
            loss = weight_loss(T.cross_entropy(forward_sliced(net, state.params, state.buffers, sub, x), y))
        tape.backward(loss)
        losses.append(loss.item())
    state.weight_opt.step()
    return losses


def arch_step(state: TrainState, batch, cfg: TrainConfig, bn_running: bool = False) -> tuple:
    """One architecture-parameter update through the fused network.

    Batch statistics are used in BN without touching the running buffers;
    ``bn_running`` switches to the running buffers (frozen-network runs).
    """
    _check_batch(batch)
    x, y = batch
    net = state.net
    state.arch_opt.zero_grad()
    with T.Tape() as tape:
        logits = forward_fused(net, state.params, state.buffers, state.gates, x,
                               training=not bn_running, update_stats=False)
        cls = T.cross_entropy(logits, y)
        e_flops = expected_network_flops(net, state.gates, cfg.literal_flops)
        budget = cfg.budget
        if cfg.arch_task_loss and cfg.arch_budget_loss:
            loss = arch_loss(cls, e_flops, budget)
        elif cfg.arch_budget_loss:
            loss = budget_loss(e_flops, budget) * budget.lambda_reg
        else:
            loss = cls
    tape.backward(loss)
    state.arch_opt.step()
    for p in state.weights:
        p.grad = None
    acc = float((logits.data.argmax(axis=1) == y).mean())
    return cls.item(), budget_value(e_flops.item(), budget), acc


def current_flops(state: TrainState, literal: bool = False) -> float:
    with T.no_tape():
        return expected_network_flops(state.net, state.gates, literal).item()


def iterations_per_epoch(data: Dataset, batch_size: int) -> int:
    return math.ceil(len(data.y_train) / batch_size)


def _epoch_batches(data: Dataset, cfg: TrainConfig, epoch: int):
    rng = np.random.default_rng([cfg.seed, epoch])
    for idx in batches(len(data.y_train), cfg.batch_size, rng):
        yield data.x_train[idx], data.y_train[idx]


def _stage(cfg: TrainConfig, epoch: int, iteration: int, ipe: int) -> int:
    if epoch < cfg.warmup_epochs:
        return 1
    if not cfg.update_weights:
        return 2
    j = iteration - cfg.warmup_epochs * ipe
    return 1 if (j // cfg.alternation_period) % 2 == 0 else 2


def train(
    net: NetworkSpec,
    data: Dataset,
    cfg: TrainConfig,
    state: Optional[TrainState] = None,
    on_epoch_end: Optional[Callable[[TrainState], None]] = None,
    stop_epoch: Optional[int] = None,
) -> TrainState:
    """Warmup then alternate the two stages; appends one record per batch.

    Passing a ``state`` resumes at ``state.epoch``. ``stop_epoch`` ends the
    run early (at an epoch boundary) without changing the schedule.
    """
    if state is None:
        state = init_state(net, cfg)
    ipe = iterations_per_epoch(data, cfg.batch_size)
    total = cfg.total_epochs * ipe
    end = cfg.total_epochs if stop_epoch is None else min(stop_epoch, cfg.total_epochs)
    while state.epoch < end:
        for batch in _epoch_batches(data, cfg, state.epoch):
            progress = state.iteration / total
            state.weight_opt.lr = cosine_lr(cfg.lr_init, cfg.lr_final, progress)
            state.arch_opt.lr = _arch_lr(cfg, progress)
            stage = _stage(cfg, state.epoch, state.iteration, ipe)
            if stage == 1:
                losses = sandwich_step(state, batch, cfg.num_random_archs)
                cls = losses[0]
                e_flops = current_flops(state, cfg.literal_flops)
                reg = budget_value(e_flops, cfg.budget)
                lr = state.weight_opt.lr
            else:
                cls, reg, _ = arch_step(state, batch, cfg)
                e_flops = current_flops(state, cfg.literal_flops)
                lr = state.arch_opt.lr
            if not (math.isfinite(cls) and math.isfinite(reg) and math.isfinite(e_flops)):
                raise TrainingError(
                    f"non-finite loss at iteration {state.iteration} (epoch {state.epoch}, stage {stage}): "
                    f"cls_loss={cls} budget_loss={reg} e_flops={e_flops}"
                )
            state.history.append({
                "iteration": state.iteration,
                "epoch": state.epoch,
                "stage": stage,
                "cls_loss": cls,
                "budget_loss": reg,
                "e_flops": e_flops,
                "lr": lr,
            })
            state.iteration += 1
        state.epoch += 1
        logger.info("epoch %d done: e_flops=%.0f", state.epoch, state.history[-1]["e_flops"])
        if on_epoch_end is not None:
            on_epoch_end(state)
    return state


def warmup(state: TrainState, data: Dataset, cfg: TrainConfig) -> TrainState:
    """Stage 1 only for ``cfg.warmup_epochs``; random widths follow the initial gates."""
    wcfg = TrainConfig(**{**cfg.__dict__, "total_epochs": cfg.warmup_epochs})
    return train(state.net, data, wcfg, state=state)


def evaluate(net: NetworkSpec, params: dict, buffers: dict, x, y, batch_size: int = 256) -> float:
    correct = 0
    with T.no_tape():
        for s in range(0, len(y), batch_size):
            logits = forward_full(net, params, buffers, x[s : s + batch_size], training=False)
            correct += int((logits.data.argmax(axis=1) == y[s : s + batch_size]).sum())
    return correct / len(y)


@dataclass
class PlainResult:
    params: dict
    buffers: dict
    accuracy: float
    curve: list


def train_plain(net: NetworkSpec, data: Dataset, epochs: int, cfg: TrainConfig, seed: Optional[int] = None) -> PlainResult:
    """Ordinary cross-entropy training of a fixed-width network."""
    seed = cfg.seed if seed is None else seed
    rng = np.random.default_rng(seed)
    params, buffers = init_params(net, rng)
    opt = SGD(list(params.values()), cfg.lr_init, cfg.momentum, cfg.weight_decay)
    ipe = iterations_per_epoch(data, cfg.batch_size)
    total = max(epochs * ipe, 1)
    it = 0
    curve = []
    for epoch in range(epochs):
        losses = []
        for idx in batches(len(data.y_train), cfg.batch_size, np.random.default_rng([seed, epoch])):
            opt.lr = cosine_lr(cfg.lr_init, cfg.lr_final, it / total)
            opt.zero_grad()
            with T.Tape() as tape:
                loss = T.cross_entropy(forward_full(net, params, buffers, data.x_train[idx]), data.y_train[idx])
            tape.backward(loss)
            opt.step()
            losses.append(loss.item())
            it += 1
        if not np.isfinite(losses).all():
            raise TrainingError(f"non-finite loss in plain training at epoch {epoch}")
        curve.append({"epoch": epoch, "loss": float(np.mean(losses)),
                      "eval_acc": evaluate(net, params, buffers, data.x_eval, data.y_eval)})
    acc = curve[-1]["eval_acc"] if curve else evaluate(net, params, buffers, data.x_eval, data.y_eval)
    return PlainResult(params, buffers, acc, curve)


def train_pruned_from_scratch(sub: SubStructure, net: NetworkSpec, data: Dataset, cfg: TrainConfig,
                              epochs: Optional[int] = None) -> PlainResult:
    """Fresh weights at the sub-structure's widths, plain training, eval accuracy."""
    pruned = net.pruned(sub)
    return train_plain(pruned, data, cfg.total_epochs if epochs is None else epochs, cfg)


def recoverability_run(
    net: NetworkSpec,
    params: dict,
    buffers: dict,
    data: Dataset,
    cfg: TrainConfig,
    iterations: int,
) -> list:
    """Gate-only training on frozen pretrained weights with task loss alone.

    The gate learning rate is held at its initial value for the whole run.
    Returns per-iteration records of expected FLOPs and batch accuracy.
    """
    rcfg = TrainConfig(**{**cfg.__dict__, "arch_budget_loss": False, "arch_task_loss": True})
    state = init_state(net, rcfg, params=params, buffers=buffers)
    lr = _arch_lr(rcfg, 0.0)
    history = []
    epoch = 0
    while len(history) < iterations:
        for batch in _epoch_batches(data, rcfg, epoch):
            if len(history) >= iterations:
                break
            state.arch_opt.lr = lr
            cls, _, acc = arch_step(state, batch, rcfg, bn_running=True)
            history.append({"iteration": len(history), "cls_loss": cls, "train_acc": acc,
                            "e_flops": current_flops(state, rcfg.literal_flops)})
        epoch += 1
    return history
