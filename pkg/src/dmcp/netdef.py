"""Declarative networks: validation, parameters, and the three forward modes.

A network is a list of nodes. ``conv`` nodes are Conv-BN(-fuse)(-ReLU)
blocks, ``add`` nodes join two earlier nodes element-wise (identity
shortcuts), ``pool`` is global average pooling and the single ``linear``
head comes last. Every non-depthwise conv names the gate that controls its
output width; layers whose outputs are summed must name the same gate.
Depthwise convs inherit the gate of their input.
"""

from __future__ import annotations

import copy
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import tensor as T
from .gates import GateParams, fuse
from .tensor import Tensor

MIN_GROUPS = 10
IMAGE = "__image__"


class NetworkSpecError(ValueError):
    """A network description violates a structural invariant."""


@dataclass(frozen=True)
class LayerShape:
    spatial_in: int
    kernel: int
    padding: int
    stride: int
    groups_mode: str  # "normal" | "depthwise"
    max_in_channels: int
    max_out_channels: int

    @property
    def spatial_out(self) -> int:
        return (self.spatial_in + 2 * self.padding - self.kernel) // self.stride + 1


@dataclass(frozen=True)
class Node:
    name: str
    kind: str  # conv | add | pool | linear
    inputs: tuple = ()
    out_channels: int = 0
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    depthwise: bool = False
    gate: Optional[str] = None
    relu: bool = True


@dataclass(frozen=True)
class ComputeLayer:
    """A conv or linear layer with its shape and channel sources."""

    name: str
    shape: LayerShape
    in_gate: Optional[str]  # None: image input (never pruned)
    out_gate: Optional[str]  # None: classifier output (never pruned)


@dataclass
class NetworkSpec:
    name: str
    in_channels: int
    input_size: int
    num_classes: int
    nodes: list
    num_groups: int = MIN_GROUPS
    gate_groups: dict = field(default_factory=dict)

    def __post_init__(self):
        self._compiled = None

    # -- construction ------------------------------------------------------

    @classmethod
    def from_dict(cls, doc: dict) -> "NetworkSpec":
        nodes = []
        prev = IMAGE
        for i, raw in enumerate(doc["layers"]):
            raw = dict(raw)
            kind = raw.pop("type")
            name = raw.pop("name", f"{kind}{i}")
            inputs = raw.pop("inputs", None)
            if inputs is None:
                inputs = [raw.pop("input")] if "input" in raw else [prev]
            else:
                raw.pop("input", None)
            if kind == "conv":
                raw.setdefault("padding", raw.get("kernel", 3) // 2)
            nodes.append(Node(name=name, kind=kind, inputs=tuple(inputs), **raw))
            prev = name
        return cls(
            name=doc.get("name", "net"),
            in_channels=int(doc["in_channels"]),
            input_size=int(doc["input_size"]),
            num_classes=int(doc["num_classes"]),
            nodes=nodes,
            num_groups=int(doc.get("num_groups", MIN_GROUPS)),
            gate_groups=dict(doc.get("gate_groups", {})),
        )

    def to_dict(self) -> dict:
        layers = []
        for n in self.nodes:
            d = {"type": n.kind, "name": n.name, "inputs": list(n.inputs)}
            if n.kind == "conv":
                d.update(out_channels=n.out_channels, kernel=n.kernel, stride=n.stride,
                         padding=n.padding, depthwise=n.depthwise, gate=n.gate, relu=n.relu)
            elif n.kind == "add":
                d["relu"] = n.relu
            layers.append(d)
        return {
            "name": self.name,
            "in_channels": self.in_channels,
            "input_size": self.input_size,
            "num_classes": self.num_classes,
            "num_groups": self.num_groups,
            "gate_groups": dict(self.gate_groups),
            "layers": layers,
        }

    @classmethod
    def load(cls, path) -> "NetworkSpec":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh))

    def dump(self, path) -> None:
        Path(path).write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))

    # -- derived structure ---------------------------------------------------

    @property
    def compiled(self):
        if self._compiled is None:
            self._compiled = validate(self)
        return self._compiled

    @property
    def compute_layers(self) -> list:
        return self.compiled["layers"]

    @property
    def gate_info(self) -> dict:
        """gate -> (channels, num_groups, group_size)."""
        return self.compiled["gates"]

    @property
    def residual_groups(self) -> dict:
        """gate -> names of conv layers whose output width it controls."""
        return self.compiled["members"]

    def pruned(self, sub: "SubStructure") -> "NetworkSpec":
        """Standalone network with each gate's width cut to ``sub``."""
        check_sub(self, sub)
        nodes = []
        for n in self.nodes:
            if n.kind == "conv" and not n.depthwise:
                _, _, gs = self.gate_info[n.gate]
                n = Node(**{**n.__dict__, "out_channels": sub.retained_groups[n.gate] * gs})
            nodes.append(n)
        pruned = NetworkSpec(
            name=f"{self.name}-pruned",
            in_channels=self.in_channels,
            input_size=self.input_size,
            num_classes=self.num_classes,
            nodes=nodes,
            num_groups=self.num_groups,
            gate_groups={g: sub.retained_groups[g] for g in self.gate_info},
        )
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            pruned.compiled
        return pruned


@dataclass
class SubStructure:
    """Retained group count per gate; ``group_masks`` only for non-prefix draws."""

    retained_groups: dict
    group_masks: Optional[dict] = None

    def channels(self, net: NetworkSpec) -> dict:
        return {g: self.retained_groups[g] * net.gate_info[g][2] for g in net.gate_info}

    def is_prefix(self) -> bool:
        if not self.group_masks:
            return True
        return all(tuple(m) == tuple(range(len(m))) for m in self.group_masks.values())


def max_sub(net: NetworkSpec) -> SubStructure:
    return SubStructure({g: info[1] for g, info in net.gate_info.items()})


def min_sub(net: NetworkSpec) -> SubStructure:
    return SubStructure({g: 1 for g in net.gate_info})


def check_sub(net: NetworkSpec, sub: SubStructure) -> None:
    gates = net.gate_info
    if set(sub.retained_groups) != set(gates):
        missing = sorted(set(gates) - set(sub.retained_groups))
        extra = sorted(set(sub.retained_groups) - set(gates))
        raise NetworkSpecError(f"sub-structure gates mismatch: missing {missing}, unknown {extra}")
    for g, k in sub.retained_groups.items():
        G = gates[g][1]
        if not 1 <= int(k) <= G:
            raise NetworkSpecError(f"gate {g!r}: retained groups {k} outside [1, {G}]")
        if sub.group_masks and g in sub.group_masks:
            mask = sub.group_masks[g]
            if len(mask) != k or any(not 0 <= i < G for i in mask) or 0 not in mask:
                raise NetworkSpecError(f"gate {g!r}: bad group mask {mask}")


def validate(net: NetworkSpec) -> dict:
    """Check structural invariants and propagate shapes end to end."""
    errors = []
    spatial = {IMAGE: net.input_size}
    chans = {IMAGE: net.in_channels}
    src_gate = {IMAGE: None}
    layers = []
    gates: dict = {}
    members: dict = {}
    index = {}
    seen_linear = False
    for i, n in enumerate(net.nodes):
        if n.name in spatial or n.name == IMAGE:
            errors.append(f"layer {i} ({n.name}): duplicate name")
            continue
        missing = [s for s in n.inputs if s not in spatial]
        if missing or not n.inputs:
            errors.append(f"layer {i} ({n.name}): inputs {missing or '[]'} have no producer before it")
            continue
        if seen_linear:
            errors.append(f"layer {i} ({n.name}): nothing may follow the linear head")
        src = n.inputs[0]
        if n.kind == "conv":
            if n.kernel < 1 or n.stride < 1 or n.padding < 0:
                errors.append(f"layer {i} ({n.name}): kernel/stride must be positive, padding >= 0")
                continue
            if n.kernel > spatial[src] + 2 * n.padding:
                errors.append(f"layer {i} ({n.name}): kernel {n.kernel} exceeds padded input {spatial[src]}")
                continue
            if n.depthwise:
                gate, cout = src_gate[src], chans[src]
                if n.out_channels not in (0, cout):
                    errors.append(f"layer {i} ({n.name}): depthwise out_channels {n.out_channels} != in {cout}")
                if gate is None:
                    errors.append(f"layer {i} ({n.name}): depthwise conv directly on the image is not prunable")
            else:
                gate, cout = n.gate, n.out_channels
                if gate is None or cout < 1:
                    errors.append(f"layer {i} ({n.name}): prunable conv needs a gate and out_channels >= 1")
                    continue
                members.setdefault(gate, []).append((i, n.name, cout))
            shape = LayerShape(spatial[src], n.kernel, n.padding, n.stride,
                               "depthwise" if n.depthwise else "normal", chans[src], cout)
            layers.append(ComputeLayer(n.name, shape, src_gate[src], gate))
            spatial[n.name] = shape.spatial_out
            chans[n.name], src_gate[n.name] = cout, gate
        elif n.kind == "add":
            if len(n.inputs) != 2:
                errors.append(f"layer {i} ({n.name}): add joins exactly two inputs")
                continue
            a, b = n.inputs
            if src_gate[a] != src_gate[b] or src_gate[a] is None:
                errors.append(
                    f"layer {i} ({n.name}): element-wise sum of {a!r} (gate {src_gate[a]}) and "
                    f"{b!r} (gate {src_gate[b]}) requires one shared gate"
                )
            if spatial[a] != spatial[b] or chans[a] != chans[b]:
                errors.append(f"layer {i} ({n.name}): shapes of {a!r} and {b!r} differ")
            spatial[n.name], chans[n.name], src_gate[n.name] = spatial[a], chans[a], src_gate[a]
        elif n.kind == "pool":
            spatial[n.name], chans[n.name], src_gate[n.name] = 1, chans[src], src_gate[src]
        elif n.kind == "linear":
            if spatial[src] != 1:
                errors.append(f"layer {i} ({n.name}): linear head needs pooled (1x1) input")
            shape = LayerShape(1, 1, 0, 1, "normal", chans[src], net.num_classes)
            layers.append(ComputeLayer(n.name, shape, src_gate[src], None))
            spatial[n.name], chans[n.name], src_gate[n.name] = 1, net.num_classes, None
            seen_linear = True
        else:
            errors.append(f"layer {i} ({n.name}): unknown layer type {n.kind!r}")
            continue
        index[n.name] = i
    if not seen_linear and not errors:
        errors.append("network has no linear head")
    for gate, mem in members.items():
        widths = {c for _, _, c in mem}
        if len(widths) > 1:
            desc = ", ".join(f"layer {i} ({nm}) has {c}" for i, nm, c in mem)
            errors.append(f"residual group {gate!r}: mismatched channel counts: {desc}")
            continue
        cout = widths.pop()
        G = int(net.gate_groups.get(gate, min(net.num_groups, cout)))
        if G < 1 or cout % G:
            errors.append(f"gate {gate!r}: {cout} channels not divisible into {G} groups")
            continue
        if G < MIN_GROUPS and cout >= MIN_GROUPS:
            warnings.warn(f"gate {gate!r}: {G} groups on a {cout}-channel layer (fewer than {MIN_GROUPS})")
        gates[gate] = (cout, G, cout // G)
    if errors:
        raise NetworkSpecError("; ".join(errors))
    return {"layers": layers, "gates": gates, "members": {g: [nm for _, nm, _ in m] for g, m in members.items()}}


# ---------------------------------------------------------------------------
# parameters


def init_params(net: NetworkSpec, rng: np.random.Generator):
    """He-normal conv/linear weights, unit BN scale; returns (params, buffers)."""
    params: dict = {}
    buffers: dict = {}
    chans = {IMAGE: net.in_channels}
    for n in net.nodes:
        src = n.inputs[0]
        if n.kind == "conv":
            cin = chans[src]
            cout = cin if n.depthwise else n.out_channels
            cin_g = 1 if n.depthwise else cin
            fan_in = cin_g * n.kernel * n.kernel
            w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(cout, cin_g, n.kernel, n.kernel))
            params[f"{n.name}.weight"] = Tensor(w, requires_grad=True, name=f"{n.name}.weight")
            params[f"{n.name}.bn.gamma"] = Tensor(np.ones(cout), requires_grad=True, name=f"{n.name}.bn.gamma")
            params[f"{n.name}.bn.beta"] = Tensor(np.zeros(cout), requires_grad=True, name=f"{n.name}.bn.beta")
            buffers[f"{n.name}.bn.running_mean"] = np.zeros(cout)
            buffers[f"{n.name}.bn.running_var"] = np.ones(cout)
            chans[n.name] = cout
        elif n.kind == "linear":
            cin = chans[src]
            bound = 1.0 / np.sqrt(cin)
            params[f"{n.name}.weight"] = Tensor(rng.uniform(-bound, bound, (net.num_classes, cin)),
                                                requires_grad=True, name=f"{n.name}.weight")
            params[f"{n.name}.bias"] = Tensor(np.zeros(net.num_classes), requires_grad=True, name=f"{n.name}.bias")
            chans[n.name] = net.num_classes
        else:
            chans[n.name] = chans[n.inputs[0]]
    return params, buffers


# ---------------------------------------------------------------------------
# forward passes


def _channel_index(net: NetworkSpec, sub: Optional[SubStructure]) -> dict:
    """gate -> channel index array, or None where the gate is kept whole."""
    out = {}
    for g, (cout, G, gs) in net.gate_info.items():
        if sub is None:
            out[g] = None
            continue
        mask = (sub.group_masks or {}).get(g)
        if mask is not None:
            idx = np.concatenate([np.arange(k * gs, (k + 1) * gs) for k in sorted(mask)])
        else:
            idx = np.arange(sub.retained_groups[g] * gs)
        out[g] = None if len(idx) == cout and np.array_equal(idx, np.arange(cout)) else idx
    return out


def _forward(net, params, buffers, x, *, sub=None, gates=None, training=True, update_stats=True):
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.data.ndim != 4 or x.shape[1:] != (net.in_channels, net.input_size, net.input_size):
        raise T.ShapeError(
            f"input shape {x.shape} does not match [N, {net.in_channels}, {net.input_size}, {net.input_size}]"
        )
    if sub is not None:
        check_sub(net, sub)
    idx = _channel_index(net, sub)
    idx[None] = None
    acts = {IMAGE: x}
    gate_of = {IMAGE: None}
    for n in net.nodes:
        h = acts[n.inputs[0]]
        if n.kind == "conv":
            in_gate = gate_of[n.inputs[0]]
            gate = in_gate if n.depthwise else n.gate
            oi, ii = idx[gate], idx[in_gate]
            w = params[f"{n.name}.weight"]
            if n.depthwise:
                if oi is not None:
                    w = T.take(w, [oi])
                groups = w.shape[0]
            else:
                if oi is not None or ii is not None:
                    w = T.take(w, [oi, ii])
                groups = 1
            h = T.conv2d(h, w, n.stride, n.padding, groups)
            gamma, beta = params[f"{n.name}.bn.gamma"], params[f"{n.name}.bn.beta"]
            rm, rv = buffers[f"{n.name}.bn.running_mean"], buffers[f"{n.name}.bn.running_var"]
            if oi is not None:
                gamma, beta = T.take(gamma, [oi]), T.take(beta, [oi])
                rm_s, rv_s = rm[oi], rv[oi]
                h = T.batch_norm(h, gamma, beta, rm_s, rv_s, training, update_stats=update_stats)
                rm[oi], rv[oi] = rm_s, rv_s
            else:
                h = T.batch_norm(h, gamma, beta, rm, rv, training, update_stats=update_stats)
            if gates is not None:
                # depthwise outputs belong to the input gate and are scaled by it again
                h = fuse(h, gates[gate])
            if n.relu:
                h = T.relu(h)
            gate_of[n.name] = gate
        elif n.kind == "add":
            h = T.add(h, acts[n.inputs[1]])
            if n.relu:
                h = T.relu(h)
            gate_of[n.name] = gate_of[n.inputs[0]]
        elif n.kind == "pool":
            h = T.global_avg_pool(h)
            gate_of[n.name] = gate_of[n.inputs[0]]
        elif n.kind == "linear":
            w = params[f"{n.name}.weight"]
            ii = idx[gate_of[n.inputs[0]]]
            if ii is not None:
                w = T.take(w, [None, ii])
            h = T.linear(h, w, params[f"{n.name}.bias"])
            gate_of[n.name] = None
        acts[n.name] = h
    return acts[net.nodes[-1].name]


def forward_full(net, params, buffers, x, training=True, update_stats=True) -> Tensor:
    """Unpruned network, every channel, no gating."""
    return _forward(net, params, buffers, x, training=training, update_stats=update_stats)


def forward_fused(net, params, buffers, gates: dict, x, training=True, update_stats=True) -> Tensor:
    """Unpruned network with each gated block's BN output scaled by its marginals."""
    missing = set(net.gate_info) - set(gates)
    if missing:
        raise NetworkSpecError(f"no GateParams for gates {sorted(missing)}")
    for g, (cout, G, gs) in net.gate_info.items():
        if (gates[g].num_groups, gates[g].group_size) != (G, gs):
            raise NetworkSpecError(f"gate {g!r}: params cover {gates[g].num_groups}x{gates[g].group_size}, net needs {G}x{gs}")
    return _forward(net, params, buffers, x, gates=gates, training=training, update_stats=update_stats)


def forward_sliced(net, params, buffers, sub: SubStructure, x, training=True, update_stats=True) -> Tensor:
    """Sub-network keeping the retained (leading) groups of every gate."""
    return _forward(net, params, buffers, x, sub=sub, training=training, update_stats=update_stats)


def init_gates(net: NetworkSpec, rng: np.random.Generator, mode="markov", **kw) -> dict:
    from .gates import init_gate

    return {g: init_gate(G, gs, rng, mode=mode, **kw) for g, (_, G, gs) in net.gate_info.items()}


def clone_params(params: dict) -> dict:
    return {k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=v.name) for k, v in params.items()}


def clone_gates(gates: dict) -> dict:
    return {g: GateParams(p.num_groups, p.group_size, Tensor(p.alpha.data.copy(), requires_grad=True), p.mode)
            for g, p in gates.items()}


# ---------------------------------------------------------------------------
# reference desk-scale architectures


def plain6(num_classes: int = 8, input_size: int = 12, in_channels: int = 3, width: int = 10) -> NetworkSpec:
    """Six Conv-BN-ReLU blocks, widths w,w,2w,2w,2w,2w with two stride-2 stages."""
    w = width
    layout = [(w, 1), (w, 1), (2 * w, 2), (2 * w, 1), (2 * w, 2), (2 * w, 1)]
    layers = [{"type": "conv", "name": f"conv{i + 1}", "out_channels": c, "kernel": 3, "stride": s,
               "gate": f"g{i + 1}"} for i, (c, s) in enumerate(layout)]
    layers += [{"type": "pool", "name": "pool"}, {"type": "linear", "name": "fc"}]
    return NetworkSpec.from_dict({"name": "plain6", "in_channels": in_channels, "input_size": input_size,
                                  "num_classes": num_classes, "layers": layers})


def residual3(num_classes: int = 8, input_size: int = 12, in_channels: int = 3, width: int = 10) -> NetworkSpec:
    """Stem plus three identity-shortcut basic blocks sharing the ``res`` gate."""
    layers = [{"type": "conv", "name": "stem", "out_channels": width, "gate": "res"}]
    prev = "stem"
    for b in range(1, 4):
        layers += [
            {"type": "conv", "name": f"b{b}.conv1", "input": prev, "out_channels": width, "gate": f"b{b}"},
            {"type": "conv", "name": f"b{b}.conv2", "out_channels": width, "gate": "res", "relu": False},
            {"type": "add", "name": f"b{b}.add", "inputs": [f"b{b}.conv2", prev]},
        ]
        prev = f"b{b}.add"
    layers += [{"type": "pool", "name": "pool"}, {"type": "linear", "name": "fc"}]
    return NetworkSpec.from_dict({"name": "residual3", "in_channels": in_channels, "input_size": input_size,
                                  "num_classes": num_classes, "layers": layers})


def dwsep(num_classes: int = 8, input_size: int = 12, in_channels: int = 3, width: int = 10) -> NetworkSpec:
    """Stem then three depthwise-3x3 / pointwise-1x1 pairs."""
    layers = [{"type": "conv", "name": "stem", "out_channels": width, "gate": "stem"}]
    widths = [(2 * width, 1), (2 * width, 2), (2 * width, 1)]
    for i, (c, s) in enumerate(widths, start=1):
        layers += [
            {"type": "conv", "name": f"dw{i}", "kernel": 3, "stride": s, "depthwise": True},
            {"type": "conv", "name": f"pw{i}", "kernel": 1, "out_channels": c, "gate": f"pw{i}"},
        ]
    layers += [{"type": "pool", "name": "pool"}, {"type": "linear", "name": "fc"}]
    return NetworkSpec.from_dict({"name": "dwsep", "in_channels": in_channels, "input_size": input_size,
                                  "num_classes": num_classes, "layers": layers})


REFERENCE_NETS = {"plain6": plain6, "residual3": residual3, "dwsep": dwsep}


def build_network(name_or_path: str, **kw) -> NetworkSpec:
    if name_or_path in REFERENCE_NETS:
        return REFERENCE_NETS[name_or_path](**kw)
    return NetworkSpec.load(name_or_path)


def copy_spec(net: NetworkSpec) -> NetworkSpec:
    return NetworkSpec.from_dict(copy.deepcopy(net.to_dict()))
