"""Turning trained gates into discrete pruned structures.

Direct Sampling draws widths from each gate's chain and keeps draws whose
exact FLOPs land in the budget window. Expected Sampling takes each gate's
expected group count. The histogram helpers produce the data behind FLOPs
and per-layer width distribution plots.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .budget import BudgetConfig, network_flops
from .gates import GateMode, bernoulli_sample, marginal_probs, retain_distribution, run_markov_sampling
from .netdef import NetworkSpec, SubStructure, check_sub

DEFAULT_DS_COUNT = 5
DEFAULT_DS_ATTEMPTS = 100_000
DEFAULT_HIST_SAMPLES = 3000


class SamplingExhausted(RuntimeError):
    """Direct Sampling found no structure inside the window."""

    def __init__(self, message: str, flops: np.ndarray):
        super().__init__(message)
        self.flops = flops


def flops_of(sub: SubStructure, net: NetworkSpec) -> int:
    """Exact MAC count of the structure."""
    check_sub(net, sub)
    return network_flops(net, sub.channels(net))


def _draw(gates: dict, rng: np.random.Generator, n: int) -> tuple:
    """n independent draws per gate: (gate -> counts, gate -> bool masks for Bernoulli gates)."""
    counts, masks = {}, {}
    for name, g in gates.items():
        if g.mode is GateMode.BERNOULLI:
            masks[name] = bernoulli_sample(g, rng, size=n)
            counts[name] = masks[name].sum(axis=1)
        else:
            counts[name] = run_markov_sampling(g, rng, size=n)
    return counts, masks


def _draw_counts(gates: dict, rng: np.random.Generator, n: int) -> dict:
    return _draw(gates, rng, n)[0]


def draw_structures(gates: dict, net: NetworkSpec, rng: np.random.Generator, n: int) -> list:
    """n SubStructures drawn from the gates (no budget window)."""
    counts, masks = _draw(gates, rng, n)
    return [_structure(counts, masks, i) for i in range(n)]


def _structure(counts: dict, masks: dict, i: int) -> SubStructure:
    m = {g: tuple(int(j) for j in np.flatnonzero(mk[i])) for g, mk in masks.items()}
    return SubStructure({g: int(c[i]) for g, c in counts.items()}, m or None)


def _vector_flops(net: NetworkSpec, counts: dict) -> np.ndarray:
    chans = {g: counts[g] * net.gate_info[g][2] for g in net.gate_info}
    return np.asarray(network_flops(net, chans), dtype=np.int64)


def direct_sample(
    gates: dict,
    net: NetworkSpec,
    cfg: BudgetConfig,
    rng: np.random.Generator,
    count: int = DEFAULT_DS_COUNT,
    max_attempts: int = DEFAULT_DS_ATTEMPTS,
    chunk: int = 1000,
) -> list:
    """Up to ``count`` chain draws whose FLOPs lie in [gamma*T, T].

    Draws are made in chunks and scanned in order, so the result is the
    first ``count`` accepted draws of the stream.
    """
    lo, hi = cfg.window
    accepted: list = []
    seen = []
    attempts = 0
    while attempts < max_attempts and len(accepted) < count:
        n = min(chunk, max_attempts - attempts)
        counts, masks = _draw(gates, rng, n)
        flops = _vector_flops(net, counts)
        seen.append(flops)
        for i in np.flatnonzero((flops >= lo) & (flops <= hi)):
            if len(accepted) >= count:
                break
            accepted.append(_structure(counts, masks, i))
        attempts += n
    if not accepted:
        allf = np.concatenate(seen)
        raise SamplingExhausted(
            f"no structure within [{lo:.0f}, {hi:.0f}] FLOPs in {attempts} draws; "
            f"sampled FLOPs min={allf.min()} mean={allf.mean():.0f} max={allf.max()}",
            allf,
        )
    return accepted


def expected_sample(gates: dict, net: NetworkSpec, round_down: bool = False) -> SubStructure:
    """Each gate keeps its expected group count, rounded half-up (or down)."""
    counts, masks = {}, {}
    for name, g in gates.items():
        m = marginal_probs(g)
        e = float(m.sum())
        k = math.floor(e + 1e-9) if round_down else math.floor(e + 0.5)
        k = min(max(k, 1), g.num_groups)
        counts[name] = k
        if g.mode is GateMode.BERNOULLI:
            # most probable groups, group 1 always first
            order = [0] + [int(i) + 1 for i in np.argsort(-m[1:], kind="stable")]
            masks[name] = tuple(sorted(order[:k]))
    sub = SubStructure(counts, masks or None)
    check_sub(net, sub)
    return sub


@dataclass
class FlopsHistogram:
    flops: np.ndarray
    mean: float
    std: float

    def bins(self, num_bins: int = 30) -> list:
        counts, edges = np.histogram(self.flops, bins=num_bins)
        return [(float(edges[i]), float(edges[i + 1]), int(c)) for i, c in enumerate(counts)]


def flops_histogram(gates: dict, net: NetworkSpec, n: int = DEFAULT_HIST_SAMPLES,
                    rng: Optional[np.random.Generator] = None) -> FlopsHistogram:
    rng = rng if rng is not None else np.random.default_rng(0)
    flops = _vector_flops(net, _draw_counts(gates, rng, n))
    return FlopsHistogram(flops, float(flops.mean()), float(flops.std()))


def channel_histograms(gates: dict, net: NetworkSpec, n: int = DEFAULT_HIST_SAMPLES,
                       rng: Optional[np.random.Generator] = None) -> dict:
    """gate -> {"counts": freq of k=1..G, "closed_form": P(k)} (Markov closed form)."""
    rng = rng if rng is not None else np.random.default_rng(0)
    draws = _draw_counts(gates, rng, n)
    out = {}
    for name, g in gates.items():
        freq = np.bincount(draws[name], minlength=g.num_groups + 1)[1:]
        closed = retain_distribution(g) if g.mode is GateMode.MARKOV else None
        out[name] = {"counts": freq, "closed_form": closed}
    return out


# ---------------------------------------------------------------------------
# documents


def export_structure(sub: SubStructure, net: NetworkSpec, path=None) -> str:
    """YAML document: per-layer widths, gate ids and total FLOPs."""
    check_sub(net, sub)
    chans = sub.channels(net)
    layers = []
    for layer in net.compute_layers:
        if layer.out_gate is None:
            continue
        layers.append({
            "name": layer.name,
            "gate": layer.out_gate,
            "retained_channels": int(chans[layer.out_gate]),
            "max_channels": int(layer.shape.max_out_channels),
        })
    doc = {
        "network": net.name,
        "flops": int(flops_of(sub, net)),
        "retained_groups": {g: int(k) for g, k in sub.retained_groups.items()},
        "layers": layers,
    }
    if sub.group_masks:
        doc["group_masks"] = {g: [int(i) for i in m] for g, m in sub.group_masks.items()}
    text = yaml.safe_dump(doc, sort_keys=False)
    if path is not None:
        Path(path).write_text(text)
    return text


def import_structure(source) -> tuple:
    """Parse an exported document (path or text); returns (SubStructure, doc)."""
    if isinstance(source, Path) or (isinstance(source, str) and "\n" not in source and Path(source).exists()):
        source = Path(source).read_text()
    doc = yaml.safe_load(source)
    masks = doc.get("group_masks")
    sub = SubStructure({g: int(k) for g, k in doc["retained_groups"].items()},
                       {g: tuple(m) for g, m in masks.items()} if masks else None)
    return sub, doc


def histogram_csv(hist: FlopsHistogram, num_bins: int = 30, expected: Optional[float] = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["bin_low", "bin_high", "count"])
    for lo, hi, c in hist.bins(num_bins):
        w.writerow([repr(lo), repr(hi), c])
    w.writerow(["summary", "mean", repr(hist.mean)])
    w.writerow(["summary", "std", repr(hist.std)])
    if expected is not None:
        w.writerow(["summary", "expected_flops", repr(expected)])
    return buf.getvalue()


def channel_csv(tables: dict) -> str:
    buf = io.StringIO()
    w = csv.writer(buf)
    w.writerow(["gate", "groups", "count", "closed_form"])
    for gate, t in tables.items():
        closed = t["closed_form"]
        for k, c in enumerate(t["counts"], start=1):
            w.writerow([gate, k, int(c), "" if closed is None else repr(float(closed[k - 1]))])
    return buf.getvalue()


def read_csv_rows(text: str) -> list:
    return list(csv.reader(io.StringIO(text)))
