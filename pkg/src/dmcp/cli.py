"""Command-line entry point: make-data, train, sample, report, retrain.

Every command writes its outputs under ``--out``. Failures exit nonzero and
print one line ``dmcp-error {json}`` to stderr with ``type``, ``message``
and, for config problems, the offending ``field``.
"""

from __future__ import annotations

import argparse
import dataclasses
import io
import json
import logging
import os
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from .budget import BudgetConfig, expected_network_flops, full_flops, min_flops
from .data import Dataset, make_synthetic_dataset
from .gates import GateMode
from .netdef import REFERENCE_NETS, NetworkSpec, NetworkSpecError, build_network, check_sub, max_sub
from .sampler import (
    DEFAULT_DS_ATTEMPTS,
    DEFAULT_DS_COUNT,
    DEFAULT_HIST_SAMPLES,
    SamplingExhausted,
    channel_csv,
    channel_histograms,
    direct_sample,
    expected_sample,
    export_structure,
    flops_histogram,
    flops_of,
    histogram_csv,
    import_structure,
)
from .trainer import TrainConfig, TrainingError, TrainState, init_state, train, train_pruned_from_scratch

logger = logging.getLogger("dmcp")

CHECKPOINT_VERSION = 1
CHECKPOINT_NAME = "checkpoint.npz"
HISTORY_NAME = "history.jsonl"


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name
        self.message = message


# ---------------------------------------------------------------------------
# configuration


@dataclass
class DataConfig:
    path: Optional[str] = None  # dataset .npz written by make-data; None: generate
    seed: int = 0
    classes: int = 8
    samples: int = 1536
    size: int = 12
    channels: int = 3
    noise: float = 1.2


@dataclass
class SampleConfig:
    ds_count: int = DEFAULT_DS_COUNT
    ds_attempts: int = DEFAULT_DS_ATTEMPTS
    round_down: bool = False
    report_samples: int = DEFAULT_HIST_SAMPLES


@dataclass
class RunConfig:
    network: str = "residual3"  # reference net name or path to a network document
    data: DataConfig = field(default_factory=DataConfig)
    train: dict = field(default_factory=dict)  # TrainConfig fields except budget/seed/gate_mode
    flops_target: Optional[float] = None  # absolute MACs; wins over target_fraction
    target_fraction: float = 0.5
    gamma: float = 0.95
    lambda_reg: float = 0.1
    gate_mode: str = "markov"
    retrain_epochs: Optional[int] = None
    sample: SampleConfig = field(default_factory=SampleConfig)
    seed: int = 0
    out: str = "runs/default"

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _build(cls, doc: dict, prefix: str):
    if not isinstance(doc, dict):
        raise ConfigError(prefix.rstrip(".") or "<root>", f"expected a mapping, got {type(doc).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    kw = {}
    for key, value in doc.items():
        if key not in names:
            raise ConfigError(prefix + key, f"unknown field (allowed: {', '.join(sorted(names))})")
        if key == "data":
            value = _build(DataConfig, value or {}, prefix + "data.")
        elif key == "sample":
            value = _build(SampleConfig, value or {}, prefix + "sample.")
        kw[key] = value
    return cls(**kw)


def load_run_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError("--config", f"file not found: {path}")
    try:
        doc = yaml.safe_load(p.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError("--config", f"not valid YAML: {exc}") from exc
    return _build(RunConfig, doc, "")


def apply_overrides(cfg: RunConfig, args) -> RunConfig:
    for flag, attr in [("seed", "seed"), ("out", "out"), ("target_flops", "flops_target"), ("gamma", "gamma"),
                       ("lambda_reg", "lambda_reg"), ("gate_mode", "gate_mode")]:
        value = getattr(args, flag, None)
        if value is not None:
            setattr(cfg, attr, value)
    return cfg


def resolve_network(cfg: RunConfig) -> NetworkSpec:
    if cfg.network not in REFERENCE_NETS and not Path(cfg.network).exists():
        raise ConfigError("network", f"not a reference net ({', '.join(sorted(REFERENCE_NETS))}) or existing file")
    try:
        return build_network(cfg.network)
    except NetworkSpecError as exc:
        raise ConfigError("network", str(exc)) from exc
    except (KeyError, TypeError, yaml.YAMLError) as exc:
        raise ConfigError("network", f"malformed network document: {exc}") from exc


def resolve_budget(cfg: RunConfig, net: NetworkSpec) -> BudgetConfig:
    target = cfg.flops_target
    if target is None:
        if not 0 < cfg.target_fraction:
            raise ConfigError("target_fraction", "must be positive")
        target = cfg.target_fraction * full_flops(net)
    try:
        budget = BudgetConfig(float(target), float(cfg.gamma), float(cfg.lambda_reg))
    except ValueError as exc:
        name = "flops_target" if "flops_target" in str(exc) else ("gamma" if "gamma" in str(exc) else "lambda_reg")
        raise ConfigError(name, str(exc)) from exc
    if budget.flops_target < min_flops(net):
        logger.warning("flops target %.0f is below the smallest structure (%d MACs); the budget is infeasible",
                       budget.flops_target, min_flops(net))
    return budget


def resolve_train_config(cfg: RunConfig, net: NetworkSpec) -> TrainConfig:
    allowed = {f.name for f in dataclasses.fields(TrainConfig)} - {"budget", "seed", "gate_mode"}
    for key in cfg.train:
        if key not in allowed:
            raise ConfigError(f"train.{key}", f"unknown field (allowed: {', '.join(sorted(allowed))})")
    try:
        GateMode(cfg.gate_mode)
    except ValueError as exc:
        raise ConfigError("gate_mode", "must be 'markov' or 'bernoulli'") from exc
    try:
        return TrainConfig(**cfg.train, budget=resolve_budget(cfg, net), seed=int(cfg.seed), gate_mode=cfg.gate_mode)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("train", str(exc)) from exc


def resolve_data(cfg: RunConfig) -> Dataset:
    d = cfg.data
    if d.path is not None:
        if not Path(d.path).exists():
            raise ConfigError("data.path", f"dataset file not found: {d.path}")
        return Dataset.load(d.path)
    try:
        return make_synthetic_dataset(seed=d.seed, classes=d.classes, samples=d.samples, size=d.size,
                                      channels=d.channels, noise=d.noise)
    except ValueError as exc:
        raise ConfigError("data", str(exc)) from exc


def check_data_matches(net: NetworkSpec, data: Dataset) -> None:
    expect = (net.in_channels, net.input_size, net.input_size)
    if tuple(data.image_shape) != expect:
        raise ConfigError("data", f"images have shape {tuple(data.image_shape)}, network expects {expect}")
    if data.num_classes > net.num_classes:
        raise ConfigError("data", f"{data.num_classes} classes but the network has {net.num_classes} outputs")


# ---------------------------------------------------------------------------
# files


def atomic_write_bytes(path: Path, payload: bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def write_history(path: Path, history: list) -> None:
    atomic_write_text(path, "".join(json.dumps(r) + "\n" for r in history))


def read_history(path: Path) -> list:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def save_checkpoint(path: Path, state: TrainState, run: RunConfig, cfg: TrainConfig) -> None:
    """Weights, buffers, alphas, optimizer velocities, RNG and counters in one npz."""
    arrays = {}
    for k, p in state.params.items():
        arrays[f"param/{k}"] = p.data
    for k, b in state.buffers.items():
        arrays[f"buffer/{k}"] = b
    for g, gp in state.gates.items():
        arrays[f"alpha/{g}"] = gp.alpha.data
    for i, v in enumerate(state.weight_opt.state_arrays()):
        arrays[f"wopt/{i}"] = v
    for i, v in enumerate(state.arch_opt.state_arrays()):
        arrays[f"aopt/{i}"] = v
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "run": run.to_dict(),
        "train": cfg.to_dict(),
        "network": state.net.to_dict(),
        "gate_modes": {g: gp.mode.value for g, gp in state.gates.items()},
        "epoch": state.epoch,
        "iteration": state.iteration,
        "rng": state.rng.bit_generator.state,
        "history": state.history,
    }
    arrays["meta"] = np.array(json.dumps(meta))
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    atomic_write_bytes(path, buf.getvalue())


@dataclass
class Checkpoint:
    state: TrainState
    run: RunConfig
    train: TrainConfig
    meta: dict


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise ConfigError("checkpoint", f"file not found: {path}")
    with np.load(path) as z:
        meta = json.loads(str(z["meta"]))
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ConfigError("checkpoint", f"unsupported format version {meta.get('format_version')}")
        arrays = {k: z[k] for k in z.files if k != "meta"}
    net = NetworkSpec.from_dict(meta["network"])
    run = _build(RunConfig, meta["run"], "")
    cfg = TrainConfig(**meta["train"])
    state = init_state(net, cfg)
    for k, p in state.params.items():
        p.data[...] = arrays[f"param/{k}"]
    for k in state.buffers:
        state.buffers[k][...] = arrays[f"buffer/{k}"]
    for g, gp in state.gates.items():
        gp.set_alpha(arrays[f"alpha/{g}"])
    state.weight_opt.load_state_arrays([arrays[f"wopt/{i}"] for i in range(len(state.weight_opt.params))])
    state.arch_opt.load_state_arrays([arrays[f"aopt/{i}"] for i in range(len(state.arch_opt.params))])
    state.rng.bit_generator.state = meta["rng"]
    state.epoch, state.iteration = meta["epoch"], meta["iteration"]
    state.history = meta["history"]
    return Checkpoint(state, run, cfg, meta)


# ---------------------------------------------------------------------------
# commands


def _out_dir(run: RunConfig) -> Path:
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _checkpoint_path(args, run: RunConfig) -> Path:
    return Path(args.checkpoint) if getattr(args, "checkpoint", None) else Path(run.out) / CHECKPOINT_NAME


def _budget_for(args, ck: Checkpoint) -> BudgetConfig:
    b = ck.train.budget
    return BudgetConfig(
        float(args.target_flops) if args.target_flops is not None else b.flops_target,
        float(args.gamma) if args.gamma is not None else b.gamma,
        float(args.lambda_reg) if args.lambda_reg is not None else b.lambda_reg,
    )


def _write_json(path: Path, doc: dict) -> None:
    atomic_write_text(path, json.dumps(doc, indent=2) + "\n")


def cmd_make_data(args) -> dict:
    run = apply_overrides(load_run_config(args.config), args)
    if args.seed is not None:
        run.data.seed = args.seed
    if args.n is not None:
        run.data.samples = args.n
    run.data.path = None
    data = resolve_data(run)
    out = _out_dir(run)
    buf = io.BytesIO()
    np.savez(buf, x_train=data.x_train, y_train=data.y_train, x_eval=data.x_eval, y_eval=data.y_eval)
    atomic_write_bytes(out / "dataset.npz", buf.getvalue())
    summary = {"path": str(out / "dataset.npz"), "train": int(len(data.y_train)), "eval": int(len(data.y_eval)),
               "classes": data.num_classes, "image_shape": list(data.image_shape)}
    _write_json(out / "dataset.json", summary)
    return summary


def cmd_train(args) -> dict:
    run = apply_overrides(load_run_config(args.config), args)
    net = resolve_network(run)
    cfg = resolve_train_config(run, net)
    data = resolve_data(run)
    check_data_matches(net, data)
    out = _out_dir(run)
    ck_path = out / CHECKPOINT_NAME
    state = None
    if args.resume and ck_path.exists():
        ck = load_checkpoint(ck_path)
        if ck.train.to_dict() != cfg.to_dict():
            raise ConfigError("--resume", "checkpoint was written with a different training config")
        state = ck.state
        logger.info("resuming at epoch %d", state.epoch)

    def on_epoch_end(s: TrainState) -> None:
        save_checkpoint(ck_path, s, run, cfg)
        write_history(out / HISTORY_NAME, s.history)

    state = train(net, data, cfg, state=state, on_epoch_end=on_epoch_end, stop_epoch=args.stop_epoch)
    save_checkpoint(ck_path, state, run, cfg)
    write_history(out / HISTORY_NAME, state.history)
    es = expected_sample(state.gates, net)
    final = expected_network_flops(net, state.gates, cfg.literal_flops).item()
    lo, hi = cfg.budget.window
    summary = {
        "epochs": state.epoch,
        "iterations": state.iteration,
        "flops_target": cfg.budget.flops_target,
        "window": [lo, hi],
        "full_flops": full_flops(net),
        "final_e_flops": final,
        "in_window": bool(lo <= final <= hi),
        "es_structure": es.retained_groups,
        "es_flops": flops_of(es, net),
    }
    if not summary["in_window"] and state.epoch >= cfg.total_epochs:
        logger.warning("final expected FLOPs %.4g outside [%.4g, %.4g]; try more epochs or a larger lambda_reg",
                       final, lo, hi)
    _write_json(out / "train_summary.json", summary)
    return summary


def cmd_sample(args) -> dict:
    run = apply_overrides(load_run_config(args.config), args)
    ck = load_checkpoint(_checkpoint_path(args, run))
    net, gates = ck.state.net, ck.state.gates
    out = _out_dir(run)
    budget = _budget_for(args, ck)
    written = []
    if args.mode == "es":
        sub = expected_sample(gates, net, round_down=args.round_down or run.sample.round_down)
        subs = [sub]
        names = ["structure_es.yaml"]
    else:
        rng = np.random.default_rng(run.seed if args.seed is None else args.seed)
        count = args.n if args.n is not None else run.sample.ds_count
        subs = direct_sample(gates, net, budget, rng, count=count, max_attempts=run.sample.ds_attempts)
        names = [f"structure_ds_{i}.yaml" for i in range(len(subs))]
    for sub, name in zip(subs, names):
        atomic_write_text(out / name, export_structure(sub, net))
        written.append({"path": str(out / name), "flops": flops_of(sub, net), "retained_groups": sub.retained_groups})
    summary = {"mode": args.mode, "flops_target": budget.flops_target, "window": list(budget.window),
               "structures": written}
    _write_json(out / f"sample_{args.mode}.json", summary)
    return summary


def cmd_report(args) -> dict:
    run = apply_overrides(load_run_config(args.config), args)
    ck = load_checkpoint(_checkpoint_path(args, run))
    net, gates = ck.state.net, ck.state.gates
    out = _out_dir(run)
    n = args.n if args.n is not None else run.sample.report_samples
    seed = run.seed if args.seed is None else args.seed
    hist = flops_histogram(gates, net, n=n, rng=np.random.default_rng(seed))
    expected = expected_network_flops(net, gates).item()
    atomic_write_text(out / "flops_histogram.csv", histogram_csv(hist, expected=expected))
    tables = channel_histograms(gates, net, n=n, rng=np.random.default_rng([seed, 1]))
    atomic_write_text(out / "channel_histograms.csv", channel_csv(tables))
    target = _budget_for(args, ck).flops_target
    summary = {
        "samples": n,
        "mean_flops": hist.mean,
        "std_flops": hist.std,
        "expected_flops": expected,
        "flops_target": target,
        "mean_over_target": hist.mean / target,
        "mean_over_expected": hist.mean / expected,
    }
    _write_json(out / "report_summary.json", summary)
    lines = [f"{k}: {v}" for k, v in summary.items()]
    atomic_write_text(out / "report_summary.txt", "\n".join(lines) + "\n")
    return summary


def cmd_retrain(args) -> dict:
    run = apply_overrides(load_run_config(args.config), args)
    if args.structure:
        net = resolve_network(run)
        sub, doc = import_structure(Path(args.structure))
        if doc.get("network") not in (None, net.name):
            raise ConfigError("--structure", f"structure is for network {doc.get('network')!r}, config names {net.name!r}")
        try:
            check_sub(net, sub)
        except NetworkSpecError as exc:
            names = {g: m for g, m in net.residual_groups.items()}
            raise ConfigError("--structure", f"{exc} (gates control layers {names})") from exc
        cfg = resolve_train_config(run, net)
    else:
        ck = load_checkpoint(_checkpoint_path(args, run))
        net = ck.state.net
        sub = expected_sample(ck.state.gates, net)
        cfg = ck.train
        if args.seed is not None:
            cfg = TrainConfig(**{**cfg.__dict__, "seed": args.seed})
    data = resolve_data(run)
    check_data_matches(net, data)
    epochs = run.retrain_epochs if run.retrain_epochs is not None else cfg.total_epochs
    res = train_pruned_from_scratch(sub, net, data, cfg, epochs=epochs)
    out = _out_dir(run)
    report = {
        "accuracy": res.accuracy,
        "flops": flops_of(sub, net),
        "full_flops": full_flops(net),
        "retained_groups": sub.retained_groups,
        "epochs": epochs,
        "is_max": sub.retained_groups == max_sub(net).retained_groups,
        "curve": res.curve,
    }
    _write_json(out / "retrain.json", report)
    return report


COMMANDS = {
    "make-data": cmd_make_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "report": cmd_report,
    "retrain": cmd_retrain,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dmcp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML run config")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--target-flops", type=float, dest="target_flops", help="FLOPs target in MACs")
        p.add_argument("--gamma", type=float)
        p.add_argument("--lambda-reg", type=float, dest="lambda_reg")
        p.add_argument("--gate-mode", choices=[m.value for m in GateMode], dest="gate_mode")
        p.add_argument("--n", type=int, help="samples (make-data, report) or DS structure count (sample)")
        p.add_argument("--mode", choices=["es", "ds"], default="es")
        p.add_argument("--checkpoint", help="checkpoint path (default: OUT/checkpoint.npz)")
        p.add_argument("--structure", help="structure document to retrain")
        p.add_argument("--round-down", action="store_true", dest="round_down")
        p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint.npz")
        p.add_argument("--stop-epoch", type=int, dest="stop_epoch", help="stop early at this epoch")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _fail(kind: str, message: str, **extra) -> int:
    print("dmcp-error " + json.dumps({"type": kind, "message": message, **extra}), file=sys.stderr)
    return 2 if kind == "ConfigError" else 1


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        result = COMMANDS[args.command](args)
    except ConfigError as exc:
        return _fail("ConfigError", exc.message, field=exc.field)
    except TrainingError as exc:
        return _fail("TrainingError", str(exc))
    except SamplingExhausted as exc:
        f = exc.flops
        return _fail("SamplingExhausted", str(exc), draws=int(len(f)), flops_min=int(f.min()),
                     flops_mean=float(f.mean()), flops_max=int(f.max()))
    except NetworkSpecError as exc:
        return _fail("NetworkSpecError", str(exc))
    print(json.dumps(result, default=_jsonable))
    return 0


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    raise TypeError(f"not serializable: {type(x).__name__}")


if __name__ == "__main__":
    sys.exit(main())
