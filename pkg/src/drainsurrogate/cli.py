"""Command-line entry point: generate, train, evaluate, benchmark, gradcheck.

Every command writes its outputs plus a ``manifest.json`` under ``--out``.
Options resolve as command-line flag > ``--config`` JSON file > built-in default.
Exit codes: 0 success, 2 usage or validation error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import zlib
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .dataset import Dataset, DatasetError, read_dataset, write_dataset
from .graph import DrainageGraph, NetworkFormatError, NetworkValidationError, load_network, save_network
from .model import ModelConfig, ModelConfigError, gradcheck, load_checkpoint
from .networks import chain_network, large_network, tiny_network, toy_network
from .oracle import ROUTING_SUBSTEPS
from .pipeline import build_splits, read_trajectories, write_trajectories
from .scenarios import EventConfig, RunoffParams, build_event_set
from .trainer import TrainConfig, train

log = logging.getLogger("drainsurrogate")

BUILTIN_NETWORKS = {
    "toy": lambda: toy_network(0),
    "chain": lambda: chain_network(3),
    "tiny": tiny_network,
    "large": lambda: large_network(0),
}

DEFAULTS = {
    "generate": {
        "network": None,
        "builtin": "toy",
        "events": [20, 5, 3],
        "m": 30,
        "n": 30,
        "stride": 5,
        "tail": 60,
        "substeps": ROUTING_SUBSTEPS,
    },
    "train": {
        "data": None,
        "spatial": "gat",
        "fusion": "fusion",
        "flood": "classification",
        "hidden": 32,
        "heads": 2,
        "layers": 3,
        "kernel": 3,
        "dilations": None,
        "delta": 1000.0,
        "epochs": 2000,
        "batch_size": 16,
        "lr": 1e-3,
        "val_interval": 1,
    },
    "evaluate": {"checkpoint": None, "data": None, "split": "test", "stride": 1},
    "benchmark": {"checkpoint": None, "data": None, "repeat": 32, "reps": 5, "workers": None},
    "gradcheck": {
        "spatial": None,
        "fusion": None,
        "flood": None,
        "hidden": 8,
        "heads": 2,
        "layers": 2,
        "m": 4,
        "n": 4,
        "step": 1e-5,
        "tolerance": 1e-4,
        "corrupt": None,
    },
}


class UsageError(Exception):
    pass


def sub_seed(seed: int, name: str) -> int:
    """Independent 32-bit seed for a named consumer of randomness."""
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


def file_hash(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, config: dict, seed: int, inputs: dict[str, Path], outputs: list[Path], started: str) -> None:
    manifest = {
        "command": command,
        "version": __version__,
        "config": config,
        "seed": seed,
        "inputs": {k: {"path": str(p), "sha256": file_hash(p)} for k, p in inputs.items()},
        "outputs": {str(p.relative_to(out)): file_hash(p) for p in sorted(outputs)},
        "started": started,
        "finished": _now(),
        "argv": sys.argv[1:],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _resolve(args: argparse.Namespace, command: str) -> dict:
    cfg = dict(DEFAULTS[command])
    if args.config is not None:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON: {exc}") from None
        section = data.get(command, data)
        unknown = set(section) - set(cfg)
        if unknown:
            raise UsageError(f"{path}: unknown keys for {command}: {sorted(unknown)}")
        cfg.update(section)
    for key in cfg:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _load_graph(cfg: dict) -> DrainageGraph:
    if cfg.get("network"):
        path = Path(cfg["network"])
        if not path.is_file():
            raise UsageError(f"network file not found: {path}")
        return load_network(path)
    if cfg["builtin"] not in BUILTIN_NETWORKS:
        raise UsageError(f"unknown builtin network {cfg['builtin']!r}; choose from {sorted(BUILTIN_NETWORKS)}")
    return BUILTIN_NETWORKS[cfg["builtin"]]()


def _need_dir(path, what: str) -> Path:
    if path is None:
        raise UsageError(f"--{what} is required")
    path = Path(path)
    if not (path / "manifest.json").is_file():
        raise UsageError(f"{what} directory not found or incomplete: {path}")
    return path


def _need_checkpoint(path) -> Path:
    if path is None:
        raise UsageError("--checkpoint is required")
    path = Path(path)
    if not path.with_suffix(".json").is_file():
        raise UsageError(f"checkpoint not found: {path.with_suffix('.json')}")
    return path


# -- commands ------------------------------------------------------------------


def cmd_generate(args, out: Path) -> None:
    started = _now()
    cfg = _resolve(args, "generate")
    graph = _load_graph(cfg)
    counts = tuple(int(c) for c in cfg["events"])
    if len(counts) != 3 or min(counts) < 1:
        raise UsageError(f"--events needs three positive counts (train val test), got {list(counts)}")
    for key in ("m", "n", "stride", "substeps"):
        if int(cfg[key]) < 1:
            raise UsageError(f"--{key} must be >= 1, got {cfg[key]}")
    if int(cfg["tail"]) < 0:
        raise UsageError(f"--tail must be >= 0, got {cfg['tail']}")
    events = build_event_set(sub_seed(args.seed, "events"), counts, EventConfig())
    splits = build_splits(graph, events, cfg["m"], cfg["n"], cfg["stride"], RunoffParams(), cfg["tail"], cfg["substeps"])
    out.mkdir(parents=True, exist_ok=True)
    save_network(graph, out / "network.json")
    events.write(out / "events")
    outputs = [out / "network.json", out / "events" / "events.json"]
    outputs += [out / "events" / f"{ev.id}.csv" for evs in events.splits().values() for ev in evs]
    provenance = {
        "network_hash": graph.content_hash,
        "stride": cfg["stride"],
        "seed": args.seed,
        "events_seed": events.seed,
        "substeps": cfg["substeps"],
    }
    for split, batch in splits.samples.items():
        meta = {**provenance, "split": split, "event_ids": [e.id for e in events.splits()[split]]}
        manifest = write_dataset(batch, out / split, splits.normalizer, meta)
        outputs += [manifest, manifest.with_suffix(".bin")]
        traj = write_trajectories(splits.trajectories[split], out / f"traj_{split}")
        outputs += [traj, traj.with_suffix(".bin")]
        log.info("%s: %d events, %d samples", split, len(events.splits()[split]), len(batch))
    write_manifest(out, "generate", cfg, args.seed, {}, outputs, started)


def _model_config(cfg: dict, m: int, n: int, seed: int) -> ModelConfig:
    dilations = cfg["dilations"]
    if dilations is None:
        dilations = [1]
        while 1 + (cfg["kernel"] - 1) * sum(dilations) < m:
            dilations.append(dilations[-1] * 2)
    return ModelConfig(
        m=m,
        n=n,
        spatial_kind="gat" if cfg["spatial"] == "gat" else "fully_connected",
        fusion=cfg["fusion"],
        flood_method=cfg["flood"],
        spatial_layers=cfg["layers"],
        hidden_channels=cfg["hidden"],
        attention_heads=cfg["heads"],
        temporal_kernel=cfg["kernel"],
        temporal_dilations=tuple(dilations),
        delta=cfg["delta"],
        seed=sub_seed(seed, "init"),
    )


def cmd_train(args, out: Path) -> None:
    started = _now()
    cfg = _resolve(args, "train")
    data = _need_dir(cfg["data"], "data")
    graph = load_network(data / "network.json")
    ds: Dataset = read_dataset(data / "train")
    val = read_dataset(data / "val").samples if (data / "val.json").is_file() else None
    if ds.meta.get("network_hash") != graph.content_hash:
        raise UsageError(f"{data}: dataset was built for a different network")
    mcfg = _model_config(cfg, ds.meta["m"], ds.meta["n"], args.seed)
    mcfg.validate()
    tcfg = TrainConfig(
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        learning_rate=cfg["lr"],
        validation_interval=cfg["val_interval"],
        seed=sub_seed(args.seed, "shuffle"),
    )
    try:
        tcfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    result = train(mcfg, tcfg, ds, graph, val=val, out_dir=out, log=None if args.quiet else log.debug)
    last = result.curve.records[-1]
    log.info("%s/%s: final train %.6g val %.6g (best %.6g @ %d)", mcfg.variant, mcfg.flood_method, last.train_loss, last.val_loss, result.best_val_loss, result.best_epoch)
    outputs = [result.checkpoint, result.checkpoint.with_suffix(".bin"), out / "curve.csv", out / "curve.json"]
    if result.best_checkpoint is not None:
        outputs += [result.best_checkpoint, result.best_checkpoint.with_suffix(".bin")]
    inputs = {"train": data / "train.json", "network": data / "network.json"}
    if val is not None:
        inputs["val"] = data / "val.json"
    write_manifest(out, "train", {**cfg, "model_config": mcfg.to_json(), "train_config": asdict(tcfg)}, args.seed, inputs, outputs, started)


def cmd_evaluate(args, out: Path) -> None:
    from .evaluate import rollout_eval

    started = _now()
    cfg = _resolve(args, "evaluate")
    ckpt = _need_checkpoint(cfg["checkpoint"])
    data = _need_dir(cfg["data"], "data")
    graph = load_network(data / "network.json")
    model, _ = load_checkpoint(ckpt, graph)
    model.eval()
    traj_path = data / f"traj_{cfg['split']}.json"
    if not traj_path.is_file():
        raise UsageError(f"no trajectories for split {cfg['split']!r} in {data}")
    trajs = read_trajectories(traj_path, graph)
    methods = ("balance", "classification") if model.config.flood_method == "classification" else ("balance",)
    out.mkdir(parents=True, exist_ok=True)
    report = rollout_eval(
        model, trajs, model.normalizer, graph, model.config.m, model.config.n, cfg["stride"], methods,
        timeseries_path=out / "timeseries.csv",
    )
    body = {"variant": model.config.variant, "flood_method": model.config.flood_method, "split": cfg["split"], **report.to_json()}
    (out / "report.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    for var, value in report.rmse_physical.items():
        log.info("RMSE %-6s %.6g", var, value)
    for method, fm in report.flood.items():
        log.info("flood[%s] accuracy=%s precision=%s recall=%s", method, fm.accuracy, fm.precision, fm.recall)
    inputs = {"checkpoint": ckpt.with_suffix(".json"), "trajectories": traj_path}
    write_manifest(out, "evaluate", cfg, args.seed, inputs, [out / "report.json", out / "timeseries.csv"], started)


def cmd_benchmark(args, out: Path) -> None:
    from .evaluate import benchmark_speed

    started = _now()
    cfg = _resolve(args, "benchmark")
    ckpt = _need_checkpoint(cfg["checkpoint"])
    data = _need_dir(cfg["data"], "data")
    graph = load_network(data / "network.json")
    model, _ = load_checkpoint(ckpt, graph)
    traj_path = data / "traj_test.json"
    trajs = read_trajectories(traj_path, graph)
    m, n = model.config.m, model.config.n
    traj = max(trajs, key=len)
    if len(traj) < m + n:
        raise UsageError(f"test trajectories are shorter than m + n = {m + n}")
    anchor = int(np.argmax(traj.r.sum(axis=1)[m - 1 : len(traj) - n])) + m - 1
    torch.set_num_threads(1)
    report = benchmark_speed(model, traj, anchor, repeat=cfg["repeat"], reps=cfg["reps"], workers=cfg["workers"])
    out.mkdir(parents=True, exist_ok=True)
    (out / "speed.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    log.info("single: oracle %.4fs surrogate %.4fs (x%.1f)", report.oracle_single_s, report.surrogate_single_s, report.single_speedup)
    log.info("%d runs: oracle %.4fs surrogate %.4fs", report.repeat, report.oracle_batch_s, report.surrogate_batch_s)
    write_manifest(out, "benchmark", cfg, args.seed, {"checkpoint": ckpt.with_suffix(".json"), "trajectories": traj_path}, [out / "speed.json"], started)


def cmd_gradcheck(args, out: Path) -> int:
    started = _now()
    cfg = _resolve(args, "gradcheck")
    graph = tiny_network()
    spatials = [cfg["spatial"]] if cfg["spatial"] else ["nn", "gat"]
    fusions = [cfg["fusion"]] if cfg["fusion"] else ["individual", "fusion"]
    floods = [cfg["flood"]] if cfg["flood"] else ["balance", "classification"]
    results = []
    for spatial in spatials:
        for fusion in fusions:
            for flood in floods:
                dil = [1]
                while 1 + 2 * sum(dil) < cfg["m"]:
                    dil.append(dil[-1] * 2)
                mcfg = ModelConfig(
                    m=cfg["m"], n=cfg["n"], spatial_kind="gat" if spatial == "gat" else "fully_connected",
                    fusion=fusion, flood_method=flood, spatial_layers=cfg["layers"], hidden_channels=cfg["hidden"],
                    attention_heads=cfg["heads"], temporal_dilations=tuple(dil), seed=sub_seed(args.seed, "gradcheck"),
                )
                mcfg.validate()
                res = gradcheck(mcfg, graph, step=cfg["step"], tolerance=cfg["tolerance"], corrupt=cfg["corrupt"])
                print(res.line())
                results.append(res)
    ok = all(r.passed for r in results)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        body = [
            {"variant": r.variant, "flood_method": r.flood_method, "passed": r.passed, "max_rel_error": r.max_rel_error,
             "worst_param": r.worst_param, "worst_index": list(r.worst_index), "per_param": r.per_param}
            for r in results
        ]
        (out / "gradcheck.json").write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
        write_manifest(out, "gradcheck", cfg, args.seed, {}, [out / "gradcheck.json"], started)
    return 0 if ok else 1


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="master seed; fanned out to named sub-seeds")
    common.add_argument("--config", help="JSON file with option values (flags override it)")
    common.add_argument("--out", help="output directory")
    common.add_argument("--quiet", action="store_true", help="only print warnings and errors")

    # shared flags live on the subcommands only; a copy on the top-level parser
    # would be silently overwritten by the subcommand defaults
    parser = argparse.ArgumentParser(prog="drainsurrogate", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", parents=[common], help="simulate rain events and write datasets")
    g.add_argument("--network", help="network JSON file")
    g.add_argument("--builtin", choices=sorted(BUILTIN_NETWORKS), help="use a bundled synthetic network")
    g.add_argument("--events", type=int, nargs=3, metavar=("TRAIN", "VAL", "TEST"))
    g.add_argument("--m", type=int)
    g.add_argument("--n", type=int)
    g.add_argument("--stride", type=int)
    g.add_argument("--tail", type=int, help="dry minutes appended to each event")
    g.add_argument("--substeps", type=int, help="routing sub-steps per minute")

    def variant_flags(p):
        p.add_argument("--spatial", choices=["nn", "gat"])
        p.add_argument("--fusion", choices=["individual", "fusion"])
        p.add_argument("--flood", choices=["balance", "classification"])
        p.add_argument("--hidden", type=int)
        p.add_argument("--heads", type=int)
        p.add_argument("--layers", type=int)

    t = sub.add_parser("train", parents=[common], help="train a surrogate")
    t.add_argument("--data", help="directory written by generate")
    variant_flags(t)
    t.add_argument("--kernel", type=int)
    t.add_argument("--dilations", type=int, nargs="+")
    t.add_argument("--delta", type=float)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", dest="batch_size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--val-interval", dest="val_interval", type=int)

    e = sub.add_parser("evaluate", parents=[common], help="rollout metrics on held-out trajectories")
    e.add_argument("--checkpoint", help="checkpoint path (without suffix)")
    e.add_argument("--data")
    e.add_argument("--split", choices=["train", "val", "test"])
    e.add_argument("--stride", type=int)

    b = sub.add_parser("benchmark", parents=[common], help="time oracle vs surrogate")
    b.add_argument("--checkpoint")
    b.add_argument("--data")
    b.add_argument("--repeat", type=int)
    b.add_argument("--reps", type=int)
    b.add_argument("--workers", type=int)

    c = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient check")
    variant_flags(c)
    c.add_argument("--m", type=int)
    c.add_argument("--n", type=int)
    c.add_argument("--step", type=float)
    c.add_argument("--tolerance", type=float)
    c.add_argument("--corrupt", help="parameter name whose backward is deliberately broken (test hook)")
    return parser


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "benchmark": cmd_benchmark,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", stream=sys.stderr)
    torch.set_num_threads(1)  # bit-reproducible reductions
    if args.out is None and args.command != "gradcheck":
        parser.error("--out is required")
    out = Path(args.out) if args.out else None
    try:
        code = COMMANDS[args.command](args, out)
    except (UsageError, ModelConfigError, NetworkFormatError, NetworkValidationError, DatasetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: file not found: {exc.filename}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - report and signal runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
