"""Error metrics, sliding-window rollout evaluation and wall-clock benchmarks."""

from __future__ import annotations

import csv
import os
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from .dataset import Normalizer, Sample, SampleBatch, stack, window
from .graph import DrainageGraph
from .model import ModelInputs, Prediction, Surrogate, model_inputs, persistence_prediction
from .oracle import ROUTING_SUBSTEPS, BoundaryForcing, Trajectory, simulate

NODE_OUT = ("h_v", "q_in", "q_out", "q_w")
EDGE_OUT = ("h_e", "q")
TIMESERIES_FIELDS = ("anchor_t", "element_id", "var", "true", "pred")

Predictor = Callable[[ModelInputs], Prediction]


def rmse(true: np.ndarray, pred: np.ndarray) -> float:
    """sqrt(sum((x - x_hat)^2) / (D * T)) over every entry."""
    true, pred = np.asarray(true, dtype=np.float64), np.asarray(pred, dtype=np.float64)
    if true.shape != pred.shape:
        raise ValueError(f"rmse: shape mismatch {true.shape} vs {pred.shape}")
    if true.size == 0:
        raise ValueError("rmse: empty input")
    return float(np.sqrt(np.sum((true - pred) ** 2) / true.size))


@dataclass(frozen=True)
class FloodMetrics:
    """Confusion counts and ratios; precision/recall are None when undefined."""

    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float | None
    precision: float | None
    recall: float | None

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def _ratio(num: int, den: int) -> float | None:
    return num / den if den else None


def flood_metrics(labels: np.ndarray, predictions: np.ndarray) -> FloodMetrics:
    labels, predictions = np.asarray(labels), np.asarray(predictions)
    if labels.shape != predictions.shape:
        raise ValueError(f"flood_metrics: shape mismatch {labels.shape} vs {predictions.shape}")
    t, p = labels.astype(bool), predictions.astype(bool)
    tp = int(np.count_nonzero(t & p))
    fp = int(np.count_nonzero(~t & p))
    tn = int(np.count_nonzero(~t & ~p))
    fn = int(np.count_nonzero(t & ~p))
    return FloodMetrics(tp, fp, tn, fn, _ratio(tp + tn, tp + fp + tn + fn), _ratio(tp, tp + fp), _ratio(tp, tp + fn))


def _merge_counts(parts: Sequence[FloodMetrics]) -> FloodMetrics:
    tp, fp, tn, fn = (sum(getattr(m, k) for m in parts) for k in ("tp", "fp", "tn", "fn"))
    return FloodMetrics(tp, fp, tn, fn, _ratio(tp + tn, tp + fp + tn + fn), _ratio(tp, tp + fp), _ratio(tp, tp + fn))


@dataclass
class MetricReport:
    """RMSE per variable in physical and normalized units, flood metrics per method."""

    rmse_physical: dict[str, float]
    rmse_normalized: dict[str, float]
    flood: dict[str, FloodMetrics]
    per_event: dict[str, dict] = field(default_factory=dict)
    samples: int = 0
    lead_time: int = 0

    def to_json(self) -> dict:
        return {
            "lead_time": self.lead_time,
            "samples": self.samples,
            "rmse_physical": self.rmse_physical,
            "rmse_normalized": self.rmse_normalized,
            "flood": {k: asdict(v) for k, v in self.flood.items()},
            "per_event": {
                ev: {**d, "flood": {k: asdict(v) for k, v in d["flood"].items()}} for ev, d in self.per_event.items()
            },
        }


def persistence_baseline(sample: Sample | ModelInputs, normalizer: Normalizer, graph: DrainageGraph, flood_method: str = "balance") -> Prediction:
    """Repeat the last observed state over the horizon; flooding from the balance of the repeated flows."""
    inp = sample if isinstance(sample, ModelInputs) else model_inputs(sample, normalizer, dtype=torch.float64)
    return persistence_prediction(inp, normalizer, graph, flood_method)


def oracle_predictor(inp: ModelInputs) -> Prediction:
    """Feeds the true (normalized) targets back; a self-check for the evaluation plumbing."""
    t = inp.target_node
    return Prediction(node=t[..., :3], edge=inp.target_edge, q_w=t[..., 3], q_w_balance=t[..., 3], flood_logit=None)


def _physical(pred: Prediction, normalizer: Normalizer) -> dict[str, np.ndarray]:
    node = pred.node.detach().double().numpy()
    edge = pred.edge.detach().double().numpy()
    out = {k: normalizer.unscale(k, node[..., c]) for c, k in enumerate(NODE_OUT[:3])}
    out.update({k: normalizer.unscale(k, edge[..., c]) for c, k in enumerate(EDGE_OUT)})
    out["q_w"] = normalizer.unscale("q_w", pred.q_w.detach().double().numpy())
    out["q_w_balance"] = normalizer.unscale("q_w", pred.q_w_balance.detach().double().numpy())
    return out


def _normalized(pred: Prediction) -> dict[str, np.ndarray]:
    node = pred.node.detach().double().numpy()
    edge = pred.edge.detach().double().numpy()
    out = {k: node[..., c] for c, k in enumerate(NODE_OUT[:3])}
    out.update({k: edge[..., c] for c, k in enumerate(EDGE_OUT)})
    out["q_w"] = pred.q_w.detach().double().numpy()
    return out


def _predict(predictor: Predictor, inp: ModelInputs, chunk: int = 64) -> Prediction:
    parts = []
    with torch.no_grad():
        for start in range(0, len(inp), chunk):
            parts.append(predictor(inp.select(range(start, min(start + chunk, len(inp))))))
    cat = lambda name: torch.cat([getattr(p, name) for p in parts])  # noqa: E731
    logit = None if parts[0].flood_logit is None else cat("flood_logit")
    return Prediction(cat("node"), cat("edge"), cat("q_w"), cat("q_w_balance"), logit)


def rollout_eval(
    predictor: Predictor,
    trajectories: Sequence[Trajectory],
    normalizer: Normalizer,
    graph: DrainageGraph,
    m: int,
    n: int,
    stride: int = 1,
    flood_methods: Sequence[str] = ("balance",),
    event_ids: Sequence[str] | None = None,
    dtype=torch.float32,
    timeseries_path: str | Path | None = None,
) -> MetricReport:
    """Slide over each trajectory, predict ``n`` steps ahead from every anchor, and score.

    RMSE covers every step of every horizon. The optional timeseries CSV holds
    the last step of each horizon per anchor. ``flood_methods`` lists which
    flood rules to score: "balance" uses the ungated flow-balance excess,
    "classification" the gated output.
    """
    if not trajectories:
        raise ValueError("rollout_eval: no trajectories")
    event_ids = list(event_ids) if event_ids is not None else [t.meta.get("event_id", f"traj{i}") for i, t in enumerate(trajectories)]
    sq_phys: dict[str, list[np.ndarray]] = {k: [] for k in NODE_OUT + EDGE_OUT}
    sq_norm: dict[str, list[np.ndarray]] = {k: [] for k in NODE_OUT + EDGE_OUT}
    confusion: dict[str, list[FloodMetrics]] = {k: [] for k in flood_methods}
    per_event = {}
    rows = []
    total = 0
    for traj, ev in zip(trajectories, event_ids):
        batch = stack(window(traj, m, n, stride, event_id=ev))
        inp = model_inputs(batch, normalizer, dtype=dtype)
        pred = _predict(predictor, inp)
        phys, norm = _physical(pred, normalizer), _normalized(pred)
        true_phys = {k: batch.target_node[..., c].astype(np.float64) for c, k in enumerate(NODE_OUT)}
        true_phys.update({k: batch.target_edge[..., c].astype(np.float64) for c, k in enumerate(EDGE_OUT)})
        true_norm = {k: inp.target_node[..., c].double().numpy() for c, k in enumerate(NODE_OUT)}
        true_norm.update({k: inp.target_edge[..., c].double().numpy() for c, k in enumerate(EDGE_OUT)})
        ev_rmse = {}
        for k in sq_phys:
            sq_phys[k].append(((true_phys[k] - phys[k]) ** 2).ravel())
            sq_norm[k].append(((true_norm[k] - norm[k]) ** 2).ravel())
            ev_rmse[k] = rmse(true_phys[k], phys[k])
        labels = true_phys["q_w"] > 0
        ev_flood = {}
        for method in flood_methods:
            flooded = (phys["q_w_balance"] if method == "balance" else phys["q_w"]) > 0
            ev_flood[method] = flood_metrics(labels, flooded)
            confusion[method].append(ev_flood[method])
        per_event[ev] = {"rmse_physical": ev_rmse, "flood": ev_flood, "samples": len(batch)}
        total += len(batch)
        if timeseries_path is not None:
            rows.extend(_last_step_rows(batch, true_phys, phys, graph))
    report = MetricReport(
        rmse_physical={k: float(np.sqrt(np.mean(np.concatenate(v)))) for k, v in sq_phys.items()},
        rmse_normalized={k: float(np.sqrt(np.mean(np.concatenate(v)))) for k, v in sq_norm.items()},
        flood={k: _merge_counts(v) for k, v in confusion.items()},
        per_event=per_event,
        samples=total,
        lead_time=n,
    )
    if timeseries_path is not None:
        with open(timeseries_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(TIMESERIES_FIELDS)
            w.writerows(rows)
    return report


def _last_step_rows(batch: SampleBatch, true: dict, pred: dict, graph: DrainageGraph) -> list[tuple]:
    rows = []
    node_ids = [nd.id for nd in graph.nodes]
    edge_ids = [e.id for e in graph.edges]
    for b, anchor in enumerate(batch.anchor):
        for var in NODE_OUT:
            for i, eid in enumerate(node_ids):
                rows.append((int(anchor), eid, var, repr(float(true[var][b, -1, i])), repr(float(pred[var][b, -1, i]))))
        for var in EDGE_OUT:
            for i, eid in enumerate(edge_ids):
                rows.append((int(anchor), eid, var, repr(float(true[var][b, -1, i])), repr(float(pred[var][b, -1, i]))))
    return rows


# -- speed ------------------------------------------------------------------


@dataclass(frozen=True)
class SpeedReport:
    oracle_single_s: float
    surrogate_single_s: float
    oracle_batch_s: float
    surrogate_batch_s: float
    repeat: int
    workers: int
    horizon: int

    @property
    def single_speedup(self) -> float:
        return self.oracle_single_s / self.surrogate_single_s

    @property
    def batch_speedup(self) -> float:
        return self.oracle_batch_s / self.surrogate_batch_s

    @property
    def batch_over_single(self) -> float:
        return self.surrogate_batch_s / self.surrogate_single_s

    def to_json(self) -> dict:
        out = asdict(self)
        out.update(
            single_speedup=self.single_speedup, batch_speedup=self.batch_speedup, batch_over_single=self.batch_over_single
        )
        return out


def _timed(fn: Callable[[], object], reps: int = 5) -> float:
    """Median seconds per call over ``reps`` timings; calls are grouped until one timing spans >= 1 ms."""
    fn()  # warm-up
    inner = 1
    while True:
        start = time.perf_counter()
        for _ in range(inner):
            fn()
        if time.perf_counter() - start >= 1e-3:
            break
        inner *= 2
    times = []
    for _ in range(reps):
        start = time.perf_counter()
        for _ in range(inner):
            fn()
        times.append((time.perf_counter() - start) / inner)
    return statistics.median(times)


def _oracle_job(args) -> int:
    graph, state, forcing, substeps = args
    return len(simulate(graph, state, forcing, substeps=substeps))


def benchmark_speed(
    model: Surrogate,
    traj: Trajectory,
    anchor: int,
    repeat: int = 32,
    reps: int = 5,
    workers: int | None = None,
    substeps: int = ROUTING_SUBSTEPS,
) -> SpeedReport:
    """Oracle n-step simulation vs surrogate n-step prediction from the same anchor of ``traj``.

    The 32-case oracle run goes through a process pool (one task per case);
    the surrogate case is one batched forward pass.
    """
    graph, n, m = traj.graph, model.config.n, model.config.m
    if not (m - 1 <= anchor and anchor + n < len(traj)):
        raise ValueError(f"anchor {anchor} leaves no room for m={m}, n={n} in a trajectory of {len(traj)} steps")
    state = traj.state(anchor)
    forcing = [traj.forcing(t) for t in range(anchor + 1, anchor + n + 1)]
    sample = [s for s in window(traj, m, n, stride=1) if s.anchor == anchor][0]
    dtype = next(model.parameters()).dtype
    single = model_inputs(sample, model.normalizer, dtype=dtype)
    batch = model_inputs(stack([sample] * repeat), model.normalizer, dtype=dtype)
    model.eval()

    def surrogate(inp):
        with torch.no_grad():
            return model(inp)

    oracle_single = _timed(lambda: simulate(graph, state, forcing, substeps=substeps), reps)
    surrogate_single = _timed(lambda: surrogate(single), reps)
    surrogate_batch = _timed(lambda: surrogate(batch), reps)

    workers = workers or min(repeat, os.cpu_count() or 1)
    with ProcessPoolExecutor(max_workers=workers) as pool:
        list(pool.map(_oracle_job, [(graph, state, forcing, substeps)] * workers))  # warm the workers
        start = time.perf_counter()
        list(pool.map(_oracle_job, [(graph, state, forcing, substeps)] * repeat))
        oracle_batch = time.perf_counter() - start
    return SpeedReport(oracle_single, surrogate_single, oracle_batch, surrogate_batch, repeat, workers, n)


def forcing_from(traj: Trajectory, start: int, steps: int) -> list[BoundaryForcing]:
    return [traj.forcing(t) for t in range(start, start + steps)]
