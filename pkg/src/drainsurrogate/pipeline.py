"""Glue between rain events, the routing oracle and the window datasets."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataset import Normalizer, SampleBatch, concat, fit_normalizer, stack, window
from .graph import DrainageGraph
from .oracle import ROUTING_SUBSTEPS, HydraulicState, Trajectory, simulate_runoff
from .scenarios import EventSet, RainEvent, RunoffParams, runoff
from .tensorio import read_tensors, write_tensors

DEFAULT_TAIL = 60  # dry minutes appended so recessions reach the test windows


def simulate_event(
    graph: DrainageGraph,
    event: RainEvent,
    params: RunoffParams = RunoffParams(),
    tail: int = DEFAULT_TAIL,
    substeps: int = ROUTING_SUBSTEPS,
) -> Trajectory:
    traj = simulate_runoff(graph, runoff(graph, event, params, tail=tail), substeps=substeps)
    traj.meta["event_id"] = event.id
    return traj


@dataclass
class SplitData:
    trajectories: dict[str, list[Trajectory]]
    samples: dict[str, SampleBatch]
    normalizer: Normalizer


def build_splits(
    graph: DrainageGraph,
    events: EventSet,
    m: int,
    n: int,
    stride: int = 5,
    params: RunoffParams = RunoffParams(),
    tail: int = DEFAULT_TAIL,
    substeps: int = ROUTING_SUBSTEPS,
) -> SplitData:
    """Simulate every event, window each split, fit the normalizer on train only."""
    trajs: dict[str, list[Trajectory]] = {}
    samples: dict[str, SampleBatch] = {}
    for split, evs in events.splits().items():
        trajs[split] = [simulate_event(graph, ev, params, tail, substeps) for ev in evs]
        batches = [stack(window(tr, m, n, stride, event_id=ev.id)) for tr, ev in zip(trajs[split], evs)]
        samples[split] = concat(batches)
    return SplitData(trajs, samples, fit_normalizer(samples["train"]))


def flooded_fraction(trajs: list[Trajectory]) -> float:
    return float(np.mean(np.concatenate([(t.q_w > 0).ravel() for t in trajs])))


_TRAJ_FIELDS = ("h_v", "q_in", "q_out", "q_w", "h_e", "q", "r", "a")


def write_trajectories(trajs: list[Trajectory], path: str | Path) -> Path:
    """Store trajectories of one graph as float64 arrays plus a JSON sidecar."""
    path = Path(path)
    arrays = {}
    for k, t in enumerate(trajs):
        for name in _TRAJ_FIELDS:
            arrays[f"{k}/{name}"] = getattr(t, name)
        for name in ("h_v", "q_in", "q_out", "h_e", "q", "q_w"):
            arrays[f"{k}/initial/{name}"] = getattr(t.initial, name)
    index = write_tensors(path.with_suffix(".bin"), arrays, dtype="<f8")
    meta = {
        "count": len(trajs),
        "event_ids": [t.meta.get("event_id", "") for t in trajs],
        "initial_t": [int(t.initial.t) for t in trajs],
        "container": {"file": path.with_suffix(".bin").name, **index},
    }
    json_path = path.with_suffix(".json")
    json_path.write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return json_path


def read_trajectories(path: str | Path, graph: DrainageGraph) -> list[Trajectory]:
    json_path = Path(path).with_suffix(".json")
    meta = json.loads(json_path.read_text())
    arrays = read_tensors(json_path.parent / meta["container"]["file"], meta["container"])
    out = []
    for k in range(meta["count"]):
        init = HydraulicState(
            *(arrays[f"{k}/initial/{n}"] for n in ("h_v", "q_in", "q_out", "h_e", "q", "q_w")), t=meta["initial_t"][k]
        )
        traj = Trajectory(graph=graph, initial=init, **{n: arrays[f"{k}/{n}"] for n in _TRAJ_FIELDS})
        traj.meta["event_id"] = meta["event_ids"][k]
        out.append(traj)
    return out
