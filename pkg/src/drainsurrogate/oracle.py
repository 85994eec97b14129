"""Mass-conservative storage routing model that generates ground-truth trajectories.

Each node is a storage cell, each conduit carries

    Q = a * min(Q_max, K * sqrt(max(head_up - head_dn, 0)))

with ``head = invert + depth``. A 1-minute step is integrated with ``substeps``
explicit routing sub-steps; outflow demands a node cannot supply from its
stored volume are scaled down proportionally, so storage never goes negative.
Water above a node's full volume ponds during the minute and is spilled as
flooding ``Q_w`` at the end of it, leaving the node exactly full.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np

from .graph import DrainageGraph

DT = 1.0  # minutes
ROUTING_SUBSTEPS = 60  # 1-second routing step
EDGE_FULL_DEPTH = 1.0  # meters, nominal conduit depth for h_e
RESIDUAL_EPS = 1e-12

NODE_VARS = ("h_v", "q_in", "q_out", "q_w")
EDGE_VARS = ("h_e", "q")


class OracleError(ValueError):
    pass


@dataclass
class HydraulicState:
    h_v: np.ndarray
    q_in: np.ndarray
    q_out: np.ndarray
    h_e: np.ndarray
    q: np.ndarray
    q_w: np.ndarray
    t: int = 0

    @classmethod
    def dry(cls, graph: DrainageGraph) -> "HydraulicState":
        n, c = graph.n_nodes, graph.n_edges
        return cls(np.zeros(n), np.zeros(n), np.zeros(n), np.zeros(c), np.zeros(c), np.zeros(n))

    def check_finite(self) -> None:
        for name in ("h_v", "q_in", "q_out", "h_e", "q", "q_w"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise OracleError(f"non-finite values in state.{name} at t={self.t}")


@dataclass
class BoundaryForcing:
    r: np.ndarray
    a: np.ndarray

    @classmethod
    def uniform(cls, graph: DrainageGraph, r: float = 0.0) -> "BoundaryForcing":
        return cls(np.full(graph.n_nodes, float(r)), np.ones(graph.n_edges))

    def validate(self, graph: DrainageGraph) -> None:
        if self.r.shape != (graph.n_nodes,) or self.a.shape != (graph.n_edges,):
            raise OracleError("forcing shape does not match network")
        if not (np.all(np.isfinite(self.r)) and np.all(np.isfinite(self.a))):
            raise OracleError("non-finite forcing")
        if np.any(self.r < 0):
            raise OracleError("runoff must be >= 0")
        if np.any((self.a < 0) | (self.a > 1)):
            raise OracleError("control settings must lie in [0, 1]")
        fixed = ~np.array([e.controllable for e in graph.edges], dtype=bool)
        if np.any(self.a[fixed] != 1.0):
            raise OracleError("non-controllable edges must have a = 1")


class _Hydraulics(NamedTuple):
    invert: np.ndarray
    area: np.ndarray
    dmax: np.ndarray
    vmax: np.ndarray
    outfall: np.ndarray
    up: np.ndarray
    dn: np.ndarray
    qmax: np.ndarray
    k: np.ndarray


@lru_cache(maxsize=32)
def _hydraulics(graph: DrainageGraph) -> _Hydraulics:
    area = graph.node_attr("storage_area")
    dmax = graph.node_attr("max_depth")
    return _Hydraulics(
        invert=graph.node_attr("invert_elevation"),
        area=area,
        dmax=dmax,
        vmax=area * dmax,
        outfall=graph.outfall_mask,
        up=graph.endpoints[:, 0],
        dn=graph.endpoints[:, 1],
        qmax=graph.edge_attr("capacity"),
        k=graph.edge_attr("conveyance_coeff"),
    )


def edge_depth(graph: DrainageGraph, h_v: np.ndarray) -> np.ndarray:
    hyd = _hydraulics(graph)
    return np.clip(0.5 * (h_v[..., hyd.up] + h_v[..., hyd.dn]), 0.0, EDGE_FULL_DEPTH)


def step(
    graph: DrainageGraph,
    state: HydraulicState,
    forcing: BoundaryForcing,
    substeps: int = ROUTING_SUBSTEPS,
) -> HydraulicState:
    """Advance the network by one minute."""
    state.check_finite()
    forcing.validate(graph)
    hyd = _hydraulics(graph)
    n = graph.n_nodes
    r, a = forcing.r, forcing.a
    dt = DT / substeps

    vol = np.where(hyd.outfall, 0.0, hyd.area * state.h_v)
    q_sum = np.zeros(graph.n_edges)
    for _ in range(substeps):
        depth = np.minimum(vol / hyd.area, hyd.dmax)
        head = hyd.invert + depth
        cand = a * np.minimum(hyd.qmax, hyd.k * np.sqrt(np.maximum(head[hyd.up] - head[hyd.dn], 0.0)))
        demand = np.bincount(hyd.up, weights=cand, minlength=n) * dt
        short = demand > vol
        scale = np.ones(n)
        scale[short] = vol[short] / demand[short]
        q = cand * scale[hyd.up]
        net = np.bincount(hyd.dn, weights=q, minlength=n) - np.bincount(hyd.up, weights=q, minlength=n)
        vol = np.maximum(vol + (net + r) * dt, 0.0)
        vol[hyd.outfall] = 0.0
        q_sum += q

    q = q_sum / substeps
    spill = np.maximum(vol - hyd.vmax, 0.0)
    flooded = spill > 0
    h_v = np.where(flooded, hyd.dmax, np.minimum(vol / hyd.area, hyd.dmax))
    q_in = np.bincount(hyd.dn, weights=q, minlength=n)
    q_out = np.bincount(hyd.up, weights=q, minlength=n)
    out = HydraulicState(
        h_v=h_v,
        q_in=q_in,
        q_out=q_out,
        h_e=edge_depth(graph, h_v),
        q=q,
        q_w=spill / DT,
        t=state.t + 1,
    )
    out.check_finite()
    return out


@dataclass
class Trajectory:
    """States after each forcing step; ``states[t]`` results from ``forcing[t]``."""

    graph: DrainageGraph
    initial: HydraulicState
    h_v: np.ndarray
    q_in: np.ndarray
    q_out: np.ndarray
    q_w: np.ndarray
    h_e: np.ndarray
    q: np.ndarray
    r: np.ndarray
    a: np.ndarray
    dt: float = DT
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.h_v.shape[0]

    def state(self, t: int) -> HydraulicState:
        return HydraulicState(
            self.h_v[t], self.q_in[t], self.q_out[t], self.h_e[t], self.q[t], self.q_w[t], t=self.initial.t + t + 1
        )

    def forcing(self, t: int) -> BoundaryForcing:
        return BoundaryForcing(self.r[t], self.a[t])

    def tampered(self, t: int, var: str, index: int, delta: float) -> "Trajectory":
        arr = getattr(self, var).copy()
        arr[t, index] += delta
        return replace(self, **{var: arr})

    def to_csv(self, path: str | Path) -> None:
        node_ids = [n.id for n in self.graph.nodes]
        edge_ids = [e.id for e in self.graph.edges]
        node_cols = [("h_v", self.h_v), ("Q_in", self.q_in), ("Q_out", self.q_out), ("Q_w", self.q_w), ("r", self.r)]
        edge_cols = [("h_e", self.h_e), ("Q", self.q), ("a", self.a)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "element_id", "var", "value"])
            for t in range(len(self)):
                for i, nid in enumerate(node_ids):
                    for name, arr in node_cols:
                        w.writerow([t, nid, name, repr(float(arr[t, i]))])
                for j, eid in enumerate(edge_ids):
                    for name, arr in edge_cols:
                        w.writerow([t, eid, name, repr(float(arr[t, j]))])


def simulate(
    graph: DrainageGraph,
    initial: HydraulicState,
    forcing_series: Iterable[BoundaryForcing],
    substeps: int = ROUTING_SUBSTEPS,
) -> Trajectory:
    forcing_series = list(forcing_series)
    if not forcing_series:
        raise OracleError("forcing series is empty")
    T, n, c = len(forcing_series), graph.n_nodes, graph.n_edges
    out = {name: np.empty((T, n)) for name in ("h_v", "q_in", "q_out", "q_w", "r")}
    out.update({name: np.empty((T, c)) for name in ("h_e", "q", "a")})
    state = initial
    for t, forcing in enumerate(forcing_series):
        state = step(graph, state, forcing, substeps=substeps)
        for name in ("h_v", "q_in", "q_out", "q_w", "h_e", "q"):
            out[name][t] = getattr(state, name)
        out["r"][t] = forcing.r
        out["a"][t] = forcing.a
    return Trajectory(graph=graph, initial=initial, **out)


def simulate_runoff(
    graph: DrainageGraph,
    runoff: np.ndarray,
    initial: HydraulicState | None = None,
    control: np.ndarray | None = None,
    substeps: int = ROUTING_SUBSTEPS,
) -> Trajectory:
    """Convenience wrapper: (T, N) runoff series, controls default to fully open."""
    initial = HydraulicState.dry(graph) if initial is None else initial
    if control is None:
        control = np.ones((runoff.shape[0], graph.n_edges))
    series = [BoundaryForcing(runoff[t], control[t]) for t in range(runoff.shape[0])]
    return simulate(graph, initial, series, substeps=substeps)


def mass_balance_residual(traj: Trajectory) -> float:
    """|inflow - (storage change + outfall discharge + flooding)| / inflow, over the whole run."""
    hyd = _hydraulics(traj.graph)
    junction = ~hyd.outfall
    inflow = traj.r.sum() * traj.dt
    stored = np.sum(hyd.area[junction] * (traj.h_v[-1, junction] - traj.initial.h_v[junction]))
    discharge = (traj.q_in[:, hyd.outfall] + traj.r[:, hyd.outfall]).sum() * traj.dt
    flooded = traj.q_w.sum() * traj.dt
    return float(abs(inflow - (stored + discharge + flooded)) / max(inflow, RESIDUAL_EPS))
