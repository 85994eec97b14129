"""Synthetic rainfall events and their conversion to per-node runoff."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .graph import DrainageGraph


@dataclass(frozen=True)
class EventConfig:
    """Ranges that rainfall events are drawn from (uniformly)."""

    min_duration: int = 120
    max_duration: int = 360
    min_peak: float = 0.5  # mm/min
    max_peak: float = 2.5
    peak_position: tuple[float, float] = (0.2, 0.6)  # fraction of duration
    burst_fraction: tuple[float, float] = (0.5, 0.8)  # share of peak carried by the short burst
    burst_width: tuple[float, float] = (0.1, 0.25)  # burst half-width, fraction of duration
    tail: int = 60  # dry steps simulated after the rain stops

    def validate(self) -> None:
        if not 1 <= self.min_duration <= self.max_duration:
            raise ValueError(f"invalid duration range [{self.min_duration}, {self.max_duration}]")
        if not 0 <= self.min_peak <= self.max_peak:
            raise ValueError(f"invalid peak range [{self.min_peak}, {self.max_peak}]")
        for name in ("peak_position", "burst_fraction", "burst_width"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi <= 1:
                raise ValueError(f"invalid {name} range {(lo, hi)}")
        if self.tail < 0:
            raise ValueError("tail must be >= 0")


@dataclass(frozen=True)
class RunoffParams:
    coeff: float = 0.001  # converts mm * m2 to m3
    reservoir_k: float = 10.0  # minutes
    base_flow: float = 0.0  # m3/min per node
    dt: float = 1.0


@dataclass
class RainEvent:
    id: str
    intensity: np.ndarray  # mm/min per step

    @property
    def duration(self) -> int:
        return len(self.intensity)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["t", "intensity"])
            for t, v in enumerate(self.intensity):
                w.writerow([t, repr(float(v))])


@dataclass
class EventSet:
    train: list[RainEvent]
    val: list[RainEvent]
    test: list[RainEvent]
    seed: int
    meta: dict = field(default_factory=dict)

    def splits(self) -> dict[str, list[RainEvent]]:
        return {"train": self.train, "val": self.val, "test": self.test}

    def manifest(self) -> dict:
        return {"seed": self.seed, "splits": {k: [e.id for e in v] for k, v in self.splits().items()}}

    def write(self, out_dir: str | Path) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "events.json").write_text(json.dumps(self.manifest(), indent=2) + "\n")
        for events in self.splits().values():
            for ev in events:
                ev.to_csv(out_dir / f"{ev.id}.csv")


def double_triangle(duration: int, peak: float, peak_step: int, burst_fraction: float, burst_halfwidth: float) -> np.ndarray:
    """Long low triangle over the whole event plus a short intense one, both peaking at ``peak_step``.

    The sum is piecewise linear, reaches ``peak`` at ``peak_step`` and is zero
    at the first and last step.
    """
    t = np.arange(duration, dtype=np.float64)
    last = duration - 1

    def triangle(start: float, top: float, end: float) -> np.ndarray:
        rise = np.where(top > start, (t - start) / max(top - start, 1e-12), 1.0)
        fall = np.where(end > top, (end - t) / max(end - top, 1e-12), 1.0)
        shape = np.where(t <= top, rise, fall)
        return np.clip(shape, 0.0, 1.0) * ((t >= start) & (t <= end))

    base = triangle(0.0, peak_step, last)
    burst = triangle(max(peak_step - burst_halfwidth, 0.0), peak_step, min(peak_step + burst_halfwidth, last))
    return peak * ((1.0 - burst_fraction) * base + burst_fraction * burst)


def sample_rain_event(seed: int | np.random.Generator, config: EventConfig = EventConfig(), event_id: str | None = None) -> RainEvent:
    config.validate()
    rng = np.random.default_rng(seed)
    duration = int(rng.integers(config.min_duration, config.max_duration + 1))
    peak = float(rng.uniform(config.min_peak, config.max_peak))
    peak_step = int(round(rng.uniform(*config.peak_position) * (duration - 1)))
    frac = float(rng.uniform(*config.burst_fraction))
    half = float(rng.uniform(*config.burst_width)) * duration
    intensity = double_triangle(duration, peak, peak_step, frac, half)
    return RainEvent(id=event_id or f"ev{seed}", intensity=intensity)


def runoff(graph: DrainageGraph, event: RainEvent | np.ndarray, params: RunoffParams = RunoffParams(), tail: int = 0) -> np.ndarray:
    """(T, N) lateral inflow in m3/min from a single linear reservoir per node.

    ``r[t+1] = r[t] * exp(-dt/k) + (1 - exp(-dt/k)) * (coeff * area * i[t] + base_flow)``,
    starting from the dry-weather flow ``r[0] = base_flow``. The ``1 - exp(-dt/k)``
    factor makes the reservoir release exactly the volume it receives.
    """
    if params.reservoir_k <= 0:
        raise ValueError(f"reservoir constant must be > 0, got {params.reservoir_k}")
    intensity = event.intensity if isinstance(event, RainEvent) else np.asarray(event, dtype=np.float64)
    intensity = np.concatenate([intensity, np.zeros(tail)])
    area = graph.node_attr("catchment_area")
    decay = np.exp(-params.dt / params.reservoir_k)
    r = np.empty((len(intensity), graph.n_nodes))
    current = np.full(graph.n_nodes, params.base_flow)
    for t, i in enumerate(intensity):
        r[t] = current
        current = current * decay + (1.0 - decay) * (params.coeff * area * i + params.base_flow)
    return r


def build_event_set(seed: int, counts: tuple[int, int, int] = (20, 5, 3), config: EventConfig = EventConfig()) -> EventSet:
    if min(counts) < 1:
        raise ValueError(f"each split needs at least one event, got {counts}")
    config.validate()
    children = np.random.SeedSequence(seed).spawn(sum(counts))
    events = [sample_rain_event(np.random.default_rng(s), config, event_id=f"ev{k:04d}") for k, s in enumerate(children)]
    n_train, n_val, _ = counts
    return EventSet(
        train=events[:n_train],
        val=events[n_train : n_train + n_val],
        test=events[n_train + n_val :],
        seed=seed,
        meta={"config": asdict(config)},
    )
