"""Supervised windows over oracle trajectories, min-max scaling and persistence."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .oracle import Trajectory
from .tensorio import read_tensors, write_tensors

# channel layout of the packed arrays
PAST_NODE = ("h_v", "q_in", "q_out", "r")
PAST_EDGE = ("h_e", "q", "a")
FUTURE_NODE = ("r",)
FUTURE_EDGE = ("a",)
TARGET_NODE = ("h_v", "q_in", "q_out", "q_w")
TARGET_EDGE = ("h_e", "q")

# variable kinds that get a min-max pair; control settings are already in [0, 1]
SCALED_KINDS = ("h_v", "q_in", "q_out", "q_w", "r", "h_e", "q")

_ARRAYS = ("past_node", "past_edge", "future_node", "future_edge", "target_node", "target_edge", "flood_labels")
_LAYOUT = {
    "past_node": PAST_NODE,
    "past_edge": PAST_EDGE,
    "future_node": FUTURE_NODE,
    "future_edge": FUTURE_EDGE,
    "target_node": TARGET_NODE,
    "target_edge": TARGET_EDGE,
}


class DatasetError(ValueError):
    pass


@dataclass
class Sample:
    """One window anchored at step ``anchor`` (the last observed step).

    Arrays are physical units, float32:
    past_node (m, N, 4), past_edge (m, C, 3), future_node (n, N, 1),
    future_edge (n, C, 1), target_node (n, N, 4), target_edge (n, C, 2),
    flood_labels (n, N) uint8.
    """

    past_node: np.ndarray
    past_edge: np.ndarray
    future_node: np.ndarray
    future_edge: np.ndarray
    target_node: np.ndarray
    target_edge: np.ndarray
    flood_labels: np.ndarray
    event_id: str = ""
    anchor: int = 0

    @property
    def m(self) -> int:
        return self.past_node.shape[-3]

    @property
    def n(self) -> int:
        return self.target_node.shape[-3]


@dataclass
class SampleBatch(Sample):
    """Samples stacked along a leading axis; ``event_id``/``anchor`` become sequences."""

    event_id: Sequence[str] = ()
    anchor: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return self.past_node.shape[0]

    def select(self, index) -> "SampleBatch":
        index = np.asarray(index)
        return SampleBatch(
            **{k: getattr(self, k)[index] for k in _ARRAYS},
            event_id=[self.event_id[i] for i in np.atleast_1d(index)],
            anchor=np.asarray(self.anchor)[index],
        )

    def sample(self, i: int) -> Sample:
        return Sample(**{k: getattr(self, k)[i] for k in _ARRAYS}, event_id=self.event_id[i], anchor=int(self.anchor[i]))

    def samples(self) -> list[Sample]:
        return [self.sample(i) for i in range(len(self))]


def stack(samples: Sequence[Sample]) -> SampleBatch:
    if not samples:
        raise DatasetError("no samples to stack")
    return SampleBatch(
        **{k: np.stack([getattr(s, k) for s in samples]) for k in _ARRAYS},
        event_id=[s.event_id for s in samples],
        anchor=np.array([s.anchor for s in samples], dtype=np.int64),
    )


def concat(batches: Sequence[SampleBatch]) -> SampleBatch:
    return SampleBatch(
        **{k: np.concatenate([getattr(b, k) for b in batches]) for k in _ARRAYS},
        event_id=[e for b in batches for e in b.event_id],
        anchor=np.concatenate([np.asarray(b.anchor) for b in batches]),
    )


def window_anchors(length: int, m: int, n: int, stride: int) -> range:
    if m < 1 or n < 1 or stride < 1:
        raise DatasetError(f"m, n and stride must be >= 1 (got {m}, {n}, {stride})")
    if length < m + n:
        raise DatasetError(f"trajectory of length {length} is shorter than m + n = {m + n}")
    return range(m - 1, length - n, stride)


def window(traj: Trajectory, m: int, n: int, stride: int = 5, event_id: str = "") -> list[Sample]:
    f32 = np.float32
    node = np.stack([traj.h_v, traj.q_in, traj.q_out, traj.r], axis=-1).astype(f32)
    edge = np.stack([traj.h_e, traj.q, traj.a], axis=-1).astype(f32)
    tnode = np.stack([traj.h_v, traj.q_in, traj.q_out, traj.q_w], axis=-1).astype(f32)
    samples = []
    for t in window_anchors(len(traj), m, n, stride):
        past, fut = slice(t - m + 1, t + 1), slice(t + 1, t + n + 1)
        target_node = tnode[fut]
        samples.append(
            Sample(
                past_node=node[past],
                past_edge=edge[past],
                future_node=node[fut][..., 3:4],
                future_edge=edge[fut][..., 2:3],
                target_node=target_node,
                target_edge=edge[fut][..., :2],
                flood_labels=(target_node[..., 3] > 0).astype(np.uint8),
                event_id=event_id,
                anchor=t,
            )
        )
    return samples


@dataclass(frozen=True)
class Normalizer:
    """Per-variable-kind [min, max] pairs fitted on the training split."""

    bounds: dict[str, tuple[float, float]]

    def span(self, kind: str) -> float:
        lo, hi = self.bounds[kind]
        return hi - lo

    def scale(self, kind: str, x: np.ndarray, clamp: bool = True) -> np.ndarray:
        if kind not in self.bounds:
            return np.asarray(x, dtype=np.float64)
        lo, hi = self.bounds[kind]
        if hi == lo:
            return np.zeros_like(x, dtype=np.float64)
        out = (np.asarray(x, dtype=np.float64) - lo) / (hi - lo)
        return np.clip(out, 0.0, 1.0) if clamp else out

    def unscale(self, kind: str, x: np.ndarray) -> np.ndarray:
        if kind not in self.bounds:
            return np.asarray(x, dtype=np.float64)
        lo, hi = self.bounds[kind]
        return np.asarray(x, dtype=np.float64) * (hi - lo) + lo

    def normalize(self, batch: Sample) -> Sample:
        """Scaled float64 copy; out-of-range values are clamped to [0, 1]."""
        arrays = {}
        for name, kinds in _LAYOUT.items():
            arr = getattr(batch, name)
            arrays[name] = np.stack([self.scale(k, arr[..., c]) for c, k in enumerate(kinds)], axis=-1)
        arrays["flood_labels"] = batch.flood_labels
        return _like(batch, arrays)

    def denormalize(self, batch: Sample) -> Sample:
        arrays = {}
        for name, kinds in _LAYOUT.items():
            arr = getattr(batch, name)
            arrays[name] = np.stack([self.unscale(k, arr[..., c]) for c, k in enumerate(kinds)], axis=-1)
        arrays["flood_labels"] = batch.flood_labels
        return _like(batch, arrays)

    def to_json(self) -> dict:
        return {k: [float(lo), float(hi)] for k, (lo, hi) in self.bounds.items()}

    @classmethod
    def from_json(cls, data: dict) -> "Normalizer":
        return cls({k: (float(v[0]), float(v[1])) for k, v in data.items()})

    @classmethod
    def identity(cls) -> "Normalizer":
        return cls({k: (0.0, 1.0) for k in SCALED_KINDS})


def _like(batch: Sample, arrays: dict) -> Sample:
    return type(batch)(**arrays, event_id=batch.event_id, anchor=batch.anchor)


def fit_normalizer(samples: Sequence[Sample] | SampleBatch) -> Normalizer:
    batch = samples if isinstance(samples, SampleBatch) else (stack(samples) if samples else None)
    if batch is None or len(batch) == 0:
        raise DatasetError("cannot fit a normalizer on zero samples")
    values: dict[str, list[np.ndarray]] = {k: [] for k in SCALED_KINDS}
    for name, kinds in _LAYOUT.items():
        arr = getattr(batch, name)
        for c, k in enumerate(kinds):
            if k in values:
                values[k].append(arr[..., c].ravel())
    bounds = {}
    for k, chunks in values.items():
        flat = np.concatenate(chunks).astype(np.float64)
        bounds[k] = (float(flat.min()), float(flat.max()))
    # spill is zero most of the time; pinning its lower bound keeps a zero exactly zero through scale/unscale
    lo, hi = bounds["q_w"]
    bounds["q_w"] = (min(lo, 0.0), hi)
    return Normalizer(bounds)


@dataclass
class Dataset:
    samples: SampleBatch
    normalizer: Normalizer
    meta: dict

    def __len__(self) -> int:
        return len(self.samples)


def write_dataset(samples: Sequence[Sample] | SampleBatch, path: str | Path, normalizer: Normalizer, meta: dict | None = None) -> Path:
    """Write ``<path>.bin`` + ``<path>.json``. Returns the manifest path."""
    if len(samples) == 0:
        raise DatasetError("refusing to write an empty dataset")
    batch = samples if isinstance(samples, SampleBatch) else stack(samples)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    bin_path = path.with_suffix(".bin")
    index = write_tensors(bin_path, {k: getattr(batch, k) for k in _ARRAYS})
    manifest = dict(meta or {})
    manifest.update(
        {
            "m": batch.m,
            "n": batch.n,
            "sample_count": len(batch),
            "normalizer": normalizer.to_json(),
            "sample_event_ids": list(batch.event_id),
            "anchors": [int(a) for a in batch.anchor],
            "container": {"file": bin_path.name, **index},
        }
    )
    json_path = path.with_suffix(".json")
    json_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return json_path


def read_dataset(path: str | Path) -> Dataset:
    json_path = Path(path).with_suffix(".json")
    manifest = json.loads(json_path.read_text())
    arrays = read_tensors(json_path.parent / manifest["container"]["file"], manifest["container"])
    arrays["flood_labels"] = arrays["flood_labels"].astype(np.uint8)
    batch = SampleBatch(**arrays, event_id=manifest["sample_event_ids"], anchor=np.array(manifest["anchors"], dtype=np.int64))
    return Dataset(samples=batch, normalizer=Normalizer.from_json(manifest["normalizer"]), meta=manifest)
