"""Drainage network topology: validation, path distances, adjacency and incidence."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components, dijkstra

NODE_KINDS = ("junction", "outfall")
_NODE_KEYS = {"id", "kind", "invert_elevation", "max_depth", "storage_area", "catchment_area"}
_EDGE_KEYS = {"id", "from", "to", "length", "capacity", "conveyance_coeff", "controllable"}


class NetworkFormatError(ValueError):
    """The network file is not valid JSON or does not follow the schema."""


class NetworkValidationError(ValueError):
    """A topology or attribute invariant is violated."""

    def __init__(self, message: str, element_id: str | None = None):
        super().__init__(message)
        self.element_id = element_id


@dataclass(frozen=True)
class NodeSpec:
    id: str
    kind: str
    invert_elevation: float
    max_depth: float
    storage_area: float
    catchment_area: float

    @property
    def is_outfall(self) -> bool:
        return self.kind == "outfall"


@dataclass(frozen=True)
class EdgeSpec:
    id: str
    upstream_node: str
    downstream_node: str
    length: float
    capacity: float
    conveyance_coeff: float
    controllable: bool = False


@dataclass(frozen=True)
class AdjacencyPair:
    """Binary neighbourhood matrices from a path-distance threshold (meters)."""

    node: np.ndarray
    edge: np.ndarray
    delta: float


@dataclass(frozen=True, eq=False)
class DrainageGraph:
    """Immutable drainage network. Node/edge order is the order of the source file."""

    nodes: tuple[NodeSpec, ...]
    edges: tuple[EdgeSpec, ...]
    _index: dict[str, tuple[str, int]] = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple(self.edges))
        object.__setattr__(self, "_index", _validate(self.nodes, self.edges))

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def node_index(self, node_id: str) -> int:
        kind, i = self._lookup(node_id)
        if kind != "node":
            raise KeyError(f"{node_id!r} is an edge, not a node")
        return i

    def edge_index(self, edge_id: str) -> int:
        kind, j = self._lookup(edge_id)
        if kind != "edge":
            raise KeyError(f"{edge_id!r} is a node, not an edge")
        return j

    def _lookup(self, element_id: str) -> tuple[str, int]:
        try:
            return self._index[element_id]
        except KeyError:
            raise KeyError(f"unknown element id {element_id!r}") from None

    @cached_property
    def endpoints(self) -> np.ndarray:
        """(C, 2) integer array of (upstream, downstream) node indices."""
        ends = [(self._index[e.upstream_node][1], self._index[e.downstream_node][1]) for e in self.edges]
        return np.array(ends, dtype=np.int64).reshape(-1, 2)

    @cached_property
    def outfall_mask(self) -> np.ndarray:
        return np.array([n.is_outfall for n in self.nodes])

    def node_attr(self, name: str) -> np.ndarray:
        return np.array([getattr(n, name) for n in self.nodes], dtype=np.float64)

    def edge_attr(self, name: str) -> np.ndarray:
        return np.array([getattr(e, name) for e in self.edges], dtype=np.float64)

    def to_dict(self) -> dict:
        return {
            "nodes": [asdict(n) for n in self.nodes],
            "edges": [
                {
                    "id": e.id,
                    "from": e.upstream_node,
                    "to": e.downstream_node,
                    "length": e.length,
                    "capacity": e.capacity,
                    "conveyance_coeff": e.conveyance_coeff,
                    "controllable": e.controllable,
                }
                for e in self.edges
            ],
        }

    @cached_property
    def content_hash(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()

    @cached_property
    def node_distances(self) -> np.ndarray:
        """All-pairs shortest undirected path length between nodes."""
        n = self.n_nodes
        u, v = self.endpoints[:, 0], self.endpoints[:, 1]
        lengths = self.edge_attr("length")
        # parallel conduits: keep the shortest
        weights: dict[tuple[int, int], float] = {}
        for a, b, w in zip(u, v, lengths):
            key = (min(a, b), max(a, b))
            weights[key] = min(w, weights.get(key, np.inf))
        rows = [k[0] for k in weights]
        cols = [k[1] for k in weights]
        mat = csr_matrix((list(weights.values()), (rows, cols)), shape=(n, n))
        dist = dijkstra(mat, directed=False)
        # summation order can differ between directions; make symmetry exact
        dist = np.minimum(dist, dist.T)
        dist.setflags(write=False)
        return dist

    @cached_property
    def edge_distances(self) -> np.ndarray:
        """Edge-edge distance: minimum node distance over the two edges' endpoint pairs."""
        d = self.node_distances
        up, dn = self.endpoints[:, 0], self.endpoints[:, 1]
        out = np.minimum.reduce([d[np.ix_(p, q)] for p in (up, dn) for q in (up, dn)])
        out.setflags(write=False)
        return out


def _validate(nodes, edges) -> dict[str, tuple[str, int]]:
    index: dict[str, tuple[str, int]] = {}
    if not nodes:
        raise NetworkValidationError("network has no nodes")
    for i, n in enumerate(nodes):
        if n.id in index:
            raise NetworkValidationError(f"duplicate element id {n.id!r}", n.id)
        index[n.id] = ("node", i)
        if n.kind not in NODE_KINDS:
            raise NetworkValidationError(f"node {n.id!r}: kind must be one of {NODE_KINDS}, got {n.kind!r}", n.id)
        if not n.max_depth > 0:
            raise NetworkValidationError(f"node {n.id!r}: max_depth must be > 0", n.id)
        if not n.storage_area > 0:
            raise NetworkValidationError(f"node {n.id!r}: storage_area must be > 0", n.id)
        if not n.catchment_area >= 0:
            raise NetworkValidationError(f"node {n.id!r}: catchment_area must be >= 0", n.id)
    for j, e in enumerate(edges):
        if e.id in index:
            raise NetworkValidationError(f"duplicate element id {e.id!r}", e.id)
        index[e.id] = ("edge", j)
        for ref in (e.upstream_node, e.downstream_node):
            if index.get(ref, ("edge",))[0] != "node":
                raise NetworkValidationError(f"edge {e.id!r} references missing node {ref!r}", ref)
        if e.upstream_node == e.downstream_node:
            raise NetworkValidationError(f"edge {e.id!r} is a self-loop on {e.upstream_node!r}", e.id)
        for name in ("length", "capacity", "conveyance_coeff"):
            if not getattr(e, name) > 0:
                raise NetworkValidationError(f"edge {e.id!r}: {name} must be > 0", e.id)

    outfalls = {n.id for n in nodes if n.is_outfall}
    if not outfalls:
        raise NetworkValidationError("network has no outfall node")
    for e in edges:
        if e.upstream_node in outfalls:
            raise NetworkValidationError(
                f"outfall {e.upstream_node!r} has outgoing edge {e.id!r}", e.upstream_node
            )

    n = len(nodes)
    rows = [index[e.upstream_node][1] for e in edges]
    cols = [index[e.downstream_node][1] for e in edges]
    ncomp, labels = connected_components(csr_matrix((np.ones(len(edges)), (rows, cols)), shape=(n, n)), directed=False)
    if ncomp > 1:
        stray = next(nodes[i].id for i in range(n) if labels[i] != labels[0])
        raise NetworkValidationError(f"network is disconnected: {stray!r} unreachable from {nodes[0].id!r}", stray)
    return index


def graph_from_dict(data: dict) -> DrainageGraph:
    if not isinstance(data, dict):
        raise NetworkFormatError("top level must be a JSON object")
    extra = set(data) - {"nodes", "edges"}
    if extra:
        raise NetworkFormatError(f"unknown top-level keys: {sorted(extra)}")
    nodes = []
    for raw in data.get("nodes", []):
        _check_keys(raw, _NODE_KEYS, "node")
        nodes.append(
            NodeSpec(
                id=str(raw["id"]),
                kind=raw["kind"],
                invert_elevation=float(raw["invert_elevation"]),
                max_depth=float(raw["max_depth"]),
                storage_area=float(raw["storage_area"]),
                catchment_area=float(raw["catchment_area"]),
            )
        )
    edges = []
    for raw in data.get("edges", []):
        _check_keys(raw, _EDGE_KEYS, "edge")
        edges.append(
            EdgeSpec(
                id=str(raw["id"]),
                upstream_node=str(raw["from"]),
                downstream_node=str(raw["to"]),
                length=float(raw["length"]),
                capacity=float(raw["capacity"]),
                conveyance_coeff=float(raw["conveyance_coeff"]),
                controllable=bool(raw["controllable"]),
            )
        )
    return DrainageGraph(nodes, edges)


def _check_keys(raw, allowed: set[str], what: str) -> None:
    if not isinstance(raw, dict):
        raise NetworkFormatError(f"{what} entry must be an object, got {type(raw).__name__}")
    ident = raw.get("id", "?")
    unknown = set(raw) - allowed
    if unknown:
        raise NetworkFormatError(f"{what} {ident!r}: unknown keys {sorted(unknown)}")
    missing = allowed - set(raw)
    if missing:
        raise NetworkFormatError(f"{what} {ident!r}: missing keys {sorted(missing)}")


def load_network(path: str | Path) -> DrainageGraph:
    path = Path(path)
    text = path.read_text()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        line = text.splitlines()[exc.lineno - 1] if exc.lineno <= len(text.splitlines()) else ""
        raise NetworkFormatError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}\n    {line}") from exc
    return graph_from_dict(data)


def save_network(graph: DrainageGraph, path: str | Path) -> None:
    Path(path).write_text(json.dumps(graph.to_dict(), indent=2) + "\n")


def shortest_path_dist(graph: DrainageGraph, a: str, b: str) -> float:
    """Undirected shortest drainage-path distance between two nodes or two edges."""
    kind_a, ia = graph._lookup(a)
    kind_b, ib = graph._lookup(b)
    if kind_a != kind_b:
        raise ValueError(f"cannot mix node and edge references ({a!r}, {b!r})")
    table = graph.node_distances if kind_a == "node" else graph.edge_distances
    return float(table[ia, ib])


def build_adjacency(graph: DrainageGraph, delta: float) -> AdjacencyPair:
    if delta < 0:
        raise ValueError(f"delta must be >= 0, got {delta}")
    node = (graph.node_distances <= delta).astype(np.float64)
    edge = (graph.edge_distances <= delta).astype(np.float64)
    return AdjacencyPair(node=node, edge=edge, delta=float(delta))


def incidence_matrix(graph: DrainageGraph) -> np.ndarray:
    """N x C signed incidence: +1 where the edge leaves the node, -1 where it enters."""
    m = np.zeros((graph.n_nodes, graph.n_edges), dtype=np.float64)
    cols = np.arange(graph.n_edges)
    m[graph.endpoints[:, 0], cols] = 1.0
    m[graph.endpoints[:, 1], cols] = -1.0
    return m
