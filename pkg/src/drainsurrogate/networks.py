"""Synthetic drainage networks used in place of real SWMM models."""

from __future__ import annotations

import numpy as np

from .graph import DrainageGraph, EdgeSpec, NodeSpec

# design rainfall intensity used to size conduits, mm/min
DESIGN_INTENSITY = 1.0
RUNOFF_COEFF = 0.001  # mm * m2 -> m3


def chain_network(n_nodes: int = 3, length: float = 600.0, storage_area: float = 30.0) -> DrainageGraph:
    """Straight chain v1 -> v2 -> ... -> vn with the last node an outfall."""
    nodes = []
    for i in range(n_nodes):
        outfall = i == n_nodes - 1
        nodes.append(
            NodeSpec(
                id=f"v{i + 1}",
                kind="outfall" if outfall else "junction",
                invert_elevation=0.5 * (n_nodes - 1 - i),
                max_depth=3.0,
                storage_area=storage_area,
                catchment_area=0.0 if outfall else 10000.0,
            )
        )
    edges = [
        EdgeSpec(
            id=f"e{i + 1}",
            upstream_node=f"v{i + 1}",
            downstream_node=f"v{i + 2}",
            length=length,
            capacity=20.0,
            conveyance_coeff=10.0,
            controllable=False,
        )
        for i in range(n_nodes - 1)
    ]
    return DrainageGraph(nodes, edges)


def synthetic_network(
    n_nodes: int,
    n_edges: int,
    n_outfalls: int = 1,
    seed: int = 0,
    undersize: tuple[float, float] = (0.5, 1.2),
) -> DrainageGraph:
    """Random dendritic network with extra downhill cross-connections.

    Grows one tree per outfall, then adds ``n_edges - (n_nodes - n_outfalls)``
    cross edges, the first ones joining the trees so the network is connected.
    Every edge runs from a higher to a lower invert, so the directed graph is
    acyclic and outfalls never get outgoing edges. Conduit capacities are sized
    from upstream catchment area times a random factor drawn from ``undersize``;
    factors below one create the bottlenecks that make manholes surcharge.
    """
    n_junctions = n_nodes - n_outfalls
    n_tree = n_junctions
    n_extra = n_edges - n_tree
    if n_outfalls < 1 or n_junctions < n_outfalls:
        raise ValueError("need at least one outfall and one junction per outfall")
    if n_extra < n_outfalls - 1:
        raise ValueError(f"{n_edges} edges cannot connect {n_outfalls} outfall trees")
    rng = np.random.default_rng(seed)

    invert = np.zeros(n_nodes)
    tree_of = np.zeros(n_nodes, dtype=int)
    is_outfall = np.zeros(n_nodes, dtype=bool)
    children = np.zeros(n_nodes, dtype=int)
    links: list[tuple[int, int, float]] = []

    for k in range(n_outfalls):
        invert[k] = rng.uniform(0.0, 0.5)
        tree_of[k] = k
        is_outfall[k] = True
    for i in range(n_outfalls, n_nodes):
        if i < 2 * n_outfalls:
            parent = i - n_outfalls
        else:
            candidates = [p for p in range(n_outfalls, i) if children[p] < 3]
            parent = int(rng.choice(candidates))
        length = float(rng.uniform(200.0, 600.0))
        invert[i] = invert[parent] + length * rng.uniform(0.001, 0.003)
        tree_of[i] = tree_of[parent]
        children[parent] += 1
        links.append((i, parent, length))

    existing = {(u, v) for u, v, _ in links}

    def add_cross(pool_u, pool_v) -> None:
        pairs = [(u, v) for u in pool_u for v in pool_v if invert[v] < invert[u] and (u, v) not in existing and (v, u) not in existing]
        if not pairs:
            raise ValueError(f"no room for {n_edges} downhill conduits among {n_nodes} nodes")
        u, v = pairs[int(rng.integers(len(pairs)))]
        existing.add((u, v))
        links.append((u, v, float(rng.uniform(200.0, 600.0))))

    junctions = [i for i in range(n_nodes) if not is_outfall[i]]
    for k in range(n_outfalls - 1):
        pool_u = [i for i in junctions if tree_of[i] == k + 1]
        pool_v = [i for i in junctions if tree_of[i] == k]
        add_cross(pool_u, pool_v)
    for _ in range(n_extra - (n_outfalls - 1)):
        add_cross(junctions, list(range(n_nodes)))

    max_depth = rng.uniform(2.0, 3.5, n_nodes)
    storage = rng.uniform(20.0, 50.0, n_nodes)
    catchment = np.where(is_outfall, 0.0, rng.uniform(5000.0, 20000.0, n_nodes))

    # contributing area: catchment of every node that can drain into the edge's upstream node
    downstream: dict[int, list[int]] = {i: [] for i in range(n_nodes)}
    for u, v, _ in links:
        downstream[u].append(v)
    order = np.argsort(-invert)  # high to low is a topological order
    contrib = catchment.copy()
    for u in order:
        outs = downstream[u]
        for v in outs:
            contrib[v] += contrib[u] / len(outs)

    nodes = [
        NodeSpec(
            id=f"O{i + 1}" if is_outfall[i] else f"J{i - n_outfalls + 1}",
            kind="outfall" if is_outfall[i] else "junction",
            invert_elevation=round(float(invert[i]), 4),
            max_depth=round(float(max_depth[i]), 4),
            storage_area=round(float(storage[i]), 3),
            catchment_area=round(float(catchment[i]), 1),
        )
        for i in range(n_nodes)
    ]
    edges = []
    for j, (u, v, length) in enumerate(links):
        share = contrib[u] / len(downstream[u])
        capacity = max(RUNOFF_COEFF * share * DESIGN_INTENSITY * rng.uniform(*undersize), 1.0)
        drop = max(invert[u] - invert[v], 0.1)
        edges.append(
            EdgeSpec(
                id=f"C{j + 1}",
                upstream_node=nodes[u].id,
                downstream_node=nodes[v].id,
                length=round(length, 2),
                capacity=round(float(capacity), 4),
                conveyance_coeff=round(float(capacity / np.sqrt(drop + 1.5)), 4),
                controllable=False,
            )
        )
    return DrainageGraph(nodes, edges)


def toy_network(seed: int = 0) -> DrainageGraph:
    """~15-node / 16-conduit desk-scale network."""
    return synthetic_network(15, 16, n_outfalls=1, seed=seed)


def large_network(seed: int = 0) -> DrainageGraph:
    """105 nodes (8 outfalls) and 131 conduits, a mid-size urban catchment."""
    return synthetic_network(105, 131, n_outfalls=8, seed=seed)


def tiny_network() -> DrainageGraph:
    """Four nodes, three conduits: two branches joining above an outfall (v1, v2 -> v3 -> v4)."""
    spec = [("v1", 2.0), ("v2", 1.8), ("v3", 1.0), ("v4", 0.0)]
    nodes = [
        NodeSpec(id=i, kind="outfall" if i == "v4" else "junction", invert_elevation=z, max_depth=2.5, storage_area=25.0,
                 catchment_area=0.0 if i == "v4" else 8000.0)
        for i, z in spec
    ]
    edges = [
        EdgeSpec(id=f"e{k + 1}", upstream_node=u, downstream_node=v, length=length, capacity=cap, conveyance_coeff=cap / 1.5)
        for k, (u, v, length, cap) in enumerate([("v1", "v3", 400.0, 8.0), ("v2", "v3", 350.0, 8.0), ("v3", "v4", 500.0, 14.0)])
    ]
    return DrainageGraph(nodes, edges)
