"""Communication topologies.

A :class:`DeviceGraph` holds the base graph over device indices 1..C plus the
external collection entity at index 0. Device-device adjacency is symmetric
and every device carries a self-loop; the entity has no self-loop and links
only to the aggregator devices. Devices are laid out on a ceil(sqrt(C)) lattice
in row-major order, which defines the grid, torus and random-geometric kinds.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ConvergenceError, InputError

GRAPH_KINDS = ("complete", "ring", "grid", "rgg", "torus")
_LATTICE_KINDS = ("grid", "rgg", "torus")


@dataclass
class DeviceGraph:
    device_count: int
    kind: str
    aggregators: tuple
    adj: np.ndarray        # (C+1, C+1) bool, index 0 is the entity
    positions: np.ndarray  # (C, 2) int lattice coordinates, row-major
    rgg_radius: float | None = None

    def device_neighbors(self, c: int):
        """Neighboring devices of c, self excluded."""
        return [d for d in range(1, self.device_count + 1) if d != c and self.adj[c, d]]

    def undirected_device_edges(self):
        c = self.device_count
        return [(u, v) for u in range(1, c + 1) for v in range(u + 1, c + 1) if self.adj[u, v]]


def lattice_positions(device_count: int) -> np.ndarray:
    side = math.isqrt(device_count)
    if side * side < device_count:
        side += 1
    ids = np.arange(device_count)
    return np.stack([ids // side, ids % side], axis=1)


def build_graph(kind, device_count, aggregator_count, seed=0, *,
                rgg_radius=None, random_aggregators=False) -> DeviceGraph:
    """Construct a base graph with self-loops and entity links to aggregators.

    Aggregators default to the lowest ``aggregator_count`` device indices;
    ``random_aggregators`` draws them uniformly at random with the given seed.
    """
    if kind not in GRAPH_KINDS:
        raise ConfigError(f"unknown graph kind {kind!r}")
    c = int(device_count)
    k = int(aggregator_count)
    if c < 1:
        raise ConfigError("device_count must be >= 1")
    if not 1 <= k <= c:
        raise ConfigError(f"aggregator count {k} out of range 1..{c}")
    side = math.isqrt(c)
    if kind in _LATTICE_KINDS and side * side != c:
        raise ConfigError(f"{kind} graphs need a perfect-square device count, got {c}")
    if kind == "rgg":
        if rgg_radius is None or rgg_radius <= 0:
            raise ConfigError("rgg graphs need a positive radius")

    pos = lattice_positions(c)
    adj = np.zeros((c + 1, c + 1), dtype=bool)

    def connect(u, v):
        adj[u, v] = True
        adj[v, u] = True

    if kind == "complete":
        for u in range(1, c + 1):
            for v in range(u + 1, c + 1):
                connect(u, v)
    elif kind == "ring":
        for u in range(1, c):
            connect(u, u + 1)
        if c > 1:
            connect(c, 1)  # last device connected to the first
    elif kind == "grid":
        for u in range(1, c + 1):
            for v in range(u + 1, c + 1):
                if np.abs(pos[u - 1] - pos[v - 1]).sum() == 1:
                    connect(u, v)
    elif kind == "rgg":
        r2 = float(rgg_radius) ** 2
        for u in range(1, c + 1):
            for v in range(u + 1, c + 1):
                d2 = ((pos[u - 1] - pos[v - 1]) ** 2).sum()
                if d2 <= r2:  # closed ball
                    connect(u, v)
    elif kind == "torus":
        for u in range(1, c + 1):
            for v in range(u + 1, c + 1):
                dr = abs(int(pos[u - 1][0]) - int(pos[v - 1][0]))
                dc = abs(int(pos[u - 1][1]) - int(pos[v - 1][1]))
                dr = min(dr, side - dr)
                dc = min(dc, side - dc)
                if dr + dc == 1:
                    connect(u, v)

    for u in range(1, c + 1):
        adj[u, u] = True

    if random_aggregators:
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))
        aggs = tuple(sorted(int(a) + 1 for a in rng.choice(c, size=k, replace=False)))
    else:
        aggs = tuple(range(1, k + 1))
    for a in aggs:
        adj[0, a] = True
        adj[a, 0] = True

    return DeviceGraph(c, kind, aggs, adj, pos,
                       float(rgg_radius) if kind == "rgg" else None)


def consensus_matrix(graph: DeviceGraph) -> np.ndarray:
    """Row-stochastic V = D^-1 A over device indices, self-loops included."""
    a = graph.adj[1:, 1:].astype(np.float64)
    deg = a.sum(axis=1)
    if np.any(deg == 0):
        raise ConfigError("isolated device without self-loop")
    return a / deg[:, None]


def spectral_radius(v: np.ndarray, seed=0, max_iter=10000, tol=1e-10) -> float:
    """Largest |eigenvalue| of V - (1/C)*ones, by power iteration.

    The all-ones consensus direction is annihilated by the shift, so the
    result measures the per-round contraction of disagreement. Raises
    ConvergenceError (carrying the last iterate gap) if the eigenvalue
    estimate has not stabilized within ``max_iter`` steps.
    """
    v = np.asarray(v, dtype=np.float64)
    c = v.shape[0]
    if v.shape != (c, c):
        raise ConfigError("consensus matrix must be square")
    m = v - 1.0 / c
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))
    x = rng.standard_normal(c)
    x /= np.linalg.norm(x)
    prev = np.inf
    lam = 0.0
    for _ in range(max_iter):
        y = m @ x
        lam = float(np.linalg.norm(y))
        if lam < tol:
            return 0.0
        x = y / lam
        if abs(lam - prev) < tol:
            return lam
        prev = lam
    raise ConvergenceError("power iteration did not converge", abs(lam - prev))


def is_connected(graph: DeviceGraph, subset) -> bool:
    """Breadth-first reachability over the subset-induced device subgraph."""
    nodes = sorted(set(int(s) for s in subset))
    if not nodes:
        raise InputError("subset must be nonempty")
    for n in nodes:
        if not 1 <= n <= graph.device_count:
            raise InputError(f"device index {n} out of range")
    allowed = set(nodes)
    seen = {nodes[0]}
    frontier = [nodes[0]]
    while frontier:
        u = frontier.pop()
        for w in graph.device_neighbors(u):
            if w in allowed and w not in seen:
                seen.add(w)
                frontier.append(w)
    return seen == allowed


def save_edgelist(graph: DeviceGraph, path):
    """Write the graph as one `u v` pair per line with a descriptive header.

    Entity links come first, then undirected device pairs (u < v); self-loops
    are implicit.
    """
    lines = [f"# C={graph.device_count} K={len(graph.aggregators)} kind={graph.kind}"
             + (f" r={graph.rgg_radius:g}" if graph.rgg_radius is not None else "")]
    for a in graph.aggregators:
        lines.append(f"0 {a}")
    for u, v in graph.undirected_device_edges():
        lines.append(f"{u} {v}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_edgelist(path) -> DeviceGraph:
    with open(path) as f:
        lines = [ln.strip() for ln in f if ln.strip()]
    if not lines or not lines[0].startswith("#"):
        raise ConfigError(f"{path}: missing edge-list header")
    header = dict(re.findall(r"(\w+)=([\w.+-]+)", lines[0]))
    try:
        c = int(header["C"])
        kind = header["kind"]
    except KeyError as exc:
        raise ConfigError(f"{path}: header missing field {exc}") from exc
    adj = np.zeros((c + 1, c + 1), dtype=bool)
    aggs = []
    for ln in lines[1:]:
        parts = ln.split()
        if len(parts) != 2:
            raise ConfigError(f"{path}: bad edge line {ln!r}")
        u, v = int(parts[0]), int(parts[1])
        adj[u, v] = True
        adj[v, u] = True
        if u == 0:
            aggs.append(v)
    for u in range(1, c + 1):
        adj[u, u] = True
    radius = float(header["r"]) if "r" in header else None
    return DeviceGraph(c, kind, tuple(sorted(aggs)), adj, lattice_positions(c), radius)
