"""Agent and agent-behavior hypergraphs over binary incidence matrices."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .graphs import AgentBehaviorGraph, AgentGraph, BehaviorCorrelation, behavior_row
from .autodiff import DimensionError


class StructureError(ValueError):
    """Malformed hyperedge or kind mismatch."""


@dataclass(frozen=True)
class Hypergraph:
    incidence: np.ndarray  # [n_nodes, n_edges] of {0, 1}
    features: np.ndarray   # [n_nodes, C]
    node_kind: str = "agent"
    modes: int = 1

    def __post_init__(self):
        h = self.incidence
        if h.ndim != 2:
            raise StructureError(f"incidence must be 2-D, got {h.shape}")
        if not np.all((h == 0) | (h == 1)):
            raise StructureError("incidence entries must be exactly 0 or 1")
        if h.shape[1] and np.any(h.sum(axis=0) < 2):
            raise StructureError("every hyperedge must join at least two nodes")
        if self.features.shape[0] != h.shape[0]:
            raise DimensionError(
                f"feature rows {self.features.shape[0]} != incidence rows {h.shape[0]}")
        if self.node_kind not in ("agent", "agent_behavior"):
            raise StructureError(f"unknown node kind {self.node_kind!r}")

    @property
    def n_nodes(self) -> int:
        return self.incidence.shape[0]

    @property
    def n_hyperedges(self) -> int:
        return self.incidence.shape[1]

    def members(self, edge: int) -> list[int]:
        return np.flatnonzero(self.incidence[:, edge]).tolist()

    def edge_sets(self) -> list[frozenset]:
        return [frozenset(self.members(j)) for j in range(self.n_hyperedges)]


@dataclass(frozen=True)
class ScaleEntry:
    scale: int
    group_size: int
    hypergraph: Hypergraph
    seed_sets: tuple = field(default=(), repr=False)  # selected set per seed node


@dataclass(frozen=True)
class MultiScaleHypergraph:
    scales: tuple  # of ScaleEntry; scale 0 holds pairwise links

    def __post_init__(self):
        sizes = [e.group_size for e in self.scales[1:]]
        if any(b <= a for a, b in zip(sizes, sizes[1:])):
            raise StructureError(f"group sizes must strictly increase, got {sizes}")

    def __len__(self) -> int:
        return len(self.scales)

    def __getitem__(self, s: int) -> ScaleEntry:
        return self.scales[s]


def incidence_from_sets(n_nodes: int, sets: Sequence[Iterable[int]], dedupe: bool = True) -> np.ndarray:
    cols, seen = [], set()
    for s in sets:
        members = frozenset(int(v) for v in s)
        if len(members) < 2:
            raise StructureError(f"hyperedge {sorted(members)} has fewer than two nodes")
        bad = [v for v in members if v < 0 or v >= n_nodes]
        if bad:
            raise StructureError(f"hyperedge references nodes {bad} outside [0, {n_nodes})")
        if dedupe:
            if members in seen:
                continue
            seen.add(members)
        col = np.zeros(n_nodes)
        col[list(members)] = 1.0
        cols.append(col)
    if not cols:
        return np.zeros((n_nodes, 0))
    return np.stack(cols, axis=1)


def transform_graph(g: AgentGraph | AgentBehaviorGraph, hyperedges: Sequence[Iterable[int]],
                    dedupe: bool = False) -> Hypergraph:
    """Replace pairwise edges of ``g`` by the given node groups."""
    n = g.features.shape[0]
    incidence = incidence_from_sets(n, hyperedges, dedupe=dedupe)
    if isinstance(g, AgentBehaviorGraph):
        return Hypergraph(incidence, g.features.copy(), "agent_behavior", g.modes)
    return Hypergraph(incidence, g.features.copy(), "agent", 1)


def expand_hypergraph(h: Hypergraph, corr: BehaviorCorrelation, per_mode_features,
                      mode_pairs: bool = False) -> Hypergraph:
    """Split every agent node into ``M`` behavior nodes.

    Default: one expanded column per agent hyperedge holding every
    participating mode of every member. ``mode_pairs=True`` instead emits one
    column per nonzero mode pair (m, n): members' mode-m and mode-n copies.
    """
    if h.node_kind != "agent":
        raise StructureError("expand_hypergraph expects an agent hypergraph")
    per_mode_features = np.asarray(per_mode_features, dtype=float)
    n, m = h.n_nodes, corr.modes
    if per_mode_features.ndim != 3 or per_mode_features.shape[:2] != (n, m):
        raise DimensionError(f"per-mode features {per_mode_features.shape} must be [N={n}, M={m}, C]")
    lam = corr.lam
    active = [k for k in range(m) if np.any(lam[k] != 0)]
    sets = []
    for agents in h.edge_sets():
        if mode_pairs:
            for a in range(m):
                for b in range(a, m):
                    if lam[a, b] != 0:
                        modes = {a, b}
                        sets.append([behavior_row(i, k, m) for i in agents for k in modes])
        else:
            sets.append([behavior_row(i, k, m) for i in agents for k in active])
    incidence = incidence_from_sets(n * m, sets, dedupe=mode_pairs)
    features = per_mode_features.reshape(n * m, -1)
    return Hypergraph(incidence, features, "agent_behavior", m)


def node_degree(h: Hypergraph) -> np.ndarray:
    return h.incidence.sum(axis=1)


def write_incidence_csv(path, h: Hypergraph) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["node_id", "edge_id", "member"])
        for i in range(h.n_nodes):
            for j in range(h.n_hyperedges):
                w.writerow([i, j, int(h.incidence[i, j])])


def write_affinity_csv(path, affinity: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["i", "j", "affinity"])
        n = affinity.shape[0]
        for i in range(n):
            for j in range(n):
                w.writerow([i, j, repr(float(affinity[i, j]))])


def read_incidence_csv(path) -> np.ndarray:
    rows = list(csv.DictReader(open(path, newline="")))
    if not rows:
        return np.zeros((0, 0))
    n = max(int(r["node_id"]) for r in rows) + 1
    e = max(int(r["edge_id"]) for r in rows) + 1
    out = np.zeros((n, e))
    for r in rows:
        out[int(r["node_id"]), int(r["edge_id"])] = float(r["member"])
    return out


def ensure_dir(path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path
