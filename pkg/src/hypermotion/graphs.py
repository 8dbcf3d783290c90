"""Agent graphs and their expansion into agent-behavior graphs."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import DimensionError

LATERAL_MODES = ("left", "keep", "right")


@dataclass(frozen=True)
class AgentGraph:
    features: np.ndarray   # [N, C]
    adjacency: np.ndarray  # [N, N], nonnegative, unit diagonal

    def __post_init__(self):
        n = self.features.shape[0]
        if self.adjacency.shape != (n, n):
            raise DimensionError(f"adjacency {self.adjacency.shape} does not match N={n}")
        if np.any(self.adjacency < 0):
            raise ValueError("adjacency weights must be nonnegative")
        if not np.allclose(np.diag(self.adjacency), 1.0):
            raise ValueError("agent graph keeps self-loops: diagonal must be 1")

    @property
    def n_agents(self) -> int:
        return self.features.shape[0]

    @classmethod
    def fully_connected(cls, features) -> "AgentGraph":
        features = np.asarray(features, dtype=float)
        n = features.shape[0]
        return cls(features, np.ones((n, n)))


@dataclass(frozen=True)
class BehaviorCorrelation:
    lam: np.ndarray  # [M, M], symmetric, entries in [0, 1]

    def __post_init__(self):
        lam = self.lam
        if lam.ndim != 2 or lam.shape[0] != lam.shape[1]:
            raise DimensionError(f"behavior correlation must be square, got {lam.shape}")
        if not np.allclose(lam, lam.T):
            raise ValueError("behavior correlation must be symmetric")
        if np.any(lam < 0) or np.any(lam > 1):
            raise ValueError("behavior correlation entries must lie in [0, 1]")

    @property
    def modes(self) -> int:
        return self.lam.shape[0]

    @classmethod
    def ones(cls, modes: int = 3) -> "BehaviorCorrelation":
        return cls(np.ones((modes, modes)))


@dataclass(frozen=True)
class AgentBehaviorGraph:
    n_agents: int
    modes: int
    features: np.ndarray   # [M*N, C]
    adjacency: np.ndarray  # [M*N, M*N]
    node_index: dict = field(repr=False)  # (agent, mode) -> row

    @property
    def n_nodes(self) -> int:
        return self.n_agents * self.modes


def behavior_row(agent: int, mode: int, modes: int) -> int:
    """Row of behavior node (agent, mode); agent-major ordering."""
    return agent * modes + mode


def expand_graph(g: AgentGraph, corr: BehaviorCorrelation, per_mode_features) -> AgentBehaviorGraph:
    per_mode_features = np.asarray(per_mode_features, dtype=float)
    n, m = g.n_agents, corr.modes
    if per_mode_features.ndim != 3 or per_mode_features.shape[:2] != (n, m):
        raise DimensionError(
            f"per-mode features {per_mode_features.shape} must be [N={n}, M={m}, C]")
    c = per_mode_features.shape[2]
    adjacency = np.kron(g.adjacency, corr.lam)
    features = per_mode_features.reshape(n * m, c)
    index = {(i, k): behavior_row(i, k, m) for i in range(n) for k in range(m)}
    return AgentBehaviorGraph(n, m, features, adjacency, index)


def edge_list(g: AgentBehaviorGraph) -> list[tuple[tuple[int, int], tuple[int, int], float]]:
    """All ((i, m), (j, n), weight) with a nonzero expanded adjacency entry."""
    rows, cols = np.nonzero(g.adjacency)
    m = g.modes
    return [((int(r) // m, int(r) % m), (int(c) // m, int(c) % m), float(g.adjacency[r, c]))
            for r, c in zip(rows, cols)]
