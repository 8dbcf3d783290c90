"""Hypergraph relational encoder.

Trajectories are embedded, compared by cosine affinity, grouped into
multi-scale hyperedges, and refined by node -> hyperedge -> node message
passing. Hyperedge selection runs on detached embeddings.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .hypergraphs import Hypergraph, MultiScaleHypergraph, ScaleEntry, incidence_from_sets
from .nn import ParameterStore, SeededRng, gumbel_softmax_sample, mlp_forward

EXACT_MAX_NODES = 12


class ConfigError(ValueError):
    pass


class DegenerateEmbeddingError(ValueError):
    pass


@dataclass
class EncoderConfig:
    scales: tuple = (3, 5)        # group sizes J^(s) for s >= 1
    d_embed: int = 128
    hidden: int = 128
    categories: int = 4
    tau: float = 1.0
    passes: int = 2
    selection_mode: str = "auto"  # exact | greedy | auto
    share_scales: bool = False

    def __post_init__(self):
        self.scales = tuple(int(j) for j in self.scales)
        if any(j < 2 for j in self.scales):
            raise ConfigError(f"group sizes must be >= 2, got {self.scales}")
        if any(b <= a for a, b in zip(self.scales, self.scales[1:])):
            raise ConfigError(f"group sizes must strictly increase, got {self.scales}")
        if self.selection_mode not in ("exact", "greedy", "auto"):
            raise ConfigError(f"unknown selection mode {self.selection_mode!r}")

    @property
    def n_scales(self) -> int:
        return len(self.scales) + 1


@dataclass
class HyperedgeAnnotation:
    strength: float
    category_probs: np.ndarray
    collective_embedding: np.ndarray = field(repr=False)


# ---- embedding and affinity ---------------------------------------------

def embed_trajectories(store: ParameterStore, prefix: str, states, d: int, hidden: int) -> Tensor:
    """f_q: flatten each node's state sequence and map it to width ``d``.

    The hidden layer uses tanh: a relu layer can go fully dead for a node and
    yield a zero embedding, for which cosine affinity is undefined.
    """
    states = ad.as_tensor(states)
    n = states.shape[0]
    flat = states.reshape(n, -1)
    return mlp_forward(store, prefix, flat, [flat.shape[1], hidden, d], activation="tanh")


def affinity(q) -> np.ndarray:
    """Pairwise cosine similarity of embedding rows."""
    q = np.asarray(q.data if isinstance(q, Tensor) else q, dtype=float)
    norms = np.linalg.norm(q, axis=1)
    if np.any(norms == 0):
        bad = np.flatnonzero(norms == 0).tolist()
        raise DegenerateEmbeddingError(f"zero-norm trajectory embedding for nodes {bad}")
    unit = q / norms[:, None]
    a = unit @ unit.T
    a = 0.5 * (a + a.T)
    np.fill_diagonal(a, 1.0)
    return np.clip(a, -1.0, 1.0)


# ---- hyperedge selection --------------------------------------------------

def group_objective(aff: np.ndarray, members: Sequence[int]) -> float:
    """Entrywise 1-norm of the affinity submatrix induced by ``members``."""
    idx = np.asarray(members)
    return float(np.abs(aff[np.ix_(idx, idx)]).sum())


@lru_cache(maxsize=256)
def _completions(n: int, seed: int, k: int) -> np.ndarray:
    others = [v for v in range(n) if v != seed]
    combos = list(itertools.combinations(others, k))
    if not combos:
        return np.zeros((1, 0), dtype=int)
    return np.asarray(combos, dtype=int)


def exact_group(aff: np.ndarray, seed: int, size: int) -> tuple:
    """Best ``size``-subset containing ``seed`` by full enumeration.

    Ties go to the lexicographically smallest completion.
    """
    absa = np.abs(aff)
    n = absa.shape[0]
    comp = _completions(n, seed, size - 1)
    # objective = |a_ss| + 2 * sum_c |a_sc| + sum_{c,c'} |a_cc'|
    inner = absa[comp[:, :, None], comp[:, None, :]].sum(axis=(1, 2))
    link = absa[seed, comp].sum(axis=1)
    score = absa[seed, seed] + 2.0 * link + inner
    best = int(np.argmax(score))
    return tuple(sorted((seed, *comp[best].tolist())))


def greedy_group(aff: np.ndarray, seed: int, size: int) -> tuple:
    """Grow from ``{seed}``, each time adding the node with the largest objective gain."""
    absa = np.abs(aff)
    n = absa.shape[0]
    chosen = [seed]
    in_set = np.zeros(n, dtype=bool)
    in_set[seed] = True
    link = absa[:, seed].copy()  # sum of |a| from each node into the current set
    while len(chosen) < size:
        gain = 2.0 * link + np.diag(absa)
        gain[in_set] = -np.inf
        c = int(np.argmax(gain))
        chosen.append(c)
        in_set[c] = True
        link += absa[:, c]
    return tuple(sorted(chosen))


def pairwise_partners(aff: np.ndarray) -> list[tuple]:
    """Each node linked to its highest-affinity partner (lowest index on ties)."""
    n = aff.shape[0]
    if n < 2:
        return []
    masked = aff.copy()
    np.fill_diagonal(masked, -np.inf)
    partners = np.argmax(masked, axis=1)
    return [tuple(sorted((i, int(partners[i])))) for i in range(n)]


def infer_hyperedges(aff: np.ndarray, cfg: EncoderConfig, features=None,
                     node_kind: str = "agent", modes: int = 1) -> MultiScaleHypergraph:
    aff = np.asarray(aff, dtype=float)
    n = aff.shape[0]
    bad = [j for j in cfg.scales if j > n]
    if bad:
        raise ConfigError(f"group sizes {bad} exceed the node count {n}")
    mode = cfg.selection_mode
    if mode == "auto":
        mode = "exact" if n <= EXACT_MAX_NODES else "greedy"
    pick = exact_group if mode == "exact" else greedy_group
    feats = np.zeros((n, 0)) if features is None else np.asarray(features)

    pairs = pairwise_partners(aff)
    entries = [ScaleEntry(0, 2, Hypergraph(incidence_from_sets(n, pairs), feats, node_kind, modes),
                          tuple(pairs))]
    for s, size in enumerate(cfg.scales, start=1):
        sets = [pick(aff, i, size) for i in range(n)]
        inc = incidence_from_sets(n, sets)
        entries.append(ScaleEntry(s, size, Hypergraph(inc, feats, node_kind, modes), tuple(sets)))
    return MultiScaleHypergraph(tuple(entries))


def block_incidences(affinities: Sequence[np.ndarray], offsets: Sequence[int], n_total: int,
                     cfg: EncoderConfig) -> tuple[list[np.ndarray], list[MultiScaleHypergraph]]:
    """Infer hypergraphs per scenario block and assemble block-diagonal incidences.

    Group sizes larger than a block are clamped to the block size.
    """
    per_scale: list[list[np.ndarray]] = [[] for _ in range(cfg.n_scales)]
    graphs = []
    for aff, off in zip(affinities, offsets):
        n = aff.shape[0]
        sizes = []
        for j in cfg.scales:
            j = min(j, n)
            if j >= 2 and (not sizes or j > sizes[-1]):
                sizes.append(j)
        local_cfg = EncoderConfig(tuple(sizes), cfg.d_embed, cfg.hidden, cfg.categories,
                                  cfg.tau, cfg.passes, cfg.selection_mode)
        msh = infer_hyperedges(aff, local_cfg)
        graphs.append(msh)
        for s in range(cfg.n_scales):
            # clamped-away scales reuse the largest feasible one
            entry = msh[min(s, len(msh) - 1)]
            block = np.zeros((n_total, entry.hypergraph.n_hyperedges))
            block[off:off + n] = entry.hypergraph.incidence
            per_scale[s].append(block)
    incidences = [np.concatenate(blocks, axis=1) if blocks else np.zeros((n_total, 0))
                  for blocks in per_scale]
    return incidences, graphs


# ---- message passing ----------------------------------------------------

class NoiseBank:
    """Gumbel noise drawn once per (encoder prefix, scale, pass) and reused.

    Makes a stochastic forward pass a deterministic function of the
    parameters, which finite-difference checks need.
    """

    def __init__(self, seed: int = 0):
        self.rng = SeededRng(seed)
        self._cache: dict = {}

    def draw(self, key, shape) -> np.ndarray:
        if key not in self._cache or self._cache[key].shape != tuple(shape):
            self._cache[key] = self.rng.gumbel(tuple(shape))
        return self._cache[key]


def node_to_hyperedge(store: ParameterStore, prefix: str, node_emb, incidence: np.ndarray,
                      cfg: EncoderConfig, rng: SeededRng | None = None,
                      noise: np.ndarray | None = None, tau: float | None = None,
                      training: bool = True) -> tuple[Tensor, list[HyperedgeAnnotation]]:
    """Aggregate member embeddings into hyperedge embeddings.

    Per hyperedge: member weights w from F_w(v_j, sum v), collective
    embedding z = sum w_j v_j, strength r = sigmoid(F_r(z)), category
    probabilities c (Gumbel-softmax of F_c(z) when training, the noise-free
    tempered softmax otherwise) and u = r * sum_l c_l F_l(sum v).
    """
    v = ad.as_tensor(node_emb)
    d = v.shape[1]
    h = cfg.hidden
    n_edges = incidence.shape[1]
    nodes, edges = np.nonzero(incidence)
    gather_members = np.zeros((len(nodes), incidence.shape[0]))
    gather_members[np.arange(len(nodes)), nodes] = 1.0
    scatter = np.zeros((n_edges, len(nodes)))
    scatter[edges, np.arange(len(nodes))] = 1.0

    member_sum = ad.as_tensor(incidence.T) @ v                   # [E, d]
    v_m = gather_members @ v                                      # [P, d]
    s_m = scatter.T @ member_sum                                  # [P, d]
    w = ad.sigmoid(mlp_forward(store, f"{prefix}.fw", ad.concat([v_m, s_m], axis=1), [2 * d, h, 1]))
    z = scatter @ (w * v_m)                                       # [E, d]
    r = ad.sigmoid(mlp_forward(store, f"{prefix}.fr", z, [d, h, 1]))
    scores = mlp_forward(store, f"{prefix}.fc", z, [d, h, cfg.categories])
    t = cfg.tau if tau is None else tau
    if training:
        c = gumbel_softmax_sample(scores, t, rng=rng, noise=noise)
    else:
        # noise-free limit of the training distribution at the same temperature
        c = ad.softmax(ad.log_softmax(scores, axis=-1) * (1.0 / t), axis=-1)
    mixed = None
    for l in range(cfg.categories):
        fl = mlp_forward(store, f"{prefix}.f{l}", member_sum, [d, h, d])
        term = c[:, l:l + 1] * fl
        mixed = term if mixed is None else mixed + term
    u = r * mixed
    notes = [HyperedgeAnnotation(float(r.data[j, 0]), c.data[j].copy(), z.data[j].copy())
             for j in range(n_edges)]
    return u, notes


def hyperedge_to_node(store: ParameterStore, prefix: str, node_emb, edge_emb,
                      incidence: np.ndarray, hidden: int) -> Tensor:
    """F_v([v_i, sum of incident hyperedge embeddings])."""
    v = ad.as_tensor(node_emb)
    d = v.shape[1]
    incident = ad.as_tensor(incidence) @ ad.as_tensor(edge_emb)
    return mlp_forward(store, f"{prefix}.fv", ad.concat([v, incident], axis=1),
                       [2 * d, hidden, d])


def message_passing(store: ParameterStore, prefix: str, q: Tensor, incidences: Sequence[np.ndarray],
                    cfg: EncoderConfig, rng: SeededRng | None, training: bool = True,
                    tau: float | None = None, noises: dict | None = None) -> Tensor:
    """``cfg.passes`` rounds per scale, concatenating the final per-scale embeddings."""
    outs = []
    for s, inc in enumerate(incidences):
        sp = f"{prefix}.mp" if cfg.share_scales else f"{prefix}.s{s}"
        v = q
        for p in range(cfg.passes):
            if noises is None:
                noise = None
            elif isinstance(noises, NoiseBank):
                noise = noises.draw((prefix, s, p), (inc.shape[1], cfg.categories))
            else:
                noise = noises.get((s, p))
            u, _ = node_to_hyperedge(store, sp, v, inc, cfg, rng=rng, noise=noise,
                                     tau=tau, training=training)
            v = hyperedge_to_node(store, sp, v, u, inc, cfg.hidden)
        outs.append(v)
    return outs[0] if len(outs) == 1 else ad.concat(outs, axis=1)


def encode(store: ParameterStore, prefix: str, states, cfg: EncoderConfig,
           rng: SeededRng | None, blocks: Sequence[tuple[int, int]] | None = None,
           training: bool = True, tau: float | None = None,
           noises: dict | None = None) -> tuple[Tensor, list[MultiScaleHypergraph]]:
    """Embed, infer per-block multi-scale hypergraphs, then pass messages.

    ``blocks`` lists (offset, size) row ranges that form independent
    scenarios; the default treats all rows as one scenario. Output width is
    ``d_embed * (len(cfg.scales) + 1)``.
    """
    states = ad.as_tensor(states)
    n = states.shape[0]
    if blocks is None:
        blocks = [(0, n)]
    q = embed_trajectories(store, f"{prefix}.fq", states, cfg.d_embed, cfg.hidden)
    affs = [affinity(q.data[o:o + m]) for o, m in blocks]
    incidences, graphs = block_incidences(affs, [o for o, _ in blocks], n, cfg)
    out = message_passing(store, prefix, q, incidences, cfg, rng, training, tau, noises)
    return out, graphs
