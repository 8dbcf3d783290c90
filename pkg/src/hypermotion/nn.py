"""Trainable building blocks on top of :mod:`hypermotion.autodiff`."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor


class ParameterError(ValueError):
    """Raised for invalid scalar hyperparameters (non-positive tau, sigma...)."""


class SeededRng:
    """Reproducible noise source (PCG64 stream keyed by an unsigned seed)."""

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self._gen = np.random.Generator(np.random.PCG64(self.seed))

    def uniform(self, shape, low=0.0, high=1.0) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(size=shape)

    def gumbel(self, shape) -> np.ndarray:
        u = self._gen.random(size=shape)
        u = np.clip(u, 1e-300, 1.0 - 1e-16)
        return -np.log(-np.log(u))

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def spawn(self, offset: int) -> "SeededRng":
        return SeededRng((self.seed * 1_000_003 + offset) & 0xFFFFFFFFFFFFFFFF)


class ParameterStore:
    """Named trainable arrays. Parameters are created lazily on first access.

    Lazy creation draws Glorot-uniform values from the store's own seeded
    stream, so creation order (not wall-clock) fixes the initial weights.
    """

    def __init__(self, seed: int = 0):
        self.seed = seed
        self._rng = SeededRng(seed)
        self._params: dict[str, Tensor] = {}
        self.frozen: set[str] = set()

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def get(self, name: str, shape: tuple, init: str = "glorot") -> Tensor:
        p = self._params.get(name)
        if p is None:
            p = Tensor(self._initial(shape, init), requires_grad=True)
            self._params[name] = p
        elif p.shape != tuple(shape):
            raise DimensionError(f"parameter {name!r} has shape {p.shape}, requested {tuple(shape)}")
        return p

    def _initial(self, shape, init):
        if init == "zeros":
            return np.zeros(shape)
        fan_in = shape[0] if len(shape) > 1 else 1
        fan_out = shape[-1]
        a = math.sqrt(6.0 / (fan_in + fan_out))
        return self._rng.uniform(shape, -a, a)

    def set(self, name: str, value) -> None:
        value = np.asarray(value, dtype=np.float64)
        if name in self._params:
            p = self._params[name]
            if p.shape != value.shape:
                raise DimensionError(f"parameter {name!r} has shape {p.shape}, got {value.shape}")
            p.data[...] = value
        else:
            self._params[name] = Tensor(value.copy(), requires_grad=True)

    def value(self, name: str) -> np.ndarray:
        return self._params[name].data

    def grad(self, name: str) -> np.ndarray:
        return self._params[name].grad

    def zero_grad(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0.0

    def freeze(self, prefix: str) -> None:
        self.frozen.add(prefix)

    def is_frozen(self, name: str) -> bool:
        return any(name.startswith(f) for f in self.frozen)

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self._params.items() if not self.is_frozen(n)]

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.data.copy() for n, p in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, v in state.items():
            self.set(n, v)


# ---- layers ---------------------------------------------------------------

def linear(store: ParameterStore, prefix: str, x, out_size: int) -> Tensor:
    x = ad.as_tensor(x)
    w = store.get(f"{prefix}.w", (x.shape[-1], out_size))
    b = store.get(f"{prefix}.b", (out_size,), init="zeros")
    return x @ w + b


def mlp_forward(store: ParameterStore, prefix: str, x, layer_sizes: list[int],
                activation: str = "relu", out_activation: str = "identity") -> Tensor:
    """Fully connected stack. ``layer_sizes`` includes the input width.

    ``activation`` is applied between layers; the last layer uses
    ``out_activation`` (identity by default).
    """
    x = ad.as_tensor(x)
    if len(layer_sizes) < 2:
        raise DimensionError("layer_sizes needs an input and at least one output width")
    act = ad.ACTIVATIONS[activation]
    out_act = ad.ACTIVATIONS[out_activation]
    h = x
    n_layers = len(layer_sizes) - 1
    for i in range(n_layers):
        fan_in, fan_out = layer_sizes[i], layer_sizes[i + 1]
        if h.shape[-1] != fan_in:
            raise DimensionError(
                f"{prefix} layer {i}: input width {h.shape[-1]} != expected {fan_in}")
        w = store.get(f"{prefix}.w{i}", (fan_in, fan_out))
        b = store.get(f"{prefix}.b{i}", (fan_out,), init="zeros")
        h = h @ w + b
        h = act(h) if i < n_layers - 1 else out_act(h)
    return h


def gru_params(store: ParameterStore, prefix: str, in_size: int, hidden: int):
    wx = store.get(f"{prefix}.wx", (in_size, 3 * hidden))
    wh = store.get(f"{prefix}.wh", (hidden, 3 * hidden))
    bx = store.get(f"{prefix}.bx", (3 * hidden,), init="zeros")
    bh = store.get(f"{prefix}.bh", (3 * hidden,), init="zeros")
    return wx, wh, bx, bh


def gru_cell_composed(x_proj, h, wh, bh, hidden: int) -> Tensor:
    """Reference GRU step built from elementary ops (same math as ``ad.gru_cell``)."""
    x_proj, h = ad.as_tensor(x_proj), ad.as_tensor(h)
    hp = h @ wh + bh
    r = ad.sigmoid(x_proj[..., :hidden] + hp[..., :hidden])
    z = ad.sigmoid(x_proj[..., hidden:2 * hidden] + hp[..., hidden:2 * hidden])
    n = ad.tanh(x_proj[..., 2 * hidden:] + r * hp[..., 2 * hidden:])
    return n + z * (h - n)


def gru_forward(store: ParameterStore, prefix: str, sequence, hidden_size: int,
                h0=None) -> Tensor:
    """Run a GRU over ``sequence[time, batch, in]``; returns all hidden states."""
    seq = ad.as_tensor(sequence)
    if seq.ndim != 3:
        raise DimensionError(f"{prefix}: GRU input must be 3-D (time, batch, in), got {seq.shape}")
    steps, batch, in_size = seq.shape
    wx, wh, bx, bh = gru_params(store, prefix, in_size, hidden_size)
    h = ad.as_tensor(np.zeros((batch, hidden_size)) if h0 is None else h0)
    states = []
    for t in range(steps):
        h = ad.gru_cell(seq[t] @ wx + bx, h, wh, bh)
        states.append(h)
    return ad.stack(states, axis=0)


def gru_unroll_constant(store: ParameterStore, prefix: str, x, steps: int,
                        hidden_size: int) -> Tensor:
    """GRU fed the same input ``x[batch, in]`` at every one of ``steps`` steps."""
    x = ad.as_tensor(x)
    wx, wh, bx, bh = gru_params(store, prefix, x.shape[-1], hidden_size)
    proj = x @ wx + bx
    h = ad.as_tensor(np.zeros((x.shape[0], hidden_size)))
    states = []
    for _ in range(steps):
        h = ad.gru_cell(proj, h, wh, bh)
        states.append(h)
    return ad.stack(states, axis=0)


softmax = ad.softmax


def gumbel_softmax_sample(logits, tau: float, rng: SeededRng | None = None,
                          noise: np.ndarray | None = None, axis: int = -1) -> Tensor:
    """Relaxed categorical sample from unnormalized scores.

    Scores go through log-softmax first so ``log pi`` is a proper
    log-probability. Pass ``noise`` to freeze the Gumbel draw.
    """
    if not tau > 0:
        raise ParameterError(f"tau must be positive, got {tau}")
    logits = ad.as_tensor(logits)
    if noise is None:
        if rng is None:
            raise ParameterError("gumbel_softmax_sample needs an rng or explicit noise")
        noise = rng.gumbel(logits.shape)
    logp = ad.log_softmax(logits, axis=axis)
    return ad.softmax((logp + noise) * (1.0 / tau), axis=axis)


def kl_diag_gaussians(mu_q, sigma_q, mu_p, sigma_p) -> Tensor:
    """KL(N(mu_q, diag sigma_q^2) || N(mu_p, diag sigma_p^2)), summed over all entries."""
    mu_q, sigma_q = ad.as_tensor(mu_q), ad.as_tensor(sigma_q)
    mu_p, sigma_p = ad.as_tensor(mu_p), ad.as_tensor(sigma_p)
    shapes = {mu_q.shape, sigma_q.shape, mu_p.shape, sigma_p.shape}
    if len(shapes) != 1:
        raise DimensionError(f"KL operands differ in shape: {sorted(shapes)}")
    if np.any(sigma_q.data <= 0) or np.any(sigma_p.data <= 0):
        raise ParameterError("KL requires strictly positive standard deviations")
    var_q = ad.square(sigma_q)
    var_p = ad.square(sigma_p)
    terms = (ad.log(sigma_p) - ad.log(sigma_q)
             + (var_q + ad.square(mu_q - mu_p)) / (2.0 * var_p) - 0.5)
    return terms.sum()


def mse(pred, target, weights=None) -> Tensor:
    diff = ad.as_tensor(pred) - ad.as_tensor(target)
    if weights is None:
        return ad.square(diff).mean()
    w = np.broadcast_to(np.asarray(weights, dtype=float), diff.shape)
    return (ad.square(diff) * w).sum() * (1.0 / w.sum())


# ---- gradient checking ----------------------------------------------------

@dataclass
class GradCheckReport:
    tol: float
    max_rel_error: dict[str, float] = field(default_factory=dict)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.worst < self.tol

    def summary(self) -> str:
        lines = [f"{name}: {err:.3e}" for name, err in sorted(self.max_rel_error.items())]
        lines.append(f"worst {self.worst:.3e} ({'pass' if self.passed else 'FAIL'} @ tol {self.tol:g})")
        return "\n".join(lines)


def check_gradients(fn: Callable[[], Tensor], params: ParameterStore | dict,
                    h: float = 1e-5, tol: float = 1e-4, floor: float = 1e-6,
                    names: Iterable[str] | None = None) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``fn()`` with central differences.

    ``params`` is a ParameterStore or a mapping of name -> leaf Tensor. The
    relative error is ``|a - n| / max(|a|, |n|, floor)`` per entry.
    ``fn`` must be deterministic (freeze any noise).
    """
    leaves = dict(params.items())
    if names is not None:
        leaves = {n: leaves[n] for n in names}
    for p in leaves.values():
        p.grad[...] = 0.0
    fn().backward()
    analytic = {n: p.grad.copy() for n, p in leaves.items()}

    report = GradCheckReport(tol=tol)
    for name, p in leaves.items():
        flat = p.data.reshape(-1)
        numeric = np.empty(flat.size)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            fp = float(fn().data)
            flat[k] = orig - h
            fm = float(fn().data)
            flat[k] = orig
            numeric[k] = (fp - fm) / (2.0 * h)
        a = analytic[name].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor)
        report.max_rel_error[name] = float(np.max(np.abs(a - numeric) / denom)) if a.size else 0.0
    return report


# ---- optimization -------------------------------------------------------

class Adam:
    """Per-parameter adaptive first-order optimizer with stepwise lr decay."""

    def __init__(self, store: ParameterStore, lr: float = 1e-3, decay: float = 0.6,
                 decay_every: int = 500, betas=(0.9, 0.999), eps: float = 1e-8,
                 clip_norm: float | None = 5.0):
        self.store = store
        self.base_lr = lr
        self.decay = decay
        self.decay_every = decay_every
        self.b1, self.b2 = betas
        self.eps = eps
        self.clip_norm = clip_norm
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    @property
    def lr(self) -> float:
        epochs = self.t // self.decay_every if self.decay_every else 0
        return self.base_lr * self.decay ** epochs

    def step(self) -> float:
        params = self.store.trainable()
        gnorm = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for _, p in params))
        scale = 1.0
        if self.clip_norm is not None and gnorm > self.clip_norm:
            scale = self.clip_norm / gnorm
        lr = self.lr
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for name, p in params:
            g = p.grad * scale
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return gnorm
