"""Training loops and inference glue for the predictor and the generator."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .config import RunConfig
from .data import Batch, ScenarioBatch, collate
from .generator import Rhino
from .giraffe import Giraffe
from .nn import Adam, ParameterStore, SeededRng

log = logging.getLogger(__name__)


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    losses: list = field(default_factory=list)   # dicts of loss components
    seconds: float = 0.0

    def last(self) -> dict:
        return self.losses[-1] if self.losses else {}


def _batches(scenarios: Sequence[ScenarioBatch], batch_size: int, rng: np.random.Generator):
    """Endless stream of collated minibatches, reshuffled every epoch."""
    if len(scenarios) <= batch_size:
        full = collate(scenarios)
        while True:
            yield full
    while True:
        order = rng.permutation(len(scenarios))
        for i in range(0, len(order), batch_size):
            yield collate([scenarios[j] for j in order[i:i + batch_size]])


def gumbel_tau(cfg: RunConfig, step: int) -> float:
    """Temperature annealed by the lr decay factor each decay period, floored at tau_min."""
    epochs = step // cfg.decay_every if cfg.decay_every else 0
    return max(cfg.tau_min, cfg.tau * cfg.decay ** epochs)


def train_giraffe(scenarios: Sequence[ScenarioBatch], cfg: RunConfig, steps: int | None = None,
                  store: ParameterStore | None = None, log_every: int = 100,
                  stop: Callable[[dict], bool] | None = None) -> tuple[Giraffe, TrainLog]:
    steps = cfg.steps if steps is None else steps
    store = ParameterStore(cfg.seed) if store is None else store
    model = Giraffe(cfg.giraffe(), store)
    opt = Adam(store, cfg.lr, cfg.decay, cfg.decay_every, clip_norm=cfg.clip_norm)
    stream = _batches(scenarios, cfg.batch_size, np.random.default_rng(cfg.seed))
    hist = TrainLog()
    t0 = time.perf_counter()
    for step in range(steps):
        batch = next(stream)
        store.zero_grad()
        loss, parts = model.loss(batch)
        loss.backward()
        opt.step()
        hist.steps.append(step)
        hist.losses.append(parts)
        if log_every and step % log_every == 0:
            log.info("giraffe step %d %s", step, parts)
        if stop is not None and stop(parts):
            break
    hist.seconds = time.perf_counter() - t0
    return model, hist


def giraffe_outputs(model: Giraffe, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
    """Per-mode forecasts [F, N, 3, 2] and intention probabilities [N, 3]."""
    return model.predict(batch)


def train_rhino(scenarios: Sequence[ScenarioBatch], predictor: Giraffe, cfg: RunConfig,
                variant: str = "full", steps: int | None = None,
                store: ParameterStore | None = None, log_every: int = 100,
                stop: Callable[[int, Rhino, dict], bool] | None = None) -> tuple[Rhino, TrainLog]:
    """Fit the generator with the predictor frozen; its forecasts are inputs, not targets."""
    steps = cfg.steps if steps is None else steps
    store = ParameterStore(cfg.seed + 1) if store is None else store
    model = Rhino(cfg.rhino(variant), store)
    opt = Adam(store, cfg.lr, cfg.decay, cfg.decay_every, clip_norm=cfg.clip_norm)
    stream = _batches(scenarios, cfg.batch_size, np.random.default_rng(cfg.seed + 1))
    rng = SeededRng(cfg.seed + 2)
    cache: dict[int, tuple] = {}
    hist = TrainLog()
    t0 = time.perf_counter()
    for step in range(steps):
        batch = next(stream)
        key = id(batch)
        if key not in cache:
            cache[key] = (batch, giraffe_outputs(predictor, batch))
        modes, probs = cache[key][1]
        store.zero_grad()
        model.eval_tau = gumbel_tau(cfg, step)
        loss, parts = model.loss(batch, modes, probs, rng, tau=model.eval_tau)
        loss.backward()
        opt.step()
        if len(cache) > 64:
            cache.clear()
        hist.steps.append(step)
        hist.losses.append(parts)
        if log_every and step % log_every == 0:
            log.info("rhino[%s] step %d %s", variant, step, parts)
        if stop is not None and stop(step, model, parts):
            break
    hist.seconds = time.perf_counter() - t0
    return model, hist


def generate_k(model: Rhino, predictor: Giraffe, batch: Batch, k: int, seed: int,
               source: str = "posterior") -> np.ndarray:
    """K sampled futures [F, N, K, 2] in the scenario's relative frame."""
    modes, probs = giraffe_outputs(predictor, batch)
    return model.sample(batch, modes, probs, k, seed, source)


def min_of_k(samples: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per agent, the sample with the lowest mean squared error; [F, N, 2]."""
    err = ((samples - truth[:, :, None, :]) ** 2).sum(axis=-1).mean(axis=0)  # [N, K]
    best = err.argmin(axis=1)
    return samples[:, np.arange(samples.shape[1]), best]
