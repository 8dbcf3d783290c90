"""Posterior learner, residual motion generator and the full relational model.

The model encodes the history as an agent hypergraph and the predictor's
per-mode forecasts as an agent-behavior hypergraph, learns a diagonal
Gaussian posterior over per-agent latents, and decodes with two residual
GRU blocks. Trajectories are produced as offsets from a constant-velocity
line fitted to the last observed state.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import (POS_SCALE, RESID_SCALE, Batch, history_features, kinematic_anchor,
                   past_kinematic_anchor)
from .encoder import EncoderConfig, encode
from .giraffe import N_MODES
from .nn import ParameterStore, SeededRng, kl_diag_gaussians, mlp_forward, gru_forward

VARIANTS = ("full", "no_hg", "no_mm", "no_pdl")


@dataclass
class PosteriorParams:
    mu: Tensor
    sigma: Tensor


@dataclass
class LatentCode:
    z: Tensor          # [K, N, d_z] or [N, d_z]
    source: str        # posterior | prior | bypass


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 0.8
    lambda_recon: float = 0.5
    prior_scale: float = 0.5
    k_samples: int = 10

    def __post_init__(self):
        if min(self.alpha, self.beta, self.lambda_recon, self.prior_scale) <= 0 or self.k_samples < 1:
            raise ValueError(f"loss weights must be positive: {self}")


@dataclass
class RhinoConfig:
    encoder: EncoderConfig = field(default_factory=lambda: EncoderConfig(d_embed=32, hidden=64))
    d_latent: int = 16
    hidden: int = 64
    weights: LossWeights = field(default_factory=LossWeights)
    variant: str = "full"
    hist_len: int = 30
    fut_len: int = 50

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")

    def for_variant(self, variant: str) -> "RhinoConfig":
        enc = self.encoder
        if variant == "no_hg":
            enc = replace(enc, scales=())
        return replace(self, encoder=enc, variant=variant)

    @property
    def embed_width(self) -> int:
        return self.encoder.d_embed * self.encoder.n_scales


# ---- posterior and sampling -----------------------------------------------

def posterior(store: ParameterStore, v_future, v_past, hidden: int, d_latent: int) -> PosteriorParams:
    x = ad.concat([ad.as_tensor(v_future), ad.as_tensor(v_past)], axis=1)
    width = x.shape[1]
    mu = mlp_forward(store, "rhino.f_mu", x, [width, hidden, d_latent])
    sigma = ad.softplus(mlp_forward(store, "rhino.f_sigma", x, [width, hidden, d_latent])) + 1e-6
    return PosteriorParams(mu, sigma)


def prior(n: int, d_latent: int, prior_scale: float) -> PosteriorParams:
    return PosteriorParams(ad.Tensor(np.zeros((n, d_latent))),
                           ad.Tensor(np.full((n, d_latent), np.sqrt(prior_scale))))


def sample_latent(p: PosteriorParams, rng: SeededRng, k: int | None = None,
                  source: str = "posterior", eps: np.ndarray | None = None) -> LatentCode:
    """Reparameterized draw z = mu + sigma * eps; ``k`` adds a leading sample axis."""
    shape = p.mu.shape if k is None else (k,) + p.mu.shape
    if eps is None:
        eps = rng.normal(shape)
    return LatentCode(p.mu + p.sigma * eps, source)


# ---- motion generator ---------------------------------------------------

def _residual_block(store: ParameterStore, prefix: str, v_p: Tensor, seq, hidden: int,
                    fut_len: int, hist_len: int, agents_per_sample: int) -> tuple[Tensor, Tensor]:
    """GRU over the (scaled) past residual sequence, then future and past MLP heads."""
    seq = ad.as_tensor(seq)
    h_last = gru_forward(store, f"{prefix}.gru", seq * (1.0 / RESID_SCALE), hidden)[-1]
    rows = v_p.shape[0]
    if h_last.shape[0] != rows:
        h_last = h_last[np.tile(np.arange(agents_per_sample), rows // agents_per_sample)]
    x = ad.concat([v_p, h_last], axis=1)
    width = x.shape[1]
    fut = mlp_forward(store, f"{prefix}.head_f", x, [width, hidden, fut_len * 2])
    past = mlp_forward(store, f"{prefix}.head_t", x, [width, hidden, hist_len * 2])
    fut = ad.transpose(fut.reshape(rows, fut_len, 2), (1, 0, 2))
    past = ad.transpose(past.reshape(rows, hist_len, 2), (1, 0, 2))
    return fut, past


def generate(store: ParameterStore, v_past, z, x_past: np.ndarray, hidden: int,
             fut_len: int = 50) -> tuple[Tensor, Tensor]:
    """Decode latents into futures and a reconstruction of the past.

    ``z`` is [N, d_z] or [K, N, d_z]; ``x_past`` is the observed
    history [T, N, >=2]. Returns world-frame (relative) positions:
    future [F, N, 2] and past [T, N, 2], or [F, K, N, 2] / [T, K, N, 2]
    when ``z`` carries a sample axis.
    """
    z = ad.as_tensor(z)
    v_past = ad.as_tensor(v_past)
    hist_len, n = x_past.shape[0], x_past.shape[1]
    k = z.shape[0] if z.ndim == 3 else None
    zf = z.reshape(k * n, z.shape[-1]) if k else z
    vp_rows = v_past[np.tile(np.arange(n), k)] if k else v_past
    v_p = ad.concat([zf, vp_rows], axis=1)                       # [K*N, d_z + D]
    rows = v_p.shape[0]

    hist = np.asarray(x_past)
    past_anchor = past_kinematic_anchor(hist)
    fut_anchor = kinematic_anchor(hist, fut_len)
    resid = hist[..., :2] - past_anchor                            # [T, N, 2]

    f1, t1 = _residual_block(store, "rhino.res1", v_p, resid, hidden, fut_len, hist_len, n)
    resid_rows = np.tile(resid, (1, rows // n, 1))
    f2, t2 = _residual_block(store, "rhino.res2", v_p, ad.as_tensor(resid_rows) - t1,
                             hidden, fut_len, hist_len, n)
    fut = f1 + f2
    past = t1 + t2
    if k:
        fut = fut.reshape(fut_len, k, n, 2) + fut_anchor[:, None]
        past = past.reshape(hist_len, k, n, 2) + past_anchor[:, None]
    else:
        fut = fut + fut_anchor
        past = past + past_anchor
    return fut, past


def _sq_err(pred, truth) -> Tensor:
    return ad.square(ad.as_tensor(pred) - truth).sum(axis=-1)


def rhino_loss(samples, x_recon, p: PosteriorParams | None, truth_future: np.ndarray,
               truth_past: np.ndarray, w: LossWeights) -> tuple[Tensor, dict]:
    """L_elbo + L_recon + L_var.

    ``samples`` is [F, K, N, 2] (or a list of [F, N, 2]); sample 0 feeds
    the ELBO reconstruction term and every sample competes in the variety
    term, taken per agent. ``x_recon`` is the past reconstruction paired
    with sample 0. Means are over (step, agent) of squared Euclidean error;
    the KL is averaged over agents. ``p=None`` drops the KL term.
    """
    if isinstance(samples, (list, tuple)):
        samples = ad.stack(list(samples), axis=1)
    samples = ad.as_tensor(samples)
    f, k, n, _ = samples.shape
    err = _sq_err(samples, truth_future[:, None])                 # [F, K, N]
    per_agent = err.mean(axis=0)                                  # [K, N]
    rec = per_agent[0].mean()
    if p is not None:
        sp = np.full(p.mu.shape, np.sqrt(w.prior_scale))
        kl = kl_diag_gaussians(p.mu, p.sigma, np.zeros(p.mu.shape), sp) * (1.0 / p.mu.shape[0])
    else:
        kl = ad.Tensor(0.0)
    l_elbo = w.alpha * rec + w.beta * kl
    x_recon = ad.as_tensor(x_recon)
    if x_recon.ndim == 4:
        x_recon = x_recon[:, 0]
    l_recon = w.lambda_recon * _sq_err(x_recon, truth_past[..., :2]).mean()
    best = np.argmin(per_agent.data, axis=0)
    l_var = per_agent[best, np.arange(n)].mean()
    total = l_elbo + l_recon + l_var
    return total, {"elbo": float(l_elbo.data), "recon": float(l_recon.data), "var": float(l_var.data),
                   "kl": float(kl.data), "total": float(total.data)}


# ---- full model ---------------------------------------------------------

def behavior_states(modes: np.ndarray, fut_anchor: np.ndarray) -> np.ndarray:
    """Encoder input for behavior nodes from per-mode forecasts [F, N, M, 2] -> [N*M, F, 4]."""
    f, n, m, _ = modes.shape
    resid = (modes - fut_anchor[:, :, None, :]) / RESID_SCALE
    feats = np.concatenate([modes / POS_SCALE, resid], axis=-1)   # [F, N, M, 4]
    return np.transpose(feats, (1, 2, 0, 3)).reshape(n * m, f, 4)


def agent_future_states(fused: np.ndarray, fut_anchor: np.ndarray) -> np.ndarray:
    resid = (fused - fut_anchor) / RESID_SCALE
    feats = np.concatenate([fused / POS_SCALE, resid], axis=-1)   # [F, N, 4]
    return np.transpose(feats, (1, 0, 2))


class Rhino:
    """Hypergraph relational encoder + CVAE generator bound to one parameter store."""

    def __init__(self, cfg: RhinoConfig, store: ParameterStore, eval_tau: float | None = None):
        self.cfg = cfg
        self.store = store
        # category temperature used without noise at inference; training keeps it
        # at the current annealed value
        self.eval_tau = cfg.encoder.tau if eval_tau is None else eval_tau

    def encode_past(self, batch: Batch, rng, training: bool, tau=None, noises=None) -> Tensor:
        states = np.transpose(history_features(batch.history), (1, 0, 2))
        out, _ = encode(self.store, "rhino.enc_t", states, self.cfg.encoder, rng, batch.blocks,
                        training, tau, noises)
        return out

    def encode_future(self, batch: Batch, modes: np.ndarray, probs: np.ndarray, rng,
                      training: bool, tau=None, noises=None) -> Tensor:
        """Future-guided agent embeddings from the predictor's forecasts."""
        anchor = batch.future_anchor(modes.shape[0])
        if self.cfg.variant == "no_mm":
            fused = (modes * probs[None, :, :, None]).sum(axis=2)
            out, _ = encode(self.store, "rhino.enc_f", agent_future_states(fused, anchor),
                            self.cfg.encoder, rng, batch.blocks, training, tau, noises)
            return out
        states = behavior_states(modes, anchor)
        blocks = [(o * N_MODES, m * N_MODES) for o, m in batch.blocks]
        out, _ = encode(self.store, "rhino.enc_f", states, self.cfg.encoder, rng, blocks,
                        training, tau, noises)
        n = batch.n
        pool = np.zeros((n, n * N_MODES))
        for i in range(n):
            pool[i, i * N_MODES:(i + 1) * N_MODES] = probs[i]
        return ad.as_tensor(pool) @ out

    def forward(self, batch: Batch, modes: np.ndarray, probs: np.ndarray, rng: SeededRng,
                k: int, training: bool = True, tau=None, source: str = "posterior",
                noises=None, eps=None) -> dict:
        cfg = self.cfg
        v_t = self.encode_past(batch, rng, training, tau, noises)
        v_f = self.encode_future(batch, modes, probs, rng, training, tau, noises)
        if cfg.variant == "no_pdl":
            z = LatentCode(ad.broadcast_to(v_f, (k,) + v_f.shape) if k > 1 else v_f.reshape((1,) + v_f.shape),
                           "bypass")
            post = None
        else:
            post = posterior(self.store, v_f, v_t, cfg.hidden, cfg.d_latent)
            if source == "prior":
                z = sample_latent(prior(batch.n, cfg.d_latent, cfg.weights.prior_scale), rng, k, "prior", eps)
            else:
                z = sample_latent(post, rng, k, "posterior", eps)
        fut, past = generate(self.store, v_t, z.z, batch.history, cfg.hidden, cfg.fut_len)
        return {"future": fut, "past": past, "posterior": post, "latent": z}

    def loss(self, batch: Batch, modes, probs, rng: SeededRng, tau=None, noises=None,
             eps=None) -> tuple[Tensor, dict]:
        k = 1 if self.cfg.variant == "no_pdl" else self.cfg.weights.k_samples
        out = self.forward(batch, modes, probs, rng, k, True, tau, noises=noises, eps=eps)
        return rhino_loss(out["future"], out["past"], out["posterior"], batch.future,
                          batch.history, self.cfg.weights)

    def sample(self, batch: Batch, modes, probs, k: int, seed: int,
               source: str = "posterior") -> np.ndarray:
        """K futures [F, N, K, 2] without Gumbel noise."""
        rng = SeededRng(seed)
        out = self.forward(batch, modes, probs, rng, k, training=False, tau=self.eval_tau,
                           source=source)
        return np.transpose(out["future"].data, (0, 2, 1, 3)).copy()
