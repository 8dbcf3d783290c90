"""Graph-based multi-modal predictor.

Diffusion graph convolutions encode history into [H_T, H_F], an MLP head
classifies lateral intentions, and a GRU decoder emits one trajectory per
mode (left, keep, right) as displacements from a constant-velocity line.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import FUT_LEN, POS_SCALE, Batch, history_features
from .nn import ParameterStore, gru_unroll_constant, mlp_forward

N_MODES = 3


class NormalizationError(ValueError):
    pass


@dataclass
class DgcnConfig:
    cheb_order: int = 2
    layers: int = 2
    hidden: int = 64

    def __post_init__(self):
        if self.cheb_order < 1 or self.hidden <= 0 or self.layers < 1:
            raise ValueError(f"invalid DGCN config {self}")


@dataclass
class GiraffeConfig:
    d_embed: int = 64
    hidden: int = 64
    dgcn: DgcnConfig = None
    fut_len: int = FUT_LEN
    mode_supervision: bool = False  # also supervise every mode trajectory

    def __post_init__(self):
        if self.dgcn is None:
            self.dgcn = DgcnConfig(hidden=self.hidden)


@dataclass
class MultiModalForecast:
    trajectories: Tensor       # [F, N, M, 2]
    gaussian_params: Tensor    # [F, N, M, 5] (mu_x, mu_y, sigma_x, sigma_y, rho)


def transition_matrices(adjacency: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(adjacency, dtype=float)
    rs, cs = a.sum(axis=1), a.T.sum(axis=1)
    if np.any(rs <= 0) or np.any(cs <= 0):
        raise NormalizationError("adjacency has a zero row sum; cannot row-normalize")
    return a / rs[:, None], a.T / cs[:, None]


def chebyshev_terms(x: np.ndarray, order: int) -> list[np.ndarray]:
    """[T_1(x), ..., T_order(x)] with T_0 = I, T_1 = x, T_k = 2x T_{k-1} - T_{k-2}."""
    terms = [np.eye(x.shape[0]), x]
    for _ in range(2, order + 1):
        terms.append(2.0 * x @ terms[-1] - terms[-2])
    return terms[1:order + 1]


def diffusion_supports(adjacency: np.ndarray, order: int) -> list[np.ndarray]:
    fwd, bwd = transition_matrices(adjacency)
    return chebyshev_terms(fwd, order) + chebyshev_terms(bwd, order)


def dgcn_layer(store: ParameterStore, prefix: str, h, adjacency, cfg: DgcnConfig,
               out_size: int, supports: list | None = None) -> Tensor:
    """sum_k T_k(A_f) h Theta_f^k + T_k(A_b) h Theta_b^k."""
    h = ad.as_tensor(h)
    if supports is None:
        supports = diffusion_supports(adjacency, cfg.cheb_order)
    out = None
    k_order = cfg.cheb_order
    for idx, sup in enumerate(supports):
        direction = "f" if idx < k_order else "b"
        k = idx % k_order + 1
        theta = store.get(f"{prefix}.theta_{direction}{k}", (h.shape[1], out_size))
        term = ad.as_tensor(sup) @ h @ theta
        out = term if out is None else out + term
    return out


def dgcn_stack(store: ParameterStore, prefix: str, x, adjacency, cfg: DgcnConfig, out_size: int,
               supports: list | None = None) -> Tensor:
    if supports is None:
        supports = diffusion_supports(adjacency, cfg.cheb_order)
    h = ad.as_tensor(x)
    for layer in range(cfg.layers):
        width = out_size if layer == cfg.layers - 1 else cfg.hidden
        h = dgcn_layer(store, f"{prefix}.l{layer}", h, adjacency, cfg, width, supports)
        if layer < cfg.layers - 1:
            h = ad.relu(h)
    return h


def encode_interactions(store: ParameterStore, history: np.ndarray, adjacency: np.ndarray,
                        cfg: GiraffeConfig, supports: list | None = None) -> Tensor:
    """[DGCN_H(X_T), DGCN_F(X_T)] per agent, width 2 * d_embed."""
    t, n, c = history.shape
    flat = np.transpose(history_features(history), (1, 0, 2)).reshape(n, t * c)
    if supports is None:
        supports = diffusion_supports(adjacency, cfg.dgcn.cheb_order)
    h_t = dgcn_stack(store, "giraffe.dgcn_h", flat, adjacency, cfg.dgcn, cfg.d_embed, supports)
    h_f = dgcn_stack(store, "giraffe.dgcn_f", flat, adjacency, cfg.dgcn, cfg.d_embed, supports)
    return ad.concat([h_t, h_f], axis=1)


def future_target(store: ParameterStore, future: np.ndarray, adjacency: np.ndarray,
                  cfg: GiraffeConfig, supports: list | None = None) -> np.ndarray:
    """Constant L_fut target: a frozen DGCN over the true future positions."""
    f, n, _ = future.shape
    flat = np.transpose(future / POS_SCALE, (1, 0, 2)).reshape(n, f * 2)
    if supports is None:
        supports = diffusion_supports(adjacency, cfg.dgcn.cheb_order)
    store.freeze("giraffe.target")
    return dgcn_stack(store, "giraffe.target", flat, adjacency, cfg.dgcn, cfg.d_embed, supports).data.copy()


def predict_intentions(store: ParameterStore, h, cfg: GiraffeConfig) -> Tensor:
    """Row-stochastic [N, 3] lateral intention probabilities."""
    h = ad.as_tensor(h)
    width = h.shape[1]
    ip = mlp_forward(store, "giraffe.ip1", h, [width, cfg.hidden], out_activation="relu")
    ip = mlp_forward(store, "giraffe.ip2", ip, [cfg.hidden, cfg.hidden], out_activation="relu")
    return ad.softmax(mlp_forward(store, "giraffe.lat", ip, [cfg.hidden, N_MODES]), axis=1)


def decode_multimodal(store: ParameterStore, h, probs, anchor: np.ndarray,
                      cfg: GiraffeConfig) -> MultiModalForecast:
    """Mix [H_T, H_F] with intention-driven weights and unroll one GRU per mode.

    W_hid = softmax(probs @ W_map^T) gates the two embedding halves per
    agent; the gated embedding plus intention probabilities and a mode
    one-hot feed an MLP -> GRU -> MLP head over ``cfg.fut_len`` steps.
    """
    h, probs = ad.as_tensor(h), ad.as_tensor(probs)
    n = h.shape[0]
    d = h.shape[1] // 2
    w_map = store.get("giraffe.w_map", (2, N_MODES))
    w_hid = ad.softmax(probs @ w_map.T, axis=1)               # [N, 2]
    h_dec = w_hid[:, 0:1] * h[:, :d] + w_hid[:, 1:2] * h[:, d:]
    rows = np.repeat(np.arange(n), N_MODES)
    mode_onehot = np.tile(np.eye(N_MODES), (n, 1))
    dec_in = ad.concat([h_dec[rows], probs[rows], mode_onehot], axis=1)  # [N*M, d+6]
    x = mlp_forward(store, "giraffe.dec_in", dec_in, [d + 2 * N_MODES, cfg.hidden, cfg.hidden],
                    out_activation="relu")
    states = gru_unroll_constant(store, "giraffe.gru", x, cfg.fut_len, cfg.hidden)
    out = mlp_forward(store, "giraffe.dec_out", states, [cfg.hidden, cfg.hidden, 5])  # [F, N*M, 5]
    disp = out[..., :2].reshape(cfg.fut_len, n, N_MODES, 2)
    traj = disp + anchor[:, :, None, :]
    sigma = ad.softplus(out[..., 2:4]) + 1e-3
    rho = ad.tanh(out[..., 4:5])
    gauss = ad.concat([traj.reshape(cfg.fut_len, n * N_MODES, 2), sigma, rho], axis=-1)
    return MultiModalForecast(traj, gauss.reshape(cfg.fut_len, n, N_MODES, 5))


def fuse(forecast: MultiModalForecast | Tensor, probs) -> Tensor:
    """Intention-weighted average trajectory [F, N, 2]."""
    traj = forecast.trajectories if isinstance(forecast, MultiModalForecast) else ad.as_tensor(forecast)
    p = ad.as_tensor(probs)
    return (traj * p.reshape(1, p.shape[0], N_MODES, 1)).sum(axis=2)


def giraffe_loss(forecast, probs, truth_future, truth_intents, hf_target, hf_pred,
                 mode_supervision: bool = False) -> tuple[Tensor, dict]:
    """L_pred + L_int + L_fut, each a mean.

    L_pred averages the squared Euclidean error of the fused trajectory
    over (step, agent); L_int is the mean NLL of the labeled intention;
    L_fut is the mean squared entry of the future-guided embedding error.
    """
    probs = ad.as_tensor(probs)
    fused = fuse(forecast, probs)
    err = ad.square(fused - truth_future).sum(axis=-1)
    l_pred = err.mean()
    if mode_supervision:
        traj = forecast.trajectories if isinstance(forecast, MultiModalForecast) else forecast
        chosen = (traj * np.asarray(truth_intents)[None, :, :, None]).sum(axis=2)
        l_pred = l_pred + ad.square(chosen - truth_future).sum(axis=-1).mean()
    l_int = -(ad.log(probs + 1e-300) * np.asarray(truth_intents)).sum(axis=1).mean()
    l_fut = ad.square(ad.as_tensor(hf_pred) - hf_target).mean()
    total = l_pred + l_int + l_fut
    return total, {"pred": float(l_pred.data), "int": float(l_int.data),
                   "fut": float(l_fut.data), "total": float(total.data)}


class Giraffe:
    """Stateful wrapper binding a config to a parameter store."""

    def __init__(self, cfg: GiraffeConfig, store: ParameterStore):
        self.cfg = cfg
        self.store = store

    def forward(self, batch: Batch) -> dict:
        cfg = self.cfg
        supports = diffusion_supports(batch.adjacency, cfg.dgcn.cheb_order)
        h = encode_interactions(self.store, batch.history, batch.adjacency, cfg, supports)
        probs = predict_intentions(self.store, h, cfg)
        forecast = decode_multimodal(self.store, h, probs, batch.future_anchor(cfg.fut_len), cfg)
        return {"h": h, "probs": probs, "forecast": forecast, "supports": supports}

    def loss(self, batch: Batch, out: dict | None = None) -> tuple[Tensor, dict]:
        out = self.forward(batch) if out is None else out
        d = self.cfg.d_embed
        target = future_target(self.store, batch.future, batch.adjacency, self.cfg, out["supports"])
        return giraffe_loss(out["forecast"], out["probs"], batch.future, batch.labels,
                            target, out["h"][:, d:], self.cfg.mode_supervision)

    def predict(self, batch: Batch) -> tuple[np.ndarray, np.ndarray]:
        """Per-mode trajectories [F, N, 3, 2] and intention probabilities [N, 3]."""
        out = self.forward(batch)
        return out["forecast"].trajectories.data.copy(), out["probs"].data.copy()
