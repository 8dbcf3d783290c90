import math

import numpy as np
import pytest

from hypermotion import autodiff as ad
from hypermotion.autodiff import DimensionError, Tensor
from hypermotion.nn import (Adam, ParameterError, ParameterStore, SeededRng, check_gradients,
                            gru_forward, gumbel_softmax_sample, kl_diag_gaussians, mlp_forward)


# ---- MLP ------------------------------------------------------------------

def test_mlp_identity_layer_passes_input_through():
    store = ParameterStore(0)
    store.set("m.w0", np.eye(3))
    store.set("m.b0", np.zeros(3))
    out = mlp_forward(store, "m", np.array([[1.0, 2.0, 3.0]]), [3, 3], out_activation="identity")
    np.testing.assert_array_equal(out.data, [[1.0, 2.0, 3.0]])


def test_mlp_zero_weights_return_bias():
    store = ParameterStore(0)
    store.set("m.w0", np.zeros((4, 2)))
    store.set("m.b0", np.array([0.5, -1.5]))
    out = mlp_forward(store, "m", np.random.default_rng(0).normal(size=(5, 4)), [4, 2])
    np.testing.assert_array_equal(out.data, np.tile([0.5, -1.5], (5, 1)))


def test_mlp_shape_error_names_layer():
    store = ParameterStore(0)
    with pytest.raises(DimensionError, match="m layer 0"):
        mlp_forward(store, "m", np.ones((2, 5)), [4, 2])


@pytest.mark.gradcheck
def test_mlp_gradients_match_finite_differences(rng):
    store = ParameterStore(3)
    x = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    fn = lambda: mlp_forward(store, "m", x, [3, 5, 2], activation="tanh").sum()
    fn()
    rep = check_gradients(fn, {**dict(store.items()), "x": x})
    assert rep.passed, rep.summary()


def test_parameters_are_seeded_and_glorot_bounded():
    a, b = ParameterStore(5), ParameterStore(5)
    wa, wb = a.get("w", (30, 20)).data, b.get("w", (30, 20)).data
    np.testing.assert_array_equal(wa, wb)
    assert np.abs(wa).max() <= math.sqrt(6 / 50)
    assert not np.array_equal(wa, ParameterStore(6).get("w", (30, 20)).data)


# ---- GRU ------------------------------------------------------------------

def test_gru_zero_input_zero_weights_gives_zero_states():
    store = ParameterStore(0)
    for name, shape in (("g.wx", (2, 9)), ("g.wh", (3, 9)), ("g.bx", (9,)), ("g.bh", (9,))):
        store.set(name, np.zeros(shape))
    out = gru_forward(store, "g", np.zeros((4, 5, 2)), 3)
    assert out.shape == (4, 5, 3)
    np.testing.assert_array_equal(out.data, 0.0)


def _sig(x):
    return 1.0 / (1.0 + np.exp(-x))


def test_gru_single_step_matches_hand_unrolled_cell(rng):
    store = ParameterStore(1)
    x = rng.normal(size=(1, 4, 2))
    out = gru_forward(store, "g", x, 3).data[0]
    wx, wh, bx, bh = (store.value(f"g.{n}") for n in ("wx", "wh", "bx", "bh"))
    h0 = np.zeros((4, 3))
    xr, xz, xn = np.split(x[0] @ wx + bx, 3, axis=1)
    hr, hz, hn = np.split(h0 @ wh + bh, 3, axis=1)
    r = _sig(xr + hr)
    z = _sig(xz + hz)
    n = np.tanh(xn + r * hn)
    np.testing.assert_allclose(out, (1 - z) * n + z * h0, atol=1e-14)


def test_gru_multi_step_matches_loop_oracle(rng):
    store = ParameterStore(2)
    x = rng.normal(size=(5, 2, 3))
    out = gru_forward(store, "g", x, 4).data
    wx, wh, bx, bh = (store.value(f"g.{n}") for n in ("wx", "wh", "bx", "bh"))
    h = np.zeros((2, 4))
    for t in range(5):
        xr, xz, xn = np.split(x[t] @ wx + bx, 3, axis=1)
        hr, hz, hn = np.split(h @ wh + bh, 3, axis=1)
        r, z = _sig(xr + hr), _sig(xz + hz)
        n = np.tanh(xn + r * hn)
        h = (1 - z) * n + z * h
        np.testing.assert_allclose(out[t], h, atol=1e-13)


def test_gru_rejects_non_3d_input():
    with pytest.raises(DimensionError):
        gru_forward(ParameterStore(0), "g", np.zeros((3, 2)), 2)


@pytest.mark.gradcheck
def test_gru_gradients_three_steps_two_units(rng):
    store = ParameterStore(4)
    x = Tensor(rng.normal(size=(3, 2, 2)), requires_grad=True)
    w = rng.normal(size=(3, 2, 2))
    fn = lambda: (gru_forward(store, "g", x, 2) * w).sum()
    fn()
    store.set("g.bx", rng.normal(size=6))
    store.set("g.bh", rng.normal(size=6))
    rep = check_gradients(fn, {**dict(store.items()), "x": x})
    assert rep.passed, rep.summary()


# ---- Gumbel-softmax -------------------------------------------------------

def test_gumbel_output_on_simplex(rng):
    out = gumbel_softmax_sample(rng.normal(size=(6, 4)) * 5, 0.5, SeededRng(0)).data
    np.testing.assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)
    assert np.all((out >= 0) & (out <= 1))


def test_gumbel_rejects_nonpositive_tau():
    with pytest.raises(ParameterError):
        gumbel_softmax_sample(np.zeros(3), 0.0, SeededRng(0))


def test_gumbel_high_temperature_is_near_uniform():
    logits = np.tile(np.log([0.7, 0.2, 0.1]), (20000, 1))
    out = gumbel_softmax_sample(logits, 100.0, SeededRng(3)).data
    assert np.all(np.abs(out.mean(axis=0) - 1 / 3) < 0.05)


@pytest.mark.gradcheck
def test_gumbel_frozen_noise_gradients(rng):
    logits = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    noise = SeededRng(1).gumbel((3, 4))
    w = rng.normal(size=(3, 4))
    rep = check_gradients(lambda: (gumbel_softmax_sample(logits, 0.7, noise=noise) * w).sum(),
                          {"logits": logits})
    assert rep.passed, rep.summary()


def test_seeded_rng_is_reproducible():
    a, b = SeededRng(9), SeededRng(9)
    np.testing.assert_array_equal(a.gumbel((4,)), b.gumbel((4,)))
    np.testing.assert_array_equal(a.normal((3,)), b.normal((3,)))


# ---- KL -------------------------------------------------------------------

def test_kl_identical_is_zero_and_hand_value():
    m, s = np.array([0.3, -1.0]), np.array([0.5, 2.0])
    assert kl_diag_gaussians(m, s, m, s).data == pytest.approx(0.0, abs=1e-15)
    val = kl_diag_gaussians(np.array([1.0]), np.array([1.0]), np.array([0.0]), np.array([1.0]))
    assert float(val.data) == pytest.approx(0.5, abs=1e-15)


def test_kl_rejects_nonpositive_sigma():
    with pytest.raises(ParameterError):
        kl_diag_gaussians(np.zeros(2), np.array([1.0, 0.0]), np.zeros(2), np.ones(2))


@pytest.mark.gradcheck
def test_kl_gradients(rng):
    mu = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    sig = Tensor(rng.uniform(0.3, 2.0, size=(3, 2)), requires_grad=True)
    rep = check_gradients(lambda: kl_diag_gaussians(mu, sig, np.zeros((3, 2)), np.full((3, 2), 0.7)),
                          {"mu": mu, "sigma": sig})
    assert rep.passed, rep.summary()


# ---- gradient checker -----------------------------------------------------

def test_checker_exact_on_linear_function(rng):
    x = Tensor(rng.normal(size=(4,)), requires_grad=True)
    c = rng.normal(size=(4,))
    rep = check_gradients(lambda: (x * c).sum(), {"x": x})
    assert rep.worst < 1e-10


@pytest.mark.gradcheck
def test_checker_composed_mlp_softmax_kl(rng):
    store = ParameterStore(8)
    x = rng.normal(size=(3, 4))

    def fn():
        p = ad.softmax(mlp_forward(store, "m", x, [4, 6, 3]), axis=1)
        return kl_diag_gaussians(p, p + 0.5, np.zeros((3, 3)), np.ones((3, 3)))

    fn()
    rep = check_gradients(fn, store, h=1e-5, tol=1e-4)
    assert rep.passed, rep.summary()


def test_checker_reports_corrupted_gradient(rng):
    x = Tensor(rng.normal(size=(3,)), requires_grad=True)

    def bad_square(a):
        return ad._make(a.data ** 2, (a,), lambda g: (g * 3.0 * a.data,))  # should be 2a

    rep = check_gradients(lambda: bad_square(x).sum(), {"x": x})
    assert not rep.passed
    assert "FAIL" in rep.summary()


# ---- optimizer ------------------------------------------------------------

def test_adam_minimizes_quadratic_and_decays_lr():
    store = ParameterStore(0)
    store.set("w", np.array([3.0, -2.0]))
    opt = Adam(store, lr=0.1, decay=0.6, decay_every=50)
    for _ in range(300):
        store.zero_grad()
        ad.square(store.get("w", (2,))).sum().backward()
        opt.step()
    assert np.abs(store.value("w")).max() < 1e-2
    assert opt.lr == pytest.approx(0.1 * 0.6 ** 6)


def test_adam_skips_frozen_parameters():
    store = ParameterStore(0)
    store.set("a.w", np.ones(2))
    store.set("b.w", np.ones(2))
    store.freeze("b")
    opt = Adam(store, lr=0.1)
    (store.get("a.w", (2,)).sum() + store.get("b.w", (2,)).sum()).backward()
    opt.step()
    np.testing.assert_array_equal(store.value("b.w"), 1.0)
    assert np.all(store.value("a.w") < 1.0)
