import math

import numpy as np
import pytest

from hypermotion import autodiff as ad
from hypermotion import data
from hypermotion.autodiff import Tensor
from hypermotion.giraffe import (DgcnConfig, Giraffe, GiraffeConfig, MultiModalForecast,
                                 NormalizationError, chebyshev_terms, decode_multimodal, dgcn_layer,
                                 dgcn_stack, encode_interactions, fuse, giraffe_loss,
                                 predict_intentions)
from hypermotion.nn import Adam, ParameterStore, check_gradients

SMALL = GiraffeConfig(d_embed=6, hidden=8, fut_len=50, dgcn=DgcnConfig(2, 2, 8))


def synth_batch(n_scenes=1, seed=0):
    recs = [r for s in data.synth_dataset(n_scenes, seed=seed) for r in s]
    return data.collate(data.window_scenarios(recs, min_neighbors=6))


# ---- DGCN -----------------------------------------------------------------

def test_dgcn_identity_adjacency_k1(rng):
    store = ParameterStore(0)
    h = rng.normal(size=(3, 4))
    out = dgcn_layer(store, "d", h, np.eye(3), DgcnConfig(1, 1, 5), 5).data
    ref = h @ (store.value("d.theta_f1") + store.value("d.theta_b1"))
    np.testing.assert_allclose(out, ref, atol=1e-14)


def test_dgcn_k2_path_graph_matches_recursion(rng):
    a = np.array([[1.0, 1, 0], [1, 1, 1], [0, 1, 1]])
    a[0, 1] = 2.0   # asymmetric so the two directions differ
    store = ParameterStore(1)
    h = rng.normal(size=(3, 2))
    out = dgcn_layer(store, "d", h, a, DgcnConfig(2, 1, 3), 3).data
    af = a / a.sum(axis=1, keepdims=True)
    ab = a.T / a.T.sum(axis=1, keepdims=True)
    ref = np.zeros((3, 3))
    for tag, x in (("f", af), ("b", ab)):
        t0, t1 = np.eye(3), x
        t2 = 2 * x @ t1 - t0
        ref += t1 @ h @ store.value(f"d.theta_{tag}1") + t2 @ h @ store.value(f"d.theta_{tag}2")
    np.testing.assert_allclose(out, ref, atol=1e-13)


def test_chebyshev_terms_recursion(rng):
    x = rng.normal(size=(4, 4))
    terms = chebyshev_terms(x, 3)
    np.testing.assert_allclose(terms[0], x)
    np.testing.assert_allclose(terms[1], 2 * x @ x - np.eye(4))
    np.testing.assert_allclose(terms[2], 2 * x @ terms[1] - x)


def test_dgcn_zero_row_sum_errors():
    with pytest.raises(NormalizationError):
        dgcn_layer(ParameterStore(0), "d", np.ones((2, 2)), np.array([[1.0, 0], [0, 0]]),
                   DgcnConfig(1, 1, 2), 2)


@pytest.mark.gradcheck
def test_dgcn_two_layer_gradients(rng):
    store = ParameterStore(2)
    a = (rng.uniform(size=(4, 4)) > 0.4).astype(float) + np.eye(4)
    h = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
    cfg = DgcnConfig(2, 2, 5)
    fn = lambda: ad.square(dgcn_stack(store, "d", h, a, cfg, 2)).sum()
    fn()
    rep = check_gradients(fn, {**dict(store.items()), "h": h})
    assert rep.passed, rep.summary()


# ---- interaction encoding and intentions ----------------------------------

def test_encode_width_and_identical_agents(rng):
    hist = rng.normal(size=(30, 4, 4))
    hist[:, 3] = hist[:, 1]
    h = encode_interactions(ParameterStore(0), hist, np.ones((4, 4)), SMALL).data
    assert h.shape == (4, 2 * SMALL.d_embed)
    np.testing.assert_allclose(h[1], h[3], atol=1e-14)


def test_encode_has_no_dead_inputs(rng):
    store = ParameterStore(3)
    hist = rng.normal(size=(30, 2, 4))
    cfg = GiraffeConfig(d_embed=6, hidden=16, dgcn=DgcnConfig(2, 2, 16))
    base = encode_interactions(store, hist, np.ones((2, 2)), cfg).data
    for t in range(30):
        for c in range(4):
            p = hist.copy()
            p[t, 0, c] += 0.5
            assert not np.array_equal(encode_interactions(store, p, np.ones((2, 2)), cfg).data, base)


def test_intentions_rows_sum_to_one_and_uniform_on_zero_head(rng):
    store = ParameterStore(0)
    h = rng.normal(size=(5, 12))
    probs = predict_intentions(store, h, SMALL).data
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-14)
    store.set("giraffe.lat.w0", np.zeros((8, 3)))
    store.set("giraffe.lat.b0", np.zeros(3))
    np.testing.assert_allclose(predict_intentions(store, h, SMALL).data, 1 / 3, atol=1e-15)


def test_decode_shape_and_zero_head_is_anchor(rng):
    store = ParameterStore(0)
    h, probs = rng.normal(size=(4, 12)), np.full((4, 3), 1 / 3)
    anchor = rng.normal(size=(50, 4, 2))
    fc = decode_multimodal(store, h, probs, anchor, SMALL)
    assert fc.trajectories.shape == (50, 4, 3, 2)
    assert fc.gaussian_params.shape == (50, 4, 3, 5)
    assert np.all(fc.gaussian_params.data[..., 2:4] > 0)
    assert np.all(np.abs(fc.gaussian_params.data[..., 4]) < 1)
    store.set("giraffe.dec_out.w1", np.zeros((8, 5)))
    store.set("giraffe.dec_out.b1", np.zeros(5))
    fc = decode_multimodal(store, h, probs, anchor, SMALL)
    np.testing.assert_array_equal(fc.trajectories.data - anchor[:, :, None, :], 0.0)


# ---- losses ---------------------------------------------------------------

def _perfect(rng, n=3):
    truth = rng.normal(size=(50, n, 2))
    traj = np.repeat(truth[:, :, None, :], 3, axis=2)
    labels = np.eye(3)[rng.integers(0, 3, size=n)]
    return truth, traj, labels


def test_loss_zero_when_perfect(rng):
    truth, traj, labels = _perfect(rng)
    hf = rng.normal(size=(3, 6))
    total, parts = giraffe_loss(Tensor(traj), labels, truth, labels, hf, hf)
    assert parts["total"] == pytest.approx(0.0, abs=1e-12)


def test_loss_uniform_intentions_give_ln3(rng):
    truth, traj, labels = _perfect(rng)
    _, parts = giraffe_loss(Tensor(traj), np.full((3, 3), 1 / 3), truth, labels,
                            np.zeros((3, 6)), np.zeros((3, 6)))
    assert parts["int"] == pytest.approx(math.log(3), abs=1e-12)


def test_loss_unit_offset_gives_two(rng):
    truth, traj, labels = _perfect(rng)
    _, parts = giraffe_loss(Tensor(traj + 1.0), labels, truth, labels,
                            np.zeros((3, 6)), np.zeros((3, 6)))
    assert parts["pred"] == pytest.approx(2.0, abs=1e-12)


def test_fuse_weights_modes(rng):
    traj = rng.normal(size=(50, 2, 3, 2))
    probs = np.array([[0.2, 0.5, 0.3], [1.0, 0.0, 0.0]])
    fused = fuse(Tensor(traj), probs).data
    np.testing.assert_allclose(fused, np.einsum("fnmc,nm->fnc", traj, probs), atol=1e-14)


@pytest.mark.gradcheck
def test_full_loss_gradients():
    batch = synth_batch()
    cfg = GiraffeConfig(d_embed=3, hidden=4, fut_len=5, dgcn=DgcnConfig(2, 2, 4))
    store = ParameterStore(5)
    model = Giraffe(cfg, store)
    batch.future = batch.future[:5]
    fn = lambda: model.loss(batch)[0]
    fn()
    rep = check_gradients(fn, dict(store.trainable()))
    assert rep.passed, rep.summary()
    assert not any(n.startswith("giraffe.target") for n in rep.max_rel_error)


# ---- model behaviour ------------------------------------------------------

def test_permutation_equivariance(rng):
    batch = synth_batch()
    perm = rng.permutation(batch.n)
    model = Giraffe(SMALL, ParameterStore(0))
    traj, probs = model.predict(batch)
    pb = data.Batch(batch.history[:, perm], batch.future[:, perm], batch.adjacency[np.ix_(perm, perm)],
                    batch.labels[perm], batch.mask[perm], [(0, batch.n)])
    traj_p, probs_p = model.predict(pb)
    np.testing.assert_allclose(traj_p, traj[:, perm], atol=1e-10)
    np.testing.assert_allclose(probs_p, probs[perm], atol=1e-10)


def test_forward_is_deterministic():
    batch = synth_batch()
    a = Giraffe(SMALL, ParameterStore(0)).predict(batch)
    b = Giraffe(SMALL, ParameterStore(0)).predict(batch)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()


def test_loss_decreases_over_first_steps():
    batch = synth_batch()
    store = ParameterStore(0)
    model = Giraffe(SMALL, store)
    opt = Adam(store, lr=1e-3)
    losses = []
    for _ in range(50):
        store.zero_grad()
        loss, parts = model.loss(batch)
        assert all(v >= 0 for v in parts.values())
        loss.backward()
        opt.step()
        losses.append(parts["total"])
    assert losses[-1] < losses[0]
    assert all(b < a for a, b in zip(losses[:10], losses[1:11]))


def test_overfit_constant_velocity_sample():
    hist = np.zeros((30, 1, 4))
    hist[:, 0, 0] = (np.arange(30) - 29) * 2.5
    hist[:, 0, 2] = 25.0
    fut = np.zeros((50, 1, 2))
    fut[:, 0, 0] = np.arange(1, 51) * 2.5
    labels = np.array([[1.0, 0.0, 0.0]])  # nonuniform label exercises the intention head
    batch = data.Batch(hist, fut, np.ones((1, 1)), labels, np.ones(1, bool), [(0, 1)])
    store = ParameterStore(0)
    model = Giraffe(SMALL, store)
    opt = Adam(store, lr=3e-3)
    for _ in range(300):
        store.zero_grad()
        loss, parts = model.loss(batch)
        loss.backward()
        opt.step()
    traj, probs = model.predict(batch)
    fused = (traj * probs[None, :, :, None]).sum(axis=2)
    assert ((fused - fut) ** 2).sum(-1).mean() < 1e-3
    assert probs[0].argmax() == 0
