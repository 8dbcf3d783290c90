import numpy as np
import pytest

from hypermotion import autodiff as ad
from hypermotion import data
from hypermotion.autodiff import Tensor
from hypermotion.config import desk_config
from hypermotion.encoder import EncoderConfig, NoiseBank
from hypermotion.generator import (LossWeights, PosteriorParams, Rhino, RhinoConfig, generate,
                                   posterior, prior, rhino_loss, sample_latent)
from hypermotion.giraffe import Giraffe
from hypermotion.nn import Adam, ParameterStore, SeededRng, check_gradients
from hypermotion.pipeline import generate_k, min_of_k


def small_cfg(variant="full", **kw):
    enc = EncoderConfig(scales=(3,), d_embed=4, hidden=5, categories=2, passes=1)
    return RhinoConfig(encoder=enc, d_latent=3, hidden=6, **kw).for_variant(variant)


def synth_batch(n_scenes=1):
    recs = [r for s in data.synth_dataset(n_scenes, seed=0) for r in s]
    return data.collate(data.window_scenarios(recs, min_neighbors=6))


# ---- posterior and sampling ----------------------------------------------

def test_posterior_sigma_positive_and_zero_weight_mean(rng):
    store = ParameterStore(0)
    vf, vp = rng.normal(size=(4, 3)) * 50, rng.normal(size=(4, 3)) * 50
    p = posterior(store, vf, vp, 5, 2)
    assert np.all(p.sigma.data > 0)
    store.set("rhino.f_mu.w1", np.zeros((5, 2)))
    store.set("rhino.f_mu.b1", np.array([0.25, -0.5]))
    np.testing.assert_array_equal(posterior(store, vf, vp, 5, 2).mu.data, np.tile([0.25, -0.5], (4, 1)))


@pytest.mark.gradcheck
def test_posterior_gradients(rng):
    store = ParameterStore(1)
    vf = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    vp = rng.normal(size=(3, 2))

    def fn():
        p = posterior(store, vf, vp, 4, 2)
        return ad.square(p.mu).sum() + ad.log(p.sigma).sum()

    fn()
    rep = check_gradients(fn, {**dict(store.items()), "vf": vf})
    assert rep.passed, rep.summary()


def test_sample_latent_sigma_to_zero_returns_mean(rng):
    mu = rng.normal(size=(3, 2))
    z = sample_latent(PosteriorParams(Tensor(mu), Tensor(np.full((3, 2), 1e-300))), SeededRng(0))
    np.testing.assert_array_equal(z.z.data, mu)


def test_sample_latent_moments():
    mu, sig = np.array([[0.5, -1.0, 2.0]]), np.array([[0.3, 1.5, 0.8]])
    z = sample_latent(PosteriorParams(Tensor(mu), Tensor(sig)), SeededRng(4), k=100_000).z.data
    assert np.all(np.abs(z.mean(axis=0) - mu) < 0.02)
    assert np.all(np.abs(z.var(axis=0) / sig ** 2 - 1) < 0.03)
    zp = sample_latent(prior(1, 3, 0.5), SeededRng(5), k=100_000).z.data
    assert np.all(np.abs(zp.var(axis=0) / 0.5 - 1) < 0.03)


def test_sample_latent_is_seeded():
    p = prior(4, 3, 0.5)
    a = sample_latent(p, SeededRng(3), k=5).z.data
    b = sample_latent(p, SeededRng(3), k=5).z.data
    assert a.tobytes() == b.tobytes()


@pytest.mark.gradcheck
def test_reparameterized_gradient_of_second_moment():
    mu = Tensor(np.array([[0.7, -0.2]]), requires_grad=True)
    sig = Tensor(np.array([[0.5, 1.1]]), requires_grad=True)
    eps = SeededRng(8).normal((20_000, 1, 2))
    fn = lambda: ad.square(sample_latent(PosteriorParams(mu, sig), None, k=20_000, eps=eps).z).sum() * (1 / 20_000)
    rep = check_gradients(fn, {"mu": mu, "sigma": sig})
    assert rep.passed, rep.summary()
    np.testing.assert_allclose(mu.grad, 2 * mu.data, atol=0.05)


# ---- generator ------------------------------------------------------------

def test_generate_shapes(rng):
    batch = synth_batch()
    store = ParameterStore(0)
    fut, past = generate(store, rng.normal(size=(7, 4)), rng.normal(size=(7, 3)), batch.history, 6)
    assert fut.shape == (50, 7, 2) and past.shape == (30, 7, 2)
    fut, past = generate(store, rng.normal(size=(7, 4)), rng.normal(size=(5, 7, 3)), batch.history, 6)
    assert fut.shape == (50, 5, 7, 2) and past.shape == (30, 5, 7, 2)


def test_zero_block_two_leaves_block_one(rng):
    batch = synth_batch()
    store = ParameterStore(0)
    vp, z = rng.normal(size=(7, 4)), rng.normal(size=(7, 3))
    fut, past = generate(store, vp, z, batch.history, 6)
    for head in ("head_f", "head_t"):
        for p in ("w1", "b1"):
            name = f"rhino.res2.{head}.{p}"
            store.set(name, np.zeros_like(store.value(name)))
    fut0, past0 = generate(store, vp, z, batch.history, 6)
    # block 1 alone: its own residual prediction added to the kinematic line
    from hypermotion.generator import _residual_block

    resid = batch.history[..., :2] - batch.past_anchor()
    f1, t1 = _residual_block(store, "rhino.res1", ad.concat([ad.as_tensor(z), ad.as_tensor(vp)], axis=1),
                             resid, 6, 50, 30, 7)
    np.testing.assert_allclose(fut0.data, f1.data + batch.future_anchor(), atol=1e-12)
    np.testing.assert_allclose(past0.data, t1.data + batch.past_anchor(), atol=1e-12)
    assert not np.allclose(fut.data, fut0.data)


@pytest.mark.gradcheck
def test_generation_loss_gradients_through_both_blocks(rng):
    # a history far from constant velocity keeps the block-2 input (a residual) well away from zero
    hist = rng.normal(size=(4, 7, 4)) * 3.0
    store = ParameterStore(2)
    vp = Tensor(rng.normal(size=(7, 2)), requires_grad=True)
    z = Tensor(rng.normal(size=(2, 7, 2)), requires_grad=True)
    truth_f = data.kinematic_anchor(hist, 3) + rng.normal(size=(3, 7, 2)) * 0.5
    w = LossWeights()

    def fn():
        fut, past = generate(store, vp, z, hist, 3, fut_len=3)
        return rhino_loss(fut, past, None, truth_f, hist, w)[0]

    fn()
    rep = check_gradients(fn, {**dict(store.items()), "vp": vp, "z": z})
    assert rep.passed, rep.summary()


# ---- losses ---------------------------------------------------------------

def test_loss_zero_when_perfect_and_posterior_is_prior(rng):
    truth_f, hist = rng.normal(size=(50, 3, 2)), rng.normal(size=(30, 3, 4))
    w = LossWeights()
    p = prior(3, 4, w.prior_scale)
    total, parts = rhino_loss(np.repeat(truth_f[:, None], 2, axis=1), hist[..., :2], p, truth_f, hist, w)
    assert parts["total"] == pytest.approx(0.0, abs=1e-12)


def test_single_sample_variety_equals_elbo_reconstruction(rng):
    truth_f, hist = rng.normal(size=(50, 3, 2)), rng.normal(size=(30, 3, 4))
    pred = truth_f[:, None] + rng.normal(size=(50, 1, 3, 2))
    _, parts = rhino_loss(pred, hist[..., :2], None, truth_f, hist, LossWeights(alpha=1.0))
    assert parts["var"] == pytest.approx(parts["elbo"], abs=1e-14)


def test_variety_hand_case():
    truth = np.zeros((50, 1, 2))
    s1 = np.full((50, 1, 2), np.sqrt(2.0))   # per-step squared error 4.0
    s2 = np.full((50, 1, 2), np.sqrt(0.5))   # per-step squared error 1.0
    _, parts = rhino_loss([s1, s2], np.zeros((30, 1, 2)), None, truth, np.zeros((30, 1, 4)), LossWeights())
    assert parts["var"] == pytest.approx(1.0)
    assert parts["elbo"] == pytest.approx(4.0)


def test_variety_not_above_elbo_reconstruction(rng):
    truth_f, hist = rng.normal(size=(10, 4, 2)), rng.normal(size=(30, 4, 4))
    pred = truth_f[:, None] + rng.normal(size=(10, 6, 4, 2))
    w = LossWeights(alpha=0.7)
    p = PosteriorParams(Tensor(rng.normal(size=(4, 3))), Tensor(rng.uniform(0.2, 2, size=(4, 3))))
    _, parts = rhino_loss(pred, hist[..., :2], p, truth_f, hist, w)
    rec = (parts["elbo"] - w.beta * parts["kl"]) / w.alpha
    assert parts["var"] <= rec + 1e-12
    assert all(v >= 0 for v in parts.values())


# ---- full model -----------------------------------------------------------

def _predictor(batch):
    return Giraffe(desk_config().giraffe(), ParameterStore(0))


@pytest.mark.parametrize("variant", ["full", "no_mm"])
@pytest.mark.gradcheck
def test_full_model_loss_gradients_with_frozen_noise(variant):
    batch = synth_batch()
    modes, probs = _predictor(batch).predict(batch)
    # short horizons keep the finite-difference sweep fast
    batch.history, batch.future, modes = batch.history[-6:], batch.future[:5], modes[:5]
    cfg = small_cfg(variant, weights=LossWeights(k_samples=2), hist_len=6, fut_len=5)
    store = ParameterStore(3)
    model = Rhino(cfg, store)
    bank = NoiseBank(4)
    eps = SeededRng(9).normal((2, 7, 3))
    fn = lambda: model.loss(batch, modes, probs, None, tau=0.9, noises=bank, eps=eps)[0]
    fn()
    # one weight matrix per sub-network keeps the finite-difference sweep short
    names = [n for n, _ in store.trainable() if n.endswith((".w1", ".wh"))]
    rep = check_gradients(fn, store, names=names)
    assert rep.passed, rep.summary()


def test_no_pdl_is_deterministic_across_seeds():
    batch = synth_batch()
    model = Rhino(small_cfg("no_pdl"), ParameterStore(0))
    pred = _predictor(batch)
    a = generate_k(model, pred, batch, 3, seed=1)
    b = generate_k(model, pred, batch, 3, seed=2)
    np.testing.assert_array_equal(a, b)


def test_variants_differ_from_full_only_where_intended():
    full, no_hg = small_cfg("full"), small_cfg("no_hg")
    assert no_hg.encoder.scales == () and full.encoder.scales == (3,)
    for f in ("d_embed", "hidden", "categories", "tau", "passes"):
        assert getattr(full.encoder, f) == getattr(no_hg.encoder, f)
    assert (full.d_latent, full.hidden, full.weights) == (no_hg.d_latent, no_hg.hidden, no_hg.weights)
    with pytest.raises(ValueError):
        small_cfg("bogus")


def test_generate_k_shapes_and_seeding():
    batch = synth_batch()
    model = Rhino(small_cfg(), ParameterStore(0))
    pred = _predictor(batch)
    assert generate_k(model, pred, batch, 1, seed=0).shape == (50, 7, 1, 2)
    a = generate_k(model, pred, batch, 4, seed=5)
    b = generate_k(model, pred, batch, 4, seed=5)
    assert a.shape == (50, 7, 4, 2) and a.tobytes() == b.tobytes()
    assert not np.array_equal(a, generate_k(model, pred, batch, 4, seed=6))


def test_overfit_single_constant_velocity_scenario():
    hist = np.zeros((30, 2, 4))
    for a, (y, v) in enumerate(((0.0, 25.0), (3.5, 27.0))):
        hist[:, a, 0] = (np.arange(30) - 29) * v * 0.1
        hist[:, a, 1] = y
        hist[:, a, 2] = v
    fut = hist[-1, :, :2] + np.arange(1, 51)[:, None, None] * 0.1 * hist[-1, :, 2:4]
    sc = data.ScenarioBatch(hist, fut, np.ones(2, bool), np.tile([0.0, 1.0, 0.0], (2, 1)))
    batch = data.collate([sc])
    cfg = small_cfg(weights=LossWeights(k_samples=4))
    store = ParameterStore(0)
    model = Rhino(cfg, store)
    pred = _predictor(batch)
    modes, probs = pred.predict(batch)
    opt = Adam(store, lr=3e-3)
    rng = SeededRng(0)
    for _ in range(150):
        store.zero_grad()
        loss, _ = model.loss(batch, modes, probs, rng)
        loss.backward()
        opt.step()
    best = min_of_k(generate_k(model, pred, batch, 10, seed=7), fut)
    assert np.sqrt(((best - fut) ** 2).sum(-1).mean()) < 0.1
