import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rnce import autodiff as ad
from rnce import edm as E
from rnce import models as M

CFG = E.EdmConfig()


def _den(variant, seed=0):
    kind = "mlp_energy" if variant == "energy" else "mlp_vf"
    a = M.Arch(kind=kind, widths=(8, 8), ctx_dim=1, event_dim=2, time_embed_dim=4)
    return E.make_denoiser(variant, a, CFG, seed)


def _data(n=6, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(n, 1)), rng.normal(size=(n, 2)), np.exp(rng.normal(-1, 1, n))


@settings(max_examples=40, deadline=None)
@given(st.floats(1e-3, 100), st.floats(0.1, 2))
def test_preconditioning_identities(sigma, sd):
    c_skip, c_out, c_in, c_noise = E.precond(sigma, sd)
    # unit-variance network input and unit effective target weight
    assert c_in**2 * (sigma**2 + sd**2) == pytest.approx(1.0, rel=1e-12)
    assert E.loss_weight(sigma, sd) * c_out**2 == pytest.approx(1.0, rel=1e-12)
    assert c_skip * (sigma**2 + sd**2) == pytest.approx(sd**2, rel=1e-12)
    assert c_noise == pytest.approx(0.25 * np.log(sigma), rel=1e-12, abs=1e-15)


def test_karras_schedule_endpoints_and_monotone():
    s = E.karras_sigmas(CFG, 20)
    assert s[0] == CFG.sigma_max and s[-1] == CFG.sigma_min
    assert np.all(np.diff(s) < 0)


def test_training_sigma_law():
    s = E.sample_sigma(np.random.default_rng(0), 200_000, CFG)
    assert s.min() >= CFG.sigma_min and s.max() <= CFG.sigma_max
    assert np.median(np.log(s)) == pytest.approx(CFG.p_mean, abs=0.02)


@pytest.mark.parametrize("variant", ["direct", "energy"])
def test_train_loss_gradient_finite_difference(variant):
    den = _den(variant)
    x, y, s = _data()
    noise = np.random.default_rng(1).normal(size=y.shape)
    err = ad.finite_difference_check(lambda q: E.edm_train_loss(den, q, x, y, s, noise), den.params, step=1e-6)
    assert err < 1e-5


@pytest.mark.parametrize("variant", ["direct", "energy"])
def test_jacobian_trace_matches_finite_difference(variant):
    den = _den(variant, seed=2)
    x, y, s = _data()
    h = 1e-6
    fd = sum((np.asarray(den.denoise(x, y + h * np.eye(2)[j], s))[:, j]
              - np.asarray(den.denoise(x, y - h * np.eye(2)[j], s))[:, j]) / (2 * h) for j in range(2))
    np.testing.assert_allclose(den.jac_trace(x, y, s), fd, rtol=1e-6, atol=1e-8)


def test_relative_likelihood_gradient_is_the_denoiser_score():
    den = _den("energy", seed=3)
    x, y, _ = _data()
    s = CFG.sigma_rel
    score = E.edm_score(den, x, y, s)
    h = 1e-6
    fd = np.stack([(E.edm_relative_likelihood(den, x, y + h * np.eye(2)[j])
                    - E.edm_relative_likelihood(den, x, y - h * np.eye(2)[j])) / (2 * h) for j in range(2)], 1)
    np.testing.assert_allclose(fd, score, rtol=1e-4, atol=1e-6)


def test_relative_likelihood_needs_energy_variant():
    with pytest.raises(ValueError):
        E.edm_relative_likelihood(_den("direct"), *_data()[:2])


def test_optimal_denoiser_score_is_noised_gaussian_score():
    g = E.GaussianOptimalDenoiser(0.5, 2)
    y = np.random.default_rng(0).normal(size=(5, 2))
    for s in (0.01, 0.3, 5.0):
        np.testing.assert_allclose(E.edm_score(g, None, y, s), -y / (0.25 + s * s), rtol=1e-12)


def test_probability_flow_sampler_self_convergence():
    g = E.GaussianOptimalDenoiser(0.5, 2, CFG)
    a = E.pflow_sample(g, np.zeros((200, 0)), E.EdmConfig(n_steps=256), 0)
    b = E.pflow_sample(g, np.zeros((200, 0)), E.EdmConfig(n_steps=512), 0)
    assert np.max(np.abs(a - b)) < 1e-3


def test_probability_flow_sample_moments():
    g = E.GaussianOptimalDenoiser(0.5, 2, CFG)
    y = E.pflow_sample(g, np.zeros((20_000, 0)), E.EdmConfig(n_steps=128), 1)
    np.testing.assert_allclose(y.var(0), 0.25 + CFG.sigma_min**2, rtol=0.04)
    np.testing.assert_allclose(y.mean(0), 0.0, atol=0.015)


def test_probability_flow_logprob_recovers_gaussian_density():
    g = E.GaussianOptimalDenoiser(0.5, 2, CFG)
    y = np.random.default_rng(0).normal(0, 0.5, size=(50, 2))
    lp = E.pflow_logprob(g, np.zeros((50, 0)), y, CFG, n_steps=256)
    np.testing.assert_allclose(lp, g.logpdf(y, CFG.sigma_min), atol=1e-2)


def test_invalid_config_and_sigma():
    with pytest.raises(ValueError):
        E.EdmConfig(sigma_min=1.0, sigma_max=0.5)
    with pytest.raises(ValueError):
        E.precond(0.0, 0.5)
    with pytest.raises(ValueError):
        E.Denoiser("energy", M.build({"kind": "mlp_vf", "widths": [4], "event_dim": 2}), None, CFG)
