import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rnce import autodiff as ad
from rnce import flow as fl
from rnce import models as M

W = 0.5 * np.pi


class GaussianBridgeField:
    """Exact bridge velocity for 1-D data N(m, s^2): affine in y, worked out by hand.

    With c = cos(w t), q = sin(w t): I ~ N(q m, c^2 + q^2 s^2),
    E[dI | I = u] = w c m + w c q (s^2 - 1) / V (u - q m).
    """

    def __init__(self, m, s):
        self.m, self.s = m, s

    def _coef(self, t):
        t = np.asarray(t, dtype=np.float64)
        c, q = np.cos(W * t), np.sin(W * t)
        v = c * c + q * q * self.s**2
        a = W * c * q * (self.s**2 - 1) / v
        return a, W * c * self.m - a * q * self.m

    def __call__(self, t, x, y):
        a, b = self._coef(t)
        a = a[:, None] if np.ndim(a) else a
        b = b[:, None] if np.ndim(b) else b
        return a * y + b

    def divergence(self, t, x, y):
        a, _ = self._coef(t)
        return np.broadcast_to(a, (np.shape(y)[0],)) * np.shape(y)[1]


def _tiny_flow(seed=0, event_dim=1, ctx_dim=0, steps=64, lp=9):
    a = M.Arch(kind="concatsquash_vf", widths=(8,), ctx_dim=ctx_dim, event_dim=event_dim)
    return fl.FlowModel(M.build(a), M.mlp_init(a, seed), fl.StepSchedule.uniform(1.0, steps, lp))


@settings(max_examples=30, deadline=None)
@given(st.floats(0, 1))
def test_interpolant_endpoints_and_time_derivative(t):
    rng = np.random.default_rng(0)
    z, y = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    np.testing.assert_allclose(fl.interpolant_eval(z, y, 0.0), z, atol=1e-15)
    np.testing.assert_allclose(fl.interpolant_eval(z, y, 1.0), y, atol=1e-15)
    h = 1e-6
    fd = (fl.interpolant_eval(z, y, t + h) - fl.interpolant_eval(z, y, t - h)) / (2 * h)
    np.testing.assert_allclose(fl.interpolant_dt(z, y, t), fd, atol=1e-8)


def test_interpolant_shape_mismatch():
    with pytest.raises(ad.ShapeError):
        fl.interpolant_eval(np.zeros((2, 2)), np.zeros((3, 2)), 0.5)


def test_time_distribution_support_and_law():
    rng = np.random.default_rng(1)
    t = fl.TimeDistribution(3.0).sample(rng, 200_000)
    assert t.min() > 0 and t.max() <= 1
    # P(T <= s) = s^alpha
    assert np.mean(t <= 0.5) == pytest.approx(0.125, abs=3e-3)
    with pytest.raises(ValueError):
        fl.TimeDistribution(0.5)


def test_exact_bridge_field_transports_to_data_law():
    m, s = 1.3, 0.6
    z = np.random.default_rng(0).normal(size=(500, 1))
    y, lp = fl.integrate_with_logprob(GaussianBridgeField(m, s), None, z, np.linspace(0, 1, 1025),
                                      list(range(0, 1025, 4)), fl.std_normal_logpdf(z))
    # the exact flow of Gaussians is the monotone affine map
    np.testing.assert_allclose(y, m + s * z, atol=1e-5)
    want = -0.5 * ((y[:, 0] - m) / s) ** 2 - np.log(s) - 0.5 * np.log(2 * np.pi)
    np.testing.assert_allclose(lp, want, atol=1e-5)


def test_interpolant_loss_is_minimised_by_bridge_velocity():
    m, s = 0.7, 0.4
    rng = np.random.default_rng(3)
    n = 200_000
    y, z, t = m + s * rng.normal(size=(n, 1)), rng.normal(size=(n, 1)), rng.uniform(0.05, 0.95, n)
    exact = GaussianBridgeField(m, s)

    class Shifted:
        def velocity(self, p, t, x, yt):
            return ad.add(exact(t, x, yt), p["c"])

    p = ad.ParameterVector([("c", np.zeros(1))])
    _, g = ad.value_and_grad(lambda q: fl.interpolant_loss(Shifted(), q, None, y, z, t), p)
    # expected loss is |c|^2 + const at the optimum; MC noise of the gradient is O(n^-1/2)
    assert abs(g["c"][0]) < 0.02


def test_interpolant_loss_gradient_finite_difference():
    f = _tiny_flow(event_dim=2, ctx_dim=1)
    rng = np.random.default_rng(0)
    x, y, z, t = rng.normal(size=(6, 1)), rng.normal(size=(6, 2)), rng.normal(size=(6, 2)), rng.uniform(size=6)
    err = ad.finite_difference_check(lambda q: fl.interpolant_loss(f.vf, q, x, y, z, t), f.params, step=1e-6)
    assert err < 1e-5


def test_exact_divergence_matches_tape():
    f = _tiny_flow(event_dim=2, ctx_dim=1, seed=4)
    rng = np.random.default_rng(0)
    x, y, t = rng.normal(size=(5, 1)), rng.normal(size=(5, 2)), rng.uniform(size=5)
    got = fl.exact_divergence(f.vf, f.params, x, y, t)
    want = fl.divergence_by_tape(lambda yv: f.vf.velocity(f.params, t, x, yv), y)
    np.testing.assert_allclose(got, want, rtol=1e-10, atol=1e-12)


def test_linear_field_logprob_analytic():
    a = 0.7

    class Linear:
        def __call__(self, t, x, y):
            return a * y

        def divergence(self, t, x, y):
            return np.full(np.shape(y)[0], a * np.shape(y)[1])

    z = np.random.default_rng(0).normal(size=(100, 2))
    _, lp = fl.integrate_with_logprob(Linear(), None, z, np.linspace(0, 1, 65), [0, 32, 64], fl.std_normal_logpdf(z))
    np.testing.assert_allclose(lp, fl.std_normal_logpdf(z) - 2 * a, atol=1e-12)


def test_logprob_bookkeeping_leaves_sample_path_bitwise_unchanged():
    f = _tiny_flow(seed=2, event_dim=2, ctx_dim=1)
    x = np.random.default_rng(0).normal(size=(7, 1))
    y1 = fl.flow_sample(f, x, 11)
    y2, _ = fl.flow_sample_with_logprob(f, x, 11)
    assert np.array_equal(y1, y2)


def test_forward_and_reverse_logprob_agree():
    f = _tiny_flow(seed=5, event_dim=2, ctx_dim=1, steps=200, lp=201)
    x = np.random.default_rng(0).normal(size=(7, 1))
    y, lp = fl.flow_sample_with_logprob(f, x, 3)
    np.testing.assert_allclose(fl.flow_logprob(f, x, y), lp, atol=1e-5)


def test_untrained_flow_density_normalises():
    f = _tiny_flow(seed=1, steps=100, lp=21)
    grid = np.linspace(-8, 8, 1601)[:, None]
    dens = np.exp(fl.flow_logprob(f, np.zeros((grid.shape[0], 0)), grid))
    assert np.trapezoid(dens, grid[:, 0]) == pytest.approx(1.0, abs=5e-3)


def test_truncated_sampling_per_row_matches_scalar():
    f = _tiny_flow(seed=3)
    z = np.random.default_rng(0).normal(size=(4, 1))
    x = np.zeros((4, 0))
    per_row = fl.flow_sample(f, x, z, truncate_at=np.full(4, 0.6))
    scalar = fl.flow_sample(f, x, z, truncate_at=0.6)
    np.testing.assert_allclose(per_row, scalar, atol=1e-14)


def test_zero_truncation_returns_base_draws():
    f = _tiny_flow()
    z = np.random.default_rng(0).normal(size=(3, 1))
    assert np.array_equal(fl.flow_sample(f, np.zeros((3, 0)), z, truncate_at=0.0), z)


def test_segment_grid_structure():
    times = np.array([[0.2, 0.5, 1.0], [0.1, 0.3, 0.9]])
    ts, lp, save = fl.segment_grid(times, 4, 3)
    assert ts.shape == (13, 2)
    np.testing.assert_array_equal(ts[0], 0.0)
    np.testing.assert_allclose(ts[save].T, times)
    assert lp[0] == 0 and lp[-1] == 12 and set(save) <= set(lp)
    assert np.all(np.diff(ts, axis=0) > 0)


def test_step_schedule_validation():
    s = fl.StepSchedule.uniform(1.0, 10, 4)
    assert s.lp_idx[0] == 0 and s.lp_idx[-1] == 10
    with pytest.raises(ValueError):
        fl.StepSchedule((0.0, 0.5, 0.4), (0.0, 0.4))
    with pytest.raises(ValueError):
        fl.StepSchedule((0.0, 0.5, 1.0), (0.0, 0.7, 1.0))


def test_integrate_rejects_bad_lp_indices():
    z = np.zeros((2, 1))
    f = GaussianBridgeField(0.0, 1.0)
    with pytest.raises(ValueError):
        fl.integrate_with_logprob(f, None, z, np.linspace(0, 1, 5), [0, 2], np.zeros(2))


def test_sampling_is_seed_reproducible():
    f = _tiny_flow(seed=2)
    x = np.zeros((5, 0))
    assert np.array_equal(fl.flow_sample(f, x, 9), fl.flow_sample(f, x, 9))
