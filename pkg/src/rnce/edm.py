"""Denoising-diffusion baseline with preconditioned denoisers.

Two denoisers share the preconditioning
``d(y, s) = c_skip(s) y + c_out(s) F(c_in(s) y, c_noise(s))``:

* ``direct``: F is a vector-valued network;
* ``energy``: F is the input-gradient of a scalar network phi, which makes a
  relative log-likelihood available in closed form.

Sampling integrates the probability-flow ODE ``dy/ds = (y - d(y, s)) / s``
with Heun steps on a polynomial (rho) noise schedule; the same ODE run as a
flow gives log-densities through :mod:`rnce.flow`.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import autodiff as ad
from . import flow as fl
from . import models as M

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclasses.dataclass(frozen=True)
class EdmConfig:
    sigma_data: float = 0.5
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    sigma_rel: float = 0.02
    n_steps: int = 32
    p_mean: float = -1.2
    p_std: float = 1.2

    def __post_init__(self):
        if not 0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        if self.rho < 1 or self.sigma_data <= 0 or self.sigma_rel <= 0 or self.n_steps < 2:
            raise ValueError("invalid diffusion configuration")


def precond(sigma, sigma_data):
    """``(c_skip, c_out, c_in, c_noise)`` for noise level ``sigma``."""
    s = np.asarray(sigma, dtype=np.float64)
    if np.any(s <= 0):
        raise ValueError("sigma must be positive")
    s2, d2 = s * s, sigma_data * sigma_data
    c_skip = d2 / (s2 + d2)
    c_out = s * sigma_data / np.sqrt(s2 + d2)
    c_in = 1.0 / np.sqrt(s2 + d2)
    c_noise = 0.25 * np.log(s)
    return c_skip, c_out, c_in, c_noise


def loss_weight(sigma, sigma_data):
    s = np.asarray(sigma, dtype=np.float64)
    return (s * s + sigma_data**2) / (s * sigma_data) ** 2


def karras_sigmas(cfg: EdmConfig, n: int | None = None) -> np.ndarray:
    """Decreasing noise levels from sigma_max to sigma_min, both hit exactly."""
    n = cfg.n_steps if n is None else n
    i = np.arange(n)
    a, b = cfg.sigma_max ** (1 / cfg.rho), cfg.sigma_min ** (1 / cfg.rho)
    s = (a + i / (n - 1) * (b - a)) ** cfg.rho
    s[0], s[-1] = cfg.sigma_max, cfg.sigma_min
    return s


def sample_sigma(rng, n, cfg: EdmConfig) -> np.ndarray:
    """Log-normal training noise levels, clipped to [sigma_min, sigma_max]."""
    return np.clip(np.exp(cfg.p_mean + cfg.p_std * rng.standard_normal(n)), cfg.sigma_min, cfg.sigma_max)


def _col(sigma, n):
    s = np.asarray(sigma, dtype=np.float64)
    return np.full(n, float(s)) if s.ndim == 0 else s.reshape(n)


class Denoiser:
    """Preconditioned denoiser around a vector-field (direct) or scalar (energy) network."""

    def __init__(self, variant: str, model, params, cfg: EdmConfig):
        if variant not in ("direct", "energy"):
            raise ValueError(f"unknown denoiser variant {variant!r}")
        if variant == "energy" and not isinstance(model, M.MlpEnergy):
            raise ValueError("energy variant needs a scalar energy network")
        self.variant, self.model, self.params, self.cfg = variant, model, params, cfg
        self.event_dim = model.arch.event_dim

    def with_params(self, params) -> "Denoiser":
        return Denoiser(self.variant, self.model, params, self.cfg)

    def raw(self, params, x, u, c_noise):
        """Network output F at scaled input ``u``."""
        if self.variant == "direct":
            return self.model.velocity(params, c_noise, x, u)
        return self.model.score(params, x, u, c_noise)

    def raw_jvp(self, x, u, c_noise, v):
        if self.variant == "direct":
            return self.model.jvp(self.params, c_noise, x, u, v)
        return self.model.score_jvp(self.params, x, u, c_noise, v)

    def denoise(self, x, y, sigma, params=None):
        params = self.params if params is None else params
        y = np.asarray(y, dtype=np.float64)
        s = _col(sigma, y.shape[0])
        c_skip, c_out, c_in, c_noise = precond(s, self.cfg.sigma_data)
        f = self.raw(params, x, c_in[:, None] * y, c_noise)
        return ad.add(c_skip[:, None] * y, ad.mul(c_out[:, None], f))

    def jac_trace(self, x, y, sigma):
        """Trace of the y-Jacobian of the denoiser, from d forward-mode passes."""
        y = np.asarray(y, dtype=np.float64)
        n, d = y.shape
        s = _col(sigma, n)
        c_skip, c_out, c_in, c_noise = precond(s, self.cfg.sigma_data)
        u = c_in[:, None] * y
        xs = np.tile(x, (d, 1)) if np.ndim(x) == 2 else x
        _, jv = self.raw_jvp(xs, np.tile(u, (d, 1)), np.tile(c_noise, d), np.repeat(np.eye(d), n, axis=0))
        tr = sum(jv[i * n : (i + 1) * n, i] for i in range(d))
        return d * c_skip + c_out * c_in * tr

    def phi(self, x, u, c_noise):
        if self.variant != "energy":
            raise ValueError("the direct denoiser has no scalar potential")
        return np.asarray(self.model.energy(self.params, x, u, c_noise))


class GaussianOptimalDenoiser:
    """Exact denoiser for ``N(0, sigma_data^2 I)`` data: linear shrinkage."""

    def __init__(self, sigma_data: float, event_dim: int, cfg: EdmConfig | None = None):
        self.sigma_data, self.event_dim = sigma_data, event_dim
        self.cfg = cfg or EdmConfig(sigma_data=sigma_data)

    def denoise(self, x, y, sigma, params=None):
        y = np.asarray(y, dtype=np.float64)
        s = _col(sigma, y.shape[0])
        return y * (self.sigma_data**2 / (self.sigma_data**2 + s * s))[:, None]

    def jac_trace(self, x, y, sigma):
        s = _col(sigma, np.shape(y)[0])
        return self.event_dim * self.sigma_data**2 / (self.sigma_data**2 + s * s)

    def logpdf(self, y, sigma):
        """Analytic density of the noised data at level ``sigma``."""
        v = self.sigma_data**2 + sigma**2
        y = np.asarray(y, dtype=np.float64)
        return -0.5 * np.sum(y * y, axis=-1) / v - 0.5 * y.shape[-1] * (LOG_2PI + np.log(v))


def edm_score(den, x, y, sigma):
    """``(d(y, s) - y) / s^2``: score of the noised density."""
    y = np.asarray(y, dtype=np.float64)
    s = _col(sigma, y.shape[0])
    if np.any(s <= 0):
        raise ValueError("sigma must be positive")
    return (np.asarray(den.denoise(x, y, s)) - y) / (s * s)[:, None]


def edm_train_loss(den: Denoiser, params, x, y, sigma, noise):
    """Weighted denoising regression: mean of ``lambda(s) |d(y + s eps, s) - y|^2``."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape[0] == 0:
        raise ValueError("empty batch")
    s = _col(sigma, y.shape[0])
    yn = y + s[:, None] * noise
    r = ad.add(den.denoise(x, yn, s, params), -y)
    per = ad.mul(loss_weight(s, den.cfg.sigma_data), ad.total(ad.square(r), axis=1))
    return ad.mean(per)


class ProbabilityFlowField:
    """The probability-flow ODE in the noise level, ``dy/ds = (y - d(y, s)) / s``, as a flow field."""

    def __init__(self, den):
        self.den = den

    def __call__(self, s, x, y):
        n = np.shape(y)[0]
        s = _col(s, n)
        return (y - np.asarray(self.den.denoise(x, y, s))) / s[:, None]

    def divergence(self, s, x, y):
        n, d = np.shape(y)
        s = _col(s, n)
        return (d - self.den.jac_trace(x, y, s)) / s


def pflow_sample(den, x, cfg: EdmConfig, seed, n=None):
    """Draw ``N(0, sigma_max^2 I)`` and Heun-integrate the probability flow down to sigma_min."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0] if n is None else n
    y = cfg.sigma_max * rng.standard_normal((n, den.event_dim))
    y, _ = fl.integrate(ProbabilityFlowField(den), x, y, karras_sigmas(cfg))
    return y


def pflow_logprob(den, x, y, cfg: EdmConfig, n_steps: int | None = None, n_lp: int | None = None):
    """Log-density at sigma_min by running the probability flow upward and trapezoid-integrating the divergence."""
    y = np.asarray(y, dtype=np.float64)
    sig = karras_sigmas(cfg, n_steps)[::-1].copy()
    S = sig.shape[0] - 1
    n_lp = S + 1 if n_lp is None else n_lp
    lp_idx = sorted(set(np.round(np.linspace(0, S, n_lp)).astype(int).tolist()))
    yT, neg_int = fl.integrate_with_logprob(ProbabilityFlowField(den), x, y, sig, lp_idx, np.zeros(y.shape[0]))
    d = y.shape[1]
    base = -0.5 * np.sum(yT * yT, axis=1) / cfg.sigma_max**2 - 0.5 * d * (LOG_2PI + 2 * np.log(cfg.sigma_max))
    return base - neg_int


def edm_relative_likelihood(den: Denoiser, x, y, sigma_rel=None):
    """Log-density up to a function of (x, sigma); only meaningful for ranking at a fixed context."""
    if getattr(den, "variant", None) != "energy":
        raise ValueError("relative likelihood needs the energy-parameterised denoiser")
    s = den.cfg.sigma_rel if sigma_rel is None else sigma_rel
    if s <= 0:
        raise ValueError("sigma_rel must be positive")
    y = np.asarray(y, dtype=np.float64)
    n = y.shape[0]
    c_skip, c_out, c_in, c_noise = precond(s, den.cfg.sigma_data)
    phi = den.phi(x, c_in * y, np.full(n, c_noise))
    return (c_skip - 1.0) * np.sum(y * y, axis=1) / (2 * s * s) + c_out / (s * s * c_in) * phi


def make_denoiser(variant: str, arch: M.Arch, cfg: EdmConfig, seed: int = 0) -> Denoiser:
    model = M.build(arch)
    return Denoiser(variant, model, M.mlp_init(arch, seed), cfg)


def train_edm(den: Denoiser, dataset, steps: int, batch_size: int, opt, seed: int, **kw):
    """Minimise the weighted denoising loss on minibatches of the dataset."""
    from . import training as T

    rng = np.random.default_rng(seed)

    def batch_fn(step):
        idx = rng.integers(0, dataset.y.shape[0], size=batch_size)
        s = sample_sigma(rng, batch_size, den.cfg)
        return dataset.x[idx], dataset.y[idx], s, rng.standard_normal((batch_size, den.event_dim))

    params, tlog = T.fit(lambda p, b: edm_train_loss(den, p, *b), den.params, opt, steps, batch_fn, **kw)
    return den.with_params(params), tlog
