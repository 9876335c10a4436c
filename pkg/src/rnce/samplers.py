"""Inference-time samplers for trained energies.

Every sampler runs a batch of independent chains in lock-step, one chain per
row of ``y``. Energies are passed as :class:`EnergyFn` adaptors so the same
code serves network energies, closed-form families and test doubles.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import autodiff as ad
from . import flow as fl


class EnergyFn:
    """Binds an energy model to parameters; ``t`` is ignored by models without a time input."""

    def __init__(self, model, params):
        self.model = model
        self.params = params

    def energy(self, x, y, t=1.0):
        return np.asarray(self.model.energy(self.params, x, y, t))

    def score(self, x, y, t=1.0):
        return np.asarray(self.model.score(self.params, x, y, t))


class QuadraticEnergy:
    """``-|y - mean|^2 / (2 var)``: the Gaussian test target, usable wherever an EnergyFn is."""

    def __init__(self, mean=0.0, var=1.0):
        self.mean, self.var = mean, var

    def energy(self, x, y, t=1.0):
        return -np.sum((y - self.mean) ** 2, axis=-1) / (2 * self.var)

    def score(self, x, y, t=1.0):
        return -(y - self.mean) / self.var


@dataclasses.dataclass(frozen=True)
class McmcConfig:
    kind: str = "langevin"
    T_mcmc: int = 100
    eta: float = 1e-3
    leapfrog_steps: int = 50
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("langevin", "hmc"):
            raise ValueError(f"unknown MCMC kind {self.kind!r}")
        if self.T_mcmc < 0 or self.eta <= 0 or self.leapfrog_steps < 1:
            raise ValueError("invalid MCMC configuration")


@dataclasses.dataclass(frozen=True)
class SdeConfig:
    eta: float = 1e-2
    steps: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.eta < 0 or self.steps < 1:
            raise ValueError("invalid SDE configuration")


@dataclasses.dataclass(frozen=True)
class IEbmSampleConfig:
    t_lower: float = 0.9
    budget: int = 200
    eta_sde: float = 1e-2
    eta_mcmc: float = 1e-2
    mcmc_kind: str = "hmc"
    leapfrog_steps: int = 50
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.t_lower <= 1:
            raise ValueError("t_lower must lie in (0, 1]")

    def split(self) -> tuple[int, int]:
        """(MCMC gradient evaluations, SDE steps); the slack keeps exact products like 0.1 * 200 whole."""
        eps = 1e-9
        return int(np.floor(self.t_lower * self.budget + eps)), int(np.floor((1 - self.t_lower) * self.budget + eps))


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _check(y, k, what):
    if not np.all(np.isfinite(y)):
        bad = int(np.sum(~np.all(np.isfinite(y), axis=-1)))
        raise ad.NonFiniteError(f"{what}: {bad} chain(s) non-finite at step {k}")


def langevin_chain(energy, x, y0, cfg: McmcConfig, t=1.0, deterministic=False):
    """Unadjusted Langevin: ``y + eta grad E + sqrt(2 eta) w``.

    ``deterministic`` drops the noise term; it exists for tests only.
    """
    rng = _rng(cfg.seed)
    y = np.array(y0, dtype=np.float64)
    _check(y, 0, "langevin init")
    c = np.sqrt(2.0 * cfg.eta)
    for k in range(cfg.T_mcmc):
        y = y + cfg.eta * energy.score(x, y, t)
        if not deterministic:
            y = y + c * rng.standard_normal(y.shape)
        _check(y, k + 1, "langevin")
    return y


def leapfrog(score_fn, y, p, eta, n_steps, g=None):
    """Leapfrog for the Hamiltonian ``-E(y) + |p|^2/2``; returns ``(y, p, grad at y)``."""
    g = score_fn(y) if g is None else g
    p = p + 0.5 * eta * g
    for i in range(n_steps):
        y = y + eta * p
        g = score_fn(y)
        if i < n_steps - 1:
            p = p + eta * g
    p = p + 0.5 * eta * g
    return y, p, g


def hmc_chain(energy, x, y0, cfg: McmcConfig, t=1.0, return_info=False):
    """Metropolised HMC; ``T_mcmc`` counts gradient evaluations, so proposals = T_mcmc // leapfrog_steps."""
    rng = _rng(cfg.seed)
    y = np.array(y0, dtype=np.float64)
    _check(y, 0, "hmc init")
    L = cfg.leapfrog_steps
    n_prop = cfg.T_mcmc // L
    score_fn = lambda v: energy.score(x, v, t)  # noqa: E731
    e = energy.energy(x, y, t)
    g = score_fn(y) if n_prop else None
    accepts = np.zeros(y.shape[0])
    for k in range(n_prop):
        p = rng.standard_normal(y.shape)
        y1, p1, g1 = leapfrog(score_fn, y, p, cfg.eta, L, g)
        e1 = energy.energy(x, y1, t)
        h0 = -e + 0.5 * np.sum(p * p, axis=-1)
        h1 = -e1 + 0.5 * np.sum(p1 * p1, axis=-1)
        log_u = np.log(rng.random(y.shape[0]))
        ok = np.isfinite(h1) & (log_u < h0 - h1)
        y = np.where(ok[:, None], y1, y)
        g = np.where(ok[:, None], g1, g)
        e = np.where(ok, e1, e)
        accepts += ok
        _check(y, k + 1, "hmc")
    if return_info:
        return y, {"proposals": n_prop, "accept_rate": float(np.mean(accepts) / n_prop) if n_prop else float("nan")}
    return y


def mcmc(energy, x, y0, cfg: McmcConfig, t=1.0):
    if cfg.kind == "hmc":
        return hmc_chain(energy, x, y0, cfg, t)
    return langevin_chain(energy, x, y0, cfg, t)


def two_stage_sample(flow: fl.FlowModel, energy, x, cfg: McmcConfig, n=None):
    """Flow draw at t=1 warm-starts an MCMC chain on the energy."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0] if n is None else n
    rng = _rng(cfg.seed)
    y0 = fl.flow_sample(flow, x, rng, 1.0, n=n)
    return mcmc(energy, x, y0, dataclasses.replace(cfg, seed=int(rng.integers(2**63))))


def sde_transport(flow: fl.FlowModel, energy, x, y, cfg: SdeConfig, t_lower, t_upper=1.0):
    """Euler-Maruyama on ``dy = (v + eta grad E_t) dt + sqrt(2 eta) dW`` from ``t_lower`` to ``t_upper``.

    ``flow`` may be None for a zero velocity (used by the stationarity tests).
    """
    rng = _rng(cfg.seed)
    y = np.array(y, dtype=np.float64)
    ts = np.linspace(t_lower, t_upper, cfg.steps + 1)
    field = flow.field() if flow is not None else None
    c = np.sqrt(2.0 * cfg.eta)
    for k in range(cfg.steps):
        t, h = float(ts[k]), float(ts[k + 1] - ts[k])
        drift = field(t, x, y) if field is not None else 0.0
        if cfg.eta > 0:
            drift = drift + cfg.eta * energy.score(x, y, t)
            y = y + h * drift + c * np.sqrt(h) * rng.standard_normal(y.shape)
        else:
            y = y + h * drift
        _check(y, k + 1, "sde")
    return y


def three_stage_sample(flow: fl.FlowModel, energy, x, cfg: IEbmSampleConfig, n=None):
    """Truncated flow to ``t_lower``, SDE to t=1, then MCMC on the final-time energy."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[0] if n is None else n
    rng = _rng(cfg.seed)
    n_mcmc, n_sde = cfg.split()
    y = fl.flow_sample(flow, x, rng, cfg.t_lower, n=n)
    if n_sde > 0 and cfg.t_lower < 1:
        y = sde_transport(flow, energy, x, y, SdeConfig(cfg.eta_sde, n_sde, int(rng.integers(2**63))), cfg.t_lower)
    elif cfg.t_lower < 1:
        # no SDE budget: finish the deterministic transport so the MCMC starts at t=1
        sched = fl.StepSchedule.uniform(1.0, len(flow.schedule.ts) - 1, 2)
        ts = cfg.t_lower + (1 - cfg.t_lower) * sched.unit_grid()
        y, _ = fl.integrate(flow.field(), x, y, ts)
    if n_mcmc > 0:
        mc = McmcConfig(cfg.mcmc_kind, n_mcmc, cfg.eta_mcmc, cfg.leapfrog_steps, int(rng.integers(2**63)))
        y = mcmc(energy, x, y, mc, 1.0)
    return y


def select_best_of(scores, samples):
    """Candidate with the highest score; ties go to the lowest index."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("no candidates")
    if not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite")
    return np.asarray(samples)[int(np.argmax(scores))]
