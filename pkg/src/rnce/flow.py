"""Stochastic-interpolant bridge and continuous-flow sampling with log-densities.

The ODE is always integrated with explicit Heun steps. Log-densities use the
two-timescale scheme: the state is advanced on a fine grid, the divergence
is only evaluated at a coarse subset of grid points, and the log-density
correction is a composite trapezoid over that subset.

Time grids may be shared, shape ``(S,)``, or per row, shape ``(S, N)``; the
per-row form lets one vectorised loop carry trajectories of different
lengths (truncations at different times).
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import autodiff as ad

LOG_2PI = float(np.log(2.0 * np.pi))
T_FLOOR = 1e-4


# --- interpolant -------------------------------------------------------------


def _tcol(t, n):
    t = np.asarray(t, dtype=np.float64)
    return np.full((n, 1), float(t)) if t.ndim == 0 else t.reshape(n, 1)


def _check_pair(z, y):
    z, y = np.asarray(z, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if z.shape != y.shape:
        raise ad.ShapeError(f"z and y shapes differ: {z.shape} vs {y.shape}")
    return z, y


def interpolant_eval(z, y, t):
    """Trigonometric bridge ``cos(pi t/2) z + sin(pi t/2) y``."""
    z, y = _check_pair(z, y)
    if z.ndim == 1:
        a = 0.5 * np.pi * float(t)
        return np.cos(a) * z + np.sin(a) * y
    a = 0.5 * np.pi * _tcol(t, z.shape[0])
    return np.cos(a) * z + np.sin(a) * y


def interpolant_dt(z, y, t):
    z, y = _check_pair(z, y)
    if z.ndim == 1:
        a = 0.5 * np.pi * float(t)
        return 0.5 * np.pi * (np.cos(a) * y - np.sin(a) * z)
    a = 0.5 * np.pi * _tcol(t, z.shape[0])
    return 0.5 * np.pi * (np.cos(a) * y - np.sin(a) * z)


@dataclasses.dataclass(frozen=True)
class TimeDistribution:
    """Law of ``u ** (1/alpha)`` for ``u ~ Uniform(0, 1]``."""

    alpha: float = 1.0

    def __post_init__(self):
        if self.alpha < 1:
            raise ValueError("alpha must be >= 1")

    def sample(self, rng, size=None):
        u = 1.0 - rng.random(size)  # (0, 1]
        return u ** (1.0 / self.alpha)


def sample_time(dist: TimeDistribution, seed, size=None):
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return dist.sample(rng, size)


def interpolant_loss(vf, params, x, y, z, t):
    """Mean of ``|v|^2 - 2 dI/dt . v`` at ``I_t(z, y)``; returns a Tensor when params are taped."""
    y = np.asarray(y, dtype=np.float64)
    if y.shape[0] == 0:
        raise ValueError("empty batch")
    yt = interpolant_eval(z, y, t)
    dyt = interpolant_dt(z, y, t)
    v = vf.velocity(params, t, x, yt)
    per = ad.add(ad.total(ad.square(v), axis=1), ad.mul(-2.0, ad.total(ad.mul(v, dyt), axis=1)))
    return ad.mean(per)


# --- vector-field adaptors ---------------------------------------------------


class VelocityField:
    """Binds a velocity model to parameters: callable ``(t, x, y) -> (N, d)`` with exact divergence."""

    def __init__(self, model, params):
        self.model = model
        self.params = params
        self.event_dim = model.arch.event_dim

    def __call__(self, t, x, y):
        return self.model.velocity(self.params, t, x, y)

    def divergence(self, t, x, y):
        return exact_divergence(self.model, self.params, x, y, t)


def _repeat_rows(a, d):
    a = np.asarray(a)
    if a.ndim == 0:
        return a
    return np.tile(a, (d,) + (1,) * (a.ndim - 1))


def exact_divergence(model, params, x, y, t):
    """Trace of the y-Jacobian from ``d`` forward-mode directional passes (rows stacked)."""
    y = np.asarray(y, dtype=np.float64)
    n, d = y.shape
    x = np.asarray(x, dtype=np.float64)
    xs = _repeat_rows(x, d) if x.ndim == 2 else x
    tangents = np.repeat(np.eye(d), n, axis=0)
    _, jv = model.jvp(params, _repeat_rows(t, d), xs, _repeat_rows(y, d), tangents)
    return sum(jv[i * n : (i + 1) * n, i] for i in range(d))


def divergence_by_tape(fn, y):
    """Trace of the Jacobian of a row-wise map ``fn(y_tensor) -> (N, d)`` via ``d`` reverse passes."""
    y = np.asarray(y, dtype=np.float64)
    n, d = y.shape
    div = np.zeros(n)
    for i in range(d):
        tape = ad.Tape()
        yv = tape.variable(y)
        out = fn(yv)
        g = tape.gradient(ad.total(ad.getitem(out, (slice(None), i))), yv)
        div += g[:, i]
    return div


# --- integration -------------------------------------------------------------


def _col(ts, k, n):
    """Time at grid index ``k``: a float for shared grids, a row vector for per-row grids."""
    t = ts[k]
    return t if np.ndim(t) else float(t)


def heun_step(field, x, y, t0, t1):
    """Explicit trapezoidal step; ``t0``/``t1`` may be scalars or per-row arrays."""
    h = np.asarray(t1, dtype=np.float64) - np.asarray(t0, dtype=np.float64)
    hc = h[:, None] if np.ndim(h) else h
    k1 = np.asarray(field(t0, x, y))
    k2 = np.asarray(field(t1, x, y + hc * k1))
    return y + hc * (k1 + k2) / 2.0


def integrate(field, x, y0, ts, save_idx=()):
    """Heun integration along ``ts``; returns final state and states at ``save_idx``."""
    ts = np.asarray(ts, dtype=np.float64)
    y = np.array(y0, dtype=np.float64)
    n = y.shape[0]
    saves = {int(k): None for k in save_idx}
    if 0 in saves:
        saves[0] = y.copy()
    for k in range(ts.shape[0] - 1):
        y = heun_step(field, x, y, _col(ts, k, n), _col(ts, k + 1, n))
        if not np.all(np.isfinite(y)):
            raise ad.NonFiniteError(f"flow state became non-finite at step {k}")
        if k + 1 in saves:
            saves[k + 1] = y.copy()
    return y, [saves[int(k)] for k in save_idx]


def integrate_with_logprob(field, x, y0, ts, lp_idx, logp0, save_idx=None):
    """Heun-integrate and accumulate ``logp0 - int div dt`` over the coarse points ``lp_idx``.

    Returns ``(y_final, logp_final)``; with ``save_idx`` (a subset of
    ``lp_idx``) also returns states and log-densities at those indices.
    """
    ts = np.asarray(ts, dtype=np.float64)
    lp_idx = [int(k) for k in lp_idx]
    if len(lp_idx) < 2 or lp_idx[0] != 0 or lp_idx[-1] != ts.shape[0] - 1:
        raise ValueError("lp_idx must start at 0, end at the last grid index and have >= 2 points")
    if any(b <= a for a, b in zip(lp_idx, lp_idx[1:])):
        raise ValueError("lp_idx must be strictly increasing")
    save = [] if save_idx is None else [int(k) for k in save_idx]
    if not set(save) <= set(lp_idx):
        raise ValueError("save_idx must be a subset of lp_idx")
    y = np.array(y0, dtype=np.float64)
    n = y.shape[0]
    lp_set = set(lp_idx)
    divs, states = {}, {}

    def record(k, y):
        if k in lp_set:
            divs[k] = np.asarray(field.divergence(_col(ts, k, n), x, y), dtype=np.float64)
        if k in save:
            states[k] = y.copy()

    record(0, y)
    for k in range(ts.shape[0] - 1):
        y = heun_step(field, x, y, _col(ts, k, n), _col(ts, k + 1, n))
        if not np.all(np.isfinite(y)):
            raise ad.NonFiniteError(f"flow state became non-finite at step {k}")
        record(k + 1, y)
    d = np.stack([divs[k] for k in lp_idx])
    tl = np.stack([np.broadcast_to(_col(ts, k, n), (n,)) for k in lp_idx])
    incr = 0.5 * (d[1:] + d[:-1]) * (tl[1:] - tl[:-1])
    cum = np.concatenate([np.zeros((1, n)), np.cumsum(incr, axis=0)])
    logp = logp0 - cum[-1]
    if save_idx is None:
        return y, logp
    pos = {k: i for i, k in enumerate(lp_idx)}
    return y, logp, [states[k] for k in save], [logp0 - cum[pos[k]] for k in save]


def std_normal_logpdf(z):
    z = np.asarray(z, dtype=np.float64)
    return -0.5 * np.sum(z * z, axis=-1) - 0.5 * z.shape[-1] * LOG_2PI


# --- schedules and flow model ------------------------------------------------


@dataclasses.dataclass(frozen=True)
class StepSchedule:
    """Fine Heun grid ``ts`` (starting at 0) and the coarse log-density subset ``lp_ts``."""

    ts: tuple
    lp_ts: tuple

    def __post_init__(self):
        ts, lp = np.asarray(self.ts, dtype=float), np.asarray(self.lp_ts, dtype=float)
        if ts.ndim != 1 or ts.size < 2 or ts[0] != 0.0 or np.any(np.diff(ts) <= 0):
            raise ValueError("ts must be strictly increasing and start at 0")
        if lp.size < 2 or np.any(np.diff(lp) <= 0):
            raise ValueError("lp_ts must be sorted with at least 2 points")
        if not np.all(np.isin(lp, ts)) or lp[0] != ts[0] or lp[-1] != ts[-1]:
            raise ValueError("lp_ts must be a subset of ts spanning both ends")

    @classmethod
    def uniform(cls, t_end: float = 1.0, n_steps: int = 150, n_lp: int = 15) -> "StepSchedule":
        ts = np.linspace(0.0, t_end, n_steps + 1)
        idx = np.unique(np.round(np.linspace(0, n_steps, min(n_lp, n_steps + 1))).astype(int))
        return cls(tuple(ts), tuple(ts[idx]))

    @property
    def t_end(self) -> float:
        return float(self.ts[-1])

    @property
    def lp_idx(self) -> list:
        ts = np.asarray(self.ts)
        return [int(np.searchsorted(ts, t)) for t in self.lp_ts]

    def scaled(self, t_end: float) -> "StepSchedule":
        f = t_end / self.t_end
        return StepSchedule(tuple(np.asarray(self.ts) * f), tuple(np.asarray(self.lp_ts) * f))

    def unit_grid(self) -> np.ndarray:
        return np.asarray(self.ts) / self.t_end


class FlowModel:
    """Continuous flow from a standard-normal base, integrated on ``schedule``."""

    def __init__(self, vf, params, schedule: StepSchedule | None = None):
        self.vf = vf
        self.params = params
        self.event_dim = vf.arch.event_dim
        self.schedule = schedule or StepSchedule.uniform()

    def field(self) -> VelocityField:
        return VelocityField(self.vf, self.params)

    def with_params(self, params) -> "FlowModel":
        return FlowModel(self.vf, params, self.schedule)

    def _grid(self, truncate_at, schedule=None):
        sched = schedule or self.schedule
        if schedule is not None:
            if sched.t_end + 1e-15 < np.max(truncate_at):
                raise ValueError(f"schedule ends at {sched.t_end} < truncate_at {np.max(truncate_at)}")
            if np.ndim(truncate_at) == 0 and sched.t_end != truncate_at:
                ts = np.asarray(sched.ts)
                keep = ts < truncate_at
                fine = np.append(ts[keep], truncate_at)
                lp = [t for t in sched.lp_ts if t < truncate_at] + [truncate_at]
                sched = StepSchedule(tuple(fine), tuple(lp))
            if np.ndim(truncate_at) == 0:
                return np.asarray(sched.ts), sched.lp_idx
        unit = sched.unit_grid()
        if np.ndim(truncate_at) == 0:
            return unit * float(truncate_at), sched.lp_idx
        return unit[:, None] * np.asarray(truncate_at)[None, :], sched.lp_idx


def _base(flow, n, seed):
    if isinstance(seed, np.ndarray):
        return np.array(seed, dtype=np.float64)
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return rng.standard_normal((n, flow.event_dim))


def _nrows(x, n):
    x = np.asarray(x, dtype=np.float64)
    return x.shape[0] if x.ndim == 2 else n


def flow_sample(flow: FlowModel, x, seed, truncate_at=1.0, n=1, schedule=None):
    """Push base draws through Heun steps up to ``truncate_at`` (scalar or per row).

    ``seed`` may be an int, a Generator, or an explicit ``(N, d)`` array of base draws.
    """
    z = _base(flow, _nrows(x, n), seed)
    if np.ndim(truncate_at) == 0 and truncate_at <= 0:
        return z
    ts, _ = flow._grid(truncate_at, schedule)
    y, _ = integrate(flow.field(), x, z, ts)
    return y


def flow_sample_with_logprob(flow: FlowModel, x, seed, truncate_at=1.0, schedule=None, n=1):
    """Joint sample and log-density at ``truncate_at`` (floored at 1e-4)."""
    z = _base(flow, _nrows(x, n), seed)
    t = np.maximum(truncate_at, T_FLOOR)
    ts, lp_idx = flow._grid(t if np.ndim(t) else float(t), schedule)
    return integrate_with_logprob(flow.field(), x, z, ts, lp_idx, std_normal_logpdf(z))


def flow_logprob(flow: FlowModel, x, y, t_end=1.0, schedule=None):
    """Log-density of given events under the flow truncated at ``t_end``, by reverse integration."""
    y = np.asarray(y, dtype=np.float64)
    t = np.maximum(t_end, T_FLOOR)
    ts, lp_idx = flow._grid(t if np.ndim(t) else float(t), schedule)
    ts_rev = ts[::-1]
    lp_rev = sorted(ts.shape[0] - 1 - k for k in lp_idx)
    field = flow.field()
    # integrating backwards: trapezoid over a decreasing grid is -int_0^T div
    z, neg_int = integrate_with_logprob(field, x, y, ts_rev, lp_rev, np.zeros(y.shape[0]))
    return std_normal_logpdf(z) - neg_int


def segment_grid(times, steps_per_segment: int, lp_per_segment: int):
    """Per-row fine grid through sorted ``times`` (shape (N, m)) starting at 0.

    Every row gets ``m * steps_per_segment`` steps, so one vectorised loop
    serves all rows. Returns ``(ts (S, N), lp_idx, save_idx)`` where
    ``save_idx`` marks the segment ends.
    """
    times = np.asarray(times, dtype=np.float64)
    n, m = times.shape
    knots = np.concatenate([np.zeros((n, 1)), times], axis=1)
    frac = np.linspace(0.0, 1.0, steps_per_segment + 1)[1:]
    cols = [np.zeros(n)]
    for j in range(m):
        a, b = knots[:, j], knots[:, j + 1]
        cols.extend(a + f * (b - a) for f in frac)
    ts = np.stack(cols)
    sub = np.unique(np.round(np.linspace(0, steps_per_segment, max(lp_per_segment, 2))).astype(int))
    lp = sorted({j * steps_per_segment + int(s) for j in range(m) for s in sub})
    save = [(j + 1) * steps_per_segment for j in range(m)]
    return ts, lp, save
