"""Distribution metrics and Monte-Carlo checks of the estimator's large-sample theory.

* Gaussian KDE with Scott's-rule bandwidth and the Bhattacharyya coefficient
  on a regular grid;
* the population-objective landscape of the 1-D Gaussian-mean problem;
* asymptotic variance / KL scaling of the ranking estimator, the Fisher
  trace of the two-parameter Gaussian family, and the saddle value.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import warnings

import numpy as np
from scipy.signal import fftconvolve
from scipy.special import logsumexp

from . import models as M


# --- KDE and overlap ---------------------------------------------------------


class Kde2d:
    """Gaussian KDE, bandwidth covariance ``(n^{-1/(d+4)})^2 * Cov(points)``.

    A floor ``min_bw`` on the bandwidth standard deviations keeps degenerate
    sets (one point, collinear points) usable.
    """

    def __init__(self, points, min_bw: float = 1e-3):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 1:
            pts = pts[:, None]
        n, d = pts.shape
        if n < 1:
            raise ValueError("need at least one point")
        self.points, self.n, self.d = pts, n, d
        self.factor = n ** (-1.0 / (d + 4))
        cov = np.cov(pts, rowvar=False).reshape(d, d) if n > 1 else np.zeros((d, d))
        cov = np.nan_to_num(cov) * self.factor**2 + np.eye(d) * min_bw**2
        self.cov = cov
        self.chol = np.linalg.cholesky(cov)
        self._white = np.linalg.solve(self.chol, pts.T).T
        self._norm = -0.5 * d * np.log(2 * np.pi) - np.sum(np.log(np.diag(self.chol))) - np.log(n)

    def logpdf(self, query, chunk: int = 4096) -> np.ndarray:
        q = np.asarray(query, dtype=np.float64).reshape(-1, self.d)
        qw = np.linalg.solve(self.chol, q.T).T
        pw = self._white
        p2 = np.sum(pw * pw, axis=1)
        out = np.empty(q.shape[0])
        for a in range(0, q.shape[0], chunk):
            b = qw[a : a + chunk]
            d2 = np.sum(b * b, axis=1)[:, None] + p2[None, :] - 2.0 * b @ pw.T
            out[a : a + chunk] = logsumexp(-0.5 * np.maximum(d2, 0.0), axis=1)
        return out + self._norm

    def density(self, query) -> np.ndarray:
        return np.exp(self.logpdf(query))

    def grid_density(self, grid: "GridSpec", reach: float = 6.0) -> np.ndarray:
        """Density at the grid centres by linear binning and FFT convolution.

        Points are binned onto the grid extended by ``reach`` bandwidth
        standard deviations, so mass just outside the box still contributes.
        Returns an ``(n, n)`` array indexed like :meth:`GridSpec.centers`.
        """
        if self.d != 2:
            raise ValueError("grid evaluation is 2-D only")
        h = (grid.hi - grid.lo) / grid.n
        pad = int(np.ceil(reach * np.sqrt(np.max(np.diag(self.cov))) / h))
        m = grid.n + 2 * pad
        origin = grid.lo + 0.5 * h - pad * h
        u = (self.points - origin) / h  # fractional cell-centre coordinates
        i0 = np.floor(u).astype(np.int64)
        f = u - i0
        w = np.zeros((m, m))
        for di in (0, 1):
            for dj in (0, 1):
                wi = (f[:, 0] if di else 1 - f[:, 0]) * (f[:, 1] if dj else 1 - f[:, 1])
                a, b = i0[:, 0] + di, i0[:, 1] + dj
                ok = (a >= 0) & (a < m) & (b >= 0) & (b < m)
                np.add.at(w, (a[ok], b[ok]), wi[ok])
        off = np.arange(-pad, pad + 1) * h
        ox, oy = np.meshgrid(off, off, indexing="ij")
        pts = np.stack([ox.ravel(), oy.ravel()], axis=1)
        z = np.linalg.solve(self.chol, pts.T)
        logk = -0.5 * np.sum(z * z, axis=0) - np.log(2 * np.pi) - np.sum(np.log(np.diag(self.chol)))
        kern = np.exp(logk).reshape(ox.shape)
        dens = fftconvolve(w, kern, mode="same")[pad : pad + grid.n, pad : pad + grid.n] / self.n
        return np.maximum(dens, 0.0)


def kde_density(kde: Kde2d, query) -> np.ndarray:
    if kde.n < 2:
        raise ValueError("KDE needs at least 2 points")
    return kde.density(query)


@dataclasses.dataclass(frozen=True)
class GridSpec:
    lo: float = -4.0
    hi: float = 4.0
    n: int = 256

    def centers(self):
        e = np.linspace(self.lo, self.hi, self.n + 1)
        c = 0.5 * (e[1:] + e[:-1])
        gx, gy = np.meshgrid(c, c, indexing="ij")
        return np.stack([gx.ravel(), gy.ravel()], axis=1)

    @property
    def cell_area(self) -> float:
        return ((self.hi - self.lo) / self.n) ** 2


def _outside(samples, grid: GridSpec) -> float:
    s = np.asarray(samples)
    return float(np.mean(np.any((s < grid.lo) | (s > grid.hi), axis=1)))


def bhattacharyya(p_samples, q_samples, grid: GridSpec = GridSpec(), method: str = "binned") -> float:
    """Riemann sum of ``sqrt(p q)`` over the grid, with both densities from KDEs.

    ``method="exact"`` evaluates every kernel at every grid centre;
    ``"binned"`` (default) uses the FFT evaluator, far cheaper at 8192 points.
    """
    p_samples, q_samples = np.asarray(p_samples), np.asarray(q_samples)
    if p_samples.shape[0] < 2 or q_samples.shape[0] < 2:
        raise ValueError("need at least 2 samples on each side")
    for name, s in (("first", p_samples), ("second", q_samples)):
        frac = _outside(s, grid)
        if frac > 0.05:
            warnings.warn(f"{frac:.1%} of the {name} sample set lies outside the grid", stacklevel=2)
    if method == "exact":
        g = grid.centers()
        p = np.exp(Kde2d(p_samples).logpdf(g))
        q = np.exp(Kde2d(q_samples).logpdf(g))
    elif method == "binned":
        p = Kde2d(p_samples).grid_density(grid).ravel()
        q = Kde2d(q_samples).grid_density(grid).ravel()
    else:
        raise ValueError(f"unknown method {method!r}")
    # multiplication commutes exactly, so BC(p, q) == BC(q, p) bitwise
    bc = float(np.sum(np.sqrt(p * q)) * grid.cell_area)
    return min(max(bc, 0.0), 1.0)


def histogram2d(samples, bins: int = 64, range_=((-4.0, 4.0), (-4.0, 4.0))):
    """Counts on a regular grid and the number of samples falling outside it."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    s = np.asarray(samples, dtype=np.float64).reshape(-1, 2)
    (x0, x1), (y0, y1) = range_
    inside = (s[:, 0] >= x0) & (s[:, 0] <= x1) & (s[:, 1] >= y0) & (s[:, 1] <= y1)
    counts, _, _ = np.histogram2d(s[inside, 0], s[inside, 1], bins=bins, range=range_)
    return counts.astype(np.int64), int(np.sum(~inside))


# --- objective landscape -----------------------------------------------------


@dataclasses.dataclass
class LandscapeScan:
    kind: str
    K: int
    mu: np.ndarray
    raw: np.ndarray
    maximizer: float

    @property
    def values(self) -> np.ndarray:
        """Objective shifted so its grid maximum is zero."""
        return self.raw - np.max(self.raw)


def _landscape_terms(kind, mu, y, negs_draws):
    """Per-(node, draw) objective for the three estimators at one mu.

    Positive ``y`` comes from N(1, 1), the family is ``-(y - mu)^2 / 2`` and
    negatives are N(0, 1) draws of shape (D, K).
    """
    if kind == "rnce":
        # score(y) = mu y - mu^2/2 + const
        ls = logsumexp(mu * negs_draws, axis=1)  # (D,)
        return -np.logaddexp(0.0, ls[None, :] - mu * y[:, None])
    if kind == "ibc":
        ls = logsumexp(-0.5 * (negs_draws - mu) ** 2, axis=1)
        return -np.logaddexp(0.0, ls[None, :] + 0.5 * (y[:, None] - mu) ** 2)
    raise ValueError(kind)


def landscape_objective(kind, K, mu, order=64, draws=100_000, seed=0, max_cells=20_000_000):
    """Population objective at each mu by Gauss-Hermite over the positive and MC over the negatives.

    The same negative sets are reused for every mu. ``draws * K`` is capped
    at ``max_cells`` to bound memory for very large K.
    """
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    if kind == "mle":
        # E_{y~N(1,1)} log N(y; mu, 1)
        return -0.5 * ((1.0 - mu) ** 2 + 1.0) - 0.5 * np.log(2 * np.pi)
    nodes, weights = np.polynomial.hermite.hermgauss(order)
    y = 1.0 + np.sqrt(2.0) * nodes
    w = weights / np.sqrt(np.pi)
    D = int(max(1, min(draws, max_cells // K)))
    negs = np.random.default_rng(seed).standard_normal((D, K))
    return np.array([float(w @ np.mean(_landscape_terms(kind, m, y, negs), axis=1)) for m in mu])


def _refine(f, a, b, tol=1e-6):
    """Golden-section maximisation on [a, b]."""
    g = (np.sqrt(5) - 1) / 2
    c, d = b - g * (b - a), a + g * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - g * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + g * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def landscape_scan(kind: str, K: int, mu_grid, order=64, draws=100_000, seed=0, max_cells=20_000_000):
    if kind not in ("rnce", "ibc", "mle"):
        raise ValueError(f"unknown objective {kind!r}")
    mu = np.sort(np.asarray(mu_grid, dtype=np.float64))
    raw = landscape_objective(kind, K, mu, order, draws, seed, max_cells)
    if not np.all(np.isfinite(raw)):
        raise FloatingPointError("non-finite landscape values")
    i = int(np.argmax(raw))
    if kind == "mle":
        best = 1.0
    else:
        lo, hi = mu[max(i - 1, 0)], mu[min(i + 1, len(mu) - 1)]
        f = lambda m: landscape_objective(kind, K, m, order, draws, seed, max_cells)[0]  # noqa: E731
        best = _refine(f, lo, hi, tol=1e-4) if hi > lo else float(mu[i])
    return LandscapeScan(kind, K, mu, raw, float(best))


def landscape_csv(scans) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["kind", "K", "mu", "value", "shifted"])
    for s in scans:
        for m, r, v in zip(s.mu, s.raw, s.values):
            w.writerow([s.kind, s.K, repr(float(m)), repr(float(r)), repr(float(v))])
    return buf.getvalue()


# --- ranking estimator on the Gaussian mean family ---------------------------


def rnce_mean_estimate(y, negs, tol=1e-12, max_iter=100) -> float:
    """Maximise the empirical ranking objective for the unit-variance mean, proposal N(1, 1).

    With ``a = mu - 1`` each term is ``-log(1 + sum_k exp(a (y_k - y_i)))``,
    concave in ``a``, so Newton from ``a = 0`` converges; bisection on the
    derivative is the fallback.
    """
    delta = negs - y[:, None]  # (n, K)
    n = y.shape[0]

    def deriv(a):
        s = a * delta
        m = np.maximum(np.max(s, axis=1, keepdims=True), 0.0)
        e = np.exp(s - m)
        z = np.exp(-m[:, 0]) + e.sum(axis=1)
        q = e / z[:, None]
        mean = np.sum(q * delta, axis=1)
        var = np.sum(q * delta * delta, axis=1) - mean * mean
        return -np.sum(mean) / n, -np.sum(var) / n

    a = 0.0
    for _ in range(max_iter):
        g, h = deriv(a)
        if h >= 0:
            break
        step = g / h
        a -= step
        if abs(step) < tol:
            return 1.0 + a
    # bisection fallback on the monotone derivative
    lo, hi = -10.0, 10.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if deriv(mid)[0] > 0:
            lo = mid
        else:
            hi = mid
    return 1.0 + 0.5 * (lo + hi)


@dataclasses.dataclass
class AsymptoticsReport:
    K: int
    n: int
    replications: int
    seed: int
    variance: float
    variance_stderr: float
    nkl_mean: float
    nkl_stderr: float
    target_variance: float
    estimates: list = dataclasses.field(repr=False, default_factory=list)

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        d.pop("estimates")
        return json.dumps(d, indent=2, sort_keys=True)


def asymptotic_variance_mc(K: int, n: int, replications: int, seed: int = 0) -> AsymptoticsReport:
    """Sampling distribution of the ranking estimator when the proposal equals the data law N(1, 1)."""
    if replications < 100:
        raise ValueError("need at least 100 replications")
    rng = np.random.default_rng(seed)
    est = np.empty(replications)
    for r in range(replications):
        y = 1.0 + rng.standard_normal(n)
        negs = 1.0 + rng.standard_normal((n, K))
        est[r] = rnce_mean_estimate(y, negs)
    z = np.sqrt(n) * (est - 1.0)
    nkl = n * (est - 1.0) ** 2 / 2.0  # n * KL(N(1,1) || N(mu_hat,1))
    v = float(np.var(z, ddof=1))
    return AsymptoticsReport(
        K, n, replications, seed, v, v * np.sqrt(2.0 / (replications - 1)),
        float(np.mean(nkl)), float(np.std(nkl, ddof=1) / np.sqrt(replications)),
        1.0 + 1.0 / K, est.tolist(),
    )


def fisher_trace_mc(mu: float, sigma: float, n_samples: int, seed: int = 0) -> float:
    """Monte-Carlo ``Tr(I^{-1} J)`` with ``psi = (y, y^2)`` under N(mu, sigma^2)."""
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    y = mu + sigma * np.random.default_rng(seed).standard_normal(n_samples)
    I = np.cov(np.stack([y, y * y]))
    if np.linalg.cond(I) > 1e12:
        raise np.linalg.LinAlgError("sample covariance is singular; increase n_samples")
    g = np.stack([np.ones_like(y), 2.0 * y])
    J = g @ g.T / n_samples
    return float(np.trace(np.linalg.solve(I, J)))


def fisher_trace_closed_form(mu: float, sigma: float) -> float:
    I, J = M.gaussian_family_fisher(M.natural_from_moments(mu, sigma))
    return float(np.trace(np.linalg.solve(I, J)))


def fisher_trace_stated(mu: float, sigma: float) -> float:
    """The expression ``3/sigma^2 + 4 mu^2/sigma^4`` quoted for this family (only correct at mu = 0)."""
    return 3.0 / sigma**2 + 4.0 * mu**2 / sigma**4


def saddle_value_check(K: int, draws: int, seed: int = 0, energy_shift: float = 0.0):
    """Ranking objective when energy and proposal are both the true N(1, 1) log-density.

    Returns ``(estimate, stderr)``; the population value is ``-log(K + 1)``.
    """
    rng = np.random.default_rng(seed)
    y = 1.0 + rng.standard_normal((draws, K + 1))  # slot 0 is the positive

    def logpdf(v):
        return -0.5 * (v - 1.0) ** 2 - 0.5 * np.log(2 * np.pi)

    scores = (logpdf(y) + energy_shift) - logpdf(y)
    m = np.max(scores, axis=1, keepdims=True)
    ell = (scores[:, 0] - m[:, 0]) - np.log(np.sum(np.exp(scores - m), axis=1))
    return float(np.mean(ell)), float(np.std(ell, ddof=1) / np.sqrt(draws))


# --- reports -----------------------------------------------------------------


def report_json(metric: str, config: dict, value, stderr=None, n=None, seed=None, **extra) -> str:
    d = {"metric": metric, "config": config, "value": value, "stderr": stderr, "n": n, "seed": seed}
    d.update(extra)
    return json.dumps(d, indent=2, sort_keys=True)
