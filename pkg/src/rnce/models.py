"""Energy models, velocity fields and closed-form Gaussian families.

Every model is a stateless object holding only its architecture descriptor;
parameters travel separately as a :class:`ParameterVector`. Methods accept
either numpy arrays (fast path) or tape tensors for the parameters.

Shapes: contexts ``x`` are ``(N, ctx_dim)``, events ``y`` are ``(N, event_dim)``
and times ``t`` are scalars or ``(N,)``.
"""

from __future__ import annotations

import dataclasses
import json
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import ParameterVector

KINDS = ("mlp_energy", "mlp_vf", "concatsquash_vf", "gaussian_mean", "gaussian_natural")


@dataclasses.dataclass(frozen=True)
class Arch:
    """Architecture descriptor, serialisable to the JSON schema used in configs."""

    kind: str
    widths: tuple = ()
    time_embed_dim: int = 0
    residual: bool = True
    ctx_dim: int = 0
    event_dim: int = 1
    init: str = "uniform_fan_in"
    sigma: float = 1.0  # gaussian families only

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}")
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if any(w <= 0 for w in self.widths):
            raise ValueError(f"layer widths must be positive, got {self.widths}")
        if self.event_dim <= 0 or self.ctx_dim < 0 or self.time_embed_dim < 0:
            raise ValueError("invalid dimensions in architecture descriptor")
        if self.init != "uniform_fan_in":
            raise ValueError(f"unknown init scheme {self.init!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["widths"] = list(self.widths)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "Arch":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown architecture keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, s: str) -> "Arch":
        return cls.from_dict(json.loads(s))


def sinusoidal_embedding(v, dim: int, max_freq: float = 10.0) -> np.ndarray:
    """``dim``-dimensional sin/cos features of a scalar per row, log-spaced frequencies in [1, max_freq]."""
    v = np.asarray(v, dtype=np.float64).reshape(-1, 1)
    half = dim // 2
    freqs = np.geomspace(1.0, max_freq, half) if half > 1 else np.ones(half)
    emb = np.concatenate([np.sin(v * freqs), np.cos(v * freqs)], axis=1)
    if dim % 2:
        emb = np.concatenate([emb, v], axis=1)
    return emb


def _rows(a, n: int | None = None, dim: int | None = None):
    if isinstance(a, ad.Tensor):
        if a.ndim != 2 or (dim is not None and a.shape[-1] != dim):
            raise ad.ShapeError(f"expected (N, {dim}) events, got shape {a.shape}")
        return a
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1 and dim is not None and a.shape[0] == dim and n in (None, 1):
        a = a[None, :]
    if a.ndim == 1 and dim == 0:
        a = np.zeros((a.shape[0] if n is None else n, 0))
    if dim is not None and a.shape[-1] != dim:
        raise ad.ShapeError(f"expected trailing dimension {dim}, got shape {a.shape}")
    return a


def _times(t, n: int) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64)
    if t.ndim == 0:
        return np.full(n, float(t))
    t = t.reshape(-1)
    if t.shape[0] != n:
        raise ad.ShapeError(f"got {t.shape[0]} times for {n} rows")
    return t


def _tcol(t, n: int) -> np.ndarray:
    """Times as a column; a single row when every row shares the same time (broadcasts later)."""
    tt = _times(t, n)
    if n > 1 and np.all(tt == tt[0]):
        return tt[:1, None]
    return tt[:, None]


def _ctx(x, n: int, ctx_dim: int) -> np.ndarray:
    if ctx_dim == 0:
        return np.zeros((n, 0))
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        if x.shape[0] != ctx_dim:
            raise ad.ShapeError(f"context has {x.shape[0]} entries, expected {ctx_dim}")
        x = np.broadcast_to(x, (n, ctx_dim))
    if x.shape != (n, ctx_dim):
        raise ad.ShapeError(f"context shape {x.shape}, expected {(n, ctx_dim)}")
    return x


def mlp_init(arch: Arch, seed: int) -> ParameterVector:
    """Uniform fan-in init (std 1/sqrt(fan_in)); biases zero."""
    model = build(arch)
    rng = np.random.default_rng(seed)
    out = []
    for name, shape in model.param_shapes():
        if name.endswith(".b") or name.endswith(".bg"):
            out.append((name, np.zeros(shape)))
        elif len(shape) == 2:
            a = np.sqrt(3.0 / shape[0])
            out.append((name, rng.uniform(-a, a, size=shape)))
        else:
            out.append((name, np.zeros(shape)))
    return ParameterVector(out)


class _Model:
    def __init__(self, arch: Arch):
        self.arch = arch

    def param_shapes(self) -> list:
        raise NotImplementedError

    def init(self, seed: int = 0) -> ParameterVector:
        return mlp_init(self.arch, seed)

    def n_params(self) -> int:
        return int(sum(np.prod(s) for _, s in self.param_shapes()))


class MlpEnergy(_Model):
    """Scalar energy: concat(x, y, emb(t)) -> dense layers with residual links -> scalar."""

    def __init__(self, arch: Arch):
        if not arch.widths:
            raise ValueError("mlp_energy needs at least one hidden layer")
        super().__init__(arch)
        a = arch
        self.din = a.ctx_dim + a.event_dim + a.time_embed_dim

    def param_shapes(self):
        w = self.arch.widths
        shapes = [("l0.W", (self.din, w[0])), ("l0.b", (w[0],))]
        for i in range(1, len(w)):
            shapes += [(f"l{i}.W", (w[i - 1], w[i])), (f"l{i}.b", (w[i],))]
        shapes += [("out.W", (w[-1], 1)), ("out.b", (1,))]
        return shapes

    def _inputs(self, x, y, t):
        a = self.arch
        y = _rows(y, dim=a.event_dim)
        n = y.shape[0]
        parts = [_ctx(x, n, a.ctx_dim), y]
        if a.time_embed_dim:
            parts.append(sinusoidal_embedding(_times(t, n), a.time_embed_dim))
        return np.concatenate(parts, axis=1)

    def _forward(self, p, inp):
        w = self.arch.widths
        pre = []
        a = ad.add(ad.matmul(inp, p["l0.W"]), p["l0.b"])
        pre.append(a)
        h = ad.swish(a)
        for i in range(1, len(w)):
            a = ad.add(ad.matmul(h, p[f"l{i}.W"]), p[f"l{i}.b"])
            pre.append(a)
            z = ad.swish(a)
            h = ad.add(h, z) if self._res(i) else z
        return h, pre

    def _res(self, i):
        w = self.arch.widths
        return self.arch.residual and w[i] == w[i - 1]

    def energy(self, p, x, y, t=1.0):
        inp = self._inputs(x, y, t)
        h, _ = self._forward(p, inp)
        e = ad.add(ad.matmul(h, p["out.W"]), p["out.b"])
        return ad.reshape(e, (inp.shape[0],))

    def score(self, p, x, y, t=1.0):
        """Exact input gradient, built from differentiable ops so it can itself be taped."""
        inp = self._inputs(x, y, t)
        n = inp.shape[0]
        w = self.arch.widths
        _, pre = self._forward(p, inp)
        gh = ad.matmul(np.ones((n, 1)), ad.transpose(p["out.W"]))
        for i in range(len(w) - 1, 0, -1):
            ga = ad.mul(gh, ad.swish_grad(pre[i]))
            back = ad.matmul(ga, ad.transpose(p[f"l{i}.W"]))
            gh = ad.add(gh, back) if self._res(i) else back
        ga = ad.mul(gh, ad.swish_grad(pre[0]))
        c0 = self.arch.ctx_dim
        w_y = ad.getitem(p["l0.W"], slice(c0, c0 + self.arch.event_dim))
        return ad.matmul(ga, ad.transpose(w_y))

    def score_jvp(self, p, x, y, t, v):
        """(score, d score . v) on the numpy path: forward-over-reverse tangent."""
        inp = self._inputs(x, y, t)
        n = inp.shape[0]
        w = self.arch.widths
        c0, dy = self.arch.ctx_dim, self.arch.event_dim
        dinp = np.zeros_like(inp)
        dinp[:, c0 : c0 + dy] = v
        pre, dpre = [], []
        a = inp @ p["l0.W"] + p["l0.b"]
        da = dinp @ p["l0.W"]
        pre.append(a)
        dpre.append(da)
        h, dh = ad.swish(a), ad.swish_grad(a) * da
        for i in range(1, len(w)):
            a = h @ p[f"l{i}.W"] + p[f"l{i}.b"]
            da = dh @ p[f"l{i}.W"]
            pre.append(a)
            dpre.append(da)
            z, dz = ad.swish(a), ad.swish_grad(a) * da
            if self._res(i):
                h, dh = h + z, dh + dz
            else:
                h, dh = z, dz
        gh = np.ones((n, 1)) @ p["out.W"].T
        dgh = np.zeros_like(gh)
        for i in range(len(w) - 1, 0, -1):
            s1, s2 = ad.swish_grad(pre[i]), ad.swish_grad2(pre[i])
            ga = gh * s1
            dga = dgh * s1 + gh * s2 * dpre[i]
            back, dback = ga @ p[f"l{i}.W"].T, dga @ p[f"l{i}.W"].T
            if self._res(i):
                gh, dgh = gh + back, dgh + dback
            else:
                gh, dgh = back, dback
        s1, s2 = ad.swish_grad(pre[0]), ad.swish_grad2(pre[0])
        ga = gh * s1
        dga = dgh * s1 + gh * s2 * dpre[0]
        w_y = p["l0.W"][c0 : c0 + dy]
        return ga @ w_y.T, dga @ w_y.T


class MlpVectorField(_Model):
    """Velocity field: t -> 2-layer embedding MLP, then concat(x, y, emb) -> dense layers -> event."""

    def __init__(self, arch: Arch):
        if not arch.widths:
            raise ValueError("mlp_vf needs at least one hidden layer")
        super().__init__(arch)
        self.temb = arch.time_embed_dim
        self.din = arch.ctx_dim + arch.event_dim + self.temb

    def param_shapes(self):
        a, w = self.arch, self.arch.widths
        shapes = []
        if self.temb:
            shapes += [("t0.W", (1, self.temb)), ("t0.b", (self.temb,)),
                       ("t1.W", (self.temb, self.temb)), ("t1.b", (self.temb,))]
        shapes += [("l0.W", (self.din, w[0])), ("l0.b", (w[0],))]
        for i in range(1, len(w)):
            shapes += [(f"l{i}.W", (w[i - 1], w[i])), (f"l{i}.b", (w[i],))]
        shapes += [("out.W", (w[-1], a.event_dim)), ("out.b", (a.event_dim,))]
        return shapes

    def _res(self, i):
        w = self.arch.widths
        return self.arch.residual and w[i] == w[i - 1]

    def _inputs(self, p, t, x, y):
        a = self.arch
        y = _rows(y, dim=a.event_dim)
        n = y.shape[0]
        parts = [_ctx(x, n, a.ctx_dim), y]
        if self.temb:
            tt = _tcol(t, n)
            e = ad.swish(ad.add(ad.matmul(tt, p["t0.W"]), p["t0.b"]))
            e = ad.swish(ad.add(ad.matmul(e, p["t1.W"]), p["t1.b"]))
            parts.append(ad.broadcast_to(e, (n, self.temb)) if tt.shape[0] != n else e)
        return ad.concatenate(parts, axis=1)

    def velocity(self, p, t, x, y):
        h = ad.swish(ad.add(ad.matmul(self._inputs(p, t, x, y), p["l0.W"]), p["l0.b"]))
        for i in range(1, len(self.arch.widths)):
            z = ad.swish(ad.add(ad.matmul(h, p[f"l{i}.W"]), p[f"l{i}.b"]))
            h = ad.add(h, z) if self._res(i) else z
        return ad.add(ad.matmul(h, p["out.W"]), p["out.b"])

    def jvp(self, p, t, x, y, v):
        """(v(t,x,y), J_y v . tangent) on the numpy path."""
        inp = self._inputs(p, t, x, y)
        c0, dy = self.arch.ctx_dim, self.arch.event_dim
        a = inp @ p["l0.W"] + p["l0.b"]
        da = v @ p["l0.W"][c0 : c0 + dy]
        h, dh = ad.swish(a), ad.swish_grad(a) * da
        for i in range(1, len(self.arch.widths)):
            a = h @ p[f"l{i}.W"] + p[f"l{i}.b"]
            da = dh @ p[f"l{i}.W"]
            z, dz = ad.swish(a), ad.swish_grad(a) * da
            if self._res(i):
                h, dh = h + z, dh + dz
            else:
                h, dh = z, dz
        return h @ p["out.W"] + p["out.b"], dh @ p["out.W"]


class ConcatSquashField(_Model):
    """Velocity field of time-gated dense layers on concat(x, y).

    Each layer is ``(h W + b) * sigmoid(t Wg + bg) + t Wb``; swish between layers.
    ``widths`` lists the hidden widths, so ``[64]`` is two layers.
    """

    def __init__(self, arch: Arch):
        super().__init__(arch)
        self.dims = [arch.ctx_dim + arch.event_dim, *arch.widths, arch.event_dim]

    def param_shapes(self):
        shapes = []
        for i in range(len(self.dims) - 1):
            di, do = self.dims[i], self.dims[i + 1]
            shapes += [(f"c{i}.W", (di, do)), (f"c{i}.b", (do,)),
                       (f"c{i}.Wg", (1, do)), (f"c{i}.bg", (do,)), (f"c{i}.Wt", (1, do))]
        return shapes

    def _layer(self, p, i, h, tt):
        gate = ad.sigmoid(ad.add(ad.matmul(tt, p[f"c{i}.Wg"]), p[f"c{i}.bg"]))
        lin = ad.add(ad.matmul(h, p[f"c{i}.W"]), p[f"c{i}.b"])
        return ad.add(ad.mul(lin, gate), ad.matmul(tt, p[f"c{i}.Wt"])), gate

    def velocity(self, p, t, x, y):
        a = self.arch
        y = _rows(y, dim=a.event_dim)
        n = y.shape[0]
        tt = _tcol(t, n)
        h = ad.concatenate([_ctx(x, n, a.ctx_dim), y], axis=1)
        last = len(self.dims) - 2
        for i in range(last + 1):
            h, _ = self._layer(p, i, h, tt)
            if i < last:
                h = ad.swish(h)
        return h

    def jvp(self, p, t, x, y, v):
        a = self.arch
        y = _rows(y, dim=a.event_dim)
        n = y.shape[0]
        tt = _tcol(t, n)
        h = np.concatenate([_ctx(x, n, a.ctx_dim), y], axis=1)
        dh = np.concatenate([np.zeros((n, a.ctx_dim)), v], axis=1)
        last = len(self.dims) - 2
        for i in range(last + 1):
            h, gate = self._layer(p, i, h, tt)
            dh = (dh @ p[f"c{i}.W"]) * gate
            if i < last:
                sg = ad.sigmoid(h)
                dh = (sg + h * sg * (1.0 - sg)) * dh
                h = h * sg
        return h, dh


class GaussianMeanFamily(_Model):
    """Energy ``-|y - mu|^2 / (2 sigma^2)`` with learnable mean, fixed sigma."""

    def param_shapes(self):
        return [("mu", (self.arch.event_dim,))]

    def init(self, seed: int = 0, mu=0.0) -> ParameterVector:
        return ParameterVector([("mu", np.full(self.arch.event_dim, float(mu)))])

    def energy(self, p, x, y, t=1.0):
        y = _rows(y, dim=self.arch.event_dim)
        d = ad.add(y, ad.neg(p["mu"]))
        return ad.mul(ad.total(ad.square(d), axis=1), -0.5 / self.arch.sigma**2)

    def score(self, p, x, y, t=1.0):
        y = _rows(y, dim=self.arch.event_dim)
        return ad.mul(ad.add(y, ad.neg(p["mu"])), -1.0 / self.arch.sigma**2)

    def score_jvp(self, p, x, y, t, v):
        return self.score(p, x, y, t), -np.asarray(v) / self.arch.sigma**2


class GaussianNaturalFamily(_Model):
    """1-D exponential family with sufficient statistic (y, y^2)."""

    def param_shapes(self):
        return [("theta", (2,))]

    def init(self, seed: int = 0, mu=0.0, sigma=1.0) -> ParameterVector:
        return ParameterVector([("theta", natural_from_moments(mu, sigma))])

    def energy(self, p, x, y, t=1.0):
        y = _rows(y, dim=1)
        psi = np.concatenate([y, y * y], axis=1)
        return ad.matmul(psi, p["theta"])

    def score(self, p, x, y, t=1.0):
        y = _rows(y, dim=1)
        th = ad.value(p["theta"])
        if th[1] >= 0:
            raise ValueError("second natural parameter must be negative")
        return ad.add(ad.getitem(p["theta"], slice(0, 1)), ad.mul(2.0 * y, ad.getitem(p["theta"], slice(1, 2))))


def natural_from_moments(mu: float, sigma: float) -> np.ndarray:
    return np.array([mu / sigma**2, -0.5 / sigma**2])


def moments_from_natural(theta) -> tuple[float, float]:
    t1, t2 = map(float, theta)
    if t2 >= 0:
        raise ValueError("non-integrable natural parameters: theta[1] must be < 0")
    var = -0.5 / t2
    return t1 * var, float(np.sqrt(var))


def gaussian_family_fisher(theta) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form I = Cov(y, y^2) and J = E[(1, 2y)(1, 2y)^T] under N(mu, sigma^2)."""
    mu, s = moments_from_natural(theta)
    v = s * s
    info = np.array([[v, 2 * mu * v], [2 * mu * v, 4 * mu * mu * v + 2 * v * v]])
    j = np.array([[1.0, 2 * mu], [2 * mu, 4 * (mu * mu + v)]])
    return info, j


_REGISTRY = {
    "mlp_energy": MlpEnergy,
    "mlp_vf": MlpVectorField,
    "concatsquash_vf": ConcatSquashField,
    "gaussian_mean": GaussianMeanFamily,
    "gaussian_natural": GaussianNaturalFamily,
}


def build(arch: Arch | Mapping):
    if not isinstance(arch, Arch):
        arch = Arch.from_dict(arch)
    return _REGISTRY[arch.kind](arch)


def energy_eval(model, params, x, y, t=1.0):
    return model.energy(params, x, y, t)


def energy_score(model, params, x, y, t=1.0):
    return model.score(params, x, y, t)
