"""Optimisation loops: ranking NCE with a jointly trained flow sampler, the
time-indexed variant, and the simpler baselines, plus Adam, schedules,
data noising, training logs and checkpoint files.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import flow as fl
from . import objectives as obj
from .autodiff import ParameterVector

log = logging.getLogger(__name__)


# --- schedules ---------------------------------------------------------------


@dataclasses.dataclass(frozen=True)
class ConstantLR:
    lr: float

    def __call__(self, step: int) -> float:
        return self.lr


@dataclasses.dataclass(frozen=True)
class WarmupCosineLR:
    """Linear warmup to ``lr`` then cosine decay to ``lr * final_frac`` at ``total`` steps."""

    lr: float
    warmup: int
    total: int
    final_frac: float = 0.0

    def __call__(self, step: int) -> float:
        if step < self.warmup:
            return self.lr * (step + 1) / self.warmup
        span = max(self.total - self.warmup, 1)
        frac = min((step - self.warmup) / span, 1.0)
        lo = self.lr * self.final_frac
        return lo + 0.5 * (self.lr - lo) * (1.0 + math.cos(math.pi * frac))


def make_lr(kind: str, lr: float, total: int, warmup: int = 0):
    if kind == "constant":
        return ConstantLR(lr)
    if kind == "warmup_cosine":
        return WarmupCosineLR(lr, max(warmup, 1), total)
    raise ValueError(f"unknown lr schedule {kind!r}")


@dataclasses.dataclass(frozen=True)
class PerturbSchedule:
    """Linear anneal from ``start`` to ``end`` over the first ``frac`` of ``total`` steps, then constant."""

    start: float
    end: float
    total: int
    frac: float = 0.5

    def __post_init__(self):
        if not self.start >= self.end >= 0:
            raise ValueError("need sigma_pert start >= end >= 0")

    def __call__(self, step: int) -> float:
        stop = self.frac * self.total
        if stop <= 0 or step >= stop:
            return self.end
        return self.start + (self.end - self.start) * step / stop


def perturb_batch(y, sigma_pert: float, seed) -> np.ndarray:
    """Add iid ``N(0, sigma_pert^2)`` noise to event coordinates."""
    if sigma_pert < 0:
        raise ValueError("sigma_pert must be >= 0")
    y = np.asarray(y, dtype=np.float64)
    if sigma_pert == 0:
        return y.copy()
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return y + sigma_pert * rng.standard_normal(y.shape)


# --- optimiser ---------------------------------------------------------------


class Adam:
    """Bias-corrected Adam with decoupled weight decay."""

    def __init__(self, params: ParameterVector, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.0):
        self.lr = lr if callable(lr) else ConstantLR(float(lr))
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.m = params.zeros_like()
        self.v = params.zeros_like()

    def step(self, params: ParameterVector, grads: ParameterVector) -> ParameterVector:
        if list(grads) != list(params):
            raise ad.ShapeError("gradient names do not match parameters")
        lr = self.lr(self.step_count)
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1 - b1**self.step_count, 1 - b2**self.step_count
        out = ParameterVector()
        for k, p in params.items():
            g = grads[k]
            if g.shape != p.shape:
                raise ad.ShapeError(f"gradient for {k} has shape {g.shape}, expected {p.shape}")
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            upd = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            out[k] = p - lr * upd - lr * self.weight_decay * p
        return out

    def state(self) -> tuple[ParameterVector, dict]:
        vec = ParameterVector(list(self.m.prefixed("m/").items()) + list(self.v.prefixed("v/").items()))
        return vec, {"step_count": self.step_count}

    def load_state(self, vec: ParameterVector, meta: dict):
        self.m = vec.select("m/")
        self.v = vec.select("v/")
        self.step_count = int(meta["step_count"])


# --- config and log ----------------------------------------------------------


@dataclasses.dataclass
class TrainConfig:
    T_outer: int = 4000
    T_samp: int = 5
    T_rnce: int = 5
    K: int = 9
    m: int = 1
    batch_size: int = 128
    lr_theta: float = 1e-3
    lr_xi: float = 1e-3
    lr_schedule: str = "constant"
    warmup_steps: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    alpha: float = 1.0
    sigma_pert_start: float = 0.0
    sigma_pert_end: float = 0.0
    sigma_pert_frac: float = 0.5
    pretrained_sampler: bool = False
    steps_per_segment: int = 8
    lp_per_segment: int = 3
    ibc_box: float = 4.0
    seed: int = 0

    def __post_init__(self):
        for name in ("T_outer", "K", "m", "batch_size", "steps_per_segment"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.T_samp < 0 or self.T_rnce < 0:
            raise ValueError("step counts must be non-negative")
        PerturbSchedule(self.sigma_pert_start, self.sigma_pert_end, 1)

    @property
    def total_rnce(self) -> int:
        return self.T_outer * self.T_rnce

    @property
    def total_samp(self) -> int:
        return self.T_outer * self.T_samp

    def sigma_pert(self) -> PerturbSchedule:
        return PerturbSchedule(self.sigma_pert_start, self.sigma_pert_end, self.total_rnce, self.sigma_pert_frac)

    def optimizer(self, params, which: str) -> Adam:
        lr = self.lr_theta if which == "theta" else self.lr_xi
        total = self.total_rnce if which == "theta" else self.total_samp
        return Adam(params, make_lr(self.lr_schedule, lr, total, self.warmup_steps),
                    self.beta1, self.beta2, self.adam_eps, self.weight_decay)


def pretrained_sampler_mode(cfg: TrainConfig) -> TrainConfig:
    """Same step counts, but every sampler step runs before the first ranking step."""
    return dataclasses.replace(cfg, pretrained_sampler=True)


LOG_COLUMNS = ("step", "rnce_loss", "sampler_loss", "q_pos_mean", "posterior_entropy", "sigma_pert")


class CollapseDetector:
    """Flags a stall: q_pos above ``q_max`` for ``patience`` steps in a row with a vanishing gradient."""

    def __init__(self, q_max=0.99, patience=100, grad_tol=1e-6):
        self.q_max, self.patience, self.grad_tol = q_max, patience, grad_tol
        self.run = 0
        self.flagged_at = None

    def update(self, step, q_pos, grad_norm) -> bool:
        self.run = self.run + 1 if (q_pos > self.q_max and grad_norm < self.grad_tol) else 0
        if self.run >= self.patience and self.flagged_at is None:
            self.flagged_at = step
            log.warning("posterior collapse suspected at step %d", step)
        return self.flagged_at is not None


@dataclasses.dataclass
class TrainLog:
    records: list = dataclasses.field(default_factory=list)
    phase_boundary: int | None = None
    collapse_step: int | None = None
    time_diag: list = dataclasses.field(default_factory=list)  # (step, t, q_pos) for time-indexed runs

    def append(self, **rec):
        step = rec["step"]
        if self.records and step <= self.records[-1]["step"]:
            raise ValueError("log steps must increase")
        self.records.append({c: rec.get(c, float("nan")) for c in LOG_COLUMNS})

    def column(self, name) -> np.ndarray:
        return np.array([r[name] for r in self.records], dtype=np.float64)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.records:
            w.writerow([r["step"]] + [repr(float(r[c])) for c in LOG_COLUMNS[1:]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "TrainLog":
        rows = list(csv.DictReader(io.StringIO(text)))
        out = cls()
        for r in rows:
            out.append(step=int(r["step"]), **{c: float(r[c]) for c in LOG_COLUMNS[1:]})
        return out


# --- checkpoints -------------------------------------------------------------


def save_checkpoint(path, groups: dict, meta: dict | None = None):
    """JSON manifest line, newline, then every tensor as little-endian float64 in manifest order."""
    entries, blobs, off = [], [], 0
    for g in sorted(groups):
        for name, arr in groups[g].items():
            a = np.ascontiguousarray(arr, dtype="<f8")
            entries.append({"name": f"{g}:{name}", "shape": list(a.shape), "offset": off})
            blobs.append(a.tobytes())
            off += a.size
    head = json.dumps({"meta": meta or {}, "tensors": entries}, sort_keys=True, separators=(",", ":"))
    data = head.encode() + b"\n" + b"".join(blobs)
    with open(path, "wb") as f:
        f.write(data)


def load_checkpoint(path) -> tuple[dict, dict]:
    with open(path, "rb") as f:
        raw = f.read()
    nl = raw.index(b"\n")
    head = json.loads(raw[:nl].decode())
    flat = np.frombuffer(raw[nl + 1 :], dtype="<f8")
    groups: dict = {}
    for e in head["tensors"]:
        g, name = e["name"].split(":", 1)
        size = int(np.prod(e["shape"], dtype=np.int64))
        arr = flat[e["offset"] : e["offset"] + size].astype(np.float64).reshape(e["shape"])
        groups.setdefault(g, ParameterVector())[name] = arr
    return groups, head["meta"]


# --- data --------------------------------------------------------------------


def _batch(rng, data, size):
    idx = rng.integers(0, data.y.shape[0], size=size)
    return data.x[idx], data.y[idx]


def _grad_norm(g: ParameterVector) -> float:
    return float(np.sqrt(sum(float(np.sum(v * v)) for v in g.values())))


# --- steps -------------------------------------------------------------------


def sampler_step(flow: fl.FlowModel, opt: Adam, x, y, rng, tdist: fl.TimeDistribution):
    z = rng.standard_normal(y.shape)
    t = tdist.sample(rng, y.shape[0])
    loss, g = ad.value_and_grad(lambda p: fl.interpolant_loss(flow.vf, p, x, y, z, t), flow.params)
    return flow.with_params(opt.step(flow.params, g)), loss


def draw_negatives(flow: fl.FlowModel, x, y, K: int, rng) -> obj.NegativeBatch:
    """Fresh proposal draws at t=1 with their log-densities; the positive's density by reverse integration."""
    n = y.shape[0]
    xr = np.repeat(x, K, axis=0)
    negs, lps = fl.flow_sample_with_logprob(flow, xr, rng, 1.0, n=n * K)
    pos_lp = fl.flow_logprob(flow, x, y, 1.0)
    d = y.shape[1]
    return obj.NegativeBatch(x, y, negs.reshape(n, K, d), lps.reshape(n, K), pos_lp)


def draw_time_indexed_negatives(flow: fl.FlowModel, x, y, K, m, rng, tdist, steps_per_segment=8,
                                lp_per_segment=3) -> obj.NegativeBatch:
    """K shared truncated trajectories per datum, read off at m sorted interpolation times."""
    n, d = y.shape
    times = np.sort(np.maximum(tdist.sample(rng, (n, m)), fl.T_FLOOR), axis=1)
    z0 = rng.standard_normal((n * K, d))
    ts, lp_idx, save = fl.segment_grid(np.repeat(times, K, axis=0), steps_per_segment, lp_per_segment)
    xr = np.repeat(x, K, axis=0)
    _, _, states, lps = fl.integrate_with_logprob(flow.field(), xr, z0, ts, lp_idx,
                                                  fl.std_normal_logpdf(z0), save_idx=save)
    # (m, n*K, d) -> (n, m, K, d)
    negs = np.stack(states).reshape(m, n, K, d).transpose(1, 0, 2, 3).reshape(n * m, K, d)
    neg_lp = np.stack(lps).reshape(m, n, K).transpose(1, 0, 2).reshape(n * m, K)
    tt = times.reshape(-1)
    zp = rng.standard_normal((n * m, d))
    yp = fl.interpolant_eval(zp, np.repeat(y, m, axis=0), tt)
    xm = np.repeat(x, m, axis=0)
    pos_lp = fl.flow_logprob(flow, xm, yp, tt)
    return obj.NegativeBatch(xm, yp, negs, neg_lp, pos_lp, t=tt, m=m)


def uniform_negatives(x, y, K, rng, box: float) -> obj.NegativeBatch:
    n, d = y.shape
    negs = rng.uniform(-box, box, size=(n, K, d))
    lp = np.full((n, K), -d * np.log(2 * box))
    return obj.NegativeBatch(x, y, negs, lp, np.full(n, -d * np.log(2 * box)))


def _energy_step(energy, theta, opt, loss_fn, batch):
    loss, g = ad.value_and_grad(lambda p: loss_fn(energy, p, batch), theta)
    return opt.step(theta, g), loss, g


# --- loops -------------------------------------------------------------------


def _schedule(cfg: TrainConfig):
    """Ordered list of ('samp' | 'rnce') actions for the outer loop."""
    if cfg.pretrained_sampler:
        return ["samp"] * cfg.total_samp + ["rnce"] * cfg.total_rnce
    return (["samp"] * cfg.T_samp + ["rnce"] * cfg.T_rnce) * cfg.T_outer


def _run(cfg, dataset, energy, theta, flow, neg_fn, loss_fn, on_checkpoint=None, checkpoint_every=0,
         time_diag=False):
    rng = np.random.default_rng(cfg.seed)
    tdist = fl.TimeDistribution(cfg.alpha)
    opt_t = cfg.optimizer(theta, "theta")
    opt_x = cfg.optimizer(flow.params, "xi")
    sig = cfg.sigma_pert()
    tlog = TrainLog()
    det = CollapseDetector()
    n_r = 0
    for step, action in enumerate(_schedule(cfg)):
        if action == "samp":
            x, y = _batch(rng, dataset, cfg.batch_size)
            flow, loss = sampler_step(flow, opt_x, x, y, rng, tdist)
            tlog.append(step=step, sampler_loss=loss)
        else:
            if tlog.phase_boundary is None and cfg.pretrained_sampler:
                tlog.phase_boundary = step
            x, y = _batch(rng, dataset, cfg.batch_size)
            s = sig(n_r)
            y = perturb_batch(y, s, rng)
            batch = neg_fn(flow, x, y, rng)
            theta, loss, g = _energy_step(energy, theta, opt_t, loss_fn, batch)
            q_pos, ent = obj.posterior_stats(energy, theta, batch, raw=loss_fn is obj.ibc_loss)
            det.update(step, q_pos, _grad_norm(g))
            tlog.append(step=step, rnce_loss=loss, q_pos_mean=q_pos, posterior_entropy=ent, sigma_pert=s)
            if time_diag:
                e = np.asarray(obj._energies(energy, theta, batch))
                q = obj.posterior_q(e, batch.proposal_logps())[:, 0]
                tlog.time_diag.extend((step, float(t), float(qq)) for t, qq in zip(batch.t, q))
            n_r += 1
        if on_checkpoint and checkpoint_every and (step + 1) % checkpoint_every == 0:
            on_checkpoint(theta, flow.params, step)
    tlog.collapse_step = det.flagged_at
    return theta, flow.params, tlog


def train_rnce(cfg: TrainConfig, dataset, energy, theta, flow: fl.FlowModel, **kw):
    """Alternate interpolant-regression steps on the flow and ranking steps on the energy."""
    if dataset.y.shape[0] == 0:
        raise ValueError("empty dataset")
    neg_fn = lambda f, x, y, rng: draw_negatives(f, x, y, cfg.K, rng)  # noqa: E731
    return _run(cfg, dataset, energy, theta, flow, neg_fn, obj.rnce_loss, **kw)


def train_irnce(cfg: TrainConfig, dataset, energy, theta, flow: fl.FlowModel, **kw):
    """Time-indexed variant: positives on the bridge, negatives from truncated flows."""
    if dataset.y.shape[0] == 0:
        raise ValueError("empty dataset")
    tdist = fl.TimeDistribution(cfg.alpha)

    def neg_fn(f, x, y, rng):
        return draw_time_indexed_negatives(f, x, y, cfg.K, cfg.m, rng, tdist,
                                           cfg.steps_per_segment, cfg.lp_per_segment)

    return _run(cfg, dataset, energy, theta, flow, neg_fn, obj.irnce_loss, time_diag=True, **kw)


def train_ibc(cfg: TrainConfig, dataset, energy, theta, **kw):
    """Softmax over raw energies against uniform negatives on ``[-box, box]^d``."""
    rng = np.random.default_rng(cfg.seed)
    opt = cfg.optimizer(theta, "theta")
    sig = cfg.sigma_pert()
    tlog = TrainLog()
    for step in range(cfg.total_rnce):
        x, y = _batch(rng, dataset, cfg.batch_size)
        s = sig(step)
        y = perturb_batch(y, s, rng)
        batch = uniform_negatives(x, y, cfg.K, rng, cfg.ibc_box)
        theta, loss, _ = _energy_step(energy, theta, opt, obj.ibc_loss, batch)
        q_pos, ent = obj.posterior_stats(energy, theta, batch, raw=True)
        tlog.append(step=step, rnce_loss=loss, q_pos_mean=q_pos, posterior_entropy=ent, sigma_pert=s)
        _maybe_ckpt(kw, step, theta, None)
    return theta, tlog


def train_flow(cfg: TrainConfig, dataset, flow: fl.FlowModel, steps: int | None = None, **kw):
    """Interpolant regression only (the normalising-flow baseline)."""
    rng = np.random.default_rng(cfg.seed)
    steps = cfg.total_samp if steps is None else steps
    opt = cfg.optimizer(flow.params, "xi")
    tdist = fl.TimeDistribution(cfg.alpha)
    tlog = TrainLog()
    for step in range(steps):
        x, y = _batch(rng, dataset, cfg.batch_size)
        flow, loss = sampler_step(flow, opt, x, y, rng, tdist)
        tlog.append(step=step, sampler_loss=loss)
        _maybe_ckpt(kw, step, None, flow.params)
    return flow.params, tlog


def _maybe_ckpt(kw, step, theta, xi):
    cb, every = kw.get("on_checkpoint"), kw.get("checkpoint_every", 0)
    if cb and every and (step + 1) % every == 0:
        cb(theta, xi, step)


def fit(loss_fn: Callable, params: ParameterVector, opt: Adam, steps: int, batch_fn: Callable, tlog=None, **kw):
    """Generic loop: ``loss_fn(params, batch)`` minimised on ``batch_fn(step)`` batches."""
    tlog = tlog or TrainLog()
    for step in range(steps):
        batch = batch_fn(step)
        loss, g = ad.value_and_grad(lambda p: loss_fn(p, batch), params)
        params = opt.step(params, g)
        tlog.append(step=step, sampler_loss=loss)
        _maybe_ckpt(kw, step, params, None)
    return params, tlog
