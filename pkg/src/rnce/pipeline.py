"""End-to-end experiment plumbing: build models from a config, train, save,
load, sample and score. Shared by the command line and the acceptance suite.
"""

from __future__ import annotations

import dataclasses
import json
import os

import numpy as np

from . import datasets as D
from . import edm as E
from . import evaluation as ev
from . import flow as fl
from . import models as M
from . import samplers as S
from . import training as T
from .autodiff import ParameterVector
from .config import ConfigError, ExperimentConfig

CKPT_NAME = "checkpoint.bin"
LOG_NAME = "train_log.csv"
CONFIG_NAME = "config.json"


class MethodMismatch(ValueError):
    """The requested sampler or score is not available for the trained method."""


@dataclasses.dataclass
class Trained:
    cfg: ExperimentConfig
    groups: dict  # name -> ParameterVector: "theta" (energy), "xi" (flow), "net" (baseline network)
    log: T.TrainLog | None = None

    # --- model views ---

    def energy(self):
        return M.build(self.cfg.energy_arch)

    def energy_fn(self):
        return S.EnergyFn(self.energy(), self.groups["theta"])

    def flow(self, for_sampling=True) -> fl.FlowModel:
        c = self.cfg
        if c.method == "nf":
            vf, params = M.build(c.vf_arch), self.groups["net"]
        else:
            vf, params = M.build(c.flow_arch), self.groups["xi"]
        steps, lp = (c.sampler.flow_steps, c.sampler.flow_lp) if for_sampling else (c.flow_steps, c.flow_lp)
        return fl.FlowModel(vf, params, fl.StepSchedule.uniform(1.0, steps, lp))

    def denoiser(self) -> E.Denoiser:
        variant = "energy" if self.cfg.method == "edm_phi" else "direct"
        return E.Denoiser(variant, M.build(self.cfg.vf_arch), self.groups["net"], self.cfg.edm)


def _arch(d) -> M.Arch:
    try:
        return M.Arch.from_dict(d)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad architecture {d}: {e}") from None


def dataset_for(cfg: ExperimentConfig) -> D.Dataset:
    train_seed, _ = D.split_seeds(cfg.seed)
    return D.make_joint(cfg.task, cfg.n_data, train_seed)


def init_groups(cfg: ExperimentConfig) -> dict:
    groups = {}
    if cfg.method in ("rnce", "irnce", "ibc"):
        a = _arch(cfg.energy_arch)
        groups["theta"] = M.build(a).init(cfg.seed) if a.kind.startswith("gaussian") else M.mlp_init(a, cfg.seed)
    if cfg.method in ("rnce", "irnce"):
        groups["xi"] = M.mlp_init(_arch(cfg.flow_arch), cfg.seed + 1)
    if cfg.method in ("nf", "edm", "edm_phi"):
        groups["net"] = M.mlp_init(_arch(cfg.vf_arch), cfg.seed + 2)
    return groups


def train(cfg: ExperimentConfig, on_checkpoint=None, checkpoint_every=0) -> Trained:
    """Run the configured method; ``on_checkpoint(groups, step)`` is called periodically."""
    ds = dataset_for(cfg)
    groups = init_groups(cfg)
    tr = Trained(cfg, groups)
    kw = {}
    if on_checkpoint is not None:
        def cb(theta, xi, step):
            g = dict(groups)
            if cfg.method in ("nf", "edm", "edm_phi"):
                g["net"] = xi if xi is not None else theta
            else:
                if theta is not None:
                    g["theta"] = theta
                if xi is not None:
                    g["xi"] = xi
            on_checkpoint(g, step)
        kw = {"on_checkpoint": cb, "checkpoint_every": checkpoint_every}
    m = cfg.method
    if m in ("rnce", "irnce"):
        energy = tr.energy()
        flow = tr.flow(for_sampling=False)
        fn = T.train_rnce if m == "rnce" else T.train_irnce
        theta, xi, tlog = fn(cfg.train, ds, energy, groups["theta"], flow, **kw)
        tr.groups = {"theta": theta, "xi": xi}
    elif m == "ibc":
        theta, tlog = T.train_ibc(cfg.train, ds, tr.energy(), groups["theta"], **kw)
        tr.groups = {"theta": theta}
    elif m == "nf":
        tc = dataclasses.replace(cfg.train, batch_size=cfg.baseline_batch, lr_xi=cfg.baseline_lr)
        net, tlog = T.train_flow(tc, ds, tr.flow(for_sampling=False), steps=cfg.baseline_steps, **kw)
        tr.groups = {"net": net}
    else:
        den = tr.denoiser()
        tc = dataclasses.replace(cfg.train, lr_xi=cfg.baseline_lr)
        opt = tc.optimizer(den.params, "xi")
        opt.lr = T.make_lr(cfg.train.lr_schedule, cfg.baseline_lr, cfg.baseline_steps, cfg.train.warmup_steps)
        den, tlog = E.train_edm(den, ds, cfg.baseline_steps, cfg.baseline_batch, opt, cfg.seed, **kw)
        tr.groups = {"net": den.params}
    tr.log = tlog
    return tr


# --- persistence ---------------------------------------------------------------


def save(tr: Trained, out_dir: str, path: str | None = None):
    os.makedirs(out_dir, exist_ok=True)
    meta = {"config": tr.cfg.to_dict()}
    T.save_checkpoint(path or os.path.join(out_dir, CKPT_NAME), tr.groups, meta)
    with open(os.path.join(out_dir, CONFIG_NAME), "w", encoding="utf-8") as f:
        f.write(tr.cfg.to_json() + "\n")
    if tr.log is not None:
        with open(os.path.join(out_dir, LOG_NAME), "w", encoding="utf-8") as f:
            f.write(tr.log.to_csv())


def load(path: str) -> Trained:
    groups, meta = T.load_checkpoint(path)
    return Trained(ExperimentConfig.from_dict(meta["config"]), groups)


# --- sampling ------------------------------------------------------------------


def default_sampler(method: str) -> str:
    return {"rnce": "two_stage", "irnce": "three_stage", "ibc": "langevin", "nf": "flow",
            "edm": "pflow", "edm_phi": "pflow"}[method]


_ALLOWED = {
    "rnce": {"two_stage", "flow"},
    "irnce": {"two_stage", "three_stage", "flow"},
    "ibc": {"langevin"},
    "nf": {"flow"},
    "edm": {"pflow"},
    "edm_phi": {"pflow"},
}


def sample(tr: Trained, contexts, sampler: str | None, seed: int):
    """One event per entry of ``contexts`` (raw context values)."""
    cfg = tr.cfg
    sampler = sampler or default_sampler(cfg.method)
    if sampler not in _ALLOWED[cfg.method]:
        raise MethodMismatch(f"sampler {sampler!r} is not available for method {cfg.method!r}")
    c = np.asarray(contexts, dtype=np.float64).reshape(-1)
    n = c.shape[0]
    x = D.features(cfg.task, c)
    sc = cfg.sampler
    if n == 0:
        return np.zeros((0, D.EVENT_DIM[cfg.task]))
    rng = np.random.default_rng(seed)
    if sampler == "flow":
        return fl.flow_sample(tr.flow(), x, rng, 1.0, n=n)
    if sampler == "two_stage":
        mc = S.McmcConfig(sc.mcmc, sc.T_mcmc, sc.eta, sc.leapfrog_steps, seed)
        return S.two_stage_sample(tr.flow(), tr.energy_fn(), x, mc, n=n)
    if sampler == "three_stage":
        ic = S.IEbmSampleConfig(sc.t_lower, sc.budget, sc.eta_sde, sc.eta_mcmc, sc.mcmc, sc.leapfrog_steps, seed)
        return S.three_stage_sample(tr.flow(), tr.energy_fn(), x, ic, n=n)
    if sampler == "langevin":
        d = D.EVENT_DIM[cfg.task]
        y0 = rng.uniform(-sc.ibc_box, sc.ibc_box, size=(n, d))
        return S.langevin_chain(tr.energy_fn(), x, y0, S.McmcConfig("langevin", sc.T_mcmc, sc.eta, seed=seed))
    if sampler == "pflow":
        return E.pflow_sample(tr.denoiser(), x, cfg.edm, rng, n=n)
    raise MethodMismatch(f"unknown sampler {sampler!r}")


def scores(tr: Trained, contexts, y):
    """Relative log-likelihoods used to rank candidates at a fixed context."""
    cfg = tr.cfg
    x = D.features(cfg.task, np.asarray(contexts, dtype=np.float64).reshape(-1))
    if cfg.method in ("rnce", "irnce", "ibc"):
        return tr.energy_fn().energy(x, y, 1.0)
    if cfg.method == "edm_phi":
        return E.edm_relative_likelihood(tr.denoiser(), x, y)
    if cfg.method == "nf":
        return fl.flow_logprob(tr.flow(), x, y)
    raise MethodMismatch("the direct denoiser provides no relative likelihood")


def sample_best_of(tr: Trained, contexts, sampler, seed, best_of: int):
    """Each output row is the highest-scoring of ``best_of`` internal draws at that context."""
    c = np.asarray(contexts, dtype=np.float64).reshape(-1)
    if best_of < 1:
        raise ValueError("best_of must be >= 1")
    rep = np.repeat(c, best_of)
    y = sample(tr, rep, sampler, seed)
    s = scores(tr, rep, y)
    out = np.empty((c.shape[0], y.shape[1]))
    best = np.empty(c.shape[0])
    for i in range(c.shape[0]):
        blk = slice(i * best_of, (i + 1) * best_of)
        out[i] = S.select_best_of(s[blk], y[blk])
        best[i] = np.max(s[blk])
    return out, best


# --- evaluation ----------------------------------------------------------------


def bc_report(tr: Trained, seed: int = 0, sampler: str | None = None, n: int | None = None,
              grid: ev.GridSpec | None = None) -> dict:
    """Per-context BC of model samples against fresh ground truth, plus the minimum."""
    cfg = tr.cfg
    n = cfg.eval.n_samples if n is None else n
    grid = grid or ev.GridSpec(-cfg.eval.box, cfg.eval.box, cfg.eval.grid_n)
    _, eval_seed = D.split_seeds(cfg.seed)
    per = {}
    for i, c in enumerate(D.eval_contexts(cfg.task)):
        truth = D.sample_conditional(cfg.task, c, n, eval_seed + 1000 * i)
        model = sample(tr, np.full(n, c), sampler, seed + 7919 * (i + 1))
        per[str(c)] = ev.bhattacharyya(model, truth, grid)
    return {"per_context": per, "min": min(per.values()),
            "grid": {"lo": grid.lo, "hi": grid.hi, "n": grid.n}, "n": n, "seed": seed,
            "sampler": sampler or default_sampler(cfg.method)}


def bc_json(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True)
