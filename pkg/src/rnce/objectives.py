"""Contrastive and likelihood objectives over batches of positives and negatives.

All losses are in minimisation form. The positive sample always occupies
slot 0 of the candidate set; negatives and their proposal log-densities are
plain arrays, so no gradient ever reaches the sampler through these losses.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from . import autodiff as ad


@dataclasses.dataclass
class NegativeBatch:
    """``n`` rows, each a positive and ``K`` negatives from the proposal at time ``t``.

    Shapes: ``x (n, dx)`` (or ``(n, 0)``), ``y_pos (n, d)``, ``t (n,)``,
    ``negs (n, K, d)``, ``neg_logps (n, K)``, ``pos_logp (n,)``. For the
    time-averaged loss ``m`` consecutive rows belong to one datum.
    """

    x: np.ndarray
    y_pos: np.ndarray
    negs: np.ndarray
    neg_logps: np.ndarray
    pos_logp: np.ndarray
    t: np.ndarray | None = None
    m: int = 1

    def __post_init__(self):
        self.y_pos = np.asarray(self.y_pos, dtype=np.float64)
        if self.y_pos.ndim == 1:
            self.y_pos = self.y_pos[:, None]
        n, d = self.y_pos.shape
        self.negs = np.asarray(self.negs, dtype=np.float64)
        if self.negs.ndim == 2 and d == 1:
            self.negs = self.negs[:, :, None]
        self.neg_logps = np.asarray(self.neg_logps, dtype=np.float64)
        self.pos_logp = np.asarray(self.pos_logp, dtype=np.float64).reshape(-1)
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim == 1:
            self.x = self.x.reshape(n, -1) if self.x.size else np.zeros((n, 0))
        self.t = np.ones(n) if self.t is None else np.broadcast_to(np.asarray(self.t, dtype=np.float64), (n,)).copy()
        if self.negs.ndim != 3 or self.negs.shape[0] != n or self.negs.shape[2] != d:
            raise ad.ShapeError(f"negatives shape {self.negs.shape} incompatible with positives {self.y_pos.shape}")
        if self.negs.shape[1] < 1:
            raise ValueError("need K >= 1 negatives")
        if self.neg_logps.shape != self.negs.shape[:2] or self.pos_logp.shape != (n,):
            raise ad.ShapeError("log-density arrays do not match sample arrays")
        if not (np.all(np.isfinite(self.neg_logps)) and np.all(np.isfinite(self.pos_logp))):
            raise ValueError("proposal log-densities must be finite")
        if self.m < 1 or n % self.m:
            raise ValueError(f"batch of {n} rows cannot be grouped by m={self.m}")

    @property
    def n(self) -> int:
        return self.y_pos.shape[0]

    @property
    def K(self) -> int:
        return self.negs.shape[1]

    def candidates(self):
        """All candidates as flat rows: ``(x_rep, y_all, t_rep)`` with ``n (K+1)`` rows."""
        k1 = self.K + 1
        y_all = np.concatenate([self.y_pos[:, None, :], self.negs], axis=1).reshape(self.n * k1, -1)
        return np.repeat(self.x, k1, axis=0), y_all, np.repeat(self.t, k1)

    def proposal_logps(self) -> np.ndarray:
        return np.concatenate([self.pos_logp[:, None], self.neg_logps], axis=1)

    def permuted(self, perm) -> "NegativeBatch":
        """Same candidate sets with negatives reordered (the loss must not care)."""
        return dataclasses.replace(self, negs=self.negs[:, perm], neg_logps=self.neg_logps[:, perm])

    def rows(self, idx) -> "NegativeBatch":
        return NegativeBatch(self.x[idx], self.y_pos[idx], self.negs[idx], self.neg_logps[idx],
                             self.pos_logp[idx], self.t[idx], m=1)


def posterior_q(energies, proposal_logps):
    """Classification posterior over candidates: softmax of ``energy - log p_xi`` along the last axis."""
    s = np.asarray(energies, dtype=np.float64) - np.asarray(proposal_logps, dtype=np.float64)
    m = np.max(s, axis=-1, keepdims=True)
    if np.any(~np.isfinite(m)):
        raise ValueError("all candidate scores are -inf (or non-finite)")
    w = np.exp(s - m)
    return w / np.sum(w, axis=-1, keepdims=True)


def _energies(model, params, batch: NegativeBatch):
    xr, yr, tr = batch.candidates()
    e = model.energy(params, xr, yr, tr)
    return ad.reshape(e, (batch.n, batch.K + 1))


def _nll_slot0(scores):
    return ad.neg(ad.mean(ad.getitem(ad.log_softmax(scores, axis=1), (slice(None), 0))))


def rnce_loss(model, params, batch: NegativeBatch):
    """Negative mean log posterior of the positive; a Tensor when ``params`` are taped."""
    if batch.n == 0:
        raise ValueError("empty batch")
    scores = ad.add(_energies(model, params, batch), -batch.proposal_logps())
    return _nll_slot0(scores)


def ibc_loss(model, params, batch: NegativeBatch):
    """Softmax over raw energies; proposal log-densities are ignored."""
    if batch.n == 0:
        raise ValueError("empty batch")
    return _nll_slot0(_energies(model, params, batch))


def irnce_loss(model, params, batch: NegativeBatch):
    """Time-averaged ranking loss: rows are ``n`` data times ``m`` interpolation times."""
    t = batch.t
    if np.any(t <= 0) or np.any(t > 1):
        raise ValueError("interpolation times must lie in (0, 1]")
    # equal group sizes make the average over data of averages over times a plain mean
    return rnce_loss(model, params, batch)


def posterior_stats(model, params, batch: NegativeBatch, raw: bool = False):
    """Numpy diagnostics ``(q_pos_mean, posterior_entropy)`` for a batch."""
    plain = {k: ad.value(v) for k, v in params.items()}
    e = np.asarray(_energies(model, plain, batch))
    q = posterior_q(e, np.zeros_like(e) if raw else batch.proposal_logps())
    ent = -np.sum(np.where(q > 0, q * np.log(np.where(q > 0, q, 1.0)), 0.0), axis=1)
    return float(np.mean(q[:, 0])), float(np.mean(ent))


def mle_gaussian_mean(data, sigma: float = 1.0) -> float:
    """Exact maximum-likelihood mean for the fixed-variance Gaussian family."""
    data = np.asarray(data, dtype=np.float64).reshape(-1)
    if data.size == 0:
        raise ValueError("empty data")
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    return float(np.mean(data))
