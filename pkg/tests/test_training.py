import math

import numpy as np
import pytest

from rnce import autodiff as ad
from rnce import datasets as D
from rnce import flow as fl
from rnce import models as M
from rnce import training as T


def _pv(**kw):
    return ad.ParameterVector((k, np.asarray(v, dtype=np.float64)) for k, v in kw.items())


def test_adam_matches_hand_written_reference():
    p = _pv(w=[1.0, -2.0], b=[0.5])
    opt = T.Adam(p, 0.1, weight_decay=0.01)
    m = {k: np.zeros_like(v) for k, v in p.items()}
    v = {k: np.zeros_like(x) for k, x in p.items()}
    ref = {k: x.copy() for k, x in p.items()}
    rng = np.random.default_rng(0)
    for step in range(1, 6):
        g = {k: rng.normal(size=x.shape) for k, x in p.items()}
        p = opt.step(p, _pv(**g))
        for k in ref:
            m[k] = 0.9 * m[k] + 0.1 * g[k]
            v[k] = 0.999 * v[k] + 0.001 * g[k] ** 2
            mh, vh = m[k] / (1 - 0.9**step), v[k] / (1 - 0.999**step)
            ref[k] = ref[k] - 0.1 * mh / (np.sqrt(vh) + 1e-8) - 0.1 * 0.01 * ref[k]
    for k in ref:
        np.testing.assert_allclose(p[k], ref[k], rtol=1e-13)


def test_adam_state_resume_is_exact():
    p0 = _pv(w=[1.0, 2.0])
    grads = [_pv(w=np.random.default_rng(i).normal(size=2)) for i in range(6)]
    a = T.Adam(p0, 0.05)
    p = p0
    for g in grads:
        p = a.step(p, g)
    b = T.Adam(p0, 0.05)
    q = p0
    for g in grads[:3]:
        q = b.step(q, g)
    vec, meta = b.state()
    c = T.Adam(q, 0.05)
    c.load_state(vec, meta)
    for g in grads[3:]:
        q = c.step(q, g)
    assert np.array_equal(p["w"], q["w"])


def test_adam_rejects_mismatched_gradients():
    opt = T.Adam(_pv(w=[1.0]), 0.1)
    with pytest.raises(ad.ShapeError):
        opt.step(_pv(w=[1.0]), _pv(u=[1.0]))


def test_warmup_cosine_schedule():
    s = T.WarmupCosineLR(1.0, 10, 110)
    assert s(0) == pytest.approx(0.1)
    assert s(9) == pytest.approx(1.0)
    assert s(60) == pytest.approx(0.5 * (1 + math.cos(math.pi * 0.5)))
    assert s(110) == pytest.approx(0.0, abs=1e-15)
    assert T.make_lr("constant", 0.3, 10)(7) == 0.3
    with pytest.raises(ValueError):
        T.make_lr("step", 0.1, 10)


def test_perturb_schedule_and_noise():
    s = T.PerturbSchedule(0.4, 0.1, 100, 0.5)
    assert s(0) == 0.4 and s(25) == pytest.approx(0.25) and s(50) == 0.1 and s(99) == 0.1
    y = np.zeros((50_000, 2))
    assert T.perturb_batch(y, 0.3, 0).std() == pytest.approx(0.3, rel=0.02)
    assert np.array_equal(T.perturb_batch(y, 0.0, 0), y)
    with pytest.raises(ValueError):
        T.PerturbSchedule(0.1, 0.2, 10)


def test_alternating_and_pretrained_schedules_have_same_counts():
    cfg = T.TrainConfig(T_outer=3, T_samp=2, T_rnce=1)
    alt = T._schedule(cfg)
    pre = T._schedule(T.pretrained_sampler_mode(cfg))
    assert alt[:3] == ["samp", "samp", "rnce"]
    assert sorted(alt) == sorted(pre)
    assert pre == ["samp"] * 6 + ["rnce"] * 3


def test_checkpoint_roundtrip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    groups = {"theta": _pv(a=rng.normal(size=(3, 2)), b=rng.normal(size=1)), "xi": _pv(w=rng.normal(size=4))}
    path = tmp_path / "c.bin"
    T.save_checkpoint(path, groups, {"step": 7})
    got, meta = T.load_checkpoint(path)
    assert meta == {"step": 7}
    for g in groups:
        assert list(got[g]) == list(groups[g])
        for k in groups[g]:
            assert np.array_equal(got[g][k], groups[g][k])
    # manifest line is plain JSON
    head = path.read_bytes().split(b"\n", 1)[0]
    assert b'"theta:a"' in head


def test_train_log_csv_roundtrip():
    log = T.TrainLog()
    log.append(step=0, sampler_loss=1.5)
    log.append(step=1, rnce_loss=2.25, q_pos_mean=0.3, posterior_entropy=1.0, sigma_pert=0.1)
    back = T.TrainLog.from_csv(log.to_csv())
    np.testing.assert_array_equal(back.column("rnce_loss")[1:], [2.25])
    assert np.isnan(back.column("rnce_loss")[0])
    with pytest.raises(ValueError):
        log.append(step=1)


def test_collapse_detector():
    d = T.CollapseDetector(q_max=0.99, patience=3, grad_tol=1e-6)
    for s in range(2):
        d.update(s, 0.999, 1e-9)
    d.update(2, 0.5, 1e-9)
    assert d.flagged_at is None
    for s in range(3, 6):
        d.update(s, 0.999, 1e-9)
    assert d.flagged_at == 5


def _setup(task="pinwheel"):
    ds = D.make_joint(task, 400, 0)
    c, d = D.CTX_DIM[task], D.EVENT_DIM[task]
    ea = M.Arch(kind="mlp_energy", widths=(8,), ctx_dim=c, event_dim=d, time_embed_dim=4)
    va = M.Arch(kind="concatsquash_vf", widths=(8,), ctx_dim=c, event_dim=d)
    flow = fl.FlowModel(M.build(va), M.mlp_init(va, 1), fl.StepSchedule.uniform(1.0, 6, 3))
    return ds, M.build(ea), M.mlp_init(ea, 0), flow


def test_time_indexed_negatives_layout():
    ds, _, _, flow = _setup()
    rng = np.random.default_rng(0)
    b = T.draw_time_indexed_negatives(flow, ds.x[:3], ds.y[:3], 4, 2, rng, fl.TimeDistribution(1.0), 3, 2)
    assert b.negs.shape == (6, 4, 2) and b.m == 2
    t = b.t.reshape(3, 2)
    assert np.all(np.diff(t, axis=1) >= 0) and np.all(t > 0)
    np.testing.assert_array_equal(b.x[0], b.x[1])


def test_time_indexed_negatives_match_truncated_flow_draws():
    ds, _, _, flow = _setup()
    rng = np.random.default_rng(5)
    b = T.draw_time_indexed_negatives(flow, ds.x[:2], ds.y[:2], 3, 1, rng, fl.TimeDistribution(1.0), 400, 401)
    rng = np.random.default_rng(5)
    times = np.sort(np.maximum(fl.TimeDistribution(1.0).sample(rng, (2, 1)), fl.T_FLOOR), axis=1)
    z0 = rng.standard_normal((6, 2))
    want = fl.flow_sample(flow, np.repeat(ds.x[:2], 3, axis=0), z0, truncate_at=np.repeat(times[:, 0], 3),
                           schedule=fl.StepSchedule.uniform(1.0, 400, 2))
    np.testing.assert_allclose(b.negs.reshape(6, 2), want, atol=1e-6)
    # the positive's density under the truncated flow comes from reverse integration
    assert np.all(np.isfinite(b.pos_logp))


@pytest.mark.parametrize("trainer", ["rnce", "irnce", "ibc"])
def test_training_runs_are_bitwise_reproducible(trainer):
    cfg = T.TrainConfig(T_outer=2, T_samp=1, T_rnce=1, K=3, m=2, batch_size=8, steps_per_segment=2, seed=3)
    outs = []
    for _ in range(2):
        ds, e, th, flow = _setup()
        if trainer == "ibc":
            theta, log = T.train_ibc(cfg, ds, e, th)
        else:
            fn = T.train_rnce if trainer == "rnce" else T.train_irnce
            theta, _, log = fn(cfg, ds, e, th, flow)
        outs.append((theta.flatten(), log.column("rnce_loss")))
    assert np.array_equal(outs[0][0], outs[1][0])
    assert np.array_equal(outs[0][1], outs[1][1], equal_nan=True)


def test_checkpoint_callback_fires():
    cfg = T.TrainConfig(T_outer=4, T_samp=1, T_rnce=1, K=2, batch_size=4)
    ds, e, th, flow = _setup()
    seen = []
    T.train_rnce(cfg, ds, e, th, flow, on_checkpoint=lambda a, b, s: seen.append(s), checkpoint_every=4)
    assert seen == [3, 7]


def test_ranking_training_recovers_gaussian_mean():
    ds = D.make_joint("gaussian1d", 4000, 0)
    energy = M.build({"kind": "gaussian_mean", "event_dim": 1})
    va = M.Arch(kind="concatsquash_vf", widths=(8,), event_dim=1)
    flow = fl.FlowModel(M.build(va), M.mlp_init(va, 1), fl.StepSchedule.uniform(1.0, 8, 3))
    cfg = T.TrainConfig(T_outer=60, T_samp=0, T_rnce=5, K=9, batch_size=64, lr_theta=5e-2)
    theta, _, _ = T.train_rnce(cfg, ds, energy, energy.init(mu=0.0), flow)
    assert float(theta["mu"][0]) == pytest.approx(float(np.mean(ds.y)), abs=0.1)
