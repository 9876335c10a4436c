import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rnce import datasets as D


@pytest.mark.parametrize("task", ["pinwheel", "spiral", "gaussian1d"])
def test_make_joint_shapes_and_seeding(task):
    a, b = D.make_joint(task, 500, 3), D.make_joint(task, 500, 3)
    assert a.x.shape == (500, D.CTX_DIM[task]) and a.y.shape == (500, D.EVENT_DIM[task])
    assert np.array_equal(a.y, b.y) and np.array_equal(a.c, b.c)
    assert not np.array_equal(a.y, D.make_joint(task, 500, 4).y)


def test_pinwheel_has_one_arm_per_spoke():
    y = D.sample_pinwheel(D.PinwheelSpec(5, 20_000, 0, swirl=0.0, angle_std=0.05))
    ang = np.mod(np.arctan2(y[:, 1], y[:, 0]), 2 * np.pi)
    arm = np.round(ang / (2 * np.pi / 5)) % 5
    counts = np.bincount(arm.astype(int), minlength=5)
    np.testing.assert_allclose(counts / counts.sum(), 0.2, atol=0.015)
    r = np.hypot(y[:, 0], y[:, 1]) / 1.5
    assert r.mean() == pytest.approx(1.0, abs=0.01)


def test_pinwheel_rejects_unknown_spoke_count():
    with pytest.raises(ValueError):
        D.PinwheelSpec(3, 10)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.0, 200.0))
def test_arc_length_inverse(s):
    assert D._arc_length(D._arc_inverse(s)) == pytest.approx(s, rel=1e-10, abs=1e-10)


def test_spiral_length_controls_extent():
    short = D.sample_spiral(D.SpiralSpec(400.0, 5000, 0), noise=False)
    long = D.sample_spiral(D.SpiralSpec(800.0, 5000, 0), noise=False)
    r_s, r_l = np.hypot(*short.T), np.hypot(*long.T)
    assert r_l.max() == pytest.approx(3.0, abs=0.02)
    assert r_s.max() < r_l.max()
    with pytest.raises(ValueError):
        D.SpiralSpec(100.0, 10)


def test_spiral_joint_matches_conditional_law():
    # rows of the joint dataset near context 600 should look like direct conditional draws
    ds = D.make_joint("spiral", 200_000, 0)
    sel = np.abs(ds.c - 600.0) < 5.0
    cond = D.sample_conditional("spiral", 600.0, 20_000, 1)
    assert np.hypot(*ds.y[sel].T).mean() == pytest.approx(np.hypot(*cond.T).mean(), rel=0.03)


def test_features():
    f = D.features("spiral", [400.0, 600.0, 800.0])
    np.testing.assert_allclose(f[:, 0], [-1.0, 0.0, 1.0])
    assert D.features("pinwheel", [4, 5]).shape == (2, 10)
    with pytest.raises(ValueError):
        D.features("moons", [1.0])


def test_split_seeds_distinct_and_stable():
    a, b = D.split_seeds(0)
    assert a != b and D.split_seeds(0) == (a, b)


def test_csv_roundtrip():
    ds = D.make_joint("pinwheel", 50, 0)
    text = D.to_csv(ds)
    assert text.splitlines()[0] == "context_0,y1,y2" and text.endswith("\n")
    back = D.from_csv(text, "pinwheel")
    assert np.array_equal(back.y, ds.y) and np.array_equal(back.c, ds.c)
    with pytest.raises(ValueError):
        D.from_csv("context_0,y1\n1.0,abc\n", "pinwheel")
