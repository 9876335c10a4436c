"""Seeded generators for the planar conditional benchmarks and the 1-D Gaussian setup."""

from __future__ import annotations

import csv
import dataclasses
import io

import numpy as np

from .models import sinusoidal_embedding

PINWHEEL_CONTEXTS = (4, 5, 6, 7)
SPIRAL_RANGE = (400.0, 800.0)
SPIRAL_EVAL_CONTEXTS = (400.0, 500.0, 600.0)


@dataclasses.dataclass
class Dataset:
    """Raw contexts ``c`` (what the user sees), model features ``x`` and events ``y``."""

    c: np.ndarray
    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return self.y.shape[0]


@dataclasses.dataclass(frozen=True)
class PinwheelSpec:
    spokes: int
    n: int
    seed: int = 0
    radial_std: float = 0.25
    angle_std: float = 0.1
    swirl: float = 0.3
    scale: float = 1.5

    def __post_init__(self):
        if self.spokes not in PINWHEEL_CONTEXTS:
            raise ValueError(f"spokes must be one of {PINWHEEL_CONTEXTS}, got {self.spokes}")


@dataclasses.dataclass(frozen=True)
class SpiralSpec:
    length: float
    n: int
    seed: int = 0
    noise: float = 0.05
    arc_per_unit: float = 0.1  # native arc length per unit of context
    max_radius: float = 3.0

    def __post_init__(self):
        if not SPIRAL_RANGE[0] <= self.length <= SPIRAL_RANGE[1]:
            raise ValueError(f"spiral length must lie in {SPIRAL_RANGE}")


@dataclasses.dataclass(frozen=True)
class GaussianCondSpec:
    mean: float = 1.0
    sigma: float = 1.0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_pinwheel(spec: PinwheelSpec) -> np.ndarray:
    rng = _rng(spec.seed)
    n = spec.n
    spoke = rng.integers(0, spec.spokes, size=n)
    r = rng.normal(1.0, spec.radial_std, size=n)
    bad = r <= 0
    while np.any(bad):  # truncate to positive radii by rejection
        r[bad] = rng.normal(1.0, spec.radial_std, size=int(bad.sum()))
        bad = r <= 0
    a = rng.normal(0.0, spec.angle_std, size=n)
    ang = spoke * 2 * np.pi / spec.spokes + a + spec.swirl * (r - 1.0)
    return spec.scale * np.stack([r * np.cos(ang), r * np.sin(ang)], axis=1)


def _arc_length(phi):
    """Arc length of r = phi from 0 to phi."""
    s = np.sqrt(1.0 + phi * phi)
    return 0.5 * (phi * s + np.arcsinh(phi))


def _arc_inverse(s, iters=60):
    """Invert the arc-length function by Newton (it is convex and increasing)."""
    s = np.asarray(s, dtype=np.float64)
    phi = np.sqrt(2.0 * s)  # large-phi asymptote s ~ phi^2 / 2
    for _ in range(iters):
        phi = np.maximum(phi - (_arc_length(phi) - s) / np.sqrt(1.0 + phi * phi), 0.0)
    return phi


def spiral_curve(spec: SpiralSpec, s):
    """Point on the spiral at native arc length ``s``; radius scaled so length 800 ends at max_radius."""
    phi = _arc_inverse(s)
    b = spec.max_radius / _arc_inverse(SPIRAL_RANGE[1] * spec.arc_per_unit)
    return b * np.stack([phi * np.cos(phi), phi * np.sin(phi)], axis=-1)


def sample_spiral(spec: SpiralSpec, noise: bool = True) -> np.ndarray:
    rng = _rng(spec.seed)
    s = rng.uniform(0.0, spec.length * spec.arc_per_unit, size=spec.n)
    pts = spiral_curve(spec, s)
    if noise:
        pts = pts + spec.noise * rng.standard_normal(pts.shape)
    return pts


def sample_gaussian_cond(spec: GaussianCondSpec, n: int, seed) -> np.ndarray:
    return spec.mean + spec.sigma * _rng(seed).standard_normal(n)


# --- context features --------------------------------------------------------


def pinwheel_features(spokes) -> np.ndarray:
    return sinusoidal_embedding(np.asarray(spokes, dtype=np.float64), 10)


def spiral_features(length) -> np.ndarray:
    lo, hi = SPIRAL_RANGE
    c = np.asarray(length, dtype=np.float64).reshape(-1)
    return (2.0 * (c - lo) / (hi - lo) - 1.0)[:, None]


def features(task: str, c) -> np.ndarray:
    c = np.asarray(c, dtype=np.float64).reshape(-1)
    if task == "pinwheel":
        return pinwheel_features(c)
    if task == "spiral":
        return spiral_features(c)
    if task == "gaussian1d":
        return np.zeros((c.shape[0], 0))
    raise ValueError(f"unknown task {task!r}")


CTX_DIM = {"pinwheel": 10, "spiral": 1, "gaussian1d": 0}
EVENT_DIM = {"pinwheel": 2, "spiral": 2, "gaussian1d": 1}


def sample_conditional(task: str, context: float, n: int, seed) -> np.ndarray:
    """``n`` events at a fixed context value."""
    if task == "pinwheel":
        return sample_pinwheel(PinwheelSpec(int(context), n, seed))
    if task == "spiral":
        return sample_spiral(SpiralSpec(float(context), n, seed))
    if task == "gaussian1d":
        return sample_gaussian_cond(GaussianCondSpec(), n, seed)[:, None]
    raise ValueError(f"unknown task {task!r}")


def make_joint(task: str, n: int, seed: int) -> Dataset:
    """Joint draws: context uniform over its range, then events given context."""
    rng = np.random.default_rng(seed)
    if task == "pinwheel":
        c = rng.choice(PINWHEEL_CONTEXTS, size=n).astype(np.float64)
        y = np.empty((n, 2))
        for k in PINWHEEL_CONTEXTS:
            sel = c == k
            y[sel] = sample_pinwheel(PinwheelSpec(k, int(sel.sum()), rng))
    elif task == "spiral":
        c = rng.uniform(*SPIRAL_RANGE, size=n)
        # arc length uniform on [0, c * arc_per_unit] for each row
        spec = SpiralSpec(SPIRAL_RANGE[1], n)
        s = rng.uniform(size=n) * c * spec.arc_per_unit
        y = spiral_curve(spec, s) + spec.noise * rng.standard_normal((n, 2))
    elif task == "gaussian1d":
        c = np.zeros(n)
        y = sample_gaussian_cond(GaussianCondSpec(), n, rng)[:, None]
    else:
        raise ValueError(f"unknown task {task!r}")
    return Dataset(c, features(task, c), y)


def split_seeds(seed: int) -> tuple[int, int]:
    """Independent train/eval seeds derived from one master seed."""
    ss = np.random.SeedSequence(seed).spawn(2)
    return int(ss[0].generate_state(1)[0]), int(ss[1].generate_state(1)[0])


def eval_contexts(task: str) -> tuple:
    return {"pinwheel": PINWHEEL_CONTEXTS, "spiral": SPIRAL_EVAL_CONTEXTS, "gaussian1d": (0.0,)}[task]


# --- CSV persistence ---------------------------------------------------------


def to_csv(ds: Dataset) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    ydim = ds.y.shape[1]
    w.writerow(["context_0"] + [f"y{i + 1}" for i in range(ydim)])
    for c, y in zip(ds.c, ds.y):
        w.writerow([repr(float(c))] + [repr(float(v)) for v in y])
    return buf.getvalue()


def from_csv(text: str, task: str) -> Dataset:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise ValueError("empty CSV")
    head = rows[0]
    ci = [i for i, h in enumerate(head) if h.startswith("context_")]
    yi = [i for i, h in enumerate(head) if h.startswith("y")]
    if not yi:
        raise ValueError("CSV has no event columns")
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64).reshape(-1, len(head))
    except ValueError as e:
        raise ValueError(f"malformed CSV: {e}") from None
    c = data[:, ci[0]] if ci else np.zeros(data.shape[0])
    return Dataset(c, features(task, c), data[:, yi])
