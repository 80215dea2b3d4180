"""ROI aggregation, best-layer selection, paired t-tests and difference maps."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateTestError, EmptyRoiError, InputError

MISSING = float("nan")

STREAM_ROIS = {
    1: "early",
    2: "midventral",
    3: "midlateral",
    4: "midparietal",
    5: "ventral",
    6: "lateral",
    7: "parietal",
}


@dataclass
class RoiAtlas:
    labels: np.ndarray  # (V,) int, 0 = unassigned
    names: dict = field(default_factory=dict)  # id -> name

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.names = {int(k): str(v) for k, v in self.names.items()}
        missing = set(np.unique(self.labels[self.labels != 0]).tolist()) - set(self.names)
        if missing:
            raise InputError(f"ROI ids without names: {sorted(missing)}")

    def roi_ids(self):
        return sorted(self.names)


@dataclass(frozen=True)
class TestResult:
    t: float
    p: float
    df: int
    n: int


def roi_mean(metric, mask, atlas, roi_id):
    """Mean of ``metric`` over included voxels carrying ``roi_id``."""
    metric = np.asarray(metric, dtype=np.float64)
    labels = atlas.labels if isinstance(atlas, RoiAtlas) else np.asarray(atlas)
    sel = (labels == roi_id) & np.asarray(mask, dtype=bool)
    if not sel.any():
        raise EmptyRoiError(f"ROI {roi_id} has no included voxels")
    return float(metric[sel].mean())


def best_layer(scores, layer_ids=None):
    """Index (or id, if ``layer_ids`` given) of the highest score; ties go to the earliest."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise InputError("best_layer needs at least one layer")
    i = int(np.argmax(scores))
    return layer_ids[i] if layer_ids is not None else i


# -- Student t tail via the regularised incomplete beta ------------------------

def _betacf(a, b, x, rtol=1e-15, max_iter=10_000):
    """Continued fraction for I_x(a, b) (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = tiny if abs(d) < tiny else d
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < rtol:
            return h
    raise ArithmeticError("incomplete beta continued fraction did not converge")


def betainc(a, b, x):
    """Regularised incomplete beta function I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise InputError("betainc needs a, b > 0")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t, df):
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if not math.isfinite(t):
        return 0.0
    x = df / (df + t * t)
    return min(1.0, max(0.0, betainc(df / 2.0, 0.5, x)))


def paired_t_test(a, b):
    """Two-sided paired t-test of ``a - b`` against zero mean."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise InputError("paired samples must have equal length")
    n = a.size
    if n < 2:
        raise InputError("paired t-test needs at least two pairs")
    d = a - b
    sd = float(np.std(d, ddof=1))
    if sd == 0.0:
        raise DegenerateTestError("paired differences have zero variance")
    t = float(np.mean(d)) / (sd / math.sqrt(n))
    return TestResult(t, student_t_two_sided_p(t, n - 1), n - 1, n)


def difference_map(r2_a, r2_b, mask):
    """Voxelwise ``A - B`` with NaN outside ``mask``."""
    r2_a = np.asarray(r2_a, dtype=np.float64)
    r2_b = np.asarray(r2_b, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not (r2_a.shape == r2_b.shape == mask.shape):
        raise InputError("difference_map inputs must have equal lengths")
    out = np.full(r2_a.shape, MISSING)
    out[mask] = r2_a[mask] - r2_b[mask]
    return out
