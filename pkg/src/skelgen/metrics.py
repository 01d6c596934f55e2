"""Point-set and distribution metrics for reconstruction and generation.

Reconstruction: Chamfer (squared, sum of means), EMD (exact assignment up
to 1024 points, certified auction approximation above), Hausdorff, and
F1 at a distance threshold. Generation: MMD, coverage, and the 1-NN
two-sample test over shape sets under a Chamfer or EMD base distance,
plus Frechet and kernel distances on externally computed per-shape
feature vectors. Table scaling factors (CD x100, EMD x10, HD x10,
KID x10) are applied only when formatting reports, never inside the
metric math.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree

from skelgen.pointcloud import PointCloud, fps

EXACT_EMD_LIMIT = 1024
AUCTION_RELATIVE_GAP = 0.01

# Display scaling per metric id, applied at report-formatting time.
REPORT_SCALES = {"cd": 100.0, "emd": 10.0, "hd": 10.0, "kid": 10.0}


def _points(a) -> np.ndarray:
    if isinstance(a, PointCloud):
        return a.points
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[0] == 0:
        raise ValueError("point set must be a non-empty (n, k) array")
    return arr


def chamfer(a, b, squared: bool = True) -> float:
    """Symmetric Chamfer distance, sum of the two directed means."""
    pa, pb = _points(a), _points(b)
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    if squared:
        return float(np.mean(d_ab**2) + np.mean(d_ba**2))
    return float(np.mean(d_ab) + np.mean(d_ba))


def hausdorff(a, b) -> float:
    """max over both directions of the largest nearest-neighbor distance."""
    pa, pb = _points(a), _points(b)
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return float(max(d_ab.max(), d_ba.max()))


def f1_score(pred, gt, tau: float = 0.06) -> float:
    """Surface F1 as a percentage: harmonic mean of precision (pred points
    within tau of gt) and recall (gt points within tau of pred)."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    pp, pg = _points(pred), _points(gt)
    d_pg, _ = cKDTree(pg).query(pp)
    d_gp, _ = cKDTree(pp).query(pg)
    precision = float(np.mean(d_pg <= tau))
    recall = float(np.mean(d_gp <= tau))
    if precision + recall == 0.0:
        return 0.0
    return 100.0 * 2.0 * precision * recall / (precision + recall)


# ---------------------------------------------------------------------------
# Earth mover's distance


@dataclass(frozen=True)
class EmdResult:
    value: float  # mean matched distance
    exact: bool
    gap: float  # certified relative optimality gap (0 for exact)


def emd_detail(a, b) -> EmdResult:
    """Minimum mean matching distance between equal-size point sets.

    Exact Hungarian assignment up to EXACT_EMD_LIMIT points; above that an
    epsilon-scaling auction whose certified relative gap is at most 1%.
    """
    pa, pb = _points(a), _points(b)
    if pa.shape[0] != pb.shape[0]:
        raise ValueError(f"point counts differ: {pa.shape[0]} vs {pb.shape[0]}")
    cost = np.sqrt(np.maximum(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(axis=2), 0.0))
    if pa.shape[0] <= EXACT_EMD_LIMIT:
        rows, cols = linear_sum_assignment(cost)
        return EmdResult(value=float(cost[rows, cols].mean()), exact=True, gap=0.0)
    return _auction_emd(cost)


def emd(a, b) -> float:
    return emd_detail(a, b).value


def _auction_round(cost, prices, eps):
    """Forward auction for the minimization assignment problem.

    Maintains eps-complementary slackness; returns owner per column and
    the matching as row -> column.
    """
    n = cost.shape[0]
    owner = np.full(n, -1, dtype=np.int64)  # column -> row
    assigned = np.full(n, -1, dtype=np.int64)  # row -> column
    unassigned = list(range(n))
    while unassigned:
        i = unassigned.pop()
        # Net value of each column for bidder i (minimization: negate cost).
        values = -cost[i] - prices
        best = int(np.argmax(values))
        v_best = float(values[best])
        values[best] = -np.inf
        second = float(values.max())
        prices[best] += v_best - second + eps
        prev = owner[best]
        owner[best] = i
        assigned[i] = best
        if prev >= 0:
            assigned[prev] = -1
            unassigned.append(prev)
    return assigned


def _auction_emd(cost) -> EmdResult:
    n = cost.shape[0]
    span = float(cost.max() - cost.min())
    if span == 0.0:
        return EmdResult(value=float(cost[0, 0]), exact=False, gap=0.0)
    prices = np.zeros(n)
    eps = span / 8.0
    assigned = None
    while True:
        assigned = _auction_round(cost, prices, eps)
        value = float(cost[np.arange(n), assigned].mean())
        # eps-CS implies total cost within n*eps of optimal, so the mean is
        # within eps; certify the relative gap from that bound.
        if value == 0.0:
            return EmdResult(value=0.0, exact=False, gap=0.0)
        gap = eps / value
        if gap <= AUCTION_RELATIVE_GAP:
            return EmdResult(value=value, exact=False, gap=gap)
        eps /= 8.0


# ---------------------------------------------------------------------------
# Set-level generative metrics


def _base_distance(base: str):
    if base == "cd":
        return chamfer
    if base == "emd":
        return emd
    raise ValueError(f"unknown base distance {base!r}")


def cross_distances(gen_set, ref_set, base: str = "cd") -> np.ndarray:
    dist = _base_distance(base)
    return np.array([[dist(g, r) for r in ref_set] for g in gen_set])


def mmd(gen_set, ref_set, base: str = "cd", direction: str = "ref") -> float:
    """Minimum matching distance between shape sets.

    direction="ref" (conventional): mean over reference shapes of the
    minimum distance to any generated shape. direction="gen" averages over
    generated shapes instead.
    """
    if not gen_set or not ref_set:
        raise ValueError("shape sets must be non-empty")
    d = cross_distances(gen_set, ref_set, base)
    if direction == "ref":
        return float(d.min(axis=0).mean())
    if direction == "gen":
        return float(d.min(axis=1).mean())
    raise ValueError(f"unknown direction {direction!r}")


def coverage(gen_set, ref_set, base: str = "cd") -> float:
    """Percentage of reference shapes claimed as nearest neighbor by at
    least one generated shape (ties to the lowest reference index)."""
    if not gen_set or not ref_set:
        raise ValueError("shape sets must be non-empty")
    d = cross_distances(gen_set, ref_set, base)
    nearest = np.argmin(d, axis=1)  # lowest index on ties
    return 100.0 * len(set(nearest.tolist())) / len(ref_set)


def nna_1(gen_set, ref_set, base: str = "cd") -> float:
    """Leave-one-out 1-NN two-sample test accuracy, as a percentage.

    Pools both sets, classifies each shape by the origin of its nearest
    neighbor (self excluded, distance ties broken by lowest pooled index).
    50% means the sets are statistically indistinguishable.
    """
    if len(gen_set) < 2 or len(ref_set) < 2:
        raise ValueError("need at least 2 shapes per set")
    pooled = list(gen_set) + list(ref_set)
    labels = np.array([0] * len(gen_set) + [1] * len(ref_set))
    n = len(pooled)
    dist = _base_distance(base)
    d = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            d[i, j] = d[j, i] = dist(pooled[i], pooled[j])
    np.fill_diagonal(d, np.inf)
    nearest = np.lexsort((np.arange(n)[None, :].repeat(n, axis=0), d), axis=1)[:, 0]
    return 100.0 * float(np.mean(labels[nearest] == labels))


# ---------------------------------------------------------------------------
# Feature-space distribution distances


@dataclass(frozen=True)
class FeatureSet:
    """Per-shape feature vectors, one row per shape (externally computed)."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.atleast_2d(np.asarray(self.matrix, dtype=np.float64))
        object.__setattr__(self, "matrix", m)
        if m.shape[0] < 1 or not np.all(np.isfinite(m)):
            raise ValueError("feature matrix must be non-empty and finite")

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    def __len__(self) -> int:
        return self.matrix.shape[0]

    @classmethod
    def load_csv(cls, path) -> "FeatureSet":
        return cls(np.loadtxt(path, delimiter=",", ndmin=2))

    def save_csv(self, path) -> None:
        np.savetxt(path, self.matrix, delimiter=",", fmt="%.17g")


def _check_features(fa: FeatureSet, fb: FeatureSet):
    if fa.dim != fb.dim:
        raise ValueError(f"feature dimensions differ: {fa.dim} vs {fb.dim}")
    if len(fa) < 2 or len(fb) < 2:
        raise ValueError("need at least 2 feature rows per set")


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    """Square root of a symmetric near-PSD matrix; eigenvalues slightly
    below zero (numerical noise down to -1e-10) are clamped."""
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2.0)
    vals = np.where(vals > 0.0, vals, 0.0)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_feature_distance(fa: FeatureSet, fb: FeatureSet) -> float:
    """Frechet distance between Gaussians fitted to the two feature sets."""
    _check_features(fa, fb)
    mu_a = fa.matrix.mean(axis=0)
    mu_b = fb.matrix.mean(axis=0)
    cov_a = np.cov(fa.matrix, rowvar=False).reshape(fa.dim, fa.dim)
    cov_b = np.cov(fb.matrix, rowvar=False).reshape(fb.dim, fb.dim)
    root_a = _psd_sqrt(cov_a)
    cross = _psd_sqrt(root_a @ cov_b @ root_a)
    value = float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.trace(cross))
    return max(value, 0.0)


def kernel_feature_distance(fa: FeatureSet, fb: FeatureSet) -> float:
    """Unbiased squared MMD with the cubic polynomial kernel
    k(x, y) = (x.y/dim + 1)^3."""
    _check_features(fa, fb)
    x, y = fa.matrix, fb.matrix
    d = fa.dim
    kxx = (x @ x.T / d + 1.0) ** 3
    kyy = (y @ y.T / d + 1.0) ** 3
    kxy = (x @ y.T / d + 1.0) ** 3
    m, n = len(x), len(y)
    sum_xx = (kxx.sum() - np.trace(kxx)) / (m * (m - 1))
    sum_yy = (kyy.sum() - np.trace(kyy)) / (n * (n - 1))
    return float(sum_xx + sum_yy - 2.0 * kxy.mean())


# ---------------------------------------------------------------------------
# Evaluation protocol helpers and reports


def eval_protocol_subsample(pc: PointCloud, target: int) -> PointCloud:
    """FPS subsampling to the protocol size (2560 reconstruction, 2048
    generation), starting from index 0."""
    if len(pc) < target:
        raise ValueError(f"cloud has {len(pc)} points, need at least {target}")
    return PointCloud(pc.points[fps(pc, target)])


@dataclass
class MetricReport:
    """Named metric values plus the evaluation metadata that shaped them.

    Values are raw (unscaled); REPORT_SCALES records the per-metric display
    factor used by the formatted outputs.
    """

    values: dict[str, float] = field(default_factory=dict)
    metadata: dict[str, object] = field(default_factory=dict)

    def add(self, metric_id: str, value: float) -> None:
        if not np.isfinite(value):
            raise ValueError(f"metric {metric_id!r} is not finite: {value}")
        self.values[metric_id] = float(value)

    @staticmethod
    def _scale(metric_id: str) -> float:
        base = metric_id.split("-", 1)[0]
        return REPORT_SCALES.get(base, 1.0)

    def csv_rows(self) -> list[tuple[str, str, float, float]]:
        rows = [("metric", "name", "value", "scale")]
        for metric_id in sorted(self.values):
            rows.append((metric_id, METRIC_NAMES.get(metric_id, metric_id), self.values[metric_id], self._scale(metric_id)))
        return rows

    def save_csv(self, path) -> None:
        with open(path, "w") as fh:
            for row in self.csv_rows():
                fh.write(",".join(str(x) for x in row) + "\n")
            for key in sorted(self.metadata):
                fh.write(f"# {key}={self.metadata[key]}\n")

    def format_table(self) -> str:
        lines = [f"{'metric':<12} {'scaled value':>14}  (scale)"]
        for metric_id in sorted(self.values):
            scale = self._scale(metric_id)
            lines.append(f"{metric_id:<12} {self.values[metric_id] * scale:>14.6f}  (x{scale:g})")
        return "\n".join(lines)


METRIC_NAMES = {
    "cd": "chamfer distance",
    "emd": "earth mover distance",
    "hd": "hausdorff distance",
    "f1": "F1 at threshold",
    "mmd-cd": "minimum matching distance (CD)",
    "mmd-emd": "minimum matching distance (EMD)",
    "cov-cd": "coverage (CD)",
    "cov-emd": "coverage (EMD)",
    "nna-cd": "1-NN accuracy (CD)",
    "nna-emd": "1-NN accuracy (EMD)",
    "fid": "Frechet feature distance",
    "kid": "kernel feature distance",
}
