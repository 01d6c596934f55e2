"""Medial skeleton extraction via iterative local cluster-center updates.

A skeleton is a small set of interior points with per-point radii. Points
are seeded by farthest point sampling and pulled inward by repeatedly
replacing each point with the centroid of the DBSCAN cluster (among its k
nearest surface neighbors) that contains its nearest neighbor. The whole
map is piecewise linear in the surface points, so a frozen-assignment
Jacobian-vector product is available for gradient checking.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field

import numpy as np

from skelgen.pointcloud import (
    NOISE,
    PointCloud,
    SpatialIndex,
    dbscan,
    fps,
    knn,
)


class AssignmentFlipError(RuntimeError):
    """A perturbation changed cluster assignments; the map is not smooth here."""


@dataclass(frozen=True)
class DbscanPolicy:
    """Neighborhood clustering parameters.

    When `eps` is None it adapts per neighborhood to
    `eps_factor` times the mean nearest-neighbor spacing.
    """

    eps: float | None = None
    eps_factor: float = 2.0
    min_pts: int = 4


@dataclass(frozen=True)
class SkeletonizeConfig:
    n_s: int = 256
    iterations: int = 2
    k_neighbors: int = 32
    dbscan: DbscanPolicy = field(default_factory=DbscanPolicy)
    hierarchical: bool = False

    def __post_init__(self):
        if self.n_s < 1:
            raise ValueError("n_s must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.k_neighbors < self.dbscan.min_pts:
            raise ValueError("k_neighbors must be >= dbscan min_pts")


@dataclass(frozen=True)
class Skeleton:
    """Skeletal points with radii; radius = distance to the nearest surface point."""

    points: np.ndarray  # (n_s, 3)
    radii: np.ndarray  # (n_s,)

    def __post_init__(self):
        object.__setattr__(self, "points", np.asarray(self.points, dtype=np.float64))
        object.__setattr__(self, "radii", np.asarray(self.radii, dtype=np.float64))
        if self.points.ndim != 2 or self.points.shape[1] != 3:
            raise ValueError("skeleton points must have shape (n_s, 3)")
        if self.radii.shape != (self.points.shape[0],):
            raise ValueError("radii length must match point count")

    def __len__(self) -> int:
        return self.points.shape[0]


def _neighborhood_eps(neighbors: np.ndarray, policy: DbscanPolicy) -> float:
    if policy.eps is not None:
        return policy.eps
    d2 = np.sum((neighbors[:, None, :] - neighbors[None, :, :]) ** 2, axis=2)
    np.fill_diagonal(d2, np.inf)
    spacing = float(np.mean(np.sqrt(d2.min(axis=1))))
    if spacing == 0.0:
        return np.finfo(np.float64).tiny
    return policy.eps_factor * spacing


def cluster_center_update(
    seed,
    pc: PointCloud,
    k: int,
    policy: DbscanPolicy = DbscanPolicy(),
    *,
    index: SpatialIndex | None = None,
    return_assignment: bool = False,
):
    """One skeletal update: centroid of the seed-associated neighbor cluster.

    The k nearest surface neighbors of `seed` are clustered with DBSCAN;
    the cluster containing the seed's single nearest neighbor is averaged.
    If that neighbor is noise, all k neighbors are averaged instead.
    """
    if index is None:
        index = SpatialIndex(pc)
    idx, _ = knn(index, seed, k)
    neighbors = index.points[idx]
    labels = dbscan(neighbors, _neighborhood_eps(neighbors, policy), policy.min_pts)
    anchor = labels[0]  # knn is distance-sorted: row 0 is the nearest neighbor
    if anchor == NOISE:
        assigned = idx
    else:
        assigned = idx[labels == anchor]
    center = index.points[assigned].mean(axis=0)
    if return_assignment:
        return center, np.sort(assigned)
    return center


def _iterate_positions(pc: PointCloud, n_s: int, cfg: SkeletonizeConfig):
    """FPS seeding plus synchronous update rounds against the same cloud."""
    if n_s > len(pc):
        raise ValueError(f"n_s={n_s} exceeds cloud size {len(pc)}")
    index = SpatialIndex(pc)
    selected = fps(pc, n_s, start=0)
    positions = pc.points[selected].copy()
    assignments = [np.array([i]) for i in selected]
    for _ in range(cfg.iterations):
        updated = np.empty_like(positions)
        for j in range(n_s):
            updated[j], assignments[j] = cluster_center_update(
                positions[j],
                pc,
                cfg.k_neighbors,
                cfg.dbscan,
                index=index,
                return_assignment=True,
            )
        positions = updated
    return positions, assignments


def compute_radii(points, pc: PointCloud) -> np.ndarray:
    """Distance from each skeletal point to its nearest surface point."""
    return SpatialIndex(pc).nearest_distance(np.atleast_2d(np.asarray(points)))


def skeletonize(pc: PointCloud, cfg: SkeletonizeConfig) -> Skeleton:
    if cfg.hierarchical:
        return hierarchical_skeletonize(pc, cfg.n_s, cfg)
    positions, _ = _iterate_positions(pc, cfg.n_s, cfg)
    return Skeleton(points=positions, radii=compute_radii(positions, pc))


def hierarchical_skeletonize(
    pc: PointCloud, n_s: int, cfg: SkeletonizeConfig | None = None
) -> Skeleton:
    """Two-stage refinement: 4*n_s intermediate points, then n_s final ones.

    Radii are measured against the original surface cloud, not the
    intermediate skeleton.
    """
    if cfg is None:
        cfg = SkeletonizeConfig(n_s=n_s)
    if 4 * n_s > len(pc):
        raise ValueError(f"hierarchical stage needs 4*n_s={4 * n_s} <= {len(pc)} points")
    coarse, _ = _iterate_positions(pc, 4 * n_s, cfg)
    positions, _ = _iterate_positions(PointCloud(coarse), n_s, cfg)
    return Skeleton(points=positions, radii=compute_radii(positions, pc))


def skeletonize_jvp(pc: PointCloud, cfg: SkeletonizeConfig, direction: np.ndarray):
    """Frozen-assignment Jacobian-vector product of the skeletal positions.

    Each output point is the mean of its assigned surface subset, so the
    directional derivative is the mean of the corresponding probe rows.
    """
    _, assignments = _iterate_positions(pc, cfg.n_s, cfg)
    direction = np.asarray(direction, dtype=np.float64)
    return np.stack([direction[a].mean(axis=0) for a in assignments]), assignments


def skeletonize_jacobian_check(
    pc: PointCloud,
    cfg: SkeletonizeConfig,
    direction: np.ndarray,
    step: float = 1e-5,
) -> float:
    """Compare the analytic JVP against central finite differences.

    Raises AssignmentFlipError when the perturbation changes any cluster
    assignment (the caller should retry with a smaller step). Returns the
    max relative error over output coordinates.
    """
    direction = np.asarray(direction, dtype=np.float64)
    jvp, base_assign = skeletonize_jvp(pc, cfg, direction)

    def positions_at(h):
        shifted = PointCloud(pc.points + h * direction)
        pos, assign = _iterate_positions(shifted, cfg.n_s, cfg)
        for a, b in zip(assign, base_assign):
            if not np.array_equal(a, b):
                raise AssignmentFlipError(
                    "non-smooth point: cluster assignment changed under perturbation"
                )
        return pos

    fd = (positions_at(step) - positions_at(-step)) / (2.0 * step)
    scale = max(1.0, float(np.abs(jvp).max()))
    return float(np.abs(jvp - fd).max() / scale)


# ---------------------------------------------------------------------------
# Skeleton I/O


def save_skeleton_csv(path, skeleton: Skeleton) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "z", "r"])
        for p, r in zip(skeleton.points, skeleton.radii):
            writer.writerow([f"{v:.17g}" for v in (p[0], p[1], p[2], r)])


def load_skeleton_csv(path) -> Skeleton:
    rows = np.loadtxt(path, delimiter=",", skiprows=1, dtype=np.float64, ndmin=2)
    return Skeleton(points=rows[:, :3], radii=rows[:, 3])


def save_skeleton_ply(path, skeleton: Skeleton) -> None:
    n = len(skeleton)
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {n}\n"
        "property float32 x\n"
        "property float32 y\n"
        "property float32 z\n"
        "property float32 radius\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        for p, r in zip(skeleton.points, skeleton.radii):
            fh.write(struct.pack("<4f", p[0], p[1], p[2], r))


def load_skeleton_ply(path) -> Skeleton:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        count = None
        names = []
        while True:
            tokens = fh.readline().decode("ascii").split()
            if tokens[:1] == ["element"]:
                count = int(tokens[2])
            elif tokens[:1] == ["property"]:
                names.append(tokens[2])
            elif tokens[:1] == ["end_header"]:
                break
        data = np.frombuffer(fh.read(16 * count), dtype="<f4").reshape(count, 4)
        cols = {name: data[:, i] for i, name in enumerate(names)}
        points = np.column_stack([cols["x"], cols["y"], cols["z"]])
        return Skeleton(points=points.astype(np.float64), radii=cols["radius"].astype(np.float64))
