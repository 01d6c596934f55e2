"""Point-cloud containers, normalization, and geometric primitives.

Everything downstream (skeletonization, sparse SDF decoding, metrics)
builds on the three primitives here: farthest point sampling, exact
k-nearest-neighbor queries, and deterministic DBSCAN. All operations are
deterministic; distance ties are broken by lowest point index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

NOISE = -1


class DegenerateCloudError(ValueError):
    """Raised when a point cloud has zero spatial extent."""


class PointCloud:
    """An ordered set of 3D points, stored as an (n, 3) float64 array."""

    def __init__(self, points):
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"expected (n, 3) points, got shape {pts.shape}")
        if pts.shape[0] < 1:
            raise ValueError("point cloud must contain at least one point")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite coordinates")
        self._points = pts
        self._points.setflags(write=False)

    @property
    def points(self) -> np.ndarray:
        return self._points

    def __len__(self) -> int:
        return self._points.shape[0]

    def __eq__(self, other) -> bool:
        return isinstance(other, PointCloud) and np.array_equal(
            self._points, other._points
        )


@dataclass(frozen=True)
class NormalizationTransform:
    """Maps raw coordinates into the unit cube: q = (p - offset) * scale."""

    scale: float
    offset: tuple[float, float, float]

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")

    def apply(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - np.asarray(self.offset)) * self.scale

    def invert(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) / self.scale + np.asarray(self.offset)


def normalize_unit_cube(pc: PointCloud) -> tuple[PointCloud, NormalizationTransform]:
    """Center a cloud at the origin and scale its longest axis to [-0.9, 0.9].

    The 10% margin keeps the |sdf| <= 0.1 truncation band strictly inside
    the voxel volume. Raises DegenerateCloudError when all points coincide.
    """
    pts = pc.points
    lo = pts.min(axis=0)
    hi = pts.max(axis=0)
    extent = float(np.max(hi - lo))
    if extent == 0.0:
        raise DegenerateCloudError("degenerate extent: all points identical")
    center = (lo + hi) / 2.0
    scale = 1.8 / extent
    transform = NormalizationTransform(scale=scale, offset=tuple(center))
    return PointCloud(transform.apply(pts)), transform


class SpatialIndex:
    """Immutable nearest-neighbor structure over a point cloud.

    k-NN queries are answered exactly (brute force with deterministic
    tie-breaking); bulk distance-only queries go through a kd-tree, which
    computes identical Euclidean distances.
    """

    def __init__(self, pc: PointCloud):
        self._pc = pc
        self._tree = cKDTree(pc.points)

    @property
    def points(self) -> np.ndarray:
        return self._pc.points

    def __len__(self) -> int:
        return len(self._pc)

    def query(self, point, k: int) -> tuple[np.ndarray, np.ndarray]:
        return knn(self, point, k)

    def nearest_distance(self, queries: np.ndarray) -> np.ndarray:
        """Distance from each query point to its nearest indexed point."""
        d, _ = self._tree.query(np.asarray(queries, dtype=np.float64))
        return np.atleast_1d(d)


def fps(pc: PointCloud, n: int, start: int = 0) -> np.ndarray:
    """Greedy farthest point sampling; returns the selected indices.

    The first index is `start`; each subsequent index maximizes the
    minimum distance to the already-selected set, ties broken by lowest
    index (argmax returns the first maximum).
    """
    pts = pc.points
    if not 1 <= n <= len(pc):
        raise ValueError(f"n={n} out of range for cloud of {len(pc)} points")
    if not 0 <= start < len(pc):
        raise ValueError(f"start index {start} out of range")
    selected = np.empty(n, dtype=np.int64)
    selected[0] = start
    min_d2 = np.sum((pts - pts[start]) ** 2, axis=1)
    for i in range(1, n):
        nxt = int(np.argmax(min_d2))
        selected[i] = nxt
        np.minimum(min_d2, np.sum((pts - pts[nxt]) ** 2, axis=1), out=min_d2)
    return selected


def knn(index: SpatialIndex, query, k: int) -> tuple[np.ndarray, np.ndarray]:
    """The k nearest indexed points to `query`, ascending by distance.

    Exhaustive search; distance ties are broken by lowest index.
    """
    pts = index.points
    if not 1 <= k <= len(pts):
        raise ValueError(f"k={k} exceeds population {len(pts)}")
    q = np.asarray(query, dtype=np.float64)
    d2 = np.sum((pts - q) ** 2, axis=1)
    order = np.lexsort((np.arange(len(pts)), d2))[:k]
    return order, np.sqrt(d2[order])


def dbscan(points, eps: float, min_pts: int) -> np.ndarray:
    """Deterministic DBSCAN; returns labels in {0..C-1} or NOISE (-1).

    A core point has >= min_pts neighbors within eps (itself included).
    Clusters are numbered by their lowest contained point index. Border
    points reachable from several clusters join the one whose expansion
    reaches them first in index-scan order.
    """
    pts = np.asarray(points, dtype=np.float64)
    if eps <= 0:
        raise ValueError("eps must be positive")
    if min_pts < 1:
        raise ValueError("min_pts must be >= 1")
    n = pts.shape[0]
    tree = cKDTree(pts)
    neighborhoods = tree.query_ball_point(pts, eps)
    core = np.array([len(nb) >= min_pts for nb in neighborhoods])

    labels = np.full(n, NOISE, dtype=np.int64)
    cluster = 0
    for i in range(n):
        if labels[i] != NOISE or not core[i]:
            continue
        # BFS expansion from the lowest-index unlabeled core point.
        labels[i] = cluster
        frontier = [i]
        while frontier:
            j = frontier.pop(0)
            for nb in sorted(neighborhoods[j]):
                if labels[nb] == NOISE:
                    labels[nb] = cluster
                    if core[nb]:
                        frontier.append(nb)
        cluster += 1

    # Renumber so cluster ids follow the lowest contained point index.
    order = {}
    for lab in labels:
        if lab != NOISE and lab not in order:
            order[lab] = len(order)
    remap = np.arange(cluster)
    for old, new in order.items():
        remap[old] = new
    mask = labels != NOISE
    labels[mask] = remap[labels[mask]]
    return labels


# ---------------------------------------------------------------------------
# Point-cloud I/O


def save_xyz(path, pc: PointCloud) -> None:
    np.savetxt(path, pc.points, fmt="%.17g")


def load_xyz(path) -> PointCloud:
    pts = np.loadtxt(path, dtype=np.float64, ndmin=2)
    return PointCloud(pts)


def load_ply_points(path) -> PointCloud:
    """Read vertex x/y/z from an ASCII or binary-little-endian PLY file.

    Additional vertex properties are ignored; non-vertex elements are
    skipped.
    """
    with open(path, "rb") as fh:
        magic = fh.readline().strip()
        if magic != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        fmt = None
        elements = []  # (name, count, [(type, pname), ...])
        while True:
            line = fh.readline()
            if not line:
                raise ValueError(f"{path}: unterminated PLY header")
            tokens = line.decode("ascii").split()
            if not tokens or tokens[0] == "comment":
                continue
            if tokens[0] == "format":
                fmt = tokens[1]
            elif tokens[0] == "element":
                elements.append((tokens[1], int(tokens[2]), []))
            elif tokens[0] == "property":
                if tokens[1] == "list":
                    elements[-1][2].append(("list", tokens[2], tokens[3], tokens[4]))
                else:
                    elements[-1][2].append(("scalar", tokens[1], tokens[2]))
            elif tokens[0] == "end_header":
                break
        if fmt not in ("ascii", "binary_little_endian"):
            raise ValueError(f"{path}: unsupported PLY format {fmt!r}")
        for name, count, props in elements:
            if name == "vertex":
                return PointCloud(_read_ply_vertices(fh, fmt, count, props))
            _skip_ply_element(fh, fmt, count, props)
    raise ValueError(f"{path}: no vertex element")


_PLY_TYPES = {
    "char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2", "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4", "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4", "double": "f8", "float64": "f8",
}


def _read_ply_vertices(fh, fmt, count, props):
    names = []
    for p in props:
        if p[0] != "scalar":
            raise ValueError("list property on vertex element is unsupported")
        names.append(p[2])
    for axis in ("x", "y", "z"):
        if axis not in names:
            raise ValueError(f"vertex element lacks property {axis!r}")
    if fmt == "ascii":
        rows = np.loadtxt(
            [fh.readline() for _ in range(count)], dtype=np.float64, ndmin=2
        )
        data = {name: rows[:, i] for i, name in enumerate(names)}
    else:
        dtype = np.dtype([(p[2], "<" + _PLY_TYPES[p[1]]) for p in props])
        raw = np.frombuffer(fh.read(dtype.itemsize * count), dtype=dtype, count=count)
        data = {name: raw[name] for name in names}
    return np.column_stack([data["x"], data["y"], data["z"]]).astype(np.float64)


def _skip_ply_element(fh, fmt, count, props):
    if fmt == "ascii":
        for _ in range(count):
            fh.readline()
        return
    fixed = all(p[0] == "scalar" for p in props)
    if fixed:
        size = sum(np.dtype(_PLY_TYPES[p[1]]).itemsize for p in props)
        fh.read(size * count)
        return
    for _ in range(count):
        for p in props:
            if p[0] == "scalar":
                fh.read(np.dtype(_PLY_TYPES[p[1]]).itemsize)
            else:
                ct = np.dtype(_PLY_TYPES[p[1]])
                (m,) = np.frombuffer(fh.read(ct.itemsize), dtype="<" + _PLY_TYPES[p[1]])
                fh.read(int(m) * np.dtype(_PLY_TYPES[p[2]]).itemsize)
