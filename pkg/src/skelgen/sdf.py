"""Signed distance volumes: construction from watertight meshes, truncated
training-coordinate sampling, skeleton-guided sparse masks, and binary I/O.

Sign convention is positive inside the shape. Volumes store the full,
unclamped SDF; truncation only happens at sampling time.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from skelgen.mesh import TriangleMesh, require_watertight
from skelgen.skeleton import Skeleton

MSDF_MAGIC = b"MSDF"


@dataclass(frozen=True)
class SdfVolume:
    """Isotropic voxel grid of signed distances, x-fastest value ordering.

    `origin` is the coordinate of the center of voxel (0, 0, 0).
    """

    dims: tuple[int, int, int]
    origin: tuple[float, float, float]
    spacing: float
    values: np.ndarray  # flat (nx*ny*nz,), x-fastest

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64).ravel()
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))
        object.__setattr__(self, "spacing", float(self.spacing))
        object.__setattr__(self, "values", vals)
        if self.spacing <= 0:
            raise ValueError("spacing must be positive")
        nx, ny, nz = self.dims
        if vals.shape != (nx * ny * nz,):
            raise ValueError("value count does not match dims")
        if not np.all(np.isfinite(vals)):
            raise ValueError("volume contains non-finite values")

    @property
    def grid(self) -> np.ndarray:
        """Values reshaped to [ix, iy, iz]."""
        return self.values.reshape(self.dims, order="F")

    def axes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return tuple(
            self.origin[a] + self.spacing * np.arange(self.dims[a]) for a in range(3)
        )

    def voxel_centers(self) -> np.ndarray:
        """All voxel centers, flat x-fastest order, shape (N, 3)."""
        return voxel_centers(self.dims, self.origin, self.spacing)

    def value_at_index(self, ix: int, iy: int, iz: int) -> float:
        nx, ny, _ = self.dims
        return float(self.values[ix + nx * (iy + ny * iz)])


def voxel_centers(dims, origin, spacing) -> np.ndarray:
    nx, ny, nz = dims
    ax = origin[0] + spacing * np.arange(nx)
    ay = origin[1] + spacing * np.arange(ny)
    az = origin[2] + spacing * np.arange(nz)
    gx, gy, gz = np.meshgrid(ax, ay, az, indexing="ij")
    return np.column_stack(
        [gx.ravel(order="F"), gy.ravel(order="F"), gz.ravel(order="F")]
    )


@dataclass(frozen=True)
class SdfSampleBatch:
    coords: np.ndarray  # (m, 3)
    values: np.ndarray  # (m,)

    def __post_init__(self):
        object.__setattr__(self, "coords", np.asarray(self.coords, dtype=np.float64))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        if self.coords.shape[0] != self.values.shape[0]:
            raise ValueError("coords and values must have equal length")

    def __len__(self) -> int:
        return self.values.shape[0]


# ---------------------------------------------------------------------------
# Exact point-to-mesh distance


def _closest_dist2_to_triangles(points: np.ndarray, a, b, c) -> np.ndarray:
    """Exact squared point-triangle distances, shape (m, t).

    Vectorized closest-point-on-triangle (region classification on
    barycentric coordinates).
    """
    p = points[:, None, :]
    ab = (b - a)[None, :, :]
    ac = (c - a)[None, :, :]
    ap = p - a[None, :, :]

    d1 = np.sum(ab * ap, axis=2)
    d2 = np.sum(ac * ap, axis=2)
    bp = p - b[None, :, :]
    d3 = np.sum(ab * bp, axis=2)
    d4 = np.sum(ac * bp, axis=2)
    cp = p - c[None, :, :]
    d5 = np.sum(ab * cp, axis=2)
    d6 = np.sum(ac * cp, axis=2)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2
    denom = va + vb + vc
    with np.errstate(divide="ignore", invalid="ignore"):
        v = np.where(denom != 0, vb / denom, 0.0)
        w = np.where(denom != 0, vc / denom, 0.0)
        v_ab = np.where(d1 - d3 != 0, d1 / (d1 - d3), 0.0)
        w_ac = np.where(d2 - d6 != 0, d2 / (d2 - d6), 0.0)
        t_bc = np.where((d4 - d3) + (d5 - d6) != 0, (d4 - d3) / ((d4 - d3) + (d5 - d6)), 0.0)

    # Interior by default, then overwrite edge/vertex regions.
    v = np.clip(v, 0.0, 1.0)
    w = np.clip(w, 0.0, 1.0)

    region_a = (d1 <= 0) & (d2 <= 0)
    region_b = (d3 >= 0) & (d4 <= d3)
    region_c = (d6 >= 0) & (d5 <= d6)
    edge_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    edge_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    edge_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)

    v = np.where(edge_bc, 1.0 - t_bc, v)
    w = np.where(edge_bc, t_bc, w)
    v = np.where(edge_ac, 0.0, v)
    w = np.where(edge_ac, np.clip(w_ac, 0.0, 1.0), w)
    v = np.where(edge_ab, np.clip(v_ab, 0.0, 1.0), v)
    w = np.where(edge_ab, 0.0, w)
    v = np.where(region_c, 0.0, v)
    w = np.where(region_c, 1.0, w)
    v = np.where(region_b, 1.0, v)
    w = np.where(region_b, 0.0, w)
    v = np.where(region_a, 0.0, v)
    w = np.where(region_a, 0.0, w)

    closest = a[None, :, :] + v[:, :, None] * ab + w[:, :, None] * ac
    diff = p - closest
    return np.sum(diff * diff, axis=2)


try:  # scalar kernel is ~30x faster under numba; numpy path is the fallback
    from numba import njit as _njit

    @_njit(cache=True, fastmath=False)
    def _min_dist2_kernel(points, a, b, c, out):  # pragma: no cover - jitted
        for i in range(points.shape[0]):
            px, py, pz = points[i, 0], points[i, 1], points[i, 2]
            best = np.inf
            for t in range(a.shape[0]):
                ax, ay, az = a[t, 0], a[t, 1], a[t, 2]
                abx, aby, abz = b[t, 0] - ax, b[t, 1] - ay, b[t, 2] - az
                acx, acy, acz = c[t, 0] - ax, c[t, 1] - ay, c[t, 2] - az
                apx, apy, apz = px - ax, py - ay, pz - az
                d1 = abx * apx + aby * apy + abz * apz
                d2 = acx * apx + acy * apy + acz * apz
                if d1 <= 0.0 and d2 <= 0.0:
                    v = 0.0
                    w = 0.0
                else:
                    bpx, bpy, bpz = px - b[t, 0], py - b[t, 1], pz - b[t, 2]
                    d3 = abx * bpx + aby * bpy + abz * bpz
                    d4 = acx * bpx + acy * bpy + acz * bpz
                    if d3 >= 0.0 and d4 <= d3:
                        v = 1.0
                        w = 0.0
                    else:
                        cpx, cpy, cpz = px - c[t, 0], py - c[t, 1], pz - c[t, 2]
                        d5 = abx * cpx + aby * cpy + abz * cpz
                        d6 = acx * cpx + acy * cpy + acz * cpz
                        if d6 >= 0.0 and d5 <= d6:
                            v = 0.0
                            w = 1.0
                        else:
                            vc = d1 * d4 - d3 * d2
                            if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
                                v = d1 / (d1 - d3)
                                w = 0.0
                            else:
                                vb = d5 * d2 - d1 * d6
                                if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
                                    v = 0.0
                                    w = d2 / (d2 - d6)
                                else:
                                    va = d3 * d6 - d5 * d4
                                    if va <= 0.0 and d4 - d3 >= 0.0 and d5 - d6 >= 0.0:
                                        tt = (d4 - d3) / ((d4 - d3) + (d5 - d6))
                                        v = 1.0 - tt
                                        w = tt
                                    else:
                                        denom = va + vb + vc
                                        v = vb / denom
                                        w = vc / denom
                qx = ax + v * abx + w * acx - px
                qy = ay + v * aby + w * acy - py
                qz = az + v * abz + w * acz - pz
                d2q = qx * qx + qy * qy + qz * qz
                if d2q < best:
                    best = d2q
            out[i] = best

except ImportError:  # pragma: no cover
    _min_dist2_kernel = None


def unsigned_distance(points: np.ndarray, mesh: TriangleMesh, cells: int = 12) -> np.ndarray:
    """Exact unsigned distance from each point to the triangle set.

    Points are grouped into spatial cells; a kd-tree over triangle
    centroids culls candidates per cell, and the survivors get the exact
    point-triangle distance test.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    tris = mesh.triangles
    a = mesh.vertices[tris[:, 0]]
    b = mesh.vertices[tris[:, 1]]
    c = mesh.vertices[tris[:, 2]]
    centroids = (a + b + c) / 3.0
    tri_radius = np.sqrt(
        np.maximum.reduce([np.sum((v - centroids) ** 2, axis=1) for v in (a, b, c)])
    )
    r_max = float(tri_radius.max())
    tree = cKDTree(centroids)

    lo = points.min(axis=0)
    span = points.max(axis=0) - lo
    cell_size = max(float(span.max()) / cells, np.finfo(np.float64).tiny)
    cell_of = np.minimum((points - lo) // cell_size, cells - 1).astype(np.int64)
    cell_id = cell_of[:, 0] + cells * (cell_of[:, 1] + cells * cell_of[:, 2])
    order = np.argsort(cell_id, kind="stable")
    boundaries = np.nonzero(np.diff(cell_id[order]))[0] + 1
    groups = np.split(order, boundaries)

    out = np.empty(points.shape[0])
    for grp in groups:
        pts = points[grp]
        bc = (pts.min(axis=0) + pts.max(axis=0)) / 2.0
        br = float(np.sqrt(np.max(np.sum((pts - bc) ** 2, axis=1))))
        _, probe = tree.query(bc)
        u = float(
            np.sqrt(
                _closest_dist2_to_triangles(bc[None, :], a[[probe]], b[[probe]], c[[probe]])[0, 0]
            )
        ) + br
        cand = np.asarray(tree.query_ball_point(bc, u + br + r_max + 1e-12), dtype=np.int64)
        best = np.full(pts.shape[0], np.inf)
        if _min_dist2_kernel is not None:
            _min_dist2_kernel(pts, a[cand], b[cand], c[cand], best)
        else:
            for clo in range(0, cand.size, 1024):
                sel = cand[clo : clo + 1024]
                d2 = _closest_dist2_to_triangles(pts, a[sel], b[sel], c[sel])
                np.minimum(best, d2.min(axis=1), out=best)
        out[grp] = np.sqrt(best)
    return out


# ---------------------------------------------------------------------------
# Inside/outside classification by ray parity


def _parity_along_axis(dims, origin, spacing, mesh: TriangleMesh, axis: int):
    """Ray-parity inside test with rays along `axis` through voxel centers.

    Returns (inside: bool[dims], uncertain: bool over the two ray axes)
    where uncertain marks rays passing within ~1e-9 of a triangle edge or
    through a degenerate projection.
    """
    axes = [origin[a] + spacing * np.arange(dims[a]) for a in range(3)]
    a1, a2 = [a for a in range(3) if a != axis]
    n1, n2 = dims[a1], dims[a2]
    verts = mesh.vertices
    tris = mesh.triangles

    crossing_count = np.zeros(dims, dtype=np.int64)
    uncertain = np.zeros((n1, n2), dtype=bool)
    tol = 1e-9

    coords1 = axes[a1]
    coords2 = axes[a2]
    u_coords = axes[axis]

    for t in range(len(tris)):
        va, vb, vc = verts[tris[t, 0]], verts[tris[t, 1]], verts[tris[t, 2]]
        p0 = np.array([va[a1], va[a2]])
        e1 = np.array([vb[a1] - va[a1], vb[a2] - va[a2]])
        e2 = np.array([vc[a1] - va[a1], vc[a2] - va[a2]])
        lo1 = min(va[a1], vb[a1], vc[a1]) - tol
        hi1 = max(va[a1], vb[a1], vc[a1]) + tol
        lo2 = min(va[a2], vb[a2], vc[a2]) - tol
        hi2 = max(va[a2], vb[a2], vc[a2]) + tol
        i1 = np.nonzero((coords1 >= lo1) & (coords1 <= hi1))[0]
        i2 = np.nonzero((coords2 >= lo2) & (coords2 <= hi2))[0]
        if i1.size == 0 or i2.size == 0:
            continue
        det = e1[0] * e2[1] - e1[1] * e2[0]
        if abs(det) < 1e-14:
            uncertain[np.ix_(i1, i2)] = True
            continue
        g1 = coords1[i1][:, None] - p0[0]
        g2 = coords2[i2][None, :] - p0[1]
        s = (g1 * e2[1] - g2 * e2[0]) / det
        w = (e1[0] * g2 - e1[1] * g1) / det
        hit = (s >= -tol) & (w >= -tol) & (s + w <= 1.0 + tol)
        if not hit.any():
            continue
        near_edge = hit & (
            (np.abs(s) <= tol) | (np.abs(w) <= tol) | (np.abs(1.0 - s - w) <= tol)
        )
        if near_edge.any():
            r1, r2 = np.nonzero(near_edge)
            uncertain[i1[r1], i2[r2]] = True
        strict = (s > tol) & (w > tol) & (s + w < 1.0 - tol)
        r1, r2 = np.nonzero(strict)
        if r1.size == 0:
            continue
        u_cross = (
            va[axis]
            + s[r1, r2] * (vb[axis] - va[axis])
            + w[r1, r2] * (vc[axis] - va[axis])
        )
        for j1, j2, uc in zip(i1[r1], i2[r2], u_cross):
            col = u_coords < uc  # ray toward +axis: crossings ahead of the center
            sl = [slice(None)] * 3
            sl[axis] = col
            sl[a1] = j1
            sl[a2] = j2
            crossing_count[tuple(sl)] += 1
    return (crossing_count % 2).astype(bool), uncertain


def _inside_mask(dims, origin, spacing, mesh: TriangleMesh) -> np.ndarray:
    inside, uncertain = _parity_along_axis(dims, origin, spacing, mesh, axis=0)
    for fallback_axis in (1, 2):
        if not uncertain.any():
            break
        alt, alt_unc = _parity_along_axis(dims, origin, spacing, mesh, axis=fallback_axis)
        a1, a2 = [a for a in range(3) if a != 0]
        bad1, bad2 = np.nonzero(uncertain)
        still = np.zeros_like(uncertain)
        for j1, j2 in zip(bad1, bad2):
            fa1, fa2 = [a for a in range(3) if a != fallback_axis]
            # Replace every voxel of the uncertain x-ray with the fallback result
            # unless the fallback ray through it is itself uncertain.
            for ix in range(dims[0]):
                vox = [ix, j1, j2]
                key = (vox[fa1], vox[fa2])
                if alt_unc[key]:
                    still[j1, j2] = True
                else:
                    inside[ix, j1, j2] = alt[ix, j1, j2]
        uncertain = still
    return inside


def mesh_to_sdf(mesh: TriangleMesh, resolution: int, padding: float = 0.1) -> SdfVolume:
    """Sample the exact SDF of a watertight mesh on a cubic voxel grid.

    The grid covers the cubified bounding box of the mesh expanded by
    `padding` on every side. Positive values are inside the shape.
    """
    if resolution < 8:
        raise ValueError("resolution must be >= 8")
    require_watertight(mesh)
    lo = mesh.vertices.min(axis=0)
    hi = mesh.vertices.max(axis=0)
    center = (lo + hi) / 2.0
    extent = float(np.max(hi - lo)) + 2.0 * padding
    spacing = extent / resolution
    origin = tuple(center - extent / 2.0 + spacing / 2.0)
    dims = (resolution, resolution, resolution)

    centers = voxel_centers(dims, origin, spacing)
    dist = unsigned_distance(centers, mesh)
    inside = _inside_mask(dims, origin, spacing, mesh)
    sign = np.where(inside.ravel(order="F"), 1.0, -1.0)
    return SdfVolume(dims=dims, origin=origin, spacing=spacing, values=sign * dist)


# ---------------------------------------------------------------------------
# Coordinate sampling and sparse assembly


def sample_training_coords(
    vol: SdfVolume, m: int, trunc: float = 0.1, inside_frac: float = 0.9, seed: int = 0
) -> SdfSampleBatch:
    """Draw voxel-center training samples, mostly from the truncated band.

    ceil(inside_frac * m) samples come uniformly from voxels with
    |value| <= trunc, the remainder from the outside set; both with
    replacement, deterministic per seed.
    """
    truncated = np.nonzero(np.abs(vol.values) <= trunc)[0]
    if truncated.size == 0:
        raise ValueError("empty truncated region")
    far = np.nonzero(np.abs(vol.values) > trunc)[0]
    n_in = int(np.ceil(inside_frac * m))
    n_in = min(n_in, m)
    n_out = m - n_in
    if n_out > 0 and far.size == 0:
        raise ValueError("no voxels outside the truncated band to sample from")
    rng = np.random.default_rng(seed)
    picks = truncated[rng.integers(0, truncated.size, size=n_in)]
    if n_out > 0:
        picks = np.concatenate([picks, far[rng.integers(0, far.size, size=n_out)]])
    centers = vol.voxel_centers()
    return SdfSampleBatch(coords=centers[picks], values=vol.values[picks])


def skeleton_guided_mask(dims, origin, spacing, skeleton: Skeleton, p: float) -> np.ndarray:
    """Indices of the ceil(p*N) voxels closest to the skeleton, ascending.

    Distances are center-to-skeletal-point; ties break by lowest voxel
    index.
    """
    if not 0 < p <= 1:
        raise ValueError("p must lie in (0, 1]")
    if len(skeleton) == 0:
        raise ValueError("empty skeleton")
    centers = voxel_centers(dims, origin, spacing)
    d, _ = cKDTree(skeleton.points).query(centers)
    n_total = centers.shape[0]
    k = int(np.ceil(p * n_total))
    order = np.lexsort((np.arange(n_total), d))[:k]
    return np.sort(order)


def assemble_sparse_volume(dims, origin, spacing, mask, values, fill: float = -1.0) -> SdfVolume:
    """Build a volume whose masked voxels carry `values`; the rest get `fill`."""
    mask = np.asarray(mask, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    if mask.shape != values.shape:
        raise ValueError("mask and values must have equal length")
    n = int(np.prod(dims))
    if mask.size and (mask.min() < 0 or mask.max() >= n):
        raise ValueError("mask index out of range")
    vals = np.full(n, fill, dtype=np.float64)
    vals[mask] = values
    return SdfVolume(dims=dims, origin=origin, spacing=spacing, values=vals)


# ---------------------------------------------------------------------------
# Binary volume format


def save_volume(path, vol: SdfVolume) -> None:
    with open(path, "wb") as fh:
        fh.write(MSDF_MAGIC)
        fh.write(struct.pack("<B", 1))
        fh.write(struct.pack("<3I", *vol.dims))
        fh.write(struct.pack("<3f", *vol.origin))
        fh.write(struct.pack("<f", vol.spacing))
        fh.write(vol.values.astype("<f4").tobytes())


def load_volume(path) -> SdfVolume:
    with open(path, "rb") as fh:
        if fh.read(4) != MSDF_MAGIC:
            raise ValueError(f"{path}: bad magic")
        (version,) = struct.unpack("<B", fh.read(1))
        if version != 1:
            raise ValueError(f"{path}: unsupported version {version}")
        dims = struct.unpack("<3I", fh.read(12))
        origin = struct.unpack("<3f", fh.read(12))
        (spacing,) = struct.unpack("<f", fh.read(4))
        n = dims[0] * dims[1] * dims[2]
        values = np.frombuffer(fh.read(4 * n), dtype="<f4").astype(np.float64)
    return SdfVolume(dims=dims, origin=origin, spacing=spacing, values=values)
