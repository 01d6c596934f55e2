"""Classic table-driven marching cubes with linear edge interpolation.

Deterministic: cells are visited in voxel-index order (x fastest) and
vertices are deduplicated on shared grid edges, so output ordering is
independent of any traversal parallelism. With the positive-inside sign
convention, triangle winding makes normals point toward decreasing
values, i.e. outward.
"""

from __future__ import annotations

import numpy as np

from skelgen._mc_tables import EDGE_TABLE, TRI_TABLE
from skelgen.mesh import TriangleMesh
from skelgen.sdf import SdfVolume

# Cube corner offsets, matching the table convention (corner 0 at the cell
# origin, corners 0-3 in the z=0 face, 4-7 above them).
_CORNERS = np.array(
    [
        (0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0),
        (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1),
    ],
    dtype=np.int64,
)

# Edge id -> (corner, corner) endpoints.
_EDGE_ENDS = [
    (0, 1), (1, 2), (2, 3), (3, 0),
    (4, 5), (5, 6), (6, 7), (7, 4),
    (0, 4), (1, 5), (2, 6), (3, 7),
]

# Canonical grid-edge key per cube edge: (corner owning the lower end, axis).
_EDGE_CANONICAL = [
    (0, 0), (1, 1), (3, 0), (0, 1),
    (4, 0), (5, 1), (7, 0), (4, 1),
    (0, 2), (1, 2), (2, 2), (3, 2),
]


def marching_cubes(vol: SdfVolume, iso: float = 0.0) -> TriangleMesh:
    """Extract the iso-surface of a volume as a triangle mesh.

    A uniform-sign volume yields an empty mesh.
    """
    grid = vol.grid
    nx, ny, nz = vol.dims
    if min(nx, ny, nz) < 2:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    below = grid < iso
    # Case index per cell, bit i set when corner i is below iso.
    case = np.zeros((nx - 1, ny - 1, nz - 1), dtype=np.uint16)
    for bit, (dx, dy, dz) in enumerate(_CORNERS):
        case |= below[dx : nx - 1 + dx, dy : ny - 1 + dy, dz : nz - 1 + dz].astype(np.uint16) << bit
    active = (case != 0) & (case != 255)
    # nonzero on the transposed view yields cells in voxel-index order (x fastest)
    az, ay, ax = np.nonzero(active.transpose(2, 1, 0))

    verts: list[np.ndarray] = []
    vert_ids: dict[tuple[int, int, int, int], int] = {}
    faces: list[tuple[int, int, int]] = []
    origin = np.asarray(vol.origin)
    spacing = vol.spacing

    for cz, cy, cx in zip(az, ay, ax):
        idx = int(case[cx, cy, cz])
        edge_mask = EDGE_TABLE[idx]
        if edge_mask == 0:
            continue
        cell = np.array((cx, cy, cz), dtype=np.int64)
        corner_vals = [float(grid[cx + d[0], cy + d[1], cz + d[2]]) for d in _CORNERS]
        edge_vertex = {}
        for e in range(12):
            if not edge_mask & (1 << e):
                continue
            own, axis = _EDGE_CANONICAL[e]
            base = cell + _CORNERS[own]
            key = (int(base[0]), int(base[1]), int(base[2]), axis)
            if key in vert_ids:
                edge_vertex[e] = vert_ids[key]
                continue
            c0, c1 = _EDGE_ENDS[e]
            other = c1 if c0 == own else c0
            # Interpolate from the canonical lower grid corner so the vertex is
            # bitwise identical no matter which adjacent cell emits it first.
            v_lo = corner_vals[own]
            v_hi = corner_vals[other]
            p_lo = origin + spacing * (cell + _CORNERS[own])
            p_hi = origin + spacing * (cell + _CORNERS[other])
            t = 0.0 if v_hi == v_lo else (iso - v_lo) / (v_hi - v_lo)
            point = p_lo + t * (p_hi - p_lo)
            vert_ids[key] = len(verts)
            verts.append(point)
            edge_vertex[e] = vert_ids[key]
        row = TRI_TABLE[idx]
        for k in range(0, 16, 3):
            if row[k] < 0:
                break
            tri = (edge_vertex[row[k]], edge_vertex[row[k + 1]], edge_vertex[row[k + 2]])
            if tri[0] == tri[1] or tri[1] == tri[2] or tri[0] == tri[2]:
                continue
            faces.append(tri)

    if not faces:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    vert_arr = np.asarray(verts)
    face_arr = np.asarray(faces, dtype=np.int64)
    # Drop zero-area slivers produced when iso passes exactly through corners.
    a = vert_arr[face_arr[:, 0]]
    b = vert_arr[face_arr[:, 1]]
    c = vert_arr[face_arr[:, 2]]
    areas = np.linalg.norm(np.cross(b - a, c - a), axis=1)
    face_arr = face_arr[areas > 0.0]
    return TriangleMesh(vert_arr, face_arr)
