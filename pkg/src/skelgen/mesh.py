"""Triangle meshes: containers, watertightness, I/O, and test primitives."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np


class NotWatertightError(ValueError):
    """Mesh has boundary or non-manifold edges; carries the offending edges."""

    def __init__(self, edges):
        self.edges = edges
        preview = ", ".join(f"{a}-{b}" for a, b in edges[:8])
        more = "" if len(edges) <= 8 else f" (+{len(edges) - 8} more)"
        super().__init__(f"mesh is not watertight; offending edges: {preview}{more}")


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray  # (V, 3) float64
    triangles: np.ndarray  # (T, 3) int64

    def __post_init__(self):
        verts = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        tris = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        object.__setattr__(self, "vertices", verts)
        object.__setattr__(self, "triangles", tris)
        if tris.size and (tris.min() < 0 or tris.max() >= len(verts)):
            raise ValueError("triangle index out of range")
        if tris.size:
            a, b, c = (verts[tris[:, i]] for i in range(3))
            areas = np.linalg.norm(np.cross(b - a, c - a), axis=1)
            if np.any(areas == 0.0):
                raise ValueError("mesh contains zero-area triangles")

    def __len__(self) -> int:
        return self.triangles.shape[0]

    @property
    def is_empty(self) -> bool:
        return self.triangles.shape[0] == 0


def boundary_edges(mesh: TriangleMesh) -> list[tuple[int, int]]:
    """Undirected edges not shared by exactly two triangles."""
    tris = mesh.triangles
    edges = np.concatenate([tris[:, [0, 1]], tris[:, [1, 2]], tris[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    uniq, counts = np.unique(edges, axis=0, return_counts=True)
    bad = uniq[counts != 2]
    return [tuple(int(v) for v in e) for e in bad]


def is_watertight(mesh: TriangleMesh) -> bool:
    return not mesh.is_empty and not boundary_edges(mesh)


def require_watertight(mesh: TriangleMesh) -> None:
    bad = boundary_edges(mesh) if not mesh.is_empty else [(0, 0)]
    if bad:
        raise NotWatertightError(bad)


def sample_surface(mesh: TriangleMesh, n: int, seed: int = 0) -> np.ndarray:
    """Uniform area-weighted surface samples, deterministic per seed."""
    rng = np.random.default_rng(seed)
    a = mesh.vertices[mesh.triangles[:, 0]]
    b = mesh.vertices[mesh.triangles[:, 1]]
    c = mesh.vertices[mesh.triangles[:, 2]]
    areas = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    choice = rng.choice(len(mesh), size=n, p=areas / areas.sum())
    u = rng.random(n)
    v = rng.random(n)
    flip = u + v > 1.0
    u[flip] = 1.0 - u[flip]
    v[flip] = 1.0 - v[flip]
    return a[choice] + u[:, None] * (b[choice] - a[choice]) + v[:, None] * (c[choice] - a[choice])


# ---------------------------------------------------------------------------
# Primitive generators (used by tests and the demo pipeline)


def make_icosphere(radius: float = 1.0, subdivisions: int = 3, center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    """Subdivided icosahedron projected onto a sphere; watertight."""
    phi = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    verts = list(verts / np.linalg.norm(verts, axis=1, keepdims=True))
    cache: dict[tuple[int, int], int] = {}

    def midpoint(i, j):
        key = (min(i, j), max(i, j))
        if key not in cache:
            m = verts[i] + verts[j]
            verts.append(m / np.linalg.norm(m))
            cache[key] = len(verts) - 1
        return cache[key]

    for _ in range(subdivisions):
        new_faces = []
        for i, j, k in faces:
            ij, jk, ki = midpoint(i, j), midpoint(j, k), midpoint(k, i)
            new_faces += [(i, ij, ki), (j, jk, ij), (k, ki, jk), (ij, jk, ki)]
        faces = new_faces

    points = np.asarray(verts) * radius + np.asarray(center)
    return TriangleMesh(points, np.asarray(faces, dtype=np.int64))


def make_torus(major: float = 0.6, minor: float = 0.25, n_major: int = 48, n_minor: int = 24) -> TriangleMesh:
    u = 2 * np.pi * np.arange(n_major) / n_major
    v = 2 * np.pi * np.arange(n_minor) / n_minor
    uu, vv = np.meshgrid(u, v, indexing="ij")
    x = (major + minor * np.cos(vv)) * np.cos(uu)
    y = (major + minor * np.cos(vv)) * np.sin(uu)
    z = minor * np.sin(vv)
    verts = np.column_stack([x.ravel(), y.ravel(), z.ravel()])
    faces = []
    for i in range(n_major):
        for j in range(n_minor):
            a = i * n_minor + j
            b = ((i + 1) % n_major) * n_minor + j
            c = ((i + 1) % n_major) * n_minor + (j + 1) % n_minor
            d = i * n_minor + (j + 1) % n_minor
            faces += [(a, b, c), (a, c, d)]
    return TriangleMesh(verts, np.asarray(faces, dtype=np.int64))


def make_cylinder(radius: float = 0.3, length: float = 1.2, n_seg: int = 48, n_rings: int = 24) -> TriangleMesh:
    """Closed cylinder along z, centered at the origin; watertight."""
    theta = 2 * np.pi * np.arange(n_seg) / n_seg
    zs = np.linspace(-length / 2, length / 2, n_rings + 1)
    verts = []
    for z in zs:
        for t in theta:
            verts.append((radius * np.cos(t), radius * np.sin(t), z))
    bottom_c = len(verts)
    verts.append((0.0, 0.0, -length / 2))
    top_c = len(verts)
    verts.append((0.0, 0.0, length / 2))
    faces = []
    for i in range(n_rings):
        for j in range(n_seg):
            a = i * n_seg + j
            b = i * n_seg + (j + 1) % n_seg
            c = (i + 1) * n_seg + (j + 1) % n_seg
            d = (i + 1) * n_seg + j
            faces += [(a, b, c), (a, c, d)]
    for j in range(n_seg):
        faces.append((bottom_c, (j + 1) % n_seg, j))
        top = n_rings * n_seg
        faces.append((top_c, top + j, top + (j + 1) % n_seg))
    return TriangleMesh(np.asarray(verts), np.asarray(faces, dtype=np.int64))


def make_box(half_extents=(0.5, 0.5, 0.5), center=(0.0, 0.0, 0.0)) -> TriangleMesh:
    hx, hy, hz = half_extents
    cx, cy, cz = center
    corners = np.array(
        [[sx * hx + cx, sy * hy + cy, sz * hz + cz]
         for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
        dtype=np.float64,
    )
    # Each quad split into two triangles, outward winding.
    quads = [
        (0, 1, 3, 2),  # -x
        (4, 6, 7, 5),  # +x
        (0, 4, 5, 1),  # -y
        (2, 3, 7, 6),  # +y
        (0, 2, 6, 4),  # -z
        (1, 5, 7, 3),  # +z
    ]
    faces = []
    for a, b, c, d in quads:
        faces += [(a, b, c), (a, c, d)]
    return TriangleMesh(corners, np.asarray(faces, dtype=np.int64))


def flip_triangles(mesh: TriangleMesh) -> TriangleMesh:
    return TriangleMesh(mesh.vertices, mesh.triangles[:, [0, 2, 1]])


# ---------------------------------------------------------------------------
# Mesh I/O


def save_obj(path, mesh: TriangleMesh) -> None:
    with open(path, "w") as fh:
        for v in mesh.vertices:
            fh.write(f"v {v[0]:.17g} {v[1]:.17g} {v[2]:.17g}\n")
        for t in mesh.triangles:
            fh.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")


def load_obj(path) -> TriangleMesh:
    verts = []
    faces = []
    with open(path) as fh:
        for line in fh:
            tokens = line.split()
            if not tokens:
                continue
            if tokens[0] == "v":
                verts.append([float(x) for x in tokens[1:4]])
            elif tokens[0] == "f":
                idx = [int(t.split("/")[0]) - 1 for t in tokens[1:]]
                for k in range(1, len(idx) - 1):  # fan-triangulate polygons
                    faces.append((idx[0], idx[k], idx[k + 1]))
    return TriangleMesh(np.asarray(verts, dtype=np.float64), np.asarray(faces, dtype=np.int64))


def save_ply_mesh(path, mesh: TriangleMesh) -> None:
    header = (
        "ply\n"
        "format binary_little_endian 1.0\n"
        f"element vertex {len(mesh.vertices)}\n"
        "property float32 x\n"
        "property float32 y\n"
        "property float32 z\n"
        f"element face {len(mesh.triangles)}\n"
        "property list uchar int32 vertex_indices\n"
        "end_header\n"
    )
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(mesh.vertices.astype("<f4").tobytes())
        for t in mesh.triangles:
            fh.write(struct.pack("<B3i", 3, t[0], t[1], t[2]))


def load_ply_mesh(path) -> TriangleMesh:
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"ply":
            raise ValueError(f"{path}: not a PLY file")
        counts = {}
        order = []
        while True:
            tokens = fh.readline().decode("ascii").split()
            if tokens[:1] == ["element"]:
                counts[tokens[1]] = int(tokens[2])
                order.append(tokens[1])
            elif tokens[:1] == ["end_header"]:
                break
        verts = np.frombuffer(fh.read(12 * counts["vertex"]), dtype="<f4").reshape(-1, 3)
        faces = []
        for _ in range(counts.get("face", 0)):
            (m,) = struct.unpack("<B", fh.read(1))
            idx = struct.unpack(f"<{m}i", fh.read(4 * m))
            for k in range(1, m - 1):
                faces.append((idx[0], idx[k], idx[k + 1]))
    return TriangleMesh(verts.astype(np.float64), np.asarray(faces, dtype=np.int64))
