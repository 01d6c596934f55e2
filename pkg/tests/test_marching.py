import numpy as np

from skelgen.marching import marching_cubes
from skelgen.mesh import make_icosphere, make_torus
from skelgen.sdf import SdfVolume, mesh_to_sdf


def analytic_sphere_volume(radius=0.5, resolution=32, extent=1.6):
    spacing = extent / resolution
    origin = (-extent / 2 + spacing / 2,) * 3
    dims = (resolution, resolution, resolution)
    axes = [origin[i] + spacing * np.arange(resolution) for i in range(3)]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    values = radius - np.sqrt(x**2 + y**2 + z**2)
    return SdfVolume(dims=dims, origin=origin, spacing=spacing, values=values.ravel(order="F"))


def test_sphere_vertices_lie_on_radius():
    vol = analytic_sphere_volume()
    mesh = marching_cubes(vol)
    assert not mesh.is_empty
    r = np.linalg.norm(mesh.vertices, axis=1)
    assert np.max(np.abs(r - 0.5)) < vol.spacing / 2


def test_all_negative_field_gives_empty_mesh():
    vol = analytic_sphere_volume(radius=-1.0)
    mesh = marching_cubes(vol)
    assert mesh.is_empty


def test_iso_offset_shifts_extracted_radius():
    vol = analytic_sphere_volume()
    mesh = marching_cubes(vol, iso=0.1)
    r = np.linalg.norm(mesh.vertices, axis=1)
    assert np.max(np.abs(r - 0.4)) < vol.spacing / 2


def test_output_mesh_is_closed_on_smooth_input():
    for src in (make_icosphere(0.5, 3), make_torus()):
        vol = mesh_to_sdf(src, 32)
        mesh = marching_cubes(vol)
        edges = {}
        for tri in mesh.triangles:
            for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
                key = (min(a, b), max(a, b))
                edges[key] = edges.get(key, 0) + 1
        assert all(count == 2 for count in edges.values())


def test_deterministic_output():
    vol = mesh_to_sdf(make_icosphere(0.5, 2), 24)
    a = marching_cubes(vol)
    b = marching_cubes(vol)
    assert np.array_equal(a.vertices, b.vertices)
    assert np.array_equal(a.triangles, b.triangles)
