import numpy as np
import pytest

from skelgen.mesh import (
    NotWatertightError,
    TriangleMesh,
    load_obj,
    load_ply_mesh,
    make_box,
    make_icosphere,
    require_watertight,
    sample_surface,
    save_obj,
    save_ply_mesh,
)
from skelgen.pointcloud import PointCloud
from skelgen.sdf import (
    assemble_sparse_volume,
    load_volume,
    mesh_to_sdf,
    sample_training_coords,
    save_volume,
    skeleton_guided_mask,
    voxel_centers,
)
from skelgen.skeleton import Skeleton


def test_require_watertight_names_offending_edges():
    m = make_icosphere(0.5, 1)
    holey = TriangleMesh(m.vertices, m.triangles[:-1])
    with pytest.raises(NotWatertightError) as exc:
        require_watertight(holey)
    assert "-" in str(exc.value)  # edge endpoints like "3-17"


def test_sample_surface_lies_on_sphere_and_is_deterministic():
    m = make_icosphere(0.6, 3)
    a = sample_surface(m, 500, seed=1)
    b = sample_surface(m, 500, seed=1)
    assert np.array_equal(a, b)
    r = np.linalg.norm(a, axis=1)
    assert np.all(np.abs(r - 0.6) < 0.01)  # icosphere faceting error


def test_obj_round_trip(tmp_path):
    m = make_icosphere(0.5, 1)
    save_obj(tmp_path / "m.obj", m)
    back = load_obj(tmp_path / "m.obj")
    np.testing.assert_allclose(back.vertices, m.vertices, atol=1e-12)
    np.testing.assert_array_equal(back.triangles, m.triangles)


def test_ply_mesh_round_trip(tmp_path):
    m = make_icosphere(0.5, 1)
    save_ply_mesh(tmp_path / "m.ply", m)
    back = load_ply_mesh(tmp_path / "m.ply")
    np.testing.assert_allclose(back.vertices, m.vertices, atol=1e-6)
    np.testing.assert_array_equal(back.triangles, m.triangles)


def test_sdf_sign_convention_positive_inside():
    vol = mesh_to_sdf(make_icosphere(0.5, 2), 16)
    center = vol.value_at_index(8, 8, 8)
    corner = vol.value_at_index(0, 0, 0)
    assert center > 0
    assert corner < 0


def test_sdf_matches_analytic_sphere_distance():
    vol = mesh_to_sdf(make_icosphere(0.5, 3), 24)
    centers = vol.voxel_centers()
    analytic = 0.5 - np.linalg.norm(centers, axis=1)
    # tolerance covers icosphere faceting plus exact-vs-true surface gap
    assert np.max(np.abs(vol.values - analytic)) < 0.01


def test_sdf_box_exact_on_face_normals():
    vol = mesh_to_sdf(make_box((0.4, 0.4, 0.4)), 16)
    centers = vol.voxel_centers()
    on_axis = np.abs(centers[:, 1]) < 1e-9
    on_axis &= np.abs(centers[:, 2]) < 1e-9
    expected = 0.4 - np.abs(centers[on_axis, 0])
    np.testing.assert_allclose(vol.values[on_axis], expected, atol=1e-9)


def test_volume_round_trip_bitwise(tmp_path):
    vol = mesh_to_sdf(make_icosphere(0.5, 2), 12)
    save_volume(tmp_path / "v.msdf", vol)
    back = load_volume(tmp_path / "v.msdf")
    assert back.dims == vol.dims
    np.testing.assert_allclose(back.origin, vol.origin)
    assert back.spacing == pytest.approx(vol.spacing)
    assert np.array_equal(back.values.astype(np.float32), vol.values.astype(np.float32))


def test_training_coords_respect_band_fraction():
    vol = mesh_to_sdf(make_icosphere(0.5, 2), 16)
    batch = sample_training_coords(vol, 100, trunc=0.1, inside_frac=0.9, seed=0)
    in_band = np.abs(batch.values) <= 0.1
    assert in_band[:90].all()
    assert (~in_band[90:]).all()
    again = sample_training_coords(vol, 100, trunc=0.1, inside_frac=0.9, seed=0)
    assert np.array_equal(batch.coords, again.coords)


def test_skeleton_mask_size_sorted_and_nearest():
    dims = (8, 8, 8)
    origin = (-0.7, -0.7, -0.7)
    spacing = 0.2
    skel = Skeleton(points=np.array([[0.0, 0.0, 0.0]]), radii=np.array([0.1]))
    mask = skeleton_guided_mask(dims, origin, spacing, skel, 0.25)
    assert mask.size == int(np.ceil(0.25 * 512))
    assert np.all(np.diff(mask) > 0)
    d = np.linalg.norm(voxel_centers(dims, origin, spacing), axis=1)
    # every selected voxel is at least as close as every unselected one
    unselected = np.setdiff1d(np.arange(512), mask)
    assert d[mask].max() <= d[unselected].min() + 1e-12


def test_assemble_sparse_volume_places_values_and_fill():
    dims = (4, 4, 4)
    mask = np.array([0, 7, 63])
    vol = assemble_sparse_volume(dims, (0, 0, 0), 0.1, mask, np.array([1.0, 2.0, 3.0]), fill=-1.0)
    assert vol.values[0] == 1.0 and vol.values[7] == 2.0 and vol.values[63] == 3.0
    others = np.setdiff1d(np.arange(64), mask)
    assert np.all(vol.values[others] == -1.0)


def test_assemble_sparse_volume_rejects_out_of_range():
    with pytest.raises(ValueError):
        assemble_sparse_volume((2, 2, 2), (0, 0, 0), 0.1, np.array([8]), np.array([1.0]))
