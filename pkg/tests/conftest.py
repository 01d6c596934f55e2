import numpy as np
import pytest

from skelgen.autodiff import Tensor
from skelgen.mesh import make_icosphere, sample_surface
from skelgen.pointcloud import PointCloud, fps
from skelgen.sdf import mesh_to_sdf


@pytest.fixture(scope="session")
def sphere_mesh():
    return make_icosphere(radius=0.7, subdivisions=3)


@pytest.fixture(scope="session")
def sphere_cloud(sphere_mesh):
    dense = sample_surface(sphere_mesh, 2048, seed=0)
    pc = PointCloud(dense)
    return PointCloud(dense[fps(pc, 512)])


@pytest.fixture(scope="session")
def sphere_volume(sphere_mesh):
    return mesh_to_sdf(sphere_mesh, 32)


def finite_difference_max_rel_error(fn, tensors, seed=0, h=1e-6):
    """Max relative error between reverse-mode gradients and central finite
    differences of a scalar-valued function of Tensor leaves.

    `fn(*tensors) -> Tensor` may return any shape; it is reduced to a scalar
    through a fixed random probe so every output element contributes.
    """
    rng = np.random.default_rng(seed)
    out = fn(*tensors)
    probe = rng.standard_normal(out.data.shape)

    def scalar():
        return float((fn(*tensors) * Tensor(probe)).sum().data)

    for t in tensors:
        t.zero_grad()
    (fn(*tensors) * Tensor(probe)).sum().backward()

    worst = 0.0
    for t in tensors:
        if not t.requires_grad or t.grad is None:
            continue
        flat = t.data.ravel()
        # probe a handful of coordinates per leaf, not the full Jacobian
        picks = rng.choice(flat.size, size=min(6, flat.size), replace=False)
        for i in picks:
            orig = flat[i]
            flat[i] = orig + h
            up = scalar()
            flat[i] = orig - h
            down = scalar()
            flat[i] = orig
            fd = (up - down) / (2.0 * h)
            grad = t.grad.ravel()[i]
            rel = abs(grad - fd) / max(1.0, abs(fd))
            worst = max(worst, rel)
    return worst
