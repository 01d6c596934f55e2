"""End-to-end acceptance gate.

Each test pins one release criterion with an explicit tolerance and time
budget; module-level details live in the per-module test files.
"""

import filecmp
import itertools
import time

import numpy as np
import pytest

from skelgen.autodiff import Tensor, layer_norm, linear, mse
from skelgen.cli import main
from skelgen.diffusion import (
    GuidanceConfig,
    cfg_score,
    delta_score,
    gaussian_score,
    NoiseSchedule,
    ode_step_heun,
    sample_latents,
    schedule_sigmas,
)
from skelgen.marching import marching_cubes
from skelgen.mesh import make_cylinder, make_icosphere, make_torus, sample_surface, save_obj
from skelgen.metrics import (
    FeatureSet,
    chamfer,
    emd_detail,
    f1_score,
    frechet_feature_distance,
    hausdorff,
    nna_1,
)
from skelgen.nn import (
    NetConfig,
    attention,
    decode,
    fusion_block,
    init_decoder_params,
    query_group_maxpool,
)
from skelgen.pointcloud import PointCloud
from skelgen.sdf import assemble_sparse_volume, mesh_to_sdf, skeleton_guided_mask, voxel_centers
from skelgen.skeleton import (
    AssignmentFlipError,
    SkeletonizeConfig,
    skeletonize,
    skeletonize_jacobian_check,
)
from conftest import finite_difference_max_rel_error


class Budget:
    def __init__(self, seconds):
        self.seconds = seconds

    def __enter__(self):
        self.start = time.monotonic()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.monotonic() - self.start
        if exc[0] is None:
            assert self.elapsed < self.seconds, f"took {self.elapsed:.1f}s, budget {self.seconds}s"


def test_skeleton_recovers_cylinder_axis_and_radius():
    with Budget(5):
        mesh = make_cylinder(radius=0.1, length=1.6)
        pc = PointCloud(sample_surface(mesh, 2048, seed=0))
        cfg = SkeletonizeConfig(n_s=16, iterations=2, k_neighbors=32, hierarchical=True)
        skel = skeletonize(pc, cfg)
        off_axis = np.linalg.norm(skel.points[:, :2], axis=1)
        assert off_axis.max() < 0.03
        assert np.all(np.abs(skel.radii - 0.1) <= 0.3 * 0.1)


def test_gradients_match_finite_differences_everywhere():
    with Budget(60):
        tol = 1e-6
        # frozen-assignment skeletonization JVP on >= 3 instances
        rng = np.random.default_rng(0)
        checked = 0
        for seed in range(8):
            mesh = make_cylinder(radius=0.1, length=1.6)
            pc = PointCloud(sample_surface(mesh, 256, seed=seed))
            direction = rng.standard_normal(pc.points.shape)
            for step in (1e-5, 1e-6, 1e-7):
                try:
                    err = skeletonize_jacobian_check(pc, SkeletonizeConfig(n_s=8), direction, step=step)
                except AssignmentFlipError:
                    continue
                assert err < tol
                checked += 1
                break
            if checked >= 3:
                break
        assert checked >= 3

        # network primitives on 3 random instances each
        cfg = NetConfig(widths=(8, 8), k_levels=(4, 4), latent_dim=8, fusion_blocks=1, decoder_width=12, pe_dim=12)
        for seed in range(3):
            r = np.random.default_rng(seed)

            x = Tensor(r.standard_normal((6, 5)), requires_grad=True)
            w = Tensor(r.standard_normal((5, 4)), requires_grad=True)
            b = Tensor(r.standard_normal(4), requires_grad=True)
            assert finite_difference_max_rel_error(linear, [x, w, b], seed=seed) < tol

            g = Tensor(r.standard_normal(5), requires_grad=True)
            bb = Tensor(r.standard_normal(5), requires_grad=True)
            assert finite_difference_max_rel_error(layer_norm, [x, g, bb], seed=seed) < tol

            assert finite_difference_max_rel_error(lambda a: a.gelu(), [x], seed=seed) < tol
            assert finite_difference_max_rel_error(lambda a: a.softmax(axis=-1), [x], seed=seed) < tol
            assert finite_difference_max_rel_error(lambda a: mse(a, np.zeros((6, 5))), [x], seed=seed) < tol

            q = Tensor(r.standard_normal((4, 6)), requires_grad=True)
            k = Tensor(r.standard_normal((7, 6)), requires_grad=True)
            v = Tensor(r.standard_normal((7, 6)), requires_grad=True)
            assert finite_difference_max_rel_error(attention, [q, k, v], seed=seed) < tol

            surf = Tensor(r.standard_normal((15, 6)), requires_grad=True)
            skelf = Tensor(r.standard_normal((4, 6)))
            assert finite_difference_max_rel_error(lambda f: query_group_maxpool(skelf, f, 3), [surf], seed=seed) < tol

            params = init_decoder_params(cfg, seed=seed)
            f_q = Tensor(r.standard_normal((5, cfg.decoder_width)), requires_grad=True)
            f_z = Tensor(r.standard_normal((4, cfg.decoder_width)), requires_grad=True)
            block_leaves = [f_q, f_z] + [params[key] for key in sorted(params) if key.startswith("dec.block0.")]
            assert (
                finite_difference_max_rel_error(
                    lambda fq, fz, *rest: fusion_block(fq, fz, params, "dec.block0"), block_leaves, seed=seed
                )
                < tol
            )

            latent = Tensor(r.standard_normal((4, cfg.latent_channels)), requires_grad=True)
            coords = r.standard_normal((6, 3)) * 0.3
            dec_leaves = [latent] + list(params.values())
            assert (
                finite_difference_max_rel_error(
                    lambda z, *rest: decode(z, coords, params, cfg), dec_leaves, seed=seed
                )
                < tol
            )


def test_field_round_trip_and_sparse_equivalence():
    with Budget(30):
        for mesh in (make_icosphere(0.5, 3), make_torus(), make_cylinder()):
            vol = mesh_to_sdf(mesh, 64)
            recon = marching_cubes(vol)
            dense = sample_surface(mesh, 20000, seed=0)
            assert chamfer(recon.vertices, dense, squared=False) < 2 * vol.spacing

        # sparse decoding at p=0.3 with fill -1 matches the full-volume mesh
        # bit for bit once the mask covers the band around the surface
        mesh = make_icosphere(0.35, 3)
        vol = mesh_to_sdf(mesh, 48, padding=0.65)  # small shape in a roomy grid
        pc = PointCloud(sample_surface(mesh, 512, seed=0))
        skel = skeletonize(pc, SkeletonizeConfig(n_s=16))
        mask = skeleton_guided_mask(vol.dims, vol.origin, vol.spacing, skel, 0.3)
        band = np.nonzero(vol.values > -2 * vol.spacing)[0]
        assert np.isin(band, mask).all(), "mask must cover the surface band"
        sparse = assemble_sparse_volume(vol.dims, vol.origin, vol.spacing, mask, vol.values[mask], fill=-1.0)
        full_mesh = marching_cubes(vol)
        sparse_mesh = marching_cubes(sparse)
        assert np.array_equal(full_mesh.vertices, sparse_mesh.vertices)
        assert np.array_equal(full_mesh.triangles, sparse_mesh.triangles)


def test_diffusion_sampler_statistics_and_order():
    with Budget(60):
        sched = NoiseSchedule(steps=32)
        # delta data distribution: every sample collapses onto mu
        mu = np.random.default_rng(0).standard_normal((8, 6))
        for z in sample_latents(delta_score(mu), 8, 6, sched, count=8, seed=0):
            assert np.abs(z - mu).max() < 1e-2

        # Gaussian data distribution: moments recovered from 4096 draws
        # (the score is elementwise, so one big state integrates 4096
        # independent scalar samples in a single pass)
        mu_val, s = 0.7, 0.5
        big_mu = np.full((4096, 2), mu_val)
        draws = sample_latents(gaussian_score(big_mu, s), 4096, 2, sched, count=1, seed=1)[0]
        assert abs(draws.mean() - mu_val) < 0.05 * abs(mu_val)
        assert abs(draws.var() - s * s) < 0.10 * s * s

        # empirical convergence order >= 1.8 under step halving
        score = gaussian_score(np.array([[1.0, -2.0]]), 0.5)

        def integrate(steps):
            sig = np.linspace(4.0, 1.0, steps + 1)
            state = np.array([[3.0, 3.0]])
            for a, b in zip(sig[:-1], sig[1:]):
                state = ode_step_heun(state, a, b, score)
            return state

        ref = integrate(4096)
        errors = [np.abs(integrate(n) - ref).max() for n in (8, 16, 32, 64)]
        orders = np.log2(np.array(errors[:-1]) / np.array(errors[1:]))
        assert np.all(orders >= 1.8), orders


def test_guidance_algebra():
    state = np.zeros((1, 1))

    def score(z, sigma, c):
        return np.full_like(z, 2.0 if c is not None else 1.0)

    # w = 0 equals the selected single branch exactly
    for convention, expected in (("standard", 2.0), ("as-paper", 1.0)):
        out = cfg_score(score, state, 1.0, c=0, cfg=GuidanceConfig(w=0.0, convention=convention))
        assert out[0, 0] == expected

    # worked example: theta(empty)=1, theta(c)=2, w=1
    std = cfg_score(score, state, 1.0, c=0, cfg=GuidanceConfig(w=1.0, convention="standard"))
    paper = cfg_score(score, state, 1.0, c=0, cfg=GuidanceConfig(w=1.0, convention="as-paper"))
    assert std[0, 0] == 3.0
    assert paper[0, 0] == 0.0


def test_metric_oracles():
    with Budget(300):
        # EMD exact solver vs brute force over all 8! matchings, 20 trials
        for trial in range(20):
            rng = np.random.default_rng(trial)
            a = rng.standard_normal((8, 3))
            b = rng.standard_normal((8, 3))
            d = np.sqrt(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1))
            best = min(d[range(8), perm].mean() for perm in itertools.permutations(range(8)))
            result = emd_detail(a, b)
            assert result.exact
            assert abs(result.value - best) < 1e-12

        # CD / HD / F1 vs double-loop oracles
        rng = np.random.default_rng(99)
        a = rng.standard_normal((50, 3))
        b = rng.standard_normal((40, 3))
        d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(-1)
        d = np.sqrt(d2)
        assert abs(chamfer(a, b) - (d2.min(axis=1).mean() + d2.min(axis=0).mean())) < 1e-12
        assert abs(hausdorff(a, b) - max(d.min(axis=1).max(), d.min(axis=0).max())) < 1e-12
        tau = 1.5
        precision = (d.min(axis=1) < tau).mean()
        recall = (d.min(axis=0) < tau).mean()
        oracle_f1 = 100.0 * 2 * precision * recall / (precision + recall)
        assert abs(f1_score(a, b, tau) - oracle_f1) < 1e-12

        # 1-NNA on same-distribution sets hovers at chance over 100 trials
        scores = []
        for trial in range(100):
            rng = np.random.default_rng(1000 + trial)
            gen = [rng.standard_normal((64, 3)) for _ in range(10)]
            ref = [rng.standard_normal((64, 3)) for _ in range(10)]
            scores.append(nna_1(gen, ref, "cd"))
        assert 45.0 <= np.mean(scores) <= 55.0

        # Frechet distance, 1-D closed form: N(0,1) vs N(1,1) -> 1.0
        rng = np.random.default_rng(7)
        fa = FeatureSet(rng.normal(0.0, 1.0, (100000, 1)))
        fb = FeatureSet(rng.normal(1.0, 1.0, (100000, 1)))
        assert frechet_feature_distance(fa, fb) == pytest.approx(1.0, abs=0.03)


def test_toy_pipeline_reconstructs_sphere(tmp_path):
    with Budget(600):
        mesh_path = tmp_path / "sphere.obj"
        save_obj(mesh_path, make_icosphere(0.7, 3))
        data = tmp_path / "data"
        run = tmp_path / "run"
        recon = tmp_path / "recon"
        report = tmp_path / "eval"
        assert main(["build-sdf", str(mesh_path), "--out", str(data), "--profile", "toy"]) == 0
        assert main(["skeletonize", str(data / "cloud.xyz"), "--out", str(tmp_path / "skel"), "--profile", "toy"]) == 0
        assert main(
            ["train-toy", "--volume", str(data / "volume.msdf"), "--cloud", str(data / "cloud.xyz"),
             "--out", str(run), "--profile", "toy", "--steps", "300"]
        ) == 0
        losses = np.loadtxt(run / "loss.csv", delimiter=",", skiprows=1, ndmin=2)[:, 1]
        assert losses[-1] <= 0.5 * losses[0]
        assert main(
            ["reconstruct", "--checkpoint", str(run), "--volume", str(data / "volume.msdf"),
             "--cloud", str(data / "cloud.xyz"), "--transform", str(data / "transform.json"),
             "--out", str(recon), "--profile", "toy"]
        ) == 0
        assert main(
            ["eval-recon", "--recon", str(recon / "mesh.obj"), "--ref", str(mesh_path),
             "--out", str(report), "--tau", "0.06"]
        ) == 0
        rows = {
            line.split(",")[0]: line.split(",")[2]
            for line in (report / "recon_metrics.csv").read_text().splitlines()[1:]
            if not line.startswith("#")
        }
        assert float(rows["f1"]) >= 95.0


def test_cli_reruns_are_bitwise_identical(tmp_path):
    mesh_path = tmp_path / "sphere.obj"
    save_obj(mesh_path, make_icosphere(0.7, 2))

    def run_all(root):
        data = root / "data"
        run = root / "run"
        assert main(["build-sdf", str(mesh_path), "--out", str(data), "--profile", "toy", "--points", "256"]) == 0
        assert main(["skeletonize", str(data / "cloud.xyz"), "--out", str(root / "skel"), "--n-s", "8"]) == 0
        assert main(
            ["train-toy", "--volume", str(data / "volume.msdf"), "--cloud", str(data / "cloud.xyz"),
             "--out", str(run), "--profile", "toy", "--steps", "20"]
        ) == 0
        assert main(
            ["reconstruct", "--checkpoint", str(run), "--volume", str(data / "volume.msdf"),
             "--cloud", str(data / "cloud.xyz"), "--out", str(root / "recon")]
        ) == 0
        assert main(
            ["sample", "--checkpoint", str(run), "--anchor", str(run / "latent.csv"),
             "--count", "1", "--p", "1.0", "--resolution", "24", "--out", str(root / "samp")]
        ) == 0
        assert main(
            ["eval-recon", "--recon", str(root / "recon" / "mesh.obj"), "--ref", str(data / "cloud.xyz"),
             "--points", "256", "--out", str(root / "eval")]
        ) == 0

    run_all(tmp_path / "first")
    run_all(tmp_path / "second")
    mismatches = []
    for path in sorted((tmp_path / "first").rglob("*")):
        if path.is_file():
            twin = tmp_path / "second" / path.relative_to(tmp_path / "first")
            if not filecmp.cmp(path, twin, shallow=False):
                mismatches.append(str(path.relative_to(tmp_path / "first")))
    assert not mismatches, f"outputs differ between reruns: {mismatches}"
