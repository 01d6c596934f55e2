"""Command-line pipeline: dataset construction, skeletonization, toy
training, reconstruction, sampling, and evaluation.

Exit codes: 0 success, 1 usage error, 2 input error, 3 numeric failure.
Every command is deterministic given its flags and --seed; outputs land
only under --out. A key=value config file can supply flag defaults
(explicit flags win). The SKELGEN_THREADS environment variable caps the
worker pool of the jitted kernels when present.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from skelgen import diffusion, metrics, nn, report
from skelgen.marching import marching_cubes
from skelgen.mesh import (
    NotWatertightError,
    TriangleMesh,
    load_obj,
    load_ply_mesh,
    require_watertight,
    sample_surface,
    save_obj,
)
from skelgen.pointcloud import (
    DegenerateCloudError,
    NormalizationTransform,
    PointCloud,
    fps,
    load_ply_points,
    load_xyz,
    normalize_unit_cube,
    save_xyz,
)
from skelgen.sdf import (
    assemble_sparse_volume,
    load_volume,
    mesh_to_sdf,
    save_volume,
    skeleton_guided_mask,
    voxel_centers,
)
from skelgen.skeleton import (
    SkeletonizeConfig,
    Skeleton,
    load_skeleton_csv,
    save_skeleton_csv,
    save_skeleton_ply,
    skeletonize,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_NUMERIC = 3

# Paper-derived flag bundles plus a desk-scale toy bundle.
PROFILES = {
    "general": {"points": 2560, "n_s": 256, "p": 0.3, "resolution": 100},
    "vessel": {"points": 4096, "n_s": 400, "p": 0.1, "resolution": 100},
    "toy": {"points": 512, "n_s": 16, "p": 1.0, "resolution": 32},
}


class UsageError(Exception):
    pass


class InputError(Exception):
    pass


class NumericError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _apply_threads_env():
    value = os.environ.get("SKELGEN_THREADS")
    if not value:
        return
    try:
        count = max(1, int(value))
    except ValueError:
        raise UsageError(f"SKELGEN_THREADS must be an integer, got {value!r}")
    try:
        import numba

        numba.set_num_threads(min(count, numba.config.NUMBA_NUM_THREADS))
    except ImportError:
        pass  # pure-numpy fallback is single threaded already


def _load_config_file(path) -> dict:
    if path is None:
        return {}
    if not Path(path).is_file():
        raise InputError(f"config file not found: {path}")
    values = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InputError(f"{path}:{lineno}: expected key=value")
            key, _, val = line.partition("=")
            values[key.strip().replace("-", "_")] = val.strip()
    return values


def _resolve(args, key, builtin, cast=None):
    """Flag > config file > profile > builtin default."""
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    config = getattr(args, "_config", {})
    if key in config:
        value = config[key]
        return cast(value) if cast else value
    profile = PROFILES.get(getattr(args, "profile", None) or "", {})
    if key in profile:
        return profile[key]
    return builtin


def _require_file(path, kind: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{kind} not found: {path}")
    return p


def _load_mesh(path) -> TriangleMesh:
    p = _require_file(path, "mesh file")
    if p.suffix.lower() == ".obj":
        return load_obj(p)
    if p.suffix.lower() == ".ply":
        return load_ply_mesh(p)
    raise InputError(f"unsupported mesh format: {path}")


def _load_cloud(path) -> PointCloud:
    p = _require_file(path, "point cloud file")
    if p.suffix.lower() == ".xyz":
        return load_xyz(p)
    if p.suffix.lower() == ".ply":
        return load_ply_points(p)
    raise InputError(f"unsupported point cloud format: {path}")


def _load_points_any(path, n_points: int, seed: int) -> PointCloud:
    """Protocol point set from a mesh (surface-sample then FPS) or a cloud
    (FPS directly)."""
    p = Path(path)
    if p.suffix.lower() == ".obj" or (p.suffix.lower() == ".ply" and _ply_has_faces(p)):
        mesh = _load_mesh(path)
        dense = sample_surface(mesh, 4 * n_points, seed=seed)
        return metrics.eval_protocol_subsample(PointCloud(dense), n_points)
    cloud = _load_cloud(path)
    if len(cloud) < n_points:
        raise InputError(f"{path}: has {len(cloud)} points, need {n_points}")
    return metrics.eval_protocol_subsample(cloud, n_points)


def _ply_has_faces(path) -> bool:
    with open(path, "rb") as fh:
        header = fh.read(2048).decode("ascii", errors="replace")
    return "element face" in header


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _split_params(params):
    enc = {k: v for k, v in params.items() if k.startswith("enc.")}
    dec = {k: v for k, v in params.items() if k.startswith("dec.")}
    return enc, dec


def _load_checkpoint(ckpt_dir):
    d = Path(ckpt_dir)
    if not d.is_dir():
        raise InputError(f"checkpoint directory not found: {ckpt_dir}")
    params = nn.load_params(_require_file(d / "checkpoint.sknn", "checkpoint"))
    cfg = nn.load_net_config(_require_file(d / "netconfig.cfg", "net config"))
    skel = load_skeleton_csv(_require_file(d / "skeleton.csv", "skeleton"))
    enc, dec = _split_params(params)
    return enc, dec, cfg, skel


def _reconstruct_mesh(latent, skel, dec, cfg, vol, p):
    mask = skeleton_guided_mask(vol.dims, vol.origin, vol.spacing, skel, p)
    coords = voxel_centers(vol.dims, vol.origin, vol.spacing)[mask]
    values = nn.decode(latent, coords, dec, cfg).data
    sparse = assemble_sparse_volume(vol.dims, vol.origin, vol.spacing, mask, values, fill=-1.0)
    return marching_cubes(sparse)


# ---------------------------------------------------------------------------
# Commands


def cmd_build_sdf(args) -> int:
    resolution = _resolve(args, "resolution", 100, int)
    points = _resolve(args, "points", 2560, int)
    trunc = _resolve(args, "trunc", 0.1, float)
    seed = _resolve(args, "seed", 0, int)
    if resolution < 8:
        raise UsageError("--resolution must be at least 8")
    if points < 1 or trunc <= 0:
        raise UsageError("--points must be positive and --trunc > 0")
    mesh = _load_mesh(args.mesh)
    try:
        require_watertight(mesh)
    except NotWatertightError as exc:
        raise InputError(f"{args.mesh}: {exc}")
    _, transform = normalize_unit_cube(PointCloud(mesh.vertices))
    norm_mesh = TriangleMesh(transform.apply(mesh.vertices), mesh.triangles)
    dense = sample_surface(norm_mesh, 4 * points, seed=seed)
    cloud = PointCloud(dense[fps(PointCloud(dense), points)])
    vol = mesh_to_sdf(norm_mesh, resolution)

    out = _out_dir(args)
    save_xyz(out / "cloud.xyz", cloud)
    save_volume(out / "volume.msdf", vol)
    with open(out / "transform.json", "w") as fh:
        json.dump({"scale": transform.scale, "offset": list(transform.offset), "trunc": trunc}, fh, indent=2)
        fh.write("\n")
    print(f"wrote cloud.xyz ({len(cloud)} points), volume.msdf ({resolution}^3), transform.json to {out}")
    return EXIT_OK


def cmd_skeletonize(args) -> int:
    n_s = _resolve(args, "n_s", 256, int)
    iters = _resolve(args, "iters", 2, int)
    k = _resolve(args, "k", 32, int)
    cloud = _load_cloud(args.cloud)
    needed = 4 * n_s if args.hierarchical else n_s
    if needed > len(cloud):
        raise InputError(f"cloud has {len(cloud)} points; need at least {needed} for n_s={n_s}" + (" (hierarchical)" if args.hierarchical else ""))
    cfg = SkeletonizeConfig(n_s=n_s, iterations=iters, k_neighbors=k, hierarchical=args.hierarchical)
    skel = skeletonize(cloud, cfg)
    out = _out_dir(args)
    save_skeleton_csv(out / "skeleton.csv", skel)
    save_skeleton_ply(out / "skeleton.ply", skel)
    print(f"wrote skeleton.csv, skeleton.ply ({len(skel)} points) to {out}")
    return EXIT_OK


def cmd_train_toy(args) -> int:
    steps = _resolve(args, "steps", 300, int)
    lr = _resolve(args, "lr", 5e-2, float)
    seed = _resolve(args, "seed", 0, int)
    n_s = _resolve(args, "n_s", 16, int)
    m = _resolve(args, "m", 512, int)
    trunc = _resolve(args, "trunc", 0.1, float)
    if not (1 <= n_s <= 32 and 1 <= m <= 512):
        raise UsageError("toy profile limits: 1 <= n_s <= 32 and 1 <= m <= 512")
    if steps < 1 or lr < 0:
        raise UsageError("--steps must be positive and --lr non-negative")
    vol = load_volume(_require_file(args.volume, "volume"))
    cloud = _load_cloud(args.cloud)
    if len(cloud) > 512:
        cloud = PointCloud(cloud.points[fps(cloud, 512)])
    try:
        result = nn.train_toy(vol, cloud, n_s=n_s, m=m, steps=steps, lr=lr, seed=seed, trunc=trunc)
    except nn.DivergenceError as exc:
        raise NumericError(str(exc))

    out = _out_dir(args)
    nn.save_params(out / "checkpoint.sknn", {**result.encoder, **result.decoder})
    nn.save_net_config(out / "netconfig.cfg", result.config)
    save_skeleton_csv(out / "skeleton.csv", result.skeleton)
    latent = nn.encode(cloud, result.skeleton, result.encoder, result.config)
    np.savetxt(out / "latent.csv", latent.data, delimiter=",", fmt="%.17g")
    report.save_loss_csv(out / "loss.csv", result.losses)
    report.render_loss_curve(out / "loss.png", result.losses)
    print(f"trained {steps} steps: loss {result.losses[0]:.6f} -> {result.losses[-1]:.6f}; wrote checkpoint + loss trace to {out}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    p = _resolve(args, "p", 1.0, float)
    if not 0 < p <= 1:
        raise UsageError("--p must lie in (0, 1]")
    enc, dec, cfg, skel = _load_checkpoint(args.checkpoint)
    vol = load_volume(_require_file(args.volume, "volume"))
    cloud = _load_cloud(args.cloud)
    if len(cloud) > 512:
        cloud = PointCloud(cloud.points[fps(cloud, 512)])
    latent = nn.encode(cloud, skel, enc, cfg)
    mesh = _reconstruct_mesh(latent, skel, dec, cfg, vol, p)
    if mesh.is_empty:
        raise NumericError("decoded field has no zero crossing; reconstruction is empty")
    if args.transform:
        with open(_require_file(args.transform, "transform file")) as fh:
            spec = json.load(fh)
        transform = NormalizationTransform(scale=spec["scale"], offset=np.asarray(spec["offset"]))
        mesh = TriangleMesh(transform.invert(mesh.vertices), mesh.triangles)
    out = _out_dir(args)
    save_obj(out / "mesh.obj", mesh)
    print(f"wrote mesh.obj ({len(mesh)} triangles) to {out}")
    return EXIT_OK


def cmd_sample(args) -> int:
    count = _resolve(args, "count", 4, int)
    seed = _resolve(args, "seed", 0, int)
    p = _resolve(args, "p", 0.3, float)
    resolution = _resolve(args, "resolution", 64, int)
    w = _resolve(args, "guidance_w", 0.0, float)
    convention = _resolve(args, "guidance_convention", "standard")
    sched = diffusion.NoiseSchedule(
        sigma_min=_resolve(args, "sigma_min", 0.002, float),
        sigma_max=_resolve(args, "sigma_max", 80.0, float),
        rho=_resolve(args, "rho", 7.0, float),
        steps=_resolve(args, "steps", 32, int),
    )
    if count < 0:
        raise UsageError("--count must be non-negative")
    if count == 0:
        print("count is 0; nothing to do")
        return EXIT_OK
    enc, dec, cfg, skel = _load_checkpoint(args.checkpoint)
    anchor = np.loadtxt(_require_file(args.anchor, "anchor latent"), delimiter=",", ndmin=2)
    if anchor.shape[1] != 4 + cfg.latent_dim:
        raise InputError(f"anchor latent has {anchor.shape[1]} channels, decoder expects {4 + cfg.latent_dim}")
    if args.score == "delta":
        score = diffusion.delta_score(anchor)
    else:
        score = diffusion.gaussian_score(anchor, _resolve(args, "spread", 0.05, float))
    guidance = diffusion.GuidanceConfig(w=w, convention=convention)
    latents = diffusion.sample_latents(
        score, anchor.shape[0], anchor.shape[1], sched, guidance, c=None, seed=seed, count=count
    )
    spacing = 2.0 / resolution
    origin = (-1.0 + spacing / 2,) * 3
    dims = (resolution, resolution, resolution)

    out = _out_dir(args)
    failures = []
    for index, latent in enumerate(latents):
        sample_skel = Skeleton(points=latent[:, :3], radii=latent[:, 3])
        mask = skeleton_guided_mask(dims, origin, spacing, sample_skel, p)
        coords = voxel_centers(dims, origin, spacing)[mask]
        values = nn.decode(latent, coords, dec, cfg).data
        sparse = assemble_sparse_volume(dims, origin, spacing, mask, values, fill=-1.0)
        mesh = marching_cubes(sparse)
        np.savetxt(out / f"latent_{index:03d}.csv", latent, delimiter=",", fmt="%.17g")
        if mesh.is_empty:
            failures.append(index)
        else:
            save_obj(out / f"mesh_{index:03d}.obj", mesh)
    with open(out / "samples.csv", "w") as fh:
        fh.write("index,status\n")
        for index in range(count):
            fh.write(f"{index},{'empty' if index in failures else 'ok'}\n")
    msg = f"wrote {count - len(failures)} meshes + {count} latents to {out}"
    if failures:
        msg += f"; empty fields for indices {failures}"
    print(msg)
    return EXIT_OK


def cmd_eval_recon(args) -> int:
    points = _resolve(args, "points", 2560, int)
    tau = _resolve(args, "tau", 0.06, float)
    seed = _resolve(args, "seed", 0, int)
    recon = _load_points_any(args.recon, points, seed)
    ref = _load_points_any(args.ref, points, seed + 1)

    rep = metrics.MetricReport(metadata={"points": points, "tau": tau, "seed": seed})
    rep.add("cd", metrics.chamfer(recon, ref))
    emd_result = metrics.emd_detail(recon, ref)
    rep.add("emd", emd_result.value)
    rep.add("hd", metrics.hausdorff(recon, ref))
    rep.add("f1", metrics.f1_score(recon, ref, tau))
    rep.metadata["emd_exact"] = emd_result.exact
    rep.metadata["emd_gap"] = emd_result.gap

    out = _out_dir(args)
    rep.save_csv(out / "recon_metrics.csv")
    report.render_metric_bars(out / "recon_metrics.png", rep, title="reconstruction metrics")
    print(rep.format_table())
    return EXIT_OK


def cmd_eval_gen(args) -> int:
    points = _resolve(args, "points", 2048, int)
    seed = _resolve(args, "seed", 0, int)
    bases = [b.strip() for b in _resolve(args, "base", "cd").split(",")]
    gen_dir = Path(args.gen)
    ref_dir = Path(args.ref)
    if not gen_dir.is_dir() or not ref_dir.is_dir():
        raise InputError("--gen and --ref must be directories of shape files")

    def load_set(d: Path, base_seed: int):
        files = sorted(q for q in d.iterdir() if q.suffix.lower() in (".obj", ".ply", ".xyz"))
        if not files:
            raise InputError(f"no shape files in {d}")
        return [_load_points_any(q, points, base_seed + i).points for i, q in enumerate(files)]

    gen_set = load_set(gen_dir, seed)
    ref_set = load_set(ref_dir, seed)
    if len(gen_set) < 2 or len(ref_set) < 2:
        raise InputError("need at least 2 shapes per set for generation metrics")

    rep = metrics.MetricReport(metadata={"points": points, "seed": seed, "gen": len(gen_set), "ref": len(ref_set)})
    for base in bases:
        rep.add(f"mmd-{base}", metrics.mmd(gen_set, ref_set, base))
        rep.add(f"cov-{base}", metrics.coverage(gen_set, ref_set, base))
        rep.add(f"nna-{base}", metrics.nna_1(gen_set, ref_set, base))
    if args.features_gen or args.features_ref:
        if not (args.features_gen and args.features_ref):
            raise UsageError("--features-gen and --features-ref must be given together")
        fa = metrics.FeatureSet.load_csv(_require_file(args.features_gen, "feature CSV"))
        fb = metrics.FeatureSet.load_csv(_require_file(args.features_ref, "feature CSV"))
        rep.add("fid", metrics.frechet_feature_distance(fa, fb))
        rep.add("kid", metrics.kernel_feature_distance(fa, fb))

    out = _out_dir(args)
    rep.save_csv(out / "gen_metrics.csv")
    report.render_metric_bars(out / "gen_metrics.png", rep, title="generation metrics")
    print(rep.format_table())
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def build_parser() -> _Parser:
    parser = _Parser(prog="skelgen", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", metavar="command")

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(func=func)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--config", help="key=value config file merged under flags")
        p.add_argument("--seed", type=int, help="random seed (default 0)")
        p.add_argument("--profile", choices=sorted(PROFILES), help="flag defaults bundle")
        return p

    p = add("build-sdf", cmd_build_sdf, "normalize a watertight mesh and write point cloud + SDF volume")
    p.add_argument("mesh", help="input mesh (.obj or .ply)")
    p.add_argument("--resolution", type=int, help="voxel grid resolution (default 100)")
    p.add_argument("--points", type=int, help="point cloud size (default 2560)")
    p.add_argument("--trunc", type=float, help="truncation band half-width (default 0.1)")

    p = add("skeletonize", cmd_skeletonize, "extract a skeletal point set with radii from a point cloud")
    p.add_argument("cloud", help="input point cloud (.xyz or .ply)")
    p.add_argument("--n-s", dest="n_s", type=int, help="skeleton size (default 256)")
    p.add_argument("--iters", type=int, help="center update iterations (default 2)")
    p.add_argument("--k", type=int, help="neighborhood size (default 32)")
    p.add_argument("--hierarchical", action="store_true", help="two-stage coarse-to-fine skeletonization")

    p = add("train-toy", cmd_train_toy, "train the toy encoder/decoder on one shape")
    p.add_argument("--volume", required=True, help="MSDF volume from build-sdf")
    p.add_argument("--cloud", required=True, help="point cloud from build-sdf")
    p.add_argument("--steps", type=int, help="training steps (default 300)")
    p.add_argument("--lr", type=float, help="learning rate (default 0.05)")
    p.add_argument("--n-s", dest="n_s", type=int, help="skeleton size (default 16, max 32)")
    p.add_argument("--m", type=int, help="training samples per step (default 512, max 512)")
    p.add_argument("--trunc", type=float, help="truncation band half-width (default 0.1)")

    p = add("reconstruct", cmd_reconstruct, "decode a trained checkpoint back into a mesh")
    p.add_argument("--checkpoint", required=True, help="directory written by train-toy")
    p.add_argument("--volume", required=True, help="MSDF volume defining the output grid")
    p.add_argument("--cloud", required=True, help="point cloud to encode")
    p.add_argument("--p", type=float, help="fraction of voxels decoded, skeleton-guided (default 1.0)")
    p.add_argument("--transform", help="transform.json from build-sdf; maps the mesh back to input coordinates")

    p = add("sample", cmd_sample, "sample latents through the probability-flow ODE and decode meshes")
    p.add_argument("--checkpoint", required=True, help="directory written by train-toy")
    p.add_argument("--anchor", required=True, help="anchor latent CSV (e.g. latent.csv from train-toy)")
    p.add_argument("--score", choices=("delta", "gaussian"), default="delta", help="analytic score family")
    p.add_argument("--spread", type=float, help="gaussian score spread s (default 0.05)")
    p.add_argument("--count", type=int, help="number of samples (default 4)")
    p.add_argument("--p", type=float, help="fraction of voxels decoded (default 0.3)")
    p.add_argument("--resolution", type=int, help="output grid resolution (default 64)")
    p.add_argument("--sigma-min", dest="sigma_min", type=float, help="schedule minimum (default 0.002)")
    p.add_argument("--sigma-max", dest="sigma_max", type=float, help="schedule maximum (default 80)")
    p.add_argument("--rho", type=float, help="schedule warp exponent (default 7)")
    p.add_argument("--steps", type=int, help="ODE steps (default 32)")
    p.add_argument("--guidance-w", dest="guidance_w", type=float, help="guidance weight (default 0)")
    p.add_argument(
        "--guidance-convention",
        dest="guidance_convention",
        choices=("standard", "as-paper"),
        help="guidance formula convention (default standard)",
    )

    p = add("eval-recon", cmd_eval_recon, "reconstruction metrics between two shapes")
    p.add_argument("--recon", required=True, help="reconstructed mesh or cloud")
    p.add_argument("--ref", required=True, help="reference mesh or cloud")
    p.add_argument("--points", type=int, help="protocol subsample size (default 2560)")
    p.add_argument("--tau", type=float, help="F1 distance threshold (default 0.06)")

    p = add("eval-gen", cmd_eval_gen, "set-level generation metrics between shape directories")
    p.add_argument("--gen", required=True, help="directory of generated shapes")
    p.add_argument("--ref", required=True, help="directory of reference shapes")
    p.add_argument("--points", type=int, help="protocol subsample size (default 2048)")
    p.add_argument("--base", help="comma-separated base distances: cd,emd (default cd)")
    p.add_argument("--features-gen", help="per-shape feature CSV for the generated set")
    p.add_argument("--features-ref", help="per-shape feature CSV for the reference set")

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "command", None) is None:
            parser.print_help()
            return EXIT_USAGE
        args._config = _load_config_file(getattr(args, "config", None))
        _apply_threads_env()
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (InputError, DegenerateCloudError, FileNotFoundError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
