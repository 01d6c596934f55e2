import filecmp
import os

import numpy as np
import pytest

from skelgen.cli import main
from skelgen.mesh import TriangleMesh, make_icosphere, save_obj


@pytest.fixture(scope="module")
def sphere_obj(tmp_path_factory):
    path = tmp_path_factory.mktemp("mesh") / "sphere.obj"
    save_obj(path, make_icosphere(0.7, 3))
    return path


@pytest.fixture(scope="module")
def built(tmp_path_factory, sphere_obj):
    out = tmp_path_factory.mktemp("built")
    assert main(["build-sdf", str(sphere_obj), "--out", str(out), "--profile", "toy"]) == 0
    return out


@pytest.fixture(scope="module")
def trained(tmp_path_factory, built):
    out = tmp_path_factory.mktemp("trained")
    code = main(
        ["train-toy", "--volume", str(built / "volume.msdf"), "--cloud", str(built / "cloud.xyz"),
         "--out", str(out), "--profile", "toy", "--steps", "25"]
    )
    assert code == 0
    return out


def test_no_command_prints_help_and_exits_1(capsys):
    assert main([]) == 1
    assert "build-sdf" in capsys.readouterr().out


def test_help_exits_zero():
    with pytest.raises(SystemExit) as exc:
        main(["build-sdf", "--help"])
    assert exc.value.code == 0


def test_unknown_command_is_usage_error(capsys):
    assert main(["nonsense"]) == 1


def test_build_sdf_writes_expected_files(built):
    for name in ("cloud.xyz", "volume.msdf", "transform.json"):
        assert (built / name).is_file()


def test_build_sdf_low_resolution_is_usage_error(sphere_obj, tmp_path, capsys):
    assert main(["build-sdf", str(sphere_obj), "--out", str(tmp_path), "--resolution", "4"]) == 1


def test_build_sdf_missing_input_is_input_error(tmp_path):
    assert main(["build-sdf", str(tmp_path / "none.obj"), "--out", str(tmp_path / "o")]) == 2


def test_build_sdf_non_watertight_names_edges(tmp_path, capsys):
    m = make_icosphere(0.5, 1)
    path = tmp_path / "holey.obj"
    save_obj(path, TriangleMesh(m.vertices, m.triangles[:-1]))
    assert main(["build-sdf", str(path), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "watertight" in err and "-" in err


def test_skeletonize_writes_csv_and_ply(built, tmp_path):
    assert main(["skeletonize", str(built / "cloud.xyz"), "--out", str(tmp_path), "--n-s", "8"]) == 0
    assert (tmp_path / "skeleton.csv").is_file()
    assert (tmp_path / "skeleton.ply").is_file()


def test_skeletonize_oversized_request_is_input_error(built, tmp_path):
    assert main(["skeletonize", str(built / "cloud.xyz"), "--out", str(tmp_path), "--n-s", "4096"]) == 2


def test_train_toy_outputs(trained):
    for name in ("checkpoint.sknn", "netconfig.cfg", "skeleton.csv", "latent.csv", "loss.csv", "loss.png"):
        assert (trained / name).is_file()
    losses = np.loadtxt(trained / "loss.csv", delimiter=",", skiprows=1, ndmin=2)
    assert losses.shape[0] == 25


def test_train_toy_limits_enforced(built, tmp_path):
    code = main(
        ["train-toy", "--volume", str(built / "volume.msdf"), "--cloud", str(built / "cloud.xyz"),
         "--out", str(tmp_path), "--n-s", "64"]
    )
    assert code == 1


def test_config_file_supplies_defaults_but_flags_win(built, tmp_path, capsys):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("steps=9\nlr=0.0\n")
    out = tmp_path / "out"
    code = main(
        ["train-toy", "--volume", str(built / "volume.msdf"), "--cloud", str(built / "cloud.xyz"),
         "--out", str(out), "--profile", "toy", "--config", str(cfg), "--steps", "4"]
    )
    assert code == 0
    losses = np.loadtxt(out / "loss.csv", delimiter=",", skiprows=1, ndmin=2)[:, 1]
    assert losses.shape[0] == 4  # flag beat the config file
    assert np.all(losses == losses[0])  # lr=0 from the config file applied


def test_bad_config_file_is_input_error(built, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text("steps 9\n")
    code = main(
        ["train-toy", "--volume", str(built / "volume.msdf"), "--cloud", str(built / "cloud.xyz"),
         "--out", str(tmp_path / "o"), "--config", str(cfg)]
    )
    assert code == 2


def test_reconstruct_and_rerun_bitwise_identical(built, trained, tmp_path):
    args = ["reconstruct", "--checkpoint", str(trained), "--volume", str(built / "volume.msdf"),
            "--cloud", str(built / "cloud.xyz")]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    assert filecmp.cmp(tmp_path / "a" / "mesh.obj", tmp_path / "b" / "mesh.obj", shallow=False)


def test_reconstruct_missing_checkpoint_is_input_error(built, tmp_path):
    code = main(
        ["reconstruct", "--checkpoint", str(tmp_path / "none"), "--volume", str(built / "volume.msdf"),
         "--cloud", str(built / "cloud.xyz"), "--out", str(tmp_path / "o")]
    )
    assert code == 2


def test_sample_count_zero_is_noop(trained, tmp_path):
    out = tmp_path / "s"
    code = main(
        ["sample", "--checkpoint", str(trained), "--anchor", str(trained / "latent.csv"),
         "--count", "0", "--out", str(out)]
    )
    assert code == 0
    assert not any(out.glob("mesh_*.obj"))


def test_sample_writes_meshes_latents_and_manifest(trained, tmp_path):
    out = tmp_path / "s"
    code = main(
        ["sample", "--checkpoint", str(trained), "--anchor", str(trained / "latent.csv"),
         "--count", "2", "--p", "1.0", "--resolution", "24", "--out", str(out)]
    )
    assert code == 0
    manifest = (out / "samples.csv").read_text().splitlines()
    assert manifest[0] == "index,status"
    assert len(manifest) == 3
    assert (out / "latent_000.csv").is_file() and (out / "latent_001.csv").is_file()


def test_eval_recon_reports_metrics(built, tmp_path, capsys):
    code = main(
        ["eval-recon", "--recon", str(built / "cloud.xyz"), "--ref", str(built / "cloud.xyz"),
         "--points", "128", "--out", str(tmp_path)]
    )
    assert code == 0
    assert (tmp_path / "recon_metrics.csv").is_file()
    assert (tmp_path / "recon_metrics.png").is_file()
    out = capsys.readouterr().out
    assert "cd" in out and "f1" in out


def test_eval_gen_identical_directories(built, tmp_path, capsys):
    gen = tmp_path / "gen"
    gen.mkdir()
    for i in range(3):
        rng = np.random.default_rng(i)
        pts = rng.standard_normal((200, 3))
        np.savetxt(gen / f"c{i}.xyz", pts)
    code = main(["eval-gen", "--gen", str(gen), "--ref", str(gen), "--points", "64", "--out", str(tmp_path / "o")])
    assert code == 0
    rows = {line.split(",")[0]: line.split(",")[2] for line in (tmp_path / "o" / "gen_metrics.csv").read_text().splitlines()[1:] if not line.startswith("#")}
    assert float(rows["mmd-cd"]) == 0.0
    assert float(rows["nna-cd"]) == 0.0


def test_threads_env_var_accepted(built, tmp_path, monkeypatch):
    monkeypatch.setenv("SKELGEN_THREADS", "2")
    assert main(["skeletonize", str(built / "cloud.xyz"), "--out", str(tmp_path), "--n-s", "8"]) == 0


def test_threads_env_var_must_be_integer(built, tmp_path, monkeypatch):
    monkeypatch.setenv("SKELGEN_THREADS", "many")
    assert main(["skeletonize", str(built / "cloud.xyz"), "--out", str(tmp_path), "--n-s", "8"]) == 1
