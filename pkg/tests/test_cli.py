import os

import numpy as np
import pytest

from semsplat.cli import main
from semsplat.compressor import load_pca
from semsplat.dataio import (generate_synthetic_bank, open_dataset,
                             read_label_map, read_trajectory,
                             write_feature_file, write_trajectory)
from semsplat.geometry import quat_normalize
from semsplat.scene import Pose


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = str(tmp_path_factory.mktemp("ds"))
    rc = main(["synth", "--out", out, "--n-splats", "150", "--frames", "5",
               "--holdout", "1", "--width", "48", "--height", "36",
               "--k", "4", "--seed", "3", "--bank-classes", "6"])
    assert rc == 0
    return out


def test_synth_outputs(dataset):
    man = open_dataset(os.path.join(dataset, "manifest.txt"))
    assert len(man.frames) == 5
    assert os.path.exists(os.path.join(dataset, "gt_map.ply"))
    assert os.path.exists(os.path.join(dataset, "bank.legf"))


def test_fit_pca(dataset, tmp_path):
    out = str(tmp_path / "pca.legp")
    rc = main(["fit-pca", "--bank", os.path.join(dataset, "bank.legf"),
               "--k", "6", "--augment", "3", "--out", out])
    assert rc == 0
    model = load_pca(out)
    assert model.k == 6


def test_eval_identical_trajectories(tmp_path, capsys):
    rng = np.random.default_rng(0)
    traj = [(i / 30.0, Pose(quat_normalize(rng.normal(size=4)),
                            rng.normal(size=3))) for i in range(6)]
    path = str(tmp_path / "t.txt")
    write_trajectory(path, traj)
    rc = main(["eval", "--pred-traj", path, "--gt-traj", path])
    assert rc == 0
    out = capsys.readouterr().out
    line = [l for l in out.splitlines() if "ate_rmse" in l][0]
    assert float(line.split("=")[-1]) < 1e-9


def test_eval_missing_args_fails(capsys):
    rc = main(["eval"])
    assert rc == 1
    assert "error:" in capsys.readouterr().err


def test_unknown_flag_fatal(dataset):
    with pytest.raises(SystemExit) as e:
        main(["synth", "--out", "/tmp/x", "--no-such-flag"])
    assert e.value.code != 0


def test_sweep_dims_monotone(tmp_path, capsys):
    bank = generate_synthetic_bank(n_classes=6, per_class=5, dim=32, seed=2)
    bank_path = str(tmp_path / "bank.legf")
    write_feature_file(bank_path, bank[None, :, :])
    rc = main(["sweep-dims", "--bank", bank_path, "--dims", "2,4,8,16",
               "--augment", "3", "--out", str(tmp_path / "table.txt")])
    assert rc == 0
    out = capsys.readouterr().out
    lines = out.strip().splitlines()
    assert lines[0].split("|")[0].strip() == "Dim"
    assert [h.strip() for h in lines[0].split("|")] == \
        ["Dim", "CosSim", "mIoU", "PSNR"]
    cos = [float(l.split("|")[1]) for l in lines[2:]]
    assert all(b >= a - 1e-9 for a, b in zip(cos, cos[1:]))
    assert os.path.exists(tmp_path / "table.txt")


def test_config_file_defaults_and_flag_wins(tmp_path):
    cfgfile = str(tmp_path / "cfg.txt")
    with open(cfgfile, "w") as f:
        f.write("frames=4\nn-splats=120\n")
    out = str(tmp_path / "ds")
    # frames comes from the config, --n-splats on the command line wins
    rc = main(["synth", "--out", out, "--config", cfgfile, "--n-splats", "90",
               "--width", "32", "--height", "32", "--holdout", "0"])
    assert rc == 0
    man = open_dataset(os.path.join(out, "manifest.txt"))
    assert len(man.frames) == 4


def test_config_unknown_key_fails(tmp_path, capsys):
    cfgfile = str(tmp_path / "cfg.txt")
    with open(cfgfile, "w") as f:
        f.write("bogus-key=1\n")
    rc = main(["synth", "--out", str(tmp_path / "ds"), "--config", cfgfile])
    assert rc == 1
    assert "unknown key" in capsys.readouterr().err


def _pose_arg(pose):
    t = pose.translation
    w, x, y, z = pose.rotation
    return f"{t[0]} {t[1]} {t[2]} {x} {y} {z} {w}"


def test_render_from_map(dataset, tmp_path):
    gt = read_trajectory(os.path.join(dataset, "gt_trajectory.txt"))
    out = str(tmp_path / "render")
    rc = main(["render", "--map", os.path.join(dataset, "gt_map.ply"),
               "--dataset", os.path.join(dataset, "manifest.txt"),
               "--pose", _pose_arg(gt[0][1]), "--out", out])
    assert rc == 0
    for name in ("rgb_00000.png", "depth_00000.png", "feature_00000.legf"):
        assert os.path.exists(os.path.join(out, name))


def test_render_needs_pose_or_trajectory(dataset, tmp_path, capsys):
    rc = main(["render", "--map", os.path.join(dataset, "gt_map.ply"),
               "--dataset", os.path.join(dataset, "manifest.txt"),
               "--out", str(tmp_path / "r")])
    assert rc == 1


def test_query_command(dataset, tmp_path):
    gt = read_trajectory(os.path.join(dataset, "gt_trajectory.txt"))
    class_vecs = np.loadtxt(os.path.join(dataset, "class_vectors.txt"))
    emb_path = str(tmp_path / "emb.legf")
    write_feature_file(emb_path, class_vecs[None, :, :])
    out = str(tmp_path / "q")
    rc = main(["query", "--map", os.path.join(dataset, "gt_map.ply"),
               "--dataset", os.path.join(dataset, "manifest.txt"),
               "--pose", _pose_arg(gt[0][1]), "--text-emb", emb_path,
               "--out", out])
    assert rc == 0
    labels = read_label_map(os.path.join(out, "labels.png"))
    assert labels.shape == (36, 48)
    assert os.path.exists(os.path.join(out, "heat_00.png"))


def test_run_slam_smoke(dataset, tmp_path, capsys):
    out = str(tmp_path / "slam")
    rc = main(["run-slam", "--dataset", os.path.join(dataset, "manifest.txt"),
               "--feature-dim", "4", "--out", out,
               "--mapping-iterations", "8,12"])
    assert rc == 0
    assert os.path.exists(os.path.join(out, "trajectory.txt"))
    assert os.path.exists(os.path.join(out, "map.ply"))
    text = open(os.path.join(out, "timing.txt")).read()
    assert "Tracking + Mapping" in text
