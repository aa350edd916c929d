import os

import numpy as np
import pytest

from jacpose.checkpoint import load_checkpoint
from jacpose.cli import main, read_dataset
from jacpose.mesh import TriMesh, load_obj, save_obj
from jacpose.store import load_models, save_models

TRAIN_CFG = """# tiny autoencoder run
steps = {steps}
lr = 0.003
seed = 0
route = jacobian
K = 4
d = 8
m_neighbors = 3
batch_size = 2
"""
REFINE_CFG = "steps = {steps}\nlr = 0.001\nseed = 1\nbatch_size = 2\n"
DIFF_CFG = "steps = 4\nlr = 0.003\nseed = 0\nbatch_size = 2\nwidth = 8\nblocks = 1\ntemb = 8\nT = 10\n"


def files(directory):
    return {name: (directory / name).read_bytes() for name in sorted(os.listdir(directory))}


def write(path, text):
    path.write_text(text)
    return str(path)


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["gen-data", "--spec", "A", "--n", "3", "--seed", "0", "--out", str(root / "dataA")]) == 0
    assert main(["gen-data", "--spec", "B", "--n", "2", "--seed", "5", "--out", str(root / "dataB")]) == 0
    cfg = write(root / "train.cfg", TRAIN_CFG.format(steps=4))
    assert main(["train", "--config", cfg, "--data", str(root / "dataA"), "--out", str(root / "run")]) == 0
    dcfg = write(root / "diff.cfg", DIFF_CFG)
    assert main(["train-diffusion", "--checkpoint", str(root / "run/model.ckpt"), "--data", str(root / "dataA"),
                 "--config", dcfg, "--out", str(root / "diff")]) == 0
    return root


def test_gen_data_layout_and_determinism(work, tmp_path):
    names = sorted(os.listdir(work / "dataA"))
    assert names == ["manifest.txt", "pose_0000.obj", "pose_0001.obj", "pose_0002.obj", "template.obj"]
    assert main(["gen-data", "--spec", "A", "--n", "3", "--seed", "0", "--out", str(tmp_path / "again")]) == 0
    assert files(tmp_path / "again") == files(work / "dataA")
    template, poses = read_dataset(work / "dataA")
    assert len(poses) == 3 and all(np.array_equal(p.faces, template.faces) for p in poses)


def test_gen_data_eight(tmp_path):
    assert main(["gen-data", "--n", "8", "--out", str(tmp_path / "d")]) == 0
    assert len([n for n in os.listdir(tmp_path / "d") if n.startswith("pose_")]) == 8


def test_gen_data_rejects_zero(tmp_path, capsys):
    with pytest.raises(SystemExit) as exc:
        main(["gen-data", "--n", "0", "--out", str(tmp_path / "d")])
    assert exc.value.code == 2
    assert not (tmp_path / "d").exists()


def test_gen_data_spec_file(tmp_path):
    spec = write(tmp_path / "worm.cfg", "name = C\nsegments = 5\nring = 6\nscale = 1.0,0.5,0.5\n")
    assert main(["gen-data", "--spec", spec, "--n", "1", "--out", str(tmp_path / "d")]) == 0
    assert load_obj(tmp_path / "d" / "template.obj").n_vertices == 5 * 6 + 2


def test_train_missing_lr(work, tmp_path, capsys):
    cfg = write(tmp_path / "bad.cfg", TRAIN_CFG.format(steps=2).replace("lr = 0.003\n", ""))
    rc = main(["train", "--config", cfg, "--data", str(work / "dataA"), "--out", str(tmp_path / "out")])
    assert rc == 2
    assert "lr" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_train_unknown_key(work, tmp_path, capsys):
    cfg = write(tmp_path / "bad.cfg", TRAIN_CFG.format(steps=2) + "learning_rate = 0.1\n")
    rc = main(["train", "--config", cfg, "--data", str(work / "dataA"), "--out", str(tmp_path / "out")])
    assert rc == 2 and "learning_rate" in capsys.readouterr().err
    assert not (tmp_path / "out").exists()


def test_train_bad_value(work, tmp_path, capsys):
    cfg = write(tmp_path / "bad.cfg", TRAIN_CFG.format(steps="many"))
    assert main(["train", "--config", cfg, "--data", str(work / "dataA"), "--out", str(tmp_path / "o")]) == 2
    assert "steps" in capsys.readouterr().err


def test_train_outputs_and_rerun(work, tmp_path):
    cfg = str(work / "train.cfg")
    assert main(["train", "--config", cfg, "--data", str(work / "dataA"), "--out", str(tmp_path / "run")]) == 0
    assert files(tmp_path / "run") == files(work / "run")
    lines = (work / "run" / "history.csv").read_text().splitlines()
    assert lines[0] == "step,loss" and len(lines) == 5
    _, meta = load_checkpoint(work / "run" / "model.ckpt")
    assert float(meta["final_loss"]) > 0 and meta["config.K"] == "4"


def test_resume_continues_steps(work, tmp_path):
    cfg = str(work / "train.cfg")
    assert main(["train", "--config", cfg, "--data", str(work / "dataA"), "--out", str(tmp_path / "more"),
                 "--resume", str(work / "run" / "model.ckpt")]) == 0
    steps = [int(ln.split(",")[0]) for ln in (tmp_path / "more" / "history.csv").read_text().splitlines()[1:]]
    assert steps == [5, 6, 7, 8]
    assert load_models(tmp_path / "more" / "model.ckpt").adam.step == 8


def test_resume_rejects_changed_shape(work, tmp_path):
    cfg = write(tmp_path / "k.cfg", TRAIN_CFG.format(steps=2).replace("K = 4", "K = 5"))
    rc = main(["train", "--config", cfg, "--data", str(work / "dataA"), "--out", str(tmp_path / "o"),
               "--resume", str(work / "run" / "model.ckpt")])
    assert rc == 2 and not (tmp_path / "o").exists()


def test_transfer_contract(work, tmp_path):
    out = tmp_path / "t.obj"
    args = ["transfer", "--checkpoint", str(work / "run/model.ckpt"), "--source-pose", str(work / "dataA/pose_0000.obj"),
            "--target-template", str(work / "dataB/template.obj"), "--out", str(out)]
    assert main(args) == 0
    target = load_obj(work / "dataB" / "template.obj")
    result = load_obj(out)
    assert np.array_equal(result.faces, target.faces)
    face_lines = lambda p: [ln for ln in p.read_text().splitlines() if ln.startswith("f ")]  # noqa: E731
    assert face_lines(out) == face_lines(work / "dataB" / "template.obj")
    first = out.read_bytes()
    assert main(args) == 0 and out.read_bytes() == first


def test_self_transfer_is_reconstruction(work, tmp_path, capsys):
    from jacpose.poisson import build_system
    from jacpose.train import pmd, transfer_vertices

    bundle = load_models(work / "run" / "model.ckpt")
    template = load_obj(work / "dataA" / "template.obj")
    pose = load_obj(work / "dataA" / "pose_0001.obj")
    recon = TriMesh(transfer_vertices(bundle["extractor"], bundle["applier"], pose, template, build_system(template)),
                    template.faces)
    out = tmp_path / "self.obj"
    assert main(["transfer", "--checkpoint", str(work / "run/model.ckpt"), "--source-pose", str(work / "dataA/pose_0001.obj"),
                 "--target-template", str(work / "dataA/template.obj"), "--out", str(out)]) == 0
    assert pmd(load_obj(out), pose) <= pmd(recon, pose) * (1 + 1e-9) + 1e-15


def test_transfer_rejects_bad_refiner(work, tmp_path):
    from jacpose.nets import RefinerParams

    save_models(tmp_path / "r.ckpt", {"refiner": RefinerParams(K=7, d=8)})
    rc = main(["transfer", "--checkpoint", str(work / "run/model.ckpt"), "--source-pose", str(work / "dataA/pose_0000.obj"),
               "--target-template", str(work / "dataB/template.obj"), "--out", str(tmp_path / "o.obj"),
               "--refiner", str(tmp_path / "r.ckpt")])
    assert rc == 2 and not (tmp_path / "o.obj").exists()


def test_refine_zero_steps_is_identity(work, tmp_path):
    from jacpose.nets import refine_latent

    cfg = write(tmp_path / "r.cfg", REFINE_CFG.format(steps=0))
    assert main(["refine", "--checkpoint", str(work / "run/model.ckpt"), "--data", str(work / "dataA"),
                 "--target-template", str(work / "dataB/template.obj"), "--config", cfg, "--out", str(tmp_path / "r")]) == 0
    refiner = load_models(tmp_path / "r" / "refiner.ckpt")["refiner"]
    from jacpose.nets import PoseLatent

    rng = np.random.default_rng(0)
    lat = PoseLatent(rng.standard_normal((4, 3)), rng.standard_normal((4, 8)))
    out = refine_latent(refiner, lat)
    assert np.array_equal(out.numpy()[0], lat.Z) and np.array_equal(out.numpy()[1], lat.H)
    assert (tmp_path / "r" / "refine_history.csv").read_text() == "step,total,lap,edge,reg\n"


def test_refine_history_and_determinism(work, tmp_path):
    cfg = write(tmp_path / "r.cfg", REFINE_CFG.format(steps=2))
    outs = []
    for name in ("a", "b"):
        assert main(["refine", "--checkpoint", str(work / "run/model.ckpt"), "--data", str(work / "dataA"),
                     "--target-template", str(work / "dataB/template.obj"), "--config", cfg,
                     "--out", str(tmp_path / name)]) == 0
        outs.append(files(tmp_path / name))
    assert outs[0] == outs[1]
    lines = outs[0]["refine_history.csv"].decode().splitlines()
    assert lines[0] == "step,total,lap,edge,reg" and len(lines) == 3
    assert main(["transfer", "--checkpoint", str(work / "run/model.ckpt"), "--source-pose", str(work / "dataA/pose_0000.obj"),
                 "--target-template", str(work / "dataB/template.obj"), "--out", str(tmp_path / "o.obj"),
                 "--refiner", str(tmp_path / "a" / "refiner.ckpt")]) == 0


def test_train_diffusion_outputs(work):
    names = sorted(os.listdir(work / "diff"))
    assert names == ["diffusion.ckpt", "feat_history.csv", "kp_history.csv"]
    bundle = load_models(work / "diff" / "diffusion.ckpt")
    assert bundle.schedule.T == 10 and bundle.stats.K == 4 and bundle.stats.d == 8


def test_sample_outputs_and_determinism(work, tmp_path):
    args = ["sample", "--checkpoint", str(work / "diff/diffusion.ckpt"), "--n", "3", "--seed", "2",
            "--target-template", str(work / "dataB/template.obj")]
    assert main(args + ["--out-dir", str(tmp_path / "a")]) == 0
    assert main(args + ["--out-dir", str(tmp_path / "b")]) == 0
    a = files(tmp_path / "a")
    assert sorted(a) == ["latents.ckpt", "sample_0000.obj", "sample_0001.obj", "sample_0002.obj"]
    assert a == files(tmp_path / "b")
    for name in a:
        if name.endswith(".obj"):
            assert np.all(np.isfinite(load_obj(tmp_path / "a" / name).vertices))


def test_sample_nan_weights_exit_3(work, tmp_path):
    bundle = load_models(work / "diff" / "diffusion.ckpt")
    applier = bundle["applier"]
    for p in applier.params.values():
        p.data = np.full(p.shape, np.nan)
    save_models(tmp_path / "nan.ckpt", {"kp": bundle["kp"], "feat": bundle["feat"], "applier": applier},
                stats=bundle.stats, schedule=bundle.schedule)
    rc = main(["sample", "--checkpoint", str(tmp_path / "nan.ckpt"), "--n", "2", "--target-template",
               str(work / "dataB/template.obj"), "--out-dir", str(tmp_path / "s")])
    assert rc == 3 and not (tmp_path / "s").exists()


def test_sample_rejects_autoencoder_checkpoint(work, tmp_path):
    rc = main(["sample", "--checkpoint", str(work / "run/model.ckpt"), "--n", "1", "--target-template",
               str(work / "dataB/template.obj"), "--out-dir", str(tmp_path / "s")])
    assert rc == 2


def _eval(capsys, pred, gt):
    rc = main(["eval-pmd", "--pred", str(pred), "--gt", str(gt)])
    out = capsys.readouterr().out.split()
    return rc, float(out[1]) if rc == 0 else None


def test_eval_pmd(tmp_path, capsys):
    rng = np.random.default_rng(0)
    V = rng.standard_normal((1000, 3))
    F = np.array([[i, i + 1, i + 2] for i in range(998)])
    save_obj(TriMesh(V, F), tmp_path / "gt.obj")
    save_obj(TriMesh(V + [0.1, 0, 0], F), tmp_path / "shift.obj")
    save_obj(TriMesh(V + 0.01 * rng.standard_normal(V.shape), F), tmp_path / "noisy.obj")
    assert _eval(capsys, tmp_path / "gt.obj", tmp_path / "gt.obj") == (0, 0.0)
    rc, value = _eval(capsys, tmp_path / "shift.obj", tmp_path / "gt.obj")
    assert rc == 0 and value == pytest.approx(0.01, rel=1e-6)
    rc, value = _eval(capsys, tmp_path / "noisy.obj", tmp_path / "gt.obj")
    assert rc == 0 and value == pytest.approx(3e-4, rel=0.1)


def test_eval_pmd_mismatch(tmp_path, capsys):
    save_obj(TriMesh(np.eye(3), np.array([[0, 1, 2]])), tmp_path / "a.obj")
    save_obj(TriMesh(np.vstack([np.eye(3), np.ones(3)]), np.array([[0, 1, 2], [1, 2, 3]])), tmp_path / "b.obj")
    assert main(["eval-pmd", "--pred", str(tmp_path / "a.obj"), "--gt", str(tmp_path / "b.obj")]) == 2


def test_missing_file_is_other_error(tmp_path):
    assert main(["eval-pmd", "--pred", str(tmp_path / "nope.obj"), "--gt", str(tmp_path / "nope.obj")]) == 1
