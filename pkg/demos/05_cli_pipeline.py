"""The full command-line pipeline on tiny settings, in a temporary directory.

Run with ``python3 demos/05_cli_pipeline.py``. The same commands are available
as ``jacpose <command>`` after installation.
"""
import os
import tempfile

from jacpose.cli import main

root = tempfile.mkdtemp(prefix="jacpose-")
path = lambda *p: os.path.join(root, *p)  # noqa: E731

with open(path("train.cfg"), "w") as fh:
    fh.write("# autoencoder\nsteps = 40\nlr = 0.001\nseed = 0\nroute = jacobian\nK = 8\nd = 16\nbatch_size = 4\n")
with open(path("refine.cfg"), "w") as fh:
    fh.write("steps = 10\nlr = 0.001\nseed = 0\n")
with open(path("diffusion.cfg"), "w") as fh:
    fh.write("steps = 50\nlr = 0.001\nseed = 0\nwidth = 32\nblocks = 1\nT = 100\n")

commands = [
    ["gen-data", "--spec", "A", "--n", "8", "--seed", "0", "--out", path("data_a")],
    ["gen-data", "--spec", "B", "--n", "2", "--seed", "1", "--out", path("data_b")],
    ["train", "--config", path("train.cfg"), "--data", path("data_a"), "--out", path("run")],
    ["transfer", "--checkpoint", path("run", "model.ckpt"), "--source-pose", path("data_b", "pose_0000.obj"),
     "--target-template", path("data_b", "template.obj"), "--out", path("transfer", "self.obj")],
    ["eval-pmd", "--pred", path("transfer", "self.obj"), "--gt", path("data_b", "pose_0000.obj")],
    ["refine", "--checkpoint", path("run", "model.ckpt"), "--data", path("data_a"),
     "--target-template", path("data_b", "template.obj"), "--config", path("refine.cfg"), "--out", path("refine")],
    ["train-diffusion", "--checkpoint", path("run", "model.ckpt"), "--data", path("data_a"),
     "--config", path("diffusion.cfg"), "--out", path("diffusion")],
    ["sample", "--checkpoint", path("diffusion", "diffusion.ckpt"), "--n", "3", "--seed", "0",
     "--target-template", path("data_b", "template.obj"), "--out-dir", path("samples")],
]
for cmd in commands:
    print("$ jacpose", " ".join(os.path.relpath(c, root) if c.startswith(root) else c for c in cmd))
    code = main(cmd)
    if code:
        raise SystemExit(code)
print("outputs in", root)
