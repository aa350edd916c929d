"""Fit the keypoint extractor and Jacobian applier on worm A, then move poses onto worm B.

Worm B is worm A with a thicker, stretched body and the same connectivity
pattern, so the generator's own output for B is an exact answer to compare with.
Run with ``python3 demos/02_train_and_transfer.py [steps]``.
"""
import sys
import time

import numpy as np

from jacpose.mesh import TriMesh
from jacpose.poisson import build_system, solve
from jacpose.synth import WORM_A, WORM_B, gen_dataset, gen_pose, gen_template, sample_poses
from jacpose.train import TrainConfig, pmd, train_autoencoder, transfer_vertices

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300

# %% eight training poses of A and four poses neither model has seen
template_a, template_b = gen_template(WORM_A), gen_template(WORM_B)
train_set = [m for m, _ in gen_dataset(WORM_A, 8, seed=0)]
held_out = sample_poses(WORM_A, 4, seed=100)

# %% training: the loss compares the Poisson-solved reconstruction with each pose
config = TrainConfig(steps=steps, lr=1e-3, K=16, d=32, seed=0, route="jacobian")
start = time.perf_counter()
result = train_autoencoder(config, train_set, template_a)
print(f"{steps} steps in {time.perf_counter() - start:.0f} s: loss {result.initial_loss:.3e} -> {result.final_loss:.3e}")
for step, loss in result.history[:: max(1, steps // 6)]:
    print(f"  step {step:5d}  batch loss {loss:.3e}")

# %% transfer held-out A poses to B and score against the generator
sys_a, sys_b = build_system(template_a), build_system(template_b)
rest_b = TriMesh(solve(sys_b, np.tile(np.eye(3), (template_b.n_faces, 1, 1))), template_b.faces)
print("pose   self-recon A   transfer to B   rest pose B")
for i, pose in enumerate(held_out):
    src, truth_b = gen_pose(WORM_A, pose), gen_pose(WORM_B, pose)
    recon = TriMesh(transfer_vertices(result.extractor, result.applier, src, template_a, sys_a), template_a.faces)
    moved = TriMesh(transfer_vertices(result.extractor, result.applier, src, template_b, sys_b), template_b.faces)
    print(f"{i:4d}   {pmd(recon, src):.3e}      {pmd(moved, truth_b):.3e}       {pmd(rest_b, truth_b):.3e}")
