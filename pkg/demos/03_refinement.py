"""Self-supervised latent refinement for a new target body.

The refiner nudges each (keypoint, feature) tuple so the transferred shape
keeps the target's edge lengths and smoothness. Its output layer starts at
zero, so before training it leaves latents untouched.
Run with ``python3 demos/03_refinement.py [autoencoder steps] [refiner steps]``.
"""
import sys

import numpy as np

from jacpose import nets
from jacpose.poisson import build_system
from jacpose.synth import WORM_A, WORM_B, gen_dataset, gen_pose, gen_template, sample_poses
from jacpose.train import RefinementGeometry, TrainConfig, loss_refinement, train_autoencoder, train_refiner, transfer_vertices

ae_steps = int(sys.argv[1]) if len(sys.argv) > 1 else 300
ref_steps = int(sys.argv[2]) if len(sys.argv) > 2 else 200

template_a, template_b = gen_template(WORM_A), gen_template(WORM_B)
train_set = [m for m, _ in gen_dataset(WORM_A, 8, seed=0)]
model = train_autoencoder(TrainConfig(steps=ae_steps, K=16, d=32), train_set, template_a)

# %% the three terms at the fixed point: template geometry and an unchanged latent
config = TrainConfig(steps=ref_steps, K=16, d=32)
sys_b = build_system(template_b)
geometry = RefinementGeometry.from_template(template_b, sys_b.laplacian)
latent = nets.extract_pose(model.extractor, train_set[0]).detach()
_, parts = loss_refinement(latent, latent, template_b.vertices, template_b, config, geometry)
print("at the fixed point:", parts)


def held_out_terms(refiner):
    rows = []
    for pose in sample_poses(WORM_A, 4, seed=100):
        src = gen_pose(WORM_A, pose)
        V = transfer_vertices(model.extractor, model.applier, src, template_b, sys_b, refiner)
        lat = nets.extract_pose(model.extractor, src).detach()
        rows.append([loss_refinement(lat, lat, V, template_b, config, geometry)[1][k] for k in ("lap", "edge")])
    return np.mean(rows, axis=0)


# %% train the refiner with the extractor and applier frozen
before = held_out_terms(None)
refined = train_refiner(config, model.extractor, model.applier, train_set, template_b)
after = held_out_terms(refined.refiner)
print(f"held-out laplacian term {before[0]:.3e} -> {after[0]:.3e}")
print(f"held-out edge term      {before[1]:.3e} -> {after[1]:.3e}")
