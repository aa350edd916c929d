"""Pose latents of keypoints and features, applied to any triangle mesh
through per-face Jacobians and a Poisson solve, plus cascaded latent diffusion
for sampling new poses."""

__version__ = "0.1.0"
