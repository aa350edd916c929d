"""Per-face Jacobians of a posed worm and the Poisson solve that inverts them.

Run with ``python3 demos/01_geometry_and_poisson.py``.
"""
import numpy as np

from jacpose.diffgeo import build_cotan_laplacian, build_gradient, build_mass, jacobian_from_vertices
from jacpose.mesh import bbox_diag
from jacpose.poisson import build_system, solve, solve_adjoint, solve_linear
from jacpose.synth import WORM_A, PoseParams, gen_pose, gen_template

# %% a template and one bent, twisted pose of it
template = gen_template(WORM_A)
bend = np.zeros(WORM_A.segments)
twist = np.zeros(WORM_A.segments)
bend[4], twist[6] = 0.8, -0.4
posed = gen_pose(WORM_A, PoseParams(bend, twist))
print(f"worm A: {template.n_vertices} vertices, {template.n_faces} faces, bbox diagonal {bbox_diag(template):.3f}")

# %% the cotangent Laplacian factors through the gradient operator and the face areas
G = build_gradient(template).matrix
L = build_cotan_laplacian(template)
gap = abs(L - G.T @ build_mass(template) @ G).max() / abs(L).max()
print(f"max |L - G^T A G| relative to max |L|: {gap:.1e}")

# %% Jacobians of the posed mesh, expressed on the template, then solved back to vertices
J = jacobian_from_vertices(build_gradient(template), posed.vertices)
system = build_system(template, pin_position=posed.vertices[0])
V = solve(system, J)
print(f"round trip error: {np.abs(V - posed.vertices).max() / bbox_diag(posed):.1e} x bbox diagonal")

# %% the solve is linear once the pin is fixed, and its adjoint is its transpose
rng = np.random.default_rng(0)
x = rng.standard_normal(J.shape)
y = rng.standard_normal(V.shape)
lhs = np.sum(solve_linear(system, x) * y)
rhs = np.sum(x * solve_adjoint(system, y))
print(f"<Sx, y> = {lhs:.6f}   <x, S^T y> = {rhs:.6f}")

# %% rotating every Jacobian rigidly rotates the solved shape
c, s = np.cos(0.3), np.sin(0.3)
R = np.array([[c, -s, 0], [s, c, 0], [0, 0, 1.0]])
rotated = solve(system, R @ J)
expected = (posed.vertices - posed.vertices[0]) @ R.T + posed.vertices[0]
print(f"rigid rotation error: {np.abs(rotated - expected).max():.1e}")
