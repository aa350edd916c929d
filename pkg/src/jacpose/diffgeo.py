"""Per-face gradient, cotangent Laplacian, face mass matrix and Jacobian fields.

Conventions
-----------
The gradient operator ``G`` has shape ``(3F, V)``; rows ``3f..3f+2`` hold the
x, y, z components of the gradient on face ``f``. The Laplacian is the
positive semi-definite ``L = G^T A G`` where ``A`` repeats each face area on
three consecutive diagonal entries.
"""
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp


@dataclass(frozen=True)
class FaceGradientOperator:
    matrix: sp.csc_matrix
    n_vertices: int
    n_faces: int


def _csc(m):
    m = sp.csc_matrix(m)
    m.sum_duplicates()
    m.sort_indices()
    return m


def hat_gradients(mesh):
    """(F, 3, 3) array; ``[f, i]`` is the gradient of vertex i's hat function on face f."""
    p = mesh.vertices[mesh.faces]
    cross = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
    dbl_area = np.linalg.norm(cross, axis=1)
    n = cross / dbl_area[:, None]
    # opposite edges, counter-clockwise
    e = np.stack([p[:, 2] - p[:, 1], p[:, 0] - p[:, 2], p[:, 1] - p[:, 0]], axis=1)
    return np.cross(n[:, None, :], e) / dbl_area[:, None, None]


def build_gradient(mesh):
    F, V = mesh.n_faces, mesh.n_vertices
    g = hat_gradients(mesh)  # (F, vertex-in-face, xyz)
    rows = 3 * np.arange(F)[:, None, None] + np.arange(3)[None, None, :]
    rows = np.broadcast_to(rows, (F, 3, 3))
    cols = np.broadcast_to(mesh.faces[:, :, None], (F, 3, 3))
    G = sp.coo_matrix((g.ravel(), (rows.ravel(), cols.ravel())), shape=(3 * F, V))
    return FaceGradientOperator(_csc(G), V, F)


def build_mass(mesh):
    return _csc(sp.diags(np.repeat(mesh.face_areas(), 3)))


def build_cotan_laplacian(mesh):
    """Cotangent Laplacian with weights ``-(cot a + cot b) / 2`` off the diagonal.

    Boundary edges receive the single available cotangent.
    """
    V = mesh.n_vertices
    p = mesh.vertices[mesh.faces]
    rows, cols, vals = [], [], []
    for k in range(3):
        i, j = (k + 1) % 3, (k + 2) % 3
        u = p[:, i] - p[:, k]
        w = p[:, j] - p[:, k]
        cot = np.einsum("fd,fd->f", u, w) / np.linalg.norm(np.cross(u, w), axis=1)
        rows += [mesh.faces[:, i], mesh.faces[:, j]]
        cols += [mesh.faces[:, j], mesh.faces[:, i]]
        vals += [-0.5 * cot, -0.5 * cot]
    W = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(V, V)
    ).tocsc()
    diag = -np.asarray(W.sum(axis=1)).ravel()
    return _csc(W + sp.diags(diag))


def jacobian_from_vertices(op, positions):
    """Per-face Jacobians ``(F, 3, 3)``; row r is the gradient of coordinate r."""
    positions = np.asarray(positions, dtype=np.float64)
    if positions.shape != (op.n_vertices, 3):
        raise ValueError(f"expected positions of shape ({op.n_vertices}, 3), got {positions.shape}")
    stacked = op.matrix @ positions  # (3F, 3): [3f+s, r] = d x_r / d s
    return stacked.reshape(op.n_faces, 3, 3).transpose(0, 2, 1).copy()


def jacobian_to_stacked(J):
    """(F, 3, 3) Jacobians to the (3F, 3) layout that ``G`` produces."""
    J = np.asarray(J)
    return J.transpose(0, 2, 1).reshape(-1, 3)


def stacked_to_jacobian(S):
    return np.asarray(S).reshape(-1, 3, 3).transpose(0, 2, 1)
