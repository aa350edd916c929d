"""Prefactorized Poisson solve from face Jacobians to vertex positions.

The cotangent Laplacian has the constants in its null space, so one vertex is
pinned and its row and column are eliminated. The remaining SPD block is
reordered with reverse Cuthill-McKee and Cholesky-factorized once in banded
form; every later solve (and adjoint solve) reuses that factor.
"""
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_solve_banded, cholesky_banded
from scipy.sparse.csgraph import reverse_cuthill_mckee

from . import diffgeo
from .mesh import connected_component_count


class DisconnectedMeshError(ValueError):
    def __init__(self, n_components):
        self.n_components = n_components
        super().__init__(f"Poisson solve needs a connected mesh, got {n_components} components")


class FactorizationError(ArithmeticError):
    pass


@dataclass(frozen=True, eq=False)
class PoissonSystem:
    gradient: diffgeo.FaceGradientOperator
    mass: sp.csc_matrix
    laplacian: sp.csc_matrix
    pin_index: int
    pin_position: np.ndarray
    rhs_operator: sp.csc_matrix  # G^T A, shape (V, 3F)
    _free: np.ndarray = field(repr=False)
    _perm: np.ndarray = field(repr=False)
    _lap_free_pin: np.ndarray = field(repr=False)
    _factor: np.ndarray = field(repr=False)

    @property
    def n_vertices(self):
        return self.gradient.n_vertices

    @property
    def n_faces(self):
        return self.gradient.n_faces

    def pinned_matrix(self):
        """The eliminated SPD block of L (free rows and columns, original order)."""
        return self.laplacian[self._free][:, self._free]

    def _solve_free(self, b):
        """Apply the inverse of the pinned Laplacian to ``b`` of shape (V-1, k)."""
        if not np.all(np.isfinite(b)):
            raise FloatingPointError("non-finite right-hand side in Poisson solve")
        out = np.empty_like(b)
        out[self._perm] = cho_solve_banded((self._factor, True), b[self._perm])
        return out


def build_system(mesh, pin_index=0, pin_position=None):
    n_comp = connected_component_count(mesh)
    if n_comp != 1:
        raise DisconnectedMeshError(n_comp)
    V = mesh.n_vertices
    if not 0 <= pin_index < V:
        raise IndexError(f"pin index {pin_index} out of range for {V} vertices")
    if pin_position is None:
        pin_position = mesh.vertices[pin_index]
    pin_position = np.array(pin_position, dtype=np.float64).reshape(3)

    G = diffgeo.build_gradient(mesh)
    A = diffgeo.build_mass(mesh)
    L = diffgeo.build_cotan_laplacian(mesh)
    free = np.delete(np.arange(V), pin_index)
    K = L[free][:, free].tocsr()
    perm = reverse_cuthill_mckee(K, symmetric_mode=True)
    Kp = K[perm][:, perm].tocoo()
    lower = Kp.row >= Kp.col
    rows, cols, vals = Kp.row[lower], Kp.col[lower], Kp.data[lower]
    bw = int((rows - cols).max(initial=0))
    ab = np.zeros((bw + 1, V - 1))
    np.add.at(ab, (rows - cols, cols), vals)
    try:
        factor = cholesky_banded(ab, lower=True)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(f"Cholesky of the pinned Laplacian failed: {exc}") from exc
    rhs = (G.matrix.T @ A).tocsc()
    rhs.sort_indices()
    factor.setflags(write=False)
    return PoissonSystem(
        gradient=G,
        mass=A,
        laplacian=L,
        pin_index=int(pin_index),
        pin_position=pin_position,
        rhs_operator=rhs,
        _free=free,
        _perm=perm,
        _lap_free_pin=L[free][:, [pin_index]].toarray().ravel(),
        _factor=factor,
    )


def _check_J(system, J):
    J = np.asarray(J, dtype=np.float64)
    if J.shape != (system.n_faces, 3, 3):
        raise ValueError(f"expected Jacobians of shape ({system.n_faces}, 3, 3), got {J.shape}")
    return J


def solve(system, J, pin_position=None):
    """Vertex positions ``(V, 3)`` whose Jacobian field best matches ``J``."""
    J = _check_J(system, J)
    pin = system.pin_position if pin_position is None else np.asarray(pin_position, float).reshape(3)
    B = system.rhs_operator @ diffgeo.jacobian_to_stacked(J)
    b = B[system._free] - np.outer(system._lap_free_pin, pin)
    V = np.empty((system.n_vertices, 3))
    V[system._free] = system._solve_free(b)
    V[system.pin_index] = pin
    return V


def solve_linear(system, J):
    """The linear part of :func:`solve` (pin held at the origin)."""
    return solve(system, J, pin_position=np.zeros(3))


def solve_adjoint(system, grad_wrt_vertices):
    """Pull a gradient on the solved vertices back to the Jacobian field."""
    g = np.asarray(grad_wrt_vertices, dtype=np.float64)
    if g.shape != (system.n_vertices, 3):
        raise ValueError(f"expected gradient of shape ({system.n_vertices}, 3), got {g.shape}")
    y = np.zeros_like(g)
    y[system._free] = system._solve_free(g[system._free])
    return diffgeo.stacked_to_jacobian(system.rhs_operator.T @ y)


def solve_tensor(system, J):
    """Differentiable solve on a tracked ``(F, 3, 3)`` tensor."""
    from .tensor import custom_op

    return custom_op(
        solve(system, J.data),
        (J,),
        lambda g: (solve_adjoint(system, g),),
        name="poisson_solve",
    )
