"""Indexed triangle meshes, topology queries and a strict OBJ subset reader/writer.

Faces are 0-based internally and 1-based in OBJ files.
"""
from __future__ import annotations

import os
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

DEGENERATE_AREA_RTOL = 1e-12


class MeshError(ValueError):
    """Raised for meshes violating the TriMesh invariants."""


class ObjParseError(MeshError):
    def __init__(self, path, lineno, message):
        self.path = path
        self.lineno = lineno
        super().__init__(f"{path}:{lineno}: {message}")


def _face_areas(vertices, faces):
    p = vertices[faces]
    return 0.5 * np.linalg.norm(np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0]), axis=1)


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Immutable triangle mesh.

    Parameters
    ----------
    vertices : (V, 3) float array
    faces : (F, 3) int array of 0-based vertex indices
    """

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64, copy=True)
        f = np.array(self.faces, dtype=np.int64, copy=True)
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must have shape (V, 3), got {v.shape}")
        if f.size == 0:
            f = f.reshape(0, 3)
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshError(f"faces must have shape (F, 3), got {f.shape}")
        if not np.all(np.isfinite(v)):
            raise MeshError("vertex coordinates must be finite")
        if f.size:
            if f.min() < 0 or f.max() >= len(v):
                bad = np.nonzero((f < 0).any(1) | (f >= len(v)).any(1))[0]
                raise MeshError(
                    f"face index out of range [0, {len(v)}) in faces {bad.tolist()}"
                )
            rep = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
            if rep.any():
                raise MeshError(f"repeated vertex index in faces {np.nonzero(rep)[0].tolist()}")
            diag = float(np.linalg.norm(v.max(0) - v.min(0)))
            areas = _face_areas(v, f)
            degenerate = areas < DEGENERATE_AREA_RTOL * diag**2
            if degenerate.any() or diag == 0.0:
                bad = np.nonzero(degenerate)[0].tolist() if diag > 0 else list(range(len(f)))
                raise MeshError(f"degenerate faces {bad}")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    def with_vertices(self, vertices):
        """Same connectivity, new positions."""
        return TriMesh(vertices, self.faces)

    def face_areas(self):
        return _face_areas(self.vertices, self.faces)

    def face_normals(self):
        p = self.vertices[self.faces]
        n = np.cross(p[:, 1] - p[:, 0], p[:, 2] - p[:, 0])
        return n / np.linalg.norm(n, axis=1, keepdims=True)

    def n_components(self):
        return connected_component_count(self)


@dataclass(frozen=True)
class EdgeSet:
    """Sorted, deduplicated undirected edges as an (E, 2) array with i < j."""

    edges: np.ndarray

    def __len__(self):
        return len(self.edges)


def edge_set(mesh):
    f = mesh.faces
    e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
    e.sort(axis=1)
    e = np.unique(e, axis=0)
    e.setflags(write=False)
    return EdgeSet(e)


def face_centroids(mesh):
    return mesh.vertices[mesh.faces].mean(axis=1)


def bbox_diag(mesh_or_points):
    pts = mesh_or_points.vertices if isinstance(mesh_or_points, TriMesh) else np.asarray(mesh_or_points)
    if len(pts) == 0:
        raise MeshError("bounding box of an empty point set")
    return float(np.linalg.norm(pts.max(0) - pts.min(0)))


def connected_component_count(mesh):
    e = edge_set(mesh).edges
    n = mesh.n_vertices
    adj = coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n))
    count, _ = connected_components(adj, directed=False)
    return int(count)


def load_obj(path):
    """Read a triangle mesh from the ``v``/``f`` OBJ subset.

    Polygons with more than three corners are rejected rather than
    fan-triangulated.
    """
    path = os.fspath(path)
    verts, faces = [], []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tag, *rest = line.split()
            if tag == "v":
                if len(rest) != 3:
                    raise ObjParseError(path, lineno, f"expected 3 coordinates, got {len(rest)}")
                try:
                    verts.append([float(x) for x in rest])
                except ValueError as exc:
                    raise ObjParseError(path, lineno, str(exc)) from None
            elif tag == "f":
                if len(rest) != 3:
                    raise ObjParseError(
                        path, lineno, f"only triangles are supported, got a {len(rest)}-gon"
                    )
                try:
                    idx = [int(tok) for tok in rest]
                except ValueError as exc:
                    raise ObjParseError(path, lineno, str(exc)) from None
                if min(idx) < 1:
                    raise ObjParseError(path, lineno, "face indices must be positive and 1-based")
                faces.append([i - 1 for i in idx])
            else:
                raise ObjParseError(path, lineno, f"unsupported record type {tag!r}")
    if not verts:
        raise MeshError(f"{path}: no vertices")
    v = np.array(verts, dtype=np.float64)
    f = np.array(faces, dtype=np.int64).reshape(-1, 3)
    if f.size and f.max() >= len(v):
        bad = np.nonzero((f >= len(v)).any(1))[0].tolist()
        raise MeshError(f"{path}: face index out of range in faces {bad}")
    mesh = TriMesh(v, f)
    if f.size and mesh.n_components() > 1:
        warnings.warn(f"{path}: mesh has {mesh.n_components()} connected components", stacklevel=2)
    return mesh


def save_obj(mesh, path):
    lines = ["v %.17g %.17g %.17g\n" % tuple(p) for p in mesh.vertices.tolist()]
    lines += ["f %d %d %d\n" % (a + 1, b + 1, c + 1) for a, b, c in mesh.faces.tolist()]
    with open(os.fspath(path), "w", encoding="ascii", newline="\n") as fh:
        fh.writelines(lines)


def icosahedron(radius=1.0):
    """Regular icosahedron with the given circumradius, centered at the origin."""
    phi = (1.0 + 5.0**0.5) / 2.0
    v = np.array(
        [
            [-1, phi, 0], [1, phi, 0], [-1, -phi, 0], [1, -phi, 0],
            [0, -1, phi], [0, 1, phi], [0, -1, -phi], [0, 1, -phi],
            [phi, 0, -1], [phi, 0, 1], [-phi, 0, -1], [-phi, 0, 1],
        ],
        dtype=np.float64,
    )
    v *= radius / np.linalg.norm(v[0])
    f = [
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ]
    return TriMesh(v, np.array(f))


def grid_mesh(nx, ny, size=1.0):
    """Planar (z = 0) square grid triangulated along one diagonal per cell."""
    xs = np.linspace(0.0, size, nx + 1)
    ys = np.linspace(0.0, size, ny + 1)
    X, Y = np.meshgrid(xs, ys, indexing="xy")
    v = np.stack([X.ravel(), Y.ravel(), np.zeros(X.size)], axis=1)
    faces = []
    for j in range(ny):
        for i in range(nx):
            a = j * (nx + 1) + i
            b, c, d = a + 1, a + nx + 1, a + nx + 2
            faces += [[a, b, d], [a, d, c]]
    return TriMesh(v, np.array(faces))
