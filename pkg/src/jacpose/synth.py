"""Articulated tube ("worm") meshes with analytic poses.

A worm is a stack of vertex rings around a straight spine along +x, closed by
one cap vertex at each end. Vertex 0 is the start cap, then the rings in order,
then the end cap. A pose assigns a bend (about the local z axis) and a twist
(about the local spine axis) to every ring's joint; everything past a joint
follows its rotation, and the joint ring itself turns by half the angles.

Two specs that differ only in scale or radius, posed with the same
:class:`PoseParams`, are exact pose-transfer counterparts of each other.
"""
from dataclasses import dataclass, field

import numpy as np

from .mesh import TriMesh


@dataclass(frozen=True)
class WormSpec:
    segments: int = 20
    ring: int = 10
    length: float = 1.0
    radius: float = 0.12
    radii: tuple = None
    scale: tuple = (1.0, 1.0, 1.0)
    name: str = "worm"

    def __post_init__(self):
        if self.segments < 3:
            raise ValueError("a worm needs at least 3 segments")
        if self.ring < 6:
            raise ValueError("ring resolution must be at least 6")
        if not self.length > 0:
            raise ValueError("length must be positive")
        if len(self.scale) != 3 or min(self.scale) <= 0:
            raise ValueError("scale needs three positive factors")
        r = self.ring_radii()
        if len(r) != self.segments or not np.all(r > 0):
            raise ValueError("radii must be positive, one per segment")

    def ring_radii(self):
        if self.radii is not None:
            return np.asarray(self.radii, dtype=np.float64)
        s = (np.arange(self.segments) + 0.5) / self.segments
        return self.radius * (0.55 + 0.45 * np.sin(np.pi * s))

    @property
    def n_vertices(self):
        return self.segments * self.ring + 2

    @property
    def n_faces(self):
        return 2 * self.ring * self.segments


@dataclass(frozen=True)
class PoseParams:
    """Per-joint bend and twist angles in radians, one joint per ring."""

    bend: np.ndarray
    twist: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.bend, dtype=np.float64)
        t = np.asarray(self.twist, dtype=np.float64)
        if b.shape != t.shape or b.ndim != 1:
            raise ValueError("bend and twist must be 1-D arrays of equal length")
        if not (np.all(np.isfinite(b)) and np.all(np.isfinite(t))):
            raise ValueError("pose angles must be finite")
        object.__setattr__(self, "bend", b)
        object.__setattr__(self, "twist", t)

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n))

    def __eq__(self, other):
        return (
            isinstance(other, PoseParams)
            and np.array_equal(self.bend, other.bend)
            and np.array_equal(self.twist, other.twist)
        )


def _rot_z(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _rot_x(a):
    c, s = np.cos(a), np.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def _faces(S, R):
    faces = []
    ring = lambda i, j: 1 + i * R + (j % R)  # noqa: E731
    for j in range(R):
        faces.append([0, ring(0, j + 1), ring(0, j)])
    for i in range(S - 1):
        for j in range(R):
            a, b = ring(i, j), ring(i, j + 1)
            c, d = ring(i + 1, j), ring(i + 1, j + 1)
            faces += [[a, b, d], [a, d, c]]
    end = S * R + 1
    for j in range(R):
        faces.append([end, ring(S - 1, j), ring(S - 1, j + 1)])
    return np.array(faces, dtype=np.int64)


def _rest_geometry(spec):
    S, R = spec.segments, spec.ring
    xs = np.linspace(0.0, spec.length, S)
    radii = spec.ring_radii()
    theta = 2.0 * np.pi * np.arange(R) / R
    rings = np.stack(
        [
            np.repeat(xs, R),
            (radii[:, None] * np.cos(theta)[None, :]).ravel(),
            (radii[:, None] * np.sin(theta)[None, :]).ravel(),
        ],
        axis=1,
    )
    caps = np.array([[-0.5 * radii[0], 0.0, 0.0], [spec.length + 0.5 * radii[-1], 0.0, 0.0]])
    v = np.concatenate([caps[:1], rings, caps[1:]]) * np.asarray(spec.scale, dtype=np.float64)
    spine = np.stack([xs, np.zeros(S), np.zeros(S)], axis=1) * np.asarray(spec.scale, dtype=np.float64)
    return v, spine


def gen_template(spec):
    v, _ = _rest_geometry(spec)
    return TriMesh(v, _faces(spec.segments, spec.ring))


def _ring_slices(spec):
    S, R = spec.segments, spec.ring
    return [np.arange(1 + i * R, 1 + (i + 1) * R) for i in range(S)]


def gen_pose(spec, pose):
    S = spec.segments
    if pose.bend.shape != (S,):
        raise ValueError(f"pose has {pose.bend.size} joints, spec has {S}")
    rest, spine = _rest_geometry(spec)
    out = rest.copy()
    members = _ring_slices(spec)
    members[0] = np.concatenate([[0], members[0]])
    members[-1] = np.concatenate([members[-1], [len(rest) - 1]])
    eye = np.eye(3)
    frame = eye.copy()
    offset = np.zeros(3)  # posed joint position minus rest joint position
    for i in range(S):
        local = _rot_z(pose.bend[i]) @ _rot_x(pose.twist[i])
        half = _rot_z(0.5 * pose.bend[i]) @ _rot_x(0.5 * pose.twist[i])
        idx = members[i]
        rel = rest[idx] - spine[i]
        out[idx] = rest[idx] + offset + rel @ (frame @ half - eye).T
        frame = frame @ local
        if i + 1 < S:
            seg = spine[i + 1] - spine[i]
            offset = offset + (frame - eye) @ seg
    return TriMesh(out, _faces(spec.segments, spec.ring))


def default_joints(spec, count=3):
    """Evenly spaced interior joints; the first and last ring stay unbent."""
    return tuple(int(round(x)) for x in np.linspace(0, spec.segments - 1, count + 2)[1:-1])


def sample_poses(spec, n, seed, joints=None, bend_range=(-np.pi / 3, np.pi / 3), twist_range=(-np.pi / 6, np.pi / 6)):
    rng = np.random.default_rng(seed)
    joints = default_joints(spec) if joints is None else tuple(joints)
    poses = []
    for _ in range(n):
        bend = np.zeros(spec.segments)
        twist = np.zeros(spec.segments)
        bend[list(joints)] = rng.uniform(*bend_range, size=len(joints))
        twist[list(joints)] = rng.uniform(*twist_range, size=len(joints))
        poses.append(PoseParams(bend, twist))
    return poses


def gen_dataset(spec, n, seed, **kwargs):
    """``n`` random poses of ``spec`` as a list of ``(mesh, pose)`` pairs."""
    if n < 1:
        raise ValueError("n must be at least 1")
    return [(gen_pose(spec, p), p) for p in sample_poses(spec, n, seed, **kwargs)]


WORM_A = WormSpec(name="A")
WORM_B = WormSpec(radius=0.15, scale=(1.1, 1.0, 1.0), name="B")
PRESETS = {"A": WORM_A, "B": WORM_B}
