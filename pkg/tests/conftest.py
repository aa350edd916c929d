import numpy as np
import pytest

from jacpose.mesh import TriMesh, grid_mesh, icosahedron
from jacpose.synth import PoseParams, WormSpec, gen_pose, gen_template, sample_poses

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


def random_worm(seed, max_faces=5000, jitter=1e-3):
    """A randomly shaped and posed worm with small vertex noise."""
    rng = np.random.default_rng(seed)
    ring = int(rng.integers(6, 16))
    segments = int(rng.integers(3, min(40, max_faces // (2 * ring)) + 1))
    spec = WormSpec(
        segments=segments,
        ring=ring,
        length=float(rng.uniform(0.5, 2.0)),
        radius=float(rng.uniform(0.08, 0.3)),
        scale=tuple(rng.uniform(0.7, 1.4, 3)),
    )
    pose = sample_poses(spec, 1, seed, joints=range(1, segments - 1))[0]
    mesh = gen_pose(spec, pose)
    v = mesh.vertices + jitter * bbox(mesh) * rng.standard_normal(mesh.vertices.shape)
    return TriMesh(v, mesh.faces)


def bbox(mesh):
    return float(np.linalg.norm(mesh.vertices.max(0) - mesh.vertices.min(0)))


@pytest.fixture
def ico():
    return icosahedron()


@pytest.fixture
def grid():
    return grid_mesh(5, 4)


@pytest.fixture
def small_worm_spec():
    # 6 * 8 + 2 = 50 vertices
    return WormSpec(segments=6, ring=8, name="small")


@pytest.fixture
def small_worm(small_worm_spec):
    return gen_template(small_worm_spec)


@pytest.fixture
def small_worm_pose(small_worm_spec):
    bend = np.zeros(6)
    twist = np.zeros(6)
    bend[2], twist[3] = 0.6, -0.3
    return gen_pose(small_worm_spec, PoseParams(bend, twist))
