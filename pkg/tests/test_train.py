import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from jacpose import nets
from jacpose import tensor as T
from jacpose.diffgeo import build_cotan_laplacian, build_gradient, jacobian_from_vertices
from jacpose.mesh import TriMesh, bbox_diag, edge_set
from jacpose.nets import ApplierParams, ExtractorParams, PoseLatent, RefinerParams
from jacpose.poisson import build_system
from jacpose.synth import WormSpec, gen_dataset, gen_template
from jacpose.train import (
    ConnectivityError,
    RefinementGeometry,
    TrainConfig,
    batch_indices,
    loss_jacobian_route,
    loss_refinement,
    loss_vertex,
    loss_vertex_route,
    pmd,
    train_autoencoder,
    train_refiner,
    transfer_vertices,
    write_history,
)

SMALL = dict(K=4, d=8, m_neighbors=3, batch_size=2)


def test_vertex_loss_examples():
    rng = np.random.default_rng(0)
    V = rng.standard_normal((10, 3))
    assert loss_vertex(V, V).item() == 0.0
    assert loss_vertex(V + [0.1, 0, 0], V).item() == pytest.approx(0.0, abs=1e-30)


@settings(max_examples=30, deadline=None)
@given(st.integers(3, 40), st.floats(0.01, 5.0), st.integers(0, 2**31 - 1))
def test_vertex_loss_single_displacement(N, delta, seed):
    rng = np.random.default_rng(seed)
    V = rng.standard_normal((N, 3))
    W = V.copy()
    W[0, 1] += delta
    closed = ((N - 1) / N) ** 2 * delta**2 / N + (N - 1) * (delta / N) ** 2 / N
    assert loss_vertex(W, V).item() == pytest.approx(closed, rel=1e-10)


def test_vertex_loss_shape_mismatch():
    with pytest.raises(ValueError):
        loss_vertex(np.zeros((3, 3)), np.zeros((4, 3)))


def test_pmd_examples():
    rng = np.random.default_rng(0)
    m = TriMesh(rng.standard_normal((3, 3)), np.array([[0, 1, 2]]))
    assert pmd(m, m) == 0.0
    assert pmd(m.with_vertices(m.vertices + [0.1, 0, 0]), m) == pytest.approx(0.01, rel=1e-12)
    other = TriMesh(rng.standard_normal((3, 3)), np.array([[0, 2, 1]]))
    with pytest.raises(ConnectivityError):
        pmd(m, other)


def test_oracle_applier_reconstructs(small_worm, small_worm_pose):
    system = build_system(small_worm)
    op = build_gradient(small_worm)
    oracle = lambda latent, template: jacobian_from_vertices(op, small_worm_pose.vertices)  # noqa: E731
    loss = loss_jacobian_route(ExtractorParams(K=4, d=4), oracle, small_worm_pose, small_worm, system)
    assert loss.item() <= 1e-10 * bbox_diag(small_worm) ** 2


def test_untrained_applier_misses_bent_pose(small_worm, small_worm_pose):
    system = build_system(small_worm)
    loss = loss_jacobian_route(ExtractorParams(K=4, d=4), ApplierParams(K=4, d=4), small_worm_pose, small_worm, system)
    assert loss.item() > 0


def test_connectivity_mismatch(small_worm):
    other = gen_template(WormSpec(segments=6, ring=9))
    with pytest.raises(ConnectivityError):
        loss_vertex_route(ExtractorParams(K=4, d=4), ApplierParams(K=4, d=4, mode="vertex"), other, small_worm)


def test_final_layer_gradient(small_worm, small_worm_pose):
    system = build_system(small_worm)
    ex = ExtractorParams(K=4, d=4, m_neighbors=3)
    ap = ApplierParams(K=4, d=4, m_neighbors=3)
    w = ap.params["head.1.w"]
    w.data = 0.01 * np.random.default_rng(0).standard_normal(w.shape)

    def fn(xs):
        ap.params["head.1.w"] = xs[0]
        return loss_jacobian_route(ex, ap, small_worm_pose, small_worm, system)

    assert T.gradcheck(fn, [w.data.copy()]) <= 1e-4


# -- refinement loss -----------------------------------------------------------


def tri_latent(rng, K=3, d=2):
    return PoseLatent(rng.standard_normal((K, 3)), rng.standard_normal((K, d)))


def test_refinement_zero_at_fixed_point(small_worm):
    lat = tri_latent(np.random.default_rng(0))
    total, parts = loss_refinement(lat, lat, small_worm.vertices, small_worm)
    assert total.item() == 0.0 and parts == {"lap": 0.0, "edge": 0.0, "reg": 0.0}


def test_single_edge_stretch():
    tri = TriMesh(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0.0]]), np.array([[0, 1, 2]]))
    # move vertex 1 so |v1 - v0| = 1.2 while |v1 - v2| stays sqrt(2)
    y = 0.22
    moved = tri.vertices.copy()
    moved[1] = [np.sqrt(1.44 - y * y), y, 0.0]
    lat = tri_latent(np.random.default_rng(0))
    _, parts = loss_refinement(lat, lat, moved, tri)
    assert parts["edge"] == pytest.approx(0.2 / 3, rel=1e-12)


def test_laplacian_term_dense_oracle(small_worm):
    rng = np.random.default_rng(1)
    V = small_worm.vertices + 0.01 * rng.standard_normal(small_worm.vertices.shape)
    lat = tri_latent(rng)
    _, parts = loss_refinement(lat, lat, V, small_worm)
    L = build_cotan_laplacian(small_worm).toarray()
    D = V - small_worm.vertices
    expected = np.mean([np.dot(row, row) for row in L @ D])
    assert parts["lap"] == pytest.approx(expected, rel=1e-12)


def test_regularizer_and_weights(small_worm):
    rng = np.random.default_rng(2)
    a, b = tri_latent(rng), tri_latent(rng)
    reg = np.sum((a.Z - b.Z) ** 2) + np.sum((a.H - b.H) ** 2)
    cfg = TrainConfig(lambda_lap=0.0, lambda_edge=0.0, lambda_reg=0.5)
    total, parts = loss_refinement(a, b, small_worm.vertices, small_worm, cfg)
    assert parts["reg"] == pytest.approx(reg, rel=1e-13)
    assert total.item() == pytest.approx(0.5 * reg, rel=1e-13)
    assert TrainConfig().lambda_reg == 0.05 and TrainConfig().lambda_lap == TrainConfig().lambda_edge == 1.0


def test_refinement_shape_check(small_worm):
    lat = tri_latent(np.random.default_rng(0))
    with pytest.raises(ValueError):
        loss_refinement(lat, lat, np.zeros((7, 3)), small_worm)


def test_geometry_rest_lengths(small_worm):
    g = RefinementGeometry.from_template(small_worm)
    e = edge_set(small_worm).edges
    assert np.array_equal(g.edges, e)
    assert g.rest_lengths.min() > 0


# -- config and loops ----------------------------------------------------------


@pytest.mark.parametrize("kwargs", [{"steps": -1}, {"lambda_reg": -0.1}, {"route": "bones"}, {"batch_size": 0}, {"lr": 0.0}])
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_batches_cover_each_epoch():
    seen = np.concatenate([batch_indices(10, 4, 7, s) for s in range(3)])
    assert sorted(seen.tolist()) == list(range(10))
    assert np.array_equal(batch_indices(10, 4, 7, 5), batch_indices(10, 4, 7, 5))


@pytest.fixture(scope="module")
def tiny():
    spec = WormSpec(segments=6, ring=8)
    return gen_template(spec), [m for m, _ in gen_dataset(spec, 3, seed=0)]


def test_training_is_reproducible(tiny):
    template, data = tiny
    cfg = TrainConfig(steps=4, seed=3, **SMALL)
    a = train_autoencoder(cfg, data, template)
    b = train_autoencoder(cfg, data, template)
    assert a.history == b.history
    assert all(np.array_equal(a.applier.params[k].data, b.applier.params[k].data) for k in a.applier.params)


def test_resume_matches_uninterrupted(tiny):
    template, data = tiny
    full = train_autoencoder(TrainConfig(steps=6, **SMALL), data, template)
    half = train_autoencoder(TrainConfig(steps=3, **SMALL), data, template)
    rest = train_autoencoder(TrainConfig(steps=3, **SMALL), data, template, half.extractor, half.applier, half.adam)
    assert [s for s, _ in rest.history] == [4, 5, 6]
    assert half.history + rest.history == full.history


def test_identity_task(tiny):
    template, _ = tiny
    for route in ("jacobian", "vertex"):
        r = train_autoencoder(TrainConfig(steps=20, route=route, **SMALL), [template], template)
        assert r.final_loss <= 1e-6 * bbox_diag(template) ** 2


def test_vertex_route_trains(tiny):
    template, data = tiny
    r = train_autoencoder(TrainConfig(steps=30, route="vertex", lr=3e-3, **SMALL), data, template)
    assert r.final_loss < r.initial_loss


def test_nan_aborts_with_step(tiny, monkeypatch):
    template, data = tiny
    import jacpose.train as train_mod

    real = train_mod.loss_vertex
    calls = []

    def poisoned(pred, target):
        calls.append(1)
        out = real(pred, target)
        return out * np.nan if len(calls) > 3 + 2 else out

    monkeypatch.setattr(train_mod, "loss_vertex", poisoned)
    with pytest.raises(FloatingPointError, match="step 1"):
        train_autoencoder(TrainConfig(steps=5, **SMALL), data, template)


def test_training_rejects_mismatches(tiny):
    template, data = tiny
    with pytest.raises(ValueError):
        train_autoencoder(TrainConfig(**SMALL), [], template)
    with pytest.raises(ConnectivityError):
        train_autoencoder(TrainConfig(**SMALL), [gen_template(WormSpec(segments=6, ring=9))], template)
    ex, ap = ExtractorParams(K=4, d=8, m_neighbors=3), ApplierParams(K=4, d=8, m_neighbors=3, mode="vertex")
    with pytest.raises(ValueError, match="route"):
        train_autoencoder(TrainConfig(steps=1, **SMALL), data, template, ex, ap)


def test_zero_step_refiner_is_identity(tiny):
    template, data = tiny
    cfg = TrainConfig(steps=0, **SMALL)
    r = train_autoencoder(TrainConfig(steps=2, **SMALL), data, template)
    ref = train_refiner(cfg, r.extractor, r.applier, data, template)
    assert ref.history == []
    plain = transfer_vertices(r.extractor, r.applier, data[0], template)
    refined = transfer_vertices(r.extractor, r.applier, data[0], template, refiner=ref.refiner)
    assert np.array_equal(plain, refined)


def test_refiner_trains_only_refiner(tiny):
    template, data = tiny
    r = train_autoencoder(TrainConfig(steps=2, **SMALL), data, template)
    before = {k: p.data.copy() for k, p in r.applier.params.items()}
    ref = train_refiner(TrainConfig(steps=3, **SMALL), r.extractor, r.applier, data, template)
    assert all(np.array_equal(before[k], p.data) for k, p in r.applier.params.items())
    assert all(p.requires_grad for p in r.applier.params.values())
    assert len(ref.history) == 3 and all(np.isfinite(row).all() for row in np.array(ref.history))
    assert isinstance(ref.refiner, RefinerParams)


def test_write_history(tmp_path):
    write_history(tmp_path / "h.csv", [(1, 0.5, 0.25), (2, 1 / 3, 0.0)], ["step", "a", "b"])
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "step,a,b" and lines[1] == "1,0.5,0.25"
    assert float(lines[2].split(",")[1]) == 1 / 3


def test_transfer_latent_uses_extractor(tiny):
    template, data = tiny
    ex = ExtractorParams(K=4, d=8, m_neighbors=3)
    lat = nets.extract_pose(ex, data[0])
    assert lat.Z.shape == (4, 3)
