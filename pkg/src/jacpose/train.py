"""Reconstruction and refinement losses and their ADAM training loops."""
from __future__ import annotations

import contextlib
from dataclasses import dataclass, field, fields

import numpy as np

from . import nets
from . import tensor as T
from .mesh import edge_set
from .nets import ApplierParams, ExtractorParams, RefinerParams
from .optim import AdamState, adam_step
from .poisson import build_system, solve_tensor
from .tensor import Tensor


class ConnectivityError(ValueError):
    pass


@dataclass
class TrainConfig:
    steps: int = 2000
    lr: float = 1e-3
    batch_size: int = 4
    lambda_lap: float = 1.0
    lambda_edge: float = 1.0
    lambda_reg: float = 5e-2
    seed: int = 0
    route: str = "jacobian"
    K: int = 100
    d: int = 64
    m_neighbors: int = 8
    stages: int = 2
    refiner_width: int = 64
    refiner_blocks: int = 2

    def __post_init__(self):
        if self.steps < 0:
            raise ValueError("steps must be non-negative")
        if min(self.lambda_lap, self.lambda_edge, self.lambda_reg) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.route not in ("vertex", "jacobian"):
            raise ValueError(f"route must be 'vertex' or 'jacobian', got {self.route!r}")
        if self.batch_size < 1 or self.lr <= 0:
            raise ValueError("batch_size and lr must be positive")

    @classmethod
    def field_names(cls):
        return [f.name for f in fields(cls)]


# -- losses --------------------------------------------------------------------


def loss_vertex(predicted, target):
    """Mean squared per-vertex distance after aligning both centroids."""
    predicted = T.as_tensor(predicted)
    target = np.asarray(target, dtype=np.float64)
    if predicted.shape != target.shape:
        raise ValueError(f"shape mismatch: {predicted.shape} vs {target.shape}")
    centered = predicted - T.mean(predicted, axis=0, keepdims=True)
    return T.mean(T.squared_norm(centered - (target - target.mean(axis=0))))


def pmd(pred, gt):
    """Mean over vertices of the squared distance between two meshes with equal connectivity.

    No alignment is applied, so a rigid offset counts in full.
    """
    if pred.n_vertices != gt.n_vertices or not np.array_equal(pred.faces, gt.faces):
        raise ConnectivityError("meshes differ in vertex count or face list")
    return float(np.mean(np.sum((pred.vertices - gt.vertices) ** 2, axis=1)))


def _same_connectivity(a, b):
    if a.faces.shape != b.faces.shape or not np.array_equal(a.faces, b.faces):
        raise ConnectivityError("sample and template do not share connectivity")


def loss_jacobian_route(extractor, applier, sample_mesh, template, system):
    """Reconstruction error of ``sample_mesh`` through extract, apply and Poisson solve.

    ``applier`` is either :class:`ApplierParams` or a callable
    ``(latent, template) -> (F, 3, 3)`` Jacobians.
    """
    _same_connectivity(sample_mesh, template)
    latent = nets.extract_pose(extractor, sample_mesh)
    if callable(applier):
        J = T.as_tensor(applier(latent, template))
    else:
        J = nets.apply_pose(applier, latent, template)
    return loss_vertex(solve_tensor(system, J), sample_mesh.vertices)


def loss_vertex_route(extractor, applier, sample_mesh, template):
    _same_connectivity(sample_mesh, template)
    latent = nets.extract_pose(extractor, sample_mesh)
    return loss_vertex(nets.apply_pose_vertices(applier, latent, template), sample_mesh.vertices)


@dataclass
class RefinementGeometry:
    """Per-target constants of the refinement loss."""

    laplacian: object
    edges: np.ndarray
    rest: np.ndarray
    rest_lengths: np.ndarray

    @classmethod
    def from_template(cls, template, laplacian=None):
        from .diffgeo import build_cotan_laplacian

        L = build_cotan_laplacian(template) if laplacian is None else laplacian
        e = edge_set(template).edges
        rest = template.vertices
        return cls(L, e, rest, np.linalg.norm(rest[e[:, 0]] - rest[e[:, 1]], axis=1))


def loss_refinement(latent_in, latent_out, transferred, template, config=None, geometry=None):
    """Weighted Laplacian, edge-length and latent-regularization terms.

    Returns ``(total, terms)`` where ``terms`` maps ``lap``, ``edge`` and ``reg``
    to their unweighted float values.
    """
    config = config or TrainConfig()
    geometry = geometry or RefinementGeometry.from_template(template)
    V = T.as_tensor(transferred)
    if V.shape != geometry.rest.shape:
        raise ValueError(f"transferred shape {V.shape} does not match template {geometry.rest.shape}")
    lap = T.mean(T.squared_norm(T.spmm(geometry.laplacian, V - geometry.rest)))
    e = geometry.edges
    lengths = T.sqrt(T.squared_norm(T.gather(V, e[:, 0]) - T.gather(V, e[:, 1])))
    edge = T.mean(T.abs(lengths - geometry.rest_lengths))
    z_in, h_in = latent_in.numpy()
    reg = T.sum(T.squared_norm(T.as_tensor(latent_out.Z) - z_in)) + T.sum(
        T.squared_norm(T.as_tensor(latent_out.H) - h_in)
    )
    total = config.lambda_lap * lap + config.lambda_edge * edge + config.lambda_reg * reg
    return total, {"lap": lap.item(), "edge": edge.item(), "reg": reg.item()}


# -- training loops ----------------------------------------------------------


@contextlib.contextmanager
def frozen(*paramsets):
    saved = [(p, p.requires_grad) for ps in paramsets for p in ps.params.values()]
    for p, _ in saved:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in saved:
            p.requires_grad = flag


def batch_indices(n, batch_size, seed, step):
    """Sample indices for 0-based ``step``: per-epoch permutations derived from the seed."""
    per_epoch = max(1, -(-n // batch_size))
    epoch, slot = divmod(step, per_epoch)
    perm = np.random.default_rng([seed, epoch]).permutation(n)
    return perm[slot * batch_size:(slot + 1) * batch_size]


def _merged(*paramsets):
    out = {}
    for ps in paramsets:
        for k, p in ps.params.items():
            out[f"{ps.kind}.{k}"] = p
    return out


@dataclass
class TrainResult:
    extractor: ExtractorParams
    applier: ApplierParams
    history: list = field(default_factory=list)  # (step, loss)
    adam: AdamState = None
    initial_loss: float = None
    final_loss: float = None


def dataset_loss(config, extractor, applier, dataset, template, system=None):
    """Mean reconstruction loss over the whole dataset for the configured route."""
    with T.no_grad():
        vals = [_sample_loss(config, extractor, applier, m, template, system).item() for m in dataset]
    return float(np.mean(vals))


def _sample_loss(config, extractor, applier, mesh, template, system):
    if config.route == "jacobian":
        return loss_jacobian_route(extractor, applier, mesh, template, system)
    return loss_vertex_route(extractor, applier, mesh, template)


def init_autoencoder(config):
    ex = ExtractorParams(config.K, config.d, config.m_neighbors, config.stages, seed=config.seed)
    ap = ApplierParams(config.K, config.d, config.m_neighbors, mode=config.route, seed=config.seed)
    return ex, ap


def train_autoencoder(config, dataset, template, extractor=None, applier=None, adam=None, callback=None):
    """Jointly fit extractor and applier to reconstruct ``dataset`` from ``template``.

    Passing previously trained parameters and their ``adam`` state resumes
    training; the step counter and batch order continue where they stopped.
    """
    if not dataset:
        raise ValueError("dataset is empty")
    for m in dataset:
        _same_connectivity(m, template)
    if extractor is None or applier is None:
        extractor, applier = init_autoencoder(config)
    if applier.mode != config.route:
        raise ValueError(f"applier mode {applier.mode!r} does not match route {config.route!r}")
    adam = adam or AdamState(lr=config.lr)
    system = build_system(template) if config.route == "jacobian" else None
    params = _merged(extractor, applier)
    result = TrainResult(extractor, applier, adam=adam)
    result.initial_loss = dataset_loss(config, extractor, applier, dataset, template, system)
    start = adam.step
    for step in range(start, start + config.steps):
        batch = batch_indices(len(dataset), config.batch_size, config.seed, step)
        extractor.zero_grad()
        applier.zero_grad()
        loss = T.mean(T.concat([
            T.reshape(_sample_loss(config, extractor, applier, dataset[i], template, system), (1,))
            for i in batch
        ]))
        value = loss.item()
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite loss at step {step}")
        T.backward(loss)
        adam_step(adam, params, {k: p.grad for k, p in params.items()})
        result.history.append((step + 1, value))
        if callback is not None:
            callback(step + 1, value)
    result.final_loss = dataset_loss(config, extractor, applier, dataset, template, system)
    return result


@dataclass
class RefineResult:
    refiner: RefinerParams
    history: list = field(default_factory=list)  # (step, total, lap, edge, reg)
    adam: AdamState = None


def transfer_vertices(extractor, applier, source_mesh, target_template, system=None, refiner=None):
    """Pose of ``source_mesh`` applied to ``target_template``; returns (V, 3) positions."""
    system = system or build_system(target_template)
    with T.no_grad():
        latent = nets.extract_pose(extractor, source_mesh)
        if refiner is not None:
            latent = nets.refine_latent(refiner, latent)
        if applier.mode == "vertex":
            return nets.apply_pose_vertices(applier, latent, target_template).data
        return solve_tensor(system, nets.apply_pose(applier, latent, target_template)).data


def train_refiner(config, extractor, applier, source_meshes, target_template, refiner=None, adam=None):
    """Fit the latent refiner on transfers to ``target_template``; everything else stays fixed."""
    if applier.mode != "jacobian":
        raise ValueError("refinement needs a jacobian-mode applier")
    system = build_system(target_template)
    geometry = RefinementGeometry.from_template(target_template, system.laplacian)
    with T.no_grad():
        latents = [nets.extract_pose(extractor, m).detach() for m in source_meshes]
    if refiner is None:
        refiner = RefinerParams(config.K, config.d, config.refiner_width, config.refiner_blocks, seed=config.seed)
    adam = adam or AdamState(lr=config.lr)
    result = RefineResult(refiner, adam=adam)
    start = adam.step
    with frozen(extractor, applier):
        for step in range(start, start + config.steps):
            batch = batch_indices(len(latents), config.batch_size, config.seed, step)
            refiner.zero_grad()
            totals, terms = [], []
            for i in batch:
                out = nets.refine_latent(refiner, latents[i])
                V = solve_tensor(system, nets.apply_pose(applier, out, target_template))
                total, parts = loss_refinement(latents[i], out, V, target_template, config, geometry)
                totals.append(T.reshape(total, (1,)))
                terms.append(parts)
            loss = T.mean(T.concat(totals))
            value = loss.item()
            if not np.isfinite(value):
                raise FloatingPointError(f"non-finite loss at step {step}")
            T.backward(loss)
            adam_step(adam, refiner.params, refiner.grads())
            mean_terms = {k: float(np.mean([t[k] for t in terms])) for k in ("lap", "edge", "reg")}
            result.history.append((step + 1, value, mean_terms["lap"], mean_terms["edge"], mean_terms["reg"]))
    return result


def write_history(path, rows, columns):
    with open(path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join([str(int(row[0]))] + ["%.17g" % v for v in row[1:]]) + "\n")
