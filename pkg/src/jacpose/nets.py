"""Pose extractor, pose applier and latent refiner.

All three are built from two pieces: farthest point sampling and a vector
attention block that aggregates the ``m`` nearest keys of every query with
per-channel softmax weights. Set-valued inputs are either reduced in distance
order (attention over nearest neighbours) or put into a canonical row order
before any cross-token reduction, which makes the networks exactly invariant
to the order of the latent tuples.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .mesh import face_centroids
from .tensor import Tensor


class ShapeError(ValueError):
    pass


@dataclass
class PoseLatent:
    """K keypoints ``Z`` (K, 3) paired with K feature vectors ``H`` (K, d).

    Either field may be a plain array or a :class:`Tensor` that carries
    gradients back into the network that produced it.
    """

    Z: object
    H: object

    @property
    def K(self):
        return self.Z.shape[0]

    @property
    def d(self):
        return self.H.shape[1]

    def numpy(self):
        z = self.Z.data if isinstance(self.Z, Tensor) else np.asarray(self.Z)
        h = self.H.data if isinstance(self.H, Tensor) else np.asarray(self.H)
        return z, h

    def detach(self):
        z, h = self.numpy()
        return PoseLatent(z.copy(), h.copy())

    def permuted(self, perm):
        z, h = self.numpy()
        return PoseLatent(z[perm], h[perm])


_CACHE_SIZE = 4096
_fps_cache = {}
_knn_cache = {}


def _memo(cache, key, compute):
    out = cache.get(key)
    if out is None:
        if len(cache) >= _CACHE_SIZE:
            cache.clear()
        out = cache[key] = compute()
        out.setflags(write=False)
    return out


def fps(points, count, seed_index=0):
    """Greedy farthest point sampling; ties go to the lowest index."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    key = (points.shape, points.tobytes(), count, seed_index)
    return _memo(_fps_cache, key, lambda: _fps(points, count, seed_index))


def _fps(points, count, seed_index):
    n = len(points)
    if count > n:
        raise ValueError(f"cannot sample {count} points from {n}")
    if count <= 0:
        return np.zeros(0, dtype=np.int64)
    out = np.empty(count, dtype=np.int64)
    out[0] = seed_index
    dist = np.sum((points - points[seed_index]) ** 2, axis=1)
    for i in range(1, count):
        nxt = int(np.argmax(dist))
        out[i] = nxt
        dist = np.minimum(dist, np.sum((points - points[nxt]) ** 2, axis=1))
    return out


def knn(query_pos, key_pos, m):
    """Indices ``(Q, m)`` of the m nearest keys per query, nearest first."""
    query_pos = np.ascontiguousarray(query_pos, dtype=np.float64)
    key_pos = np.ascontiguousarray(key_pos, dtype=np.float64)
    key = (query_pos.shape, query_pos.tobytes(), key_pos.shape, key_pos.tobytes(), m)
    return _memo(_knn_cache, key, lambda: _knn(query_pos, key_pos, m))


def _knn(query_pos, key_pos, m):
    d2 = np.sum((query_pos[:, None, :] - key_pos[None, :, :]) ** 2, axis=-1)
    if m < key_pos.shape[0]:
        part = np.argpartition(d2, m - 1, axis=1)[:, :m]
        order = np.argsort(np.take_along_axis(d2, part, 1), axis=1, kind="stable")
        return np.take_along_axis(part, order, 1)
    return np.argsort(d2, axis=1, kind="stable")


def canonical_order(rows):
    """Lexicographic row order of a (K, c) array."""
    rows = np.asarray(rows)
    return np.lexsort(rows.T[::-1])


class ParamSet:
    """Named parameter tensors plus the hyperparameters that fix their shapes."""

    kind = "params"

    def __init__(self, hparams):
        self.hparams = dict(hparams)
        self.params = {}

    def _add(self, name, array):
        self.params[name] = Tensor(array, requires_grad=True, name=name)

    def _linear(self, rng, name, n_in, n_out, zero=False, gain=np.sqrt(2.0)):
        w = np.zeros((n_in, n_out)) if zero else rng.standard_normal((n_in, n_out)) * gain / np.sqrt(n_in)
        self._add(f"{name}.w", w)
        self._add(f"{name}.b", np.zeros(n_out))

    def _norm(self, name, width):
        self._add(f"{name}.g", np.ones(width))
        self._add(f"{name}.b", np.zeros(width))

    def dense(self, x, name):
        return T.matmul(x, self.params[f"{name}.w"]) + self.params[f"{name}.b"]

    def norm(self, x, name):
        return T.layer_norm(x) * self.params[f"{name}.g"] + self.params[f"{name}.b"]

    def mlp2(self, x, name):
        return self.dense(T.relu(self.dense(x, f"{name}.0")), f"{name}.1")

    def state(self):
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state(self, arrays):
        missing = set(self.params) - set(arrays)
        extra = set(arrays) - set(self.params)
        if missing or extra:
            raise ShapeError(f"parameter manifest mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for k, arr in arrays.items():
            if arr.shape != self.params[k].shape:
                raise ShapeError(f"{k}: shape {arr.shape}, expected {self.params[k].shape}")
            self.params[k].data = np.array(arr, dtype=np.float64)
        return self

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def grads(self):
        return {k: p.grad for k, p in self.params.items()}


# -- vector attention ---------------------------------------------------------


def _init_attention(ps, rng, name, d):
    for part in ("q", "k", "v"):
        ps._linear(rng, f"{name}.{part}", d, d, gain=1.0)
    ps._linear(rng, f"{name}.pos", 3, d, gain=1.0)
    ps._linear(rng, f"{name}.gamma.0", d, d)
    ps._linear(rng, f"{name}.gamma.1", d, d, gain=1.0)
    ps._norm(f"{name}.ln", d)


def vector_attention(ps, name, q_pos, q_feat, k_pos, k_feat, m):
    """One vector-attention block of ``ps`` under the parameter prefix ``name``.

    Positions may be arrays or tensors; neighbour search uses their values.
    Returns ``(Q, d)`` features: layer-normed query residual plus the per-channel
    softmax-weighted sum of the neighbours' value projections.
    """
    q_pos, k_pos = T.as_tensor(q_pos), T.as_tensor(k_pos)
    Q, M = q_pos.shape[0], k_pos.shape[0]
    if q_feat.shape[0] != Q or k_feat.shape[0] != M:
        raise ShapeError("positions and features disagree on point counts")
    if q_feat.shape[1] != k_feat.shape[1]:
        raise ShapeError(f"feature widths differ: {q_feat.shape[1]} vs {k_feat.shape[1]}")
    if not 1 <= m <= M:
        raise ShapeError(f"m_neighbors={m} must lie in [1, {M}]")
    idx = knn(q_pos.data, k_pos.data, m)
    d = q_feat.shape[1]
    # The projections are linear, so project per point and gather afterwards:
    # phi(q) - psi(k) + P(q_pos - k_pos) splits into a query and a key part.
    w_pos = ps.params[f"{name}.pos.w"]
    q_part = ps.dense(q_feat, f"{name}.q") + T.matmul(q_pos, w_pos) + ps.params[f"{name}.pos.b"]
    k_part = ps.dense(k_feat, f"{name}.k") + T.matmul(k_pos, w_pos)
    pre = T.reshape(q_part, (Q, 1, d)) - T.gather(k_part, idx)
    weights = T.softmax(ps.mlp2(pre, f"{name}.gamma"), axis=1)
    agg = T.sum(weights * T.gather(ps.dense(k_feat, f"{name}.v"), idx), axis=1)
    return ps.norm(q_feat + agg, f"{name}.ln")


def vector_attention_block(queries, keys, m_neighbors, d=None, seed=0, params=None):
    """Stand-alone block: ``queries``/``keys`` are ``(positions, features)`` pairs."""
    d = d or np.shape(queries[1])[1]
    if params is None:
        params = ParamSet({"d": d})
        _init_attention(params, np.random.default_rng(seed), "att", d)
    out = vector_attention(
        params, "att", queries[0], T.as_tensor(queries[1]), keys[0], T.as_tensor(keys[1]), m_neighbors
    )
    return out, params


# -- extractor -----------------------------------------------------------------


class ExtractorParams(ParamSet):
    kind = "extractor"

    def __init__(self, K=100, d=64, m_neighbors=8, stages=2, seed=0):
        super().__init__({"K": K, "d": d, "m_neighbors": m_neighbors, "stages": stages})
        rng = np.random.default_rng([seed, 1])
        self._linear(rng, "embed.0", 3, d)
        self._linear(rng, "embed.1", d, d, gain=1.0)
        for s in range(stages):
            _init_attention(self, rng, f"stage{s}", d)


def extract_pose(params, mesh_or_points):
    """Keypoints by FPS over progressively downsampled points, with their features."""
    hp = params.hparams
    K, stages, m = hp["K"], hp["stages"], hp["m_neighbors"]
    pos = getattr(mesh_or_points, "vertices", mesh_or_points)
    pos = np.asarray(pos, dtype=np.float64)
    if len(pos) < K:
        raise ValueError(f"mesh has {len(pos)} vertices, need at least K={K}")
    feat = params.mlp2(Tensor(pos), "embed")
    for s in range(stages):
        feat = vector_attention(params, f"stage{s}", pos, feat, pos, feat, min(m, len(pos)))
        keep = fps(pos, max(len(pos) // 2, K))
        pos = pos[keep]
        feat = T.gather(feat, keep)
    keep = fps(pos, K)
    return PoseLatent(pos[keep].copy(), T.gather(feat, keep))


# -- applier -------------------------------------------------------------------


class ApplierParams(ParamSet):
    """Implicit deformation field queried at face centroids (``mode='jacobian'``)
    or vertices (``mode='vertex'``)."""

    kind = "applier"

    def __init__(self, K=100, d=64, m_neighbors=8, mode="jacobian", seed=0):
        if mode not in ("jacobian", "vertex"):
            raise ValueError(f"unknown applier mode {mode!r}")
        super().__init__({"K": K, "d": d, "m_neighbors": m_neighbors, "mode": mode})
        rng = np.random.default_rng([seed, 2])
        self._linear(rng, "embed.0", 3, d)
        self._linear(rng, "embed.1", d, d, gain=1.0)
        _init_attention(self, rng, "att", d)
        self._linear(rng, "head.0", d, d)
        self._linear(rng, "head.1", d, 9 if mode == "jacobian" else 3, zero=True)

    @property
    def mode(self):
        return self.hparams["mode"]


def _check_latent(params, latent):
    K, d = params.hparams["K"], params.hparams["d"]
    if latent.Z.shape != (K, 3) or latent.H.shape != (K, d):
        raise ShapeError(f"latent shapes {latent.Z.shape}/{latent.H.shape} do not match K={K}, d={d}")


def _query(params, latent, points, m_neighbors):
    _check_latent(params, latent)
    m = min(m_neighbors or params.hparams["m_neighbors"], params.hparams["K"])
    # canonical token order makes neighbour ties and summation order independent of input order
    Z, H = T.as_tensor(latent.Z), T.as_tensor(latent.H)
    perm = canonical_order(np.concatenate([Z.data, H.data], axis=1))
    feat = params.mlp2(Tensor(points), "embed")
    feat = vector_attention(params, "att", points, feat, T.gather(Z, perm), T.gather(H, perm), m)
    return params.mlp2(feat, "head")


def apply_pose(params, latent, template, m_neighbors=None):
    """Face Jacobians ``(F, 3, 3)`` for ``template`` under ``latent``: identity plus a learned residual."""
    if params.mode != "jacobian":
        raise ValueError("apply_pose needs a jacobian-mode applier")
    out = _query(params, latent, face_centroids(template), m_neighbors)
    return T.reshape(out, (template.n_faces, 3, 3)) + np.eye(3)


def apply_pose_vertices(params, latent, template, m_neighbors=None):
    """Vertex positions ``(V, 3)``: template positions plus a learned offset."""
    if params.mode != "vertex":
        raise ValueError("apply_pose_vertices needs a vertex-mode applier")
    return _query(params, latent, template.vertices, m_neighbors) + template.vertices


# -- refiner -------------------------------------------------------------------


def _init_transformer_block(ps, rng, name, w):
    ps._norm(f"{name}.ln1", w)
    for part in ("q", "k", "v"):
        ps._linear(rng, f"{name}.{part}", w, w, gain=1.0)
    ps._linear(rng, f"{name}.o", w, w, gain=1.0)
    ps._norm(f"{name}.ln2", w)
    ps._linear(rng, f"{name}.ff.0", w, 2 * w)
    ps._linear(rng, f"{name}.ff.1", 2 * w, w, gain=1.0)


def transformer_block(ps, name, x):
    """Pre-norm self-attention block over the second-to-last axis of ``x``."""
    w = x.shape[-1]
    h = ps.norm(x, f"{name}.ln1")
    q, k, v = (ps.dense(h, f"{name}.{p}") for p in ("q", "k", "v"))
    axes = tuple(range(x.ndim - 2)) + (x.ndim - 1, x.ndim - 2)
    att = T.softmax(T.matmul(q, T.transpose(k, axes)) * (1.0 / np.sqrt(w)), axis=-1)
    x = x + ps.dense(T.matmul(att, v), f"{name}.o")
    return x + ps.mlp2(ps.norm(x, f"{name}.ln2"), f"{name}.ff")


class RefinerParams(ParamSet):
    kind = "refiner"

    def __init__(self, K=100, d=64, width=64, blocks=2, seed=0):
        super().__init__({"K": K, "d": d, "width": width, "blocks": blocks})
        rng = np.random.default_rng([seed, 3])
        self._linear(rng, "in", 3 + d, width, gain=1.0)
        for b in range(blocks):
            _init_transformer_block(self, rng, f"block{b}", width)
        self._linear(rng, "out", width, 3 + d, zero=True)


def refine_latent(params, latent):
    """Residual update of every (z, h) tuple; the identity at initialization."""
    _check_latent(params, latent)
    Z, H = T.as_tensor(latent.Z), T.as_tensor(latent.H)
    tokens = T.concat([Z, H], axis=1)
    perm = canonical_order(tokens.data)
    inv = np.argsort(perm)
    x = params.dense(T.gather(tokens, perm), "in")
    for b in range(params.hparams["blocks"]):
        x = transformer_block(params, f"block{b}", x)
    delta = T.gather(params.dense(x, "out"), inv)
    return PoseLatent(Z + delta[:, :3], H + delta[:, 3:])
