"""Cascaded DDPMs over pose latents.

A keypoint model predicts the noise on the keypoint set alone; a feature model
predicts the noise on the features given the clean keypoints. Both are small
set transformers whose tokens carry a sinusoidal timestep embedding, and both
sort their tokens into a canonical order internally so they are exactly
permutation-equivariant.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import tensor as T
from .nets import ParamSet, PoseLatent, _init_transformer_block, transformer_block
from .optim import AdamState, adam_step
from .train import batch_indices


@dataclass(frozen=True)
class NoiseSchedule:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 5e-2

    def __post_init__(self):
        if not 0 < self.beta_start < self.beta_end < 1:
            raise ValueError("need 0 < beta_start < beta_end < 1")
        betas = np.linspace(self.beta_start, self.beta_end, self.T)
        alphas = 1.0 - betas
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", np.cumprod(alphas))

    def _at(self, table, t):
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep must lie in [1, {self.T}]")
        return table[t - 1]

    def beta(self, t):
        return self._at(self.betas, t)

    def alpha(self, t):
        return self._at(self.alphas, t)

    def alpha_bar(self, t):
        return self._at(self.alpha_bars, t)


def _per_sample(coef, x):
    coef = np.asarray(coef, dtype=np.float64)
    return coef.reshape(coef.shape + (1,) * (np.ndim(x) - coef.ndim))


def forward_noise(schedule, x0, t, noise):
    """``sqrt(abar_t) x0 + sqrt(1 - abar_t) noise``; ``t`` may be per leading-axis sample."""
    ab = _per_sample(schedule.alpha_bar(t), x0)
    return np.sqrt(ab) * np.asarray(x0) + np.sqrt(1.0 - ab) * np.asarray(noise)


def timestep_embedding(t, dim=128):
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    arg = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(arg), np.cos(arg)], axis=1)


class SetDenoiser(ParamSet):
    """Noise predictor over a set of K tokens of width ``channels``.

    With ``cond_channels > 0`` each token also receives per-token conditioning.
    Call as ``model(x_t, t, cond)`` with ``x_t`` of shape (B, K, c) or (K, c).
    """

    kind = "denoiser"

    def __init__(self, channels, cond_channels=0, width=64, blocks=2, temb=128, seed=0):
        super().__init__(
            {"channels": channels, "cond_channels": cond_channels, "width": width, "blocks": blocks, "temb": temb}
        )
        rng = np.random.default_rng([seed, 4, channels, cond_channels])
        self._linear(rng, "in", channels + cond_channels + temb, width, gain=1.0)
        for b in range(blocks):
            _init_transformer_block(self, rng, f"block{b}", width)
        self._norm("out_ln", width)
        self._linear(rng, "out", width, channels, zero=True)

    def __call__(self, x_t, t, cond=None):
        hp = self.hparams
        x = np.asarray(x_t, dtype=np.float64)
        single = x.ndim == 2
        if single:
            x = x[None]
        B, K, c = x.shape
        if c != hp["channels"]:
            raise ValueError(f"expected {hp['channels']} channels, got {c}")
        parts = [x]
        if hp["cond_channels"]:
            if cond is None:
                raise ValueError("this denoiser needs conditioning tokens")
            cond = np.asarray(cond, dtype=np.float64)
            cond = cond[None] if cond.ndim == 2 else cond
            if cond.shape != (B, K, hp["cond_channels"]):
                raise ValueError(f"conditioning shape {cond.shape} does not match {(B, K, hp['cond_channels'])}")
            parts.append(cond)
        keys = np.concatenate(parts, axis=-1)
        emb = timestep_embedding(np.broadcast_to(np.atleast_1d(t), (B,)), hp["temb"])
        tokens = np.concatenate([keys, np.broadcast_to(emb[:, None, :], (B, K, hp["temb"]))], axis=-1)
        perm = np.stack([np.lexsort(keys[b].T[::-1]) for b in range(B)])
        tokens = np.take_along_axis(tokens, perm[..., None], axis=1)
        h = self.dense(T.Tensor(tokens), "in")
        for b in range(hp["blocks"]):
            h = transformer_block(self, f"block{b}", h)
        out = self.dense(self.norm(h, "out_ln"), "out")
        inv = np.argsort(perm, axis=1) + K * np.arange(B)[:, None]
        out = T.reshape(T.gather(T.reshape(out, (B * K, c)), inv), (B, K, c))
        return T.reshape(out, (K, c)) if single else out


def KeypointDenoiser(width=64, blocks=2, temb=128, seed=0):
    return SetDenoiser(3, 0, width, blocks, temb, seed)


def FeatureDenoiser(d, width=64, blocks=2, temb=128, seed=0):
    return SetDenoiser(d, 3, width, blocks, temb, seed)


def _draw(rng, schedule, x0, t, noise):
    x0 = np.asarray(x0, dtype=np.float64)
    batch = x0.shape[:-2]
    if t is None:
        t = rng.integers(1, schedule.T + 1, size=batch or (1,))
        t = t.reshape(batch) if batch else t[0]
    if noise is None:
        noise = rng.standard_normal(x0.shape)
    return x0, t, noise


def _mse(pred, target):
    return T.mean(T.squared_norm(T.as_tensor(pred) - target)) * (1.0 / target.shape[-1])


def denoise_loss_keypoints(model, schedule, Z0, rng=None, t=None, noise=None):
    """Mean squared error between drawn noise and the model's prediction."""
    Z0, t, noise = _draw(rng, schedule, Z0, t, noise)
    return _mse(model(forward_noise(schedule, Z0, t, noise), t), noise)


def denoise_loss_features(model, schedule, H0, Z0, rng=None, t=None, noise=None):
    H0 = np.asarray(H0, dtype=np.float64)
    Z0 = np.asarray(Z0, dtype=np.float64)
    if Z0.shape[:-1] != H0.shape[:-1]:
        raise ValueError(f"keypoints {Z0.shape} and features {H0.shape} disagree on K")
    H0, t, noise = _draw(rng, schedule, H0, t, noise)
    return _mse(model(forward_noise(schedule, H0, t, noise), t, Z0), noise)


def _predict(model, x_t, t, cond):
    with T.no_grad():
        eps = model(x_t, t) if cond is None else model(x_t, t, cond)
    return eps.data if isinstance(eps, T.Tensor) else np.asarray(eps)


def reverse_step(model, schedule, x_t, t, cond=None, added_noise=None):
    """One ancestral step ``x_t -> x_{t-1}`` with ``sigma_t = sqrt(beta_t)``; no noise at t = 1."""
    beta, alpha, ab = schedule.beta(t), schedule.alpha(t), schedule.alpha_bar(t)
    eps = _predict(model, x_t, t, cond)
    mean = (np.asarray(x_t) - beta / np.sqrt(1.0 - ab) * eps) / np.sqrt(alpha)
    if t > 1 and added_noise is not None:
        mean = mean + np.sqrt(beta) * np.asarray(added_noise)
    return mean


@dataclass
class LatentStats:
    """Per-channel mean and std of keypoints and features (pooled over tokens)."""

    z_mean: np.ndarray
    z_std: np.ndarray
    h_mean: np.ndarray
    h_std: np.ndarray
    K: int
    floor: float = 1e-8

    @classmethod
    def from_latents(cls, latents, floor=1e-8):
        Z = np.stack([lat.numpy()[0] for lat in latents])
        H = np.stack([lat.numpy()[1] for lat in latents])
        return cls(
            Z.mean(axis=(0, 1)), np.maximum(Z.std(axis=(0, 1)), floor),
            H.mean(axis=(0, 1)), np.maximum(H.std(axis=(0, 1)), floor),
            Z.shape[1], floor,
        )

    @property
    def d(self):
        return len(self.h_mean)

    def normalize(self, Z, H):
        return (np.asarray(Z) - self.z_mean) / self.z_std, (np.asarray(H) - self.h_mean) / self.h_std

    def denormalize(self, Zn, Hn):
        return np.asarray(Zn) * self.z_std + self.z_mean, np.asarray(Hn) * self.h_std + self.h_mean

    def state(self):
        return {"z_mean": self.z_mean, "z_std": self.z_std, "h_mean": self.h_mean, "h_std": self.h_std}


def _run_chain(model, schedule, shape, rngs, cond=None):
    x = np.stack([r.standard_normal(shape) for r in rngs])
    for t in range(schedule.T, 0, -1):
        noise = np.stack([r.standard_normal(shape) for r in rngs]) if t > 1 else None
        x = reverse_step(model, schedule, x, t, cond, noise)
    return x


def sample_cascaded(kp_model, feat_model, schedule, stats, seed, n=None):
    """Draw pose latents: the keypoint chain first, then features conditioned on its result.

    Chain ``i`` uses its own generator seeded with ``seed + i``, so a sample does
    not depend on how many others are drawn alongside it. Returns one
    :class:`PoseLatent` when ``n`` is None, otherwise a list of ``n``.
    """
    count = 1 if n is None else n
    rngs = [np.random.default_rng(seed + i) for i in range(count)]
    Zn = _run_chain(kp_model, schedule, (stats.K, 3), rngs)
    Hn = _run_chain(feat_model, schedule, (stats.K, stats.d), rngs, cond=Zn)
    out = [PoseLatent(*stats.denormalize(z, h)) for z, h in zip(Zn, Hn)]
    return out[0] if n is None else out


@dataclass
class DiffusionConfig:
    steps: int = 5000
    lr: float = 1e-3
    lr_final: float = None
    batch_size: int = 16
    width: int = 64
    blocks: int = 2
    temb: int = 128
    seed: int = 0
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 5e-2

    def schedule(self):
        return NoiseSchedule(self.T, self.beta_start, self.beta_end)


@dataclass
class DiffusionResult:
    kp_model: SetDenoiser
    feat_model: SetDenoiser
    stats: LatentStats
    kp_history: list = field(default_factory=list)
    feat_history: list = field(default_factory=list)
    initial: dict = field(default_factory=dict)
    final: dict = field(default_factory=dict)


def evaluation_loss(model, schedule, X, cond=None, seed=0, draws=4):
    """Denoising loss over fixed (t, noise) draws for every sample of ``X`` (N, K, c)."""
    rng = np.random.default_rng([seed, 99])
    vals = []
    with T.no_grad():
        for _ in range(draws):
            t = rng.integers(1, schedule.T + 1, size=len(X))
            noise = rng.standard_normal(X.shape)
            if cond is None:
                vals.append(denoise_loss_keypoints(model, schedule, X, t=t, noise=noise).item())
            else:
                vals.append(denoise_loss_features(model, schedule, X, cond, t=t, noise=noise).item())
    return float(np.mean(vals))


def _cosine_lr(config, step):
    """Cosine decay from ``lr`` to ``lr_final``; constant when ``lr_final`` is unset."""
    if config.lr_final is None or config.steps <= 1:
        return config.lr
    w = 0.5 * (1.0 + np.cos(np.pi * step / (config.steps - 1)))
    return config.lr_final + (config.lr - config.lr_final) * w


def _fit(model, schedule, X, cond, config, salt, history):
    adam = AdamState(lr=config.lr)
    rng = np.random.default_rng([config.seed, salt])
    for step in range(config.steps):
        idx = batch_indices(len(X), config.batch_size, config.seed + salt, step)
        model.zero_grad()
        if cond is None:
            loss = denoise_loss_keypoints(model, schedule, X[idx], rng)
        else:
            loss = denoise_loss_features(model, schedule, X[idx], cond[idx], rng)
        value = loss.item()
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite diffusion loss at step {step}")
        T.backward(loss)
        adam.lr = _cosine_lr(config, step)
        adam_step(adam, model.params, model.grads())
        history.append((step + 1, value))


def train_diffusion(config, latents):
    """Fit the keypoint model, then the feature model on clean training keypoints."""
    if len(latents) < 2:
        raise ValueError("need at least two latents")
    shapes = {(lat.numpy()[0].shape, lat.numpy()[1].shape) for lat in latents}
    if len(shapes) != 1:
        raise ValueError(f"latents have inconsistent shapes: {sorted(shapes)}")
    stats = LatentStats.from_latents(latents)
    Zn, Hn = zip(*(stats.normalize(*lat.numpy()) for lat in latents))
    Zn, Hn = np.stack(Zn), np.stack(Hn)
    schedule = config.schedule()
    kp = KeypointDenoiser(config.width, config.blocks, config.temb, seed=config.seed)
    ft = FeatureDenoiser(stats.d, config.width, config.blocks, config.temb, seed=config.seed)
    result = DiffusionResult(kp, ft, stats)
    result.initial = {
        "keypoints": evaluation_loss(kp, schedule, Zn, seed=config.seed),
        "features": evaluation_loss(ft, schedule, Hn, Zn, seed=config.seed),
    }
    _fit(kp, schedule, Zn, None, config, 11, result.kp_history)
    _fit(ft, schedule, Hn, Zn, config, 12, result.feat_history)
    result.final = {
        "keypoints": evaluation_loss(kp, schedule, Zn, seed=config.seed),
        "features": evaluation_loss(ft, schedule, Hn, Zn, seed=config.seed),
    }
    return result


# -- toy task ---------------------------------------------------------------------


def two_cluster_latents(n, K=4, d=2, seed=0, separation=2.0, half_width=1.5):
    """Latents drawn uniformly from boxes around two random cluster centers.

    Returns ``(latents, centers, within_std)``; centers are (Z, H) pairs and
    ``within_std`` is the per-channel std of a uniform box, ``half_width / sqrt(3)``.
    """
    rng = np.random.default_rng(seed)
    centers = []
    for c in range(2):
        sign = 1.0 if c == 0 else -1.0
        Zc = rng.standard_normal((K, 3)) + sign * separation * np.array([1.0, 0.0, 0.0])
        Hc = rng.standard_normal((K, d)) + sign * separation
        centers.append((Zc, Hc))
    latents = []
    for i in range(n):
        Zc, Hc = centers[i % 2]
        latents.append(
            PoseLatent(
                Zc + rng.uniform(-half_width, half_width, Zc.shape),
                Hc + rng.uniform(-half_width, half_width, Hc.shape),
            )
        )
    return latents, centers, half_width / np.sqrt(3.0)


def nearest_cluster_deviation(latent, centers, std):
    """Largest per-dimension deviation, in units of ``std``, from the closest center.

    Tokens are matched to center tokens by optimal assignment because the
    latent is an unordered set.
    """
    Z, H = latent.numpy()
    X = np.concatenate([Z, H], axis=1)
    best = np.inf
    for Zc, Hc in centers:
        C = np.concatenate([Zc, Hc], axis=1)
        cost = np.sum((X[:, None, :] - C[None, :, :]) ** 2, axis=-1)
        rows, cols = linear_sum_assignment(cost)
        best = min(best, float(np.max(np.abs(X[rows] - C[cols]) / std)))
    return best
