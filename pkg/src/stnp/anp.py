"""Attentive neural process over spatiotemporal footprints.

Five pieces, all built on :mod:`stnp.diffcore`:

* patch encoder: three 3x3 convolutions (the middle one residual), mean-pooled
  over the 3x3 grid and projected to a feature vector;
* context encoder: 3-layer MLP with layer normalization over
  ``[feature, coord, y]``;
* deterministic path: multihead cross-attention from targets to context;
* latent path: mean-pooled context representation mapped to a diagonal
  Gaussian, sampled by reparameterization;
* decoder: MLP over ``[attended, z, target feature, coord]`` emitting a
  Gaussian with a softplus-plus-floor scale.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .diffcore import ContractViolation, Tensor
from .footprints import COORD_DIM, SIGMA_FLOOR, FootprintArrays, stack_footprints


class EmptyContextError(ContractViolation):
    """Prediction was requested with no context observations."""


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 16
    feature_dim: int = 256
    repr_dim: int = 256
    latent_dim: int = 128
    decoder_hidden: int = 256
    conv_channels: int = 32
    heads: int = 16
    sigma_floor: float = SIGMA_FLOOR
    # the decoder also sees the raw target feature and coordinate
    decoder_uses_target: bool = True

    def __post_init__(self):
        if self.repr_dim % self.heads:
            raise ContractViolation(f"repr_dim={self.repr_dim} not divisible by heads={self.heads}")

    @classmethod
    def paper_scale(cls, **overrides) -> "ModelConfig":
        base = dict(embed_dim=128, feature_dim=1024)
        base.update(overrides)
        return cls(**base)


@dataclass
class LatentDistribution:
    mu: Tensor
    sigma: Tensor


@dataclass
class PredictiveGaussian:
    """Per-target predictive mean and scale in normalized log space."""

    mu: np.ndarray
    sigma: np.ndarray

    def __len__(self) -> int:
        return len(self.mu)


def truncated_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def _param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, c, f, r = cfg.embed_dim, cfg.conv_channels, cfg.feature_dim, cfg.repr_dim
    lat, h = cfg.latent_dim, cfg.decoder_hidden
    shapes = {
        "patch.conv1.w": (3, 3, d, c), "patch.conv1.b": (c,),
        "patch.conv2.w": (3, 3, c, c), "patch.conv2.b": (c,),
        "patch.conv3.w": (3, 3, c, c), "patch.conv3.b": (c,),
        "patch.proj.w": (c, f), "patch.proj.b": (f,),
        "ctx.l1.w": (f + COORD_DIM + 1, r), "ctx.l1.b": (r,),
        "ctx.ln1.g": (r,), "ctx.ln1.b": (r,),
        "ctx.l2.w": (r, r), "ctx.l2.b": (r,),
        "ctx.ln2.g": (r,), "ctx.ln2.b": (r,),
        "ctx.l3.w": (r, r), "ctx.l3.b": (r,),
        "attn.q.w": (f + COORD_DIM, r), "attn.q.b": (r,),
        "attn.k.w": (f + COORD_DIM, r),
        "attn.v.w": (r, r), "attn.v.b": (r,),
        "attn.o.w": (r, r), "attn.o.b": (r,),
        "lat.l1.w": (r, r), "lat.l1.b": (r,),
        "lat.l2.w": (r, 2 * lat), "lat.l2.b": (2 * lat,),
        "dec.det.w": (r, h), "dec.z.w": (lat, h), "dec.l1.b": (h,),
        "dec.l2.w": (h, h), "dec.l2.b": (h,),
        "dec.out.w": (h, 2), "dec.out.b": (2,),
    }
    if cfg.decoder_uses_target:
        shapes["dec.feat.w"] = (f, h)
        shapes["dec.coord.w"] = (COORD_DIM, h)
    return shapes


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float64) -> dict[str, np.ndarray]:
    """Truncated-normal (std 0.02) weights, zero biases, unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in _param_shapes(cfg).items():
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif name.endswith(".b"):
            arr = np.zeros(shape)
        else:
            arr = truncated_normal(rng, shape)
        params[name] = arr.astype(dtype)
    return params


def _linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = dc.matmul(x, w)
    return out if b is None else out + b


class ANP:
    """Model parameters plus the forward computations.

    ``params`` maps names to :class:`~stnp.diffcore.Tensor` leaves; the model is
    immutable during prediction, so ``predict`` may be shared across threads.
    """

    def __init__(self, config: ModelConfig, params: dict[str, np.ndarray] | None = None,
                 seed: int = 0, dtype=np.float64):
        self.config = config
        if params is None:
            params = init_params(config, seed=seed, dtype=dtype)
        expected = _param_shapes(config)
        if set(params) != set(expected):
            missing = sorted(set(expected) ^ set(params))
            raise ContractViolation(f"parameter names do not match config: {missing}")
        for name, arr in params.items():
            if tuple(arr.shape) != expected[name]:
                raise ContractViolation(f"{name}: shape {arr.shape} != {expected[name]}")
        self.params = {k: Tensor(np.array(v, dtype=dtype), requires_grad=True)
                       for k, v in params.items()}
        self.dtype = np.dtype(dtype)

    # ------------------------------------------------------------ bookkeeping

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.params.items()}

    def astype(self, dtype) -> "ANP":
        return ANP(self.config, {k: p.data for k, p in self.params.items()}, dtype=dtype)

    def _t(self, x) -> Tensor:
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x, dtype=self.dtype))

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    # ------------------------------------------------------------ components

    def encode_patch(self, patches) -> Tensor:
        """(N, 3, 3, D) patches -> (N, F) features."""
        x = self._t(patches)
        if x.ndim == 3:
            x = dc.reshape(x, (1,) + x.shape)
        if x.ndim != 4 or x.shape[1:3] != (3, 3) or x.shape[3] != self.config.embed_dim:
            raise ContractViolation(
                f"patch must be (3, 3, {self.config.embed_dim}), got {x.shape[1:]}")
        p = self.params
        h1 = dc.gelu(dc.conv3x3(x, p["patch.conv1.w"], p["patch.conv1.b"]))
        h2 = dc.gelu(dc.conv3x3(h1, p["patch.conv2.w"], p["patch.conv2.b"]) + h1)
        h3 = dc.conv3x3(h2, p["patch.conv3.w"], p["patch.conv3.b"])
        pooled = dc.mean_pool(h3, axis=(1, 2))
        return _linear(pooled, p["patch.proj.w"], p["patch.proj.b"])

    def _layer_norm(self, x: Tensor, prefix: str) -> Tensor:
        return dc.layer_norm(x, eps=1e-6) * self.params[prefix + ".g"] + self.params[prefix + ".b"]

    def encode_context(self, features, coords, y) -> Tensor:
        """Map (feature, coord, y) tuples to (N, R) representations."""
        features, coords = self._t(features), self._t(coords)
        y = self._t(np.asarray(y, dtype=self.dtype).reshape(-1, 1)) \
            if not isinstance(y, Tensor) else y
        p = self.params
        x = dc.concat([features, coords, y], axis=-1)
        h = dc.gelu(self._layer_norm(_linear(x, p["ctx.l1.w"], p["ctx.l1.b"]), "ctx.ln1"))
        h = dc.gelu(self._layer_norm(_linear(h, p["ctx.l2.w"], p["ctx.l2.b"]), "ctx.ln2"))
        return _linear(h, p["ctx.l3.w"], p["ctx.l3.b"])

    def cross_attend(self, queries, keys, values, return_weights: bool = False):
        """Multihead scaled dot-product attention from targets to context.

        ``queries`` is (M, F+5), ``keys`` (N, F+5), ``values`` (N, R).
        Returns (M, R), plus the (heads, M, N) weights when asked.
        """
        queries, keys, values = self._t(queries), self._t(keys), self._t(values)
        n = keys.shape[0]
        if n == 0 or values.shape[0] == 0:
            raise EmptyContextError("cross-attention over an empty context")
        if values.shape[0] != n:
            raise ContractViolation("keys and values differ in length")
        p = self.params
        heads = self.config.heads
        r = self.config.repr_dim
        hd = r // heads
        m = queries.shape[0]
        q = _linear(queries, p["attn.q.w"], p["attn.q.b"])
        # no key bias: it shifts every score of a query equally and cancels in softmax
        k = _linear(keys, p["attn.k.w"])
        v = _linear(values, p["attn.v.w"], p["attn.v.b"])
        q = dc.transpose(dc.reshape(q, (m, heads, hd)), (1, 0, 2))
        k = dc.transpose(dc.reshape(k, (n, heads, hd)), (1, 2, 0))
        v = dc.transpose(dc.reshape(v, (n, heads, hd)), (1, 0, 2))
        scores = dc.matmul(q, k) * (1.0 / math.sqrt(hd))
        weights = dc.softmax(scores, axis=-1)
        attended = dc.matmul(weights, v)
        merged = dc.reshape(dc.transpose(attended, (1, 0, 2)), (m, r))
        out = _linear(merged, p["attn.o.w"], p["attn.o.b"])
        return (out, weights) if return_weights else out

    def latent_summary(self, reprs) -> LatentDistribution:
        reprs = self._t(reprs)
        if reprs.shape[0] == 0:
            raise EmptyContextError("latent summary of an empty context")
        p = self.params
        pooled = dc.mean_pool(reprs, axis=0, keepdims=True)
        h = dc.gelu(_linear(pooled, p["lat.l1.w"], p["lat.l1.b"]))
        raw = _linear(h, p["lat.l2.w"], p["lat.l2.b"])
        lat = self.config.latent_dim
        mu = raw[:, :lat]
        sigma = dc.softplus(raw[:, lat:]) + self.config.sigma_floor
        return LatentDistribution(dc.reshape(mu, (lat,)), dc.reshape(sigma, (lat,)))

    def sample_latent(self, dist: LatentDistribution, noise) -> Tensor:
        noise = self._t(noise)
        if noise.shape[-1] != dist.mu.shape[-1]:
            raise ContractViolation(
                f"noise width {noise.shape[-1]} != latent width {dist.mu.shape[-1]}")
        return dist.mu + dist.sigma * noise

    def decode(self, det, z, target_features, coords) -> tuple[Tensor, Tensor]:
        """Gaussian head. ``z`` may carry leading sample axes: (K, 1, L) or (L,)."""
        p = self.params
        det, z = self._t(det), self._t(z)
        h = dc.matmul(det, p["dec.det.w"])
        if self.config.decoder_uses_target:
            h = h + dc.matmul(self._t(target_features), p["dec.feat.w"])
            h = h + dc.matmul(self._t(coords), p["dec.coord.w"])
        zl = z if z.ndim >= 2 else dc.reshape(z, (1, z.shape[0]))
        h = dc.gelu(h + dc.matmul(zl, p["dec.z.w"]) + p["dec.l1.b"])
        h = dc.gelu(_linear(h, p["dec.l2.w"], p["dec.l2.b"]))
        out = _linear(h, p["dec.out.w"], p["dec.out.b"])
        mu = out[..., 0]
        sigma = dc.softplus(out[..., 1]) + self.config.sigma_floor
        return mu, sigma

    # ------------------------------------------------------------ assembled

    def _encode_sets(self, context: FootprintArrays, target_coords, target_patches):
        nc = len(context)
        both = np.concatenate([context.patches, target_patches], axis=0)
        feats = self.encode_patch(both)
        fc, ft = feats[:nc], feats[nc:]
        return fc, ft

    def predict(self, context, target_coords, target_patches, n_samples: int = 16,
                seed: int = 0) -> PredictiveGaussian:
        """Predictive Gaussian per target, latent drawn from the context-only prior.

        The ``n_samples`` decoder Gaussians are collapsed by moment matching:
        ``mu = mean(mu_k)``, ``sigma^2 = mean(sigma_k^2) + var(mu_k)``.
        """
        context = _as_arrays(context)
        if context is None or len(context) == 0:
            raise EmptyContextError("predict needs at least one context observation")
        if n_samples < 1:
            raise ContractViolation("n_samples must be >= 1")
        target_coords = np.atleast_2d(np.asarray(target_coords, dtype=self.dtype))
        target_patches = np.asarray(target_patches, dtype=self.dtype)
        if target_patches.ndim == 3:
            target_patches = target_patches[None]
        with dc.no_grad():
            fc, ft = self._encode_sets(context, target_coords, target_patches)
            reps = self.encode_context(fc, context.coords, context.y)
            prior = self.latent_summary(reps)
            det = self.cross_attend(dc.concat([ft, self._t(target_coords)], axis=-1),
                                    dc.concat([fc, self._t(context.coords)], axis=-1), reps)
            noise = np.random.default_rng(seed).standard_normal(
                (n_samples, 1, self.config.latent_dim)).astype(self.dtype)
            z = self.sample_latent(prior, noise)
            mu, sigma = self.decode(det, z, ft, target_coords)
        return collapse_mixture(mu.data, sigma.data)

    def elbo_loss(self, context, targets, beta: float, noise) -> Tensor:
        """Mean target NLL under a posterior latent sample plus ``beta`` times KL(posterior || prior)."""
        context, targets = _as_arrays(context), _as_arrays(targets)
        if context is None or targets is None or len(context) == 0 or len(targets) == 0:
            raise ContractViolation("elbo_loss needs non-empty context and target sets")
        if beta < 0:
            raise ContractViolation("beta must be >= 0")
        fc, ft = self._encode_sets(context, targets.coords, targets.patches)
        reps_c = self.encode_context(fc, context.coords, context.y)
        reps_t = self.encode_context(ft, targets.coords, targets.y)
        prior = self.latent_summary(reps_c)
        posterior = self.latent_summary(dc.concat([reps_c, reps_t], axis=0))
        z = self.sample_latent(posterior, noise)
        tc = self._t(targets.coords)
        det = self.cross_attend(dc.concat([ft, tc], axis=-1),
                                dc.concat([fc, self._t(context.coords)], axis=-1), reps_c)
        mu, sigma = self.decode(det, z, ft, tc)
        mu = dc.reshape(mu, (len(targets),))
        sigma = dc.reshape(sigma, (len(targets),))
        nll = dc.mean_pool(dc.gaussian_nll(self._t(targets.y), mu, sigma))
        if beta == 0:
            return nll
        kl = dc.kl_diag_gaussian(posterior.mu, posterior.sigma, prior.mu, prior.sigma)
        return nll + kl * beta

    def with_params(self, params: dict[str, np.ndarray]) -> "ANP":
        return ANP(self.config, params, dtype=self.dtype)


def collapse_mixture(mus, sigmas) -> PredictiveGaussian:
    """Moment-match an equal-weight Gaussian mixture along axis 0."""
    mus = np.asarray(mus, dtype=np.float64)
    sigmas = np.asarray(sigmas, dtype=np.float64)
    if mus.ndim == 1:
        mus, sigmas = mus[:, None], sigmas[:, None]
    mu = mus.mean(axis=0)
    var = (sigmas ** 2).mean(axis=0) + mus.var(axis=0)
    return PredictiveGaussian(mu, np.sqrt(var))


def _as_arrays(x) -> FootprintArrays | None:
    if x is None or isinstance(x, FootprintArrays):
        return x
    x = list(x)
    return stack_footprints(x) if x else None


def config_to_dict(cfg: ModelConfig) -> dict:
    return dataclasses.asdict(cfg)


def config_from_dict(d: dict) -> ModelConfig:
    fields = {f.name for f in dataclasses.fields(ModelConfig)}
    return ModelConfig(**{k: v for k, v in d.items() if k in fields})
