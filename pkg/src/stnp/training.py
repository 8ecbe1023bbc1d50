"""Episodic meta-training of the attentive neural process."""

from __future__ import annotations

import logging
import math
import time
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import diffcore as dc
from .anp import ANP, ModelConfig
from .diffcore import ContractViolation
from .footprints import Footprint, FootprintArrays, stack_footprints

logger = logging.getLogger(__name__)

MIN_TILE_FOOTPRINTS = 4


class TileTooSparse(ContractViolation):
    """A tile has fewer than four footprints and cannot form an episode."""


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, detail: str = ""):
        super().__init__(f"training diverged at step {step}{': ' + detail if detail else ''}")
        self.step = step


class TrainingConfigError(ValueError):
    pass


@dataclass
class Episode:
    context: list
    targets: list
    tile_id: int


@dataclass
class TrainingConfig:
    steps: int = 2000
    learning_rate: float = 3e-4
    beta_max: float = 1.0
    anneal_steps: int | None = None  # default: first 20% of steps
    context_ratio_range: tuple[float, float] = (0.3, 0.7)
    episode_batch: int = 4
    seed: int = 0
    latent_samples_train: int = 1
    max_episode_points: int | None = 256
    log_every: int = 50
    dtype: str = "float32"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        low, high = self.context_ratio_range
        if not 0 < low <= high < 1:
            raise TrainingConfigError(f"context ratio range must satisfy 0 < low <= high < 1, got {low}, {high}")
        if self.steps < 0 or self.episode_batch < 1:
            raise TrainingConfigError("steps must be >= 0 and episode_batch >= 1")

    @property
    def effective_anneal_steps(self) -> int:
        if self.anneal_steps is not None:
            return self.anneal_steps
        return max(1, int(round(0.2 * self.steps)))


def split_indices(n: int, context_ratio: float, rng: np.random.Generator):
    """Random disjoint (context, target) index split with ceil(ratio * n) context points."""
    if n < MIN_TILE_FOOTPRINTS:
        raise TileTooSparse(f"need at least {MIN_TILE_FOOTPRINTS} footprints, got {n}")
    if not 0 < context_ratio < 1:
        raise ContractViolation(f"context ratio {context_ratio} outside (0, 1)")
    n_ctx = min(max(math.ceil(context_ratio * n), 1), n - 1)
    perm = rng.permutation(n)
    return perm[:n_ctx], perm[n_ctx:]


def make_episode(tile_footprints: list[Footprint], context_ratio: float, seed) -> Episode:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    ctx, tgt = split_indices(len(tile_footprints), context_ratio, rng)
    tile_ids = {f.tile_id for f in tile_footprints}
    if len(tile_ids) != 1:
        raise ContractViolation(f"episode footprints span several tiles: {sorted(tile_ids)}")
    return Episode([tile_footprints[i] for i in ctx], [tile_footprints[i] for i in tgt],
                   tile_ids.pop())


def beta_schedule(step: int, config: TrainingConfig) -> float:
    """Linear KL-weight ramp from 0 to ``beta_max`` over the anneal window."""
    if step < 0:
        raise ContractViolation("step must be >= 0")
    return config.beta_max * min(1.0, step / config.effective_anneal_steps)


class Adam:
    def __init__(self, shapes: dict[str, tuple], lr: float, betas=(0.9, 0.999),
                 eps: float = 1e-8, dtype=np.float32):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros(s, dtype=dtype) for k, s in shapes.items()}
        self.v = {k: np.zeros(s, dtype=dtype) for k, s in shapes.items()}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, g in grads.items():
            m, v = self.m[k], self.v[k]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            params[k] -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(params[k].dtype)


def group_by_tile(footprints) -> dict[int, list[Footprint]]:
    groups: dict[int, list[Footprint]] = defaultdict(list)
    for f in footprints:
        groups[f.tile_id].append(f)
    return dict(sorted(groups.items()))


@dataclass
class TrainingResult:
    model: ANP
    history: list[float]
    betas: list[float] = field(default_factory=list)
    skipped_tiles: list[int] = field(default_factory=list)
    seconds: float = 0.0


def train(dataset, config: TrainingConfig, model_config: ModelConfig | None = None,
          log_stream=None) -> TrainingResult:
    """Meta-train an ANP on footprints grouped by tile.

    ``dataset`` is either a mapping ``tile_id -> footprints`` or a flat
    iterable of footprints. Every record must come from a training year; the
    caller is responsible for the temporal holdout.
    """
    groups = dataset if isinstance(dataset, dict) else group_by_tile(dataset)
    tiles: list[FootprintArrays] = []
    tile_ids: list[int] = []
    skipped = []
    for tid, fps in groups.items():
        if not isinstance(fps, FootprintArrays):
            fps = list(fps)
        if len(fps) < MIN_TILE_FOOTPRINTS:
            skipped.append(tid)
            continue
        tiles.append(fps if isinstance(fps, FootprintArrays) else stack_footprints(fps))
        tile_ids.append(tid)
    if skipped:
        logger.info("skipping %d tiles with fewer than %d footprints", len(skipped), MIN_TILE_FOOTPRINTS)
    if not tiles:
        raise TrainingConfigError("no trainable tiles (each needs >= 4 footprints)")

    model_config = model_config or ModelConfig(embed_dim=tiles[0].embed_dim)
    if model_config.embed_dim != tiles[0].embed_dim:
        raise TrainingConfigError(
            f"model embed_dim={model_config.embed_dim} but data has D={tiles[0].embed_dim}")
    dtype = np.dtype(config.dtype)
    model = ANP(model_config, seed=config.seed, dtype=dtype)
    if dtype != np.float64:
        tiles = [FootprintArrays(t.coords.astype(dtype), t.patches.astype(dtype), t.y.astype(dtype),
                                 t.year, t.tile_id) for t in tiles]

    rng = np.random.default_rng([config.seed, 1])
    params = {k: p.data for k, p in model.params.items()}
    opt = Adam({k: v.shape for k, v in params.items()}, config.learning_rate,
               config.adam_betas, config.adam_eps, dtype=dtype)
    low, high = config.context_ratio_range
    history: list[float] = []
    betas: list[float] = []
    t0 = time.perf_counter()
    for step in range(config.steps):
        beta = beta_schedule(step, config)
        grads = {k: np.zeros_like(v) for k, v in params.items()}
        total = 0.0
        for _ in range(config.episode_batch):
            tile = tiles[int(rng.integers(len(tiles)))]
            idx = np.arange(len(tile))
            if config.max_episode_points and len(tile) > config.max_episode_points:
                idx = rng.choice(len(tile), size=config.max_episode_points, replace=False)
            ratio = float(rng.uniform(low, high))
            ctx, tgt = split_indices(len(idx), ratio, rng)
            context, targets = tile.take(idx[ctx]), tile.take(idx[tgt])
            for p in model.params.values():
                p.grad = None
            for _k in range(config.latent_samples_train):
                noise = rng.standard_normal(model_config.latent_dim).astype(dtype)
                try:
                    loss = model.elbo_loss(context, targets, beta, noise)
                    dc.backward(loss)
                except dc.NumericFailure as exc:
                    raise TrainingDiverged(step, str(exc)) from exc
                if not np.isfinite(loss.item()):
                    raise TrainingDiverged(step, "loss is not finite")
                total += loss.item()
            for k, p in model.params.items():
                if p.grad is not None:
                    grads[k] += p.grad
        n = config.episode_batch * config.latent_samples_train
        for k in grads:
            grads[k] /= n
        opt.step(params, grads)
        mean_loss = total / n
        history.append(mean_loss)
        betas.append(beta)
        if config.log_every and (step % config.log_every == 0 or step == config.steps - 1):
            line = f"step={step} loss={mean_loss:.6f} beta={beta:.4f}"
            logger.info(line)
            if log_stream is not None:
                log_stream.write(line + "\n")
    for p in model.params.values():
        p.grad = None
    return TrainingResult(model, history, betas, skipped, time.perf_counter() - t0)
