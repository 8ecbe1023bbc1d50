"""Quantile random forest and pinball-loss gradient boosting.

Tree growth (CART with a squared-error split criterion) is delegated to
scikit-learn's ``DecisionTreeRegressor``; everything quantile-specific is done
here on plain arrays: bootstrap bagging, leaf sample retention, pooled leaf
quantiles, the boosting loop with per-leaf pinball minimizers, and routing of
new samples. A fitted model needs no scikit-learn object to predict, so the
checkpoint container round-trips it exactly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.tree import DecisionTreeRegressor

from .checkpoint import CheckpointError, load_container, save_container
from .diffcore import ContractViolation
from .footprints import SIGMA_FLOOR

logger = logging.getLogger(__name__)

LOWER_Q, MEDIAN_Q, UPPER_Q = 0.16, 0.5, 0.84


class IntervalCrossingError(ValueError):
    pass


def pinball_loss(y, yhat, q: float):
    """Elementwise pinball loss: (y - yhat) q if y >= yhat else (yhat - y)(1 - q)."""
    diff = np.asarray(y, dtype=float) - np.asarray(yhat, dtype=float)
    return np.where(diff >= 0, diff * q, -diff * (1.0 - q))


def pinball_minimizer(values, q: float) -> float:
    """Smallest order statistic whose empirical CDF reaches q; minimizes mean pinball loss."""
    return float(np.quantile(values, q, method="inverted_cdf"))


@dataclass
class TreeArrays:
    """Flat binary tree. ``left[i] == -1`` marks a leaf."""

    left: np.ndarray
    right: np.ndarray
    feature: np.ndarray
    threshold: np.ndarray
    value: np.ndarray = field(default_factory=lambda: np.zeros(0))
    # leaf samples in CSR form over node ids (QRF only)
    sample_offsets: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    samples: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def from_sklearn(cls, est: DecisionTreeRegressor) -> "TreeArrays":
        t = est.tree_
        return cls(t.children_left.astype(np.int64), t.children_right.astype(np.int64),
                   t.feature.astype(np.int64), t.threshold.astype(np.float64),
                   np.zeros(t.node_count))

    @property
    def depth(self) -> int:
        depth = np.zeros(len(self.left), dtype=int)
        for i in range(len(self.left)):
            if self.left[i] >= 0:
                depth[self.left[i]] = depth[i] + 1
                depth[self.right[i]] = depth[i] + 1
        return int(depth.max())

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf node id reached by each row."""
        # scikit-learn compares float32-cast features against float64 thresholds
        X32 = np.asarray(X, dtype=np.float32)
        node = np.zeros(len(X32), dtype=np.int64)
        active = np.flatnonzero(self.left[node] >= 0)
        while active.size:
            n = node[active]
            go_left = X32[active, self.feature[n]] <= self.threshold[n]
            node[active] = np.where(go_left, self.left[n], self.right[n])
            active = active[self.left[node[active]] >= 0]
        return node

    def attach_samples(self, leaves: np.ndarray, y: np.ndarray) -> None:
        order = np.argsort(leaves, kind="stable")
        counts = np.bincount(leaves, minlength=len(self.left))
        self.sample_offsets = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        self.samples = np.asarray(y, dtype=np.float64)[order]

    def leaf_samples(self, node: int) -> np.ndarray:
        return self.samples[self.sample_offsets[node]:self.sample_offsets[node + 1]]


def _fit_cart(X, y, max_depth, min_leaf, max_features, random_state) -> TreeArrays:
    """Variance-reduction CART; depth 0 is a single leaf holding everything."""
    if max_depth == 0:
        return TreeArrays(np.array([-1]), np.array([-1]), np.array([-2]), np.array([-2.0]),
                          np.array([float(np.mean(y))]))
    est = DecisionTreeRegressor(max_depth=max_depth, min_samples_leaf=min_leaf,
                                max_features=max_features, random_state=random_state)
    est.fit(X, y)
    return TreeArrays.from_sklearn(est)


def _resolve_max_features(feature_subsample, p: int):
    """``None``/"all", "sqrt", a fraction in (0, 1] or a count, given as a value or a string."""
    if isinstance(feature_subsample, str) and feature_subsample not in ("all", "sqrt"):
        text = feature_subsample
        feature_subsample = float(text) if "." in text else int(text)
    if feature_subsample in (None, "all"):
        return None
    if feature_subsample == "sqrt":
        return max(1, int(math.sqrt(p)))
    if isinstance(feature_subsample, float):
        return max(1, int(round(feature_subsample * p)))
    return int(feature_subsample)


# ---------------------------------------------------------------- quantile random forest

@dataclass
class QuantileForest:
    trees: list[TreeArrays]
    params: dict

    def predict(self, X, quantiles=(LOWER_Q, MEDIAN_Q, UPPER_Q)) -> np.ndarray:
        return qrf_predict(self, X, quantiles)


def qrf_fit(X, y, n_trees: int = 200, max_depth: int | None = 12, min_leaf: int = 5,
            feature_subsample="sqrt", seed: int = 0, bootstrap: bool = True) -> QuantileForest:
    """Bagged CART trees whose leaves keep the (in-bag) training targets."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(X) != len(y):
        raise ContractViolation("X and y differ in length")
    if len(y) < 2 * min_leaf:
        raise ContractViolation(f"need at least {2 * min_leaf} samples for min_leaf={min_leaf}")
    max_features = _resolve_max_features(feature_subsample, X.shape[1])
    seeds = np.random.SeedSequence(seed).spawn(n_trees)
    trees = []
    for ss in seeds:
        rng = np.random.default_rng(ss)
        idx = rng.integers(0, len(y), size=len(y)) if bootstrap else np.arange(len(y))
        tree = _fit_cart(X[idx], y[idx], max_depth, min_leaf, max_features,
                         int(rng.integers(2 ** 31 - 1)))
        tree.attach_samples(tree.apply(X[idx]), y[idx])
        trees.append(tree)
    params = dict(n_trees=n_trees, max_depth=max_depth, min_leaf=min_leaf,
                  feature_subsample=feature_subsample, seed=seed, bootstrap=bootstrap)
    return QuantileForest(trees, params)


def pooled_leaf_samples(forest: QuantileForest, X) -> list[np.ndarray]:
    """For each row, the multiset union of training targets in the leaves it reaches."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    leaves = np.stack([t.apply(X) for t in forest.trees], axis=1)
    return [np.concatenate([t.leaf_samples(leaf) for t, leaf in zip(forest.trees, row)])
            for row in leaves]


def qrf_predict(forest: QuantileForest | None, X, quantiles=(LOWER_Q, MEDIAN_Q, UPPER_Q)) -> np.ndarray:
    """Empirical quantiles (linear interpolation) of the pooled leaf samples, shape (n, len(q))."""
    if forest is None or not getattr(forest, "trees", None):
        raise ContractViolation("quantile forest is not fitted")
    qs = np.asarray(quantiles, dtype=np.float64)
    pools = pooled_leaf_samples(forest, X)
    return np.stack([np.quantile(p, qs) for p in pools])


# ---------------------------------------------------------------- pinball boosting

@dataclass
class QuantileBooster:
    q: float
    init: float
    learning_rate: float
    trees: list[TreeArrays]
    params: dict
    train_loss: list[float] = field(default_factory=list)

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        out = np.full(len(X), self.init)
        for t in self.trees:
            out += self.learning_rate * t.value[t.apply(X)]
        return out


def gbq_fit(X, y, q: float, rounds: int = 300, learning_rate: float = 0.1, max_depth: int = 4,
            min_leaf: int = 5, seed: int = 0, feature_subsample="sqrt") -> QuantileBooster:
    """Gradient boosting on the pinball loss at level ``q``.

    Starts from the empirical q-quantile of ``y``; each round fits a regression
    tree to the negative pinball gradient, then replaces every leaf value with
    the pinball minimizer of the residuals that fall in it. Split search looks
    at a random ``feature_subsample`` of the columns at every node.
    """
    if not 0.0 < q < 1.0:
        raise ContractViolation(f"quantile level {q} outside (0, 1)")
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    init = pinball_minimizer(y, q)
    max_features = _resolve_max_features(feature_subsample, X.shape[1])
    pred = np.full(len(y), init)
    losses = [float(pinball_loss(y, pred, q).mean())]
    rng = np.random.default_rng(seed)
    trees = []
    for _ in range(rounds):
        resid = y - pred
        grad = np.where(resid > 0, q, np.where(resid < 0, q - 1.0, 0.0))
        tree = _fit_cart(X, grad, max_depth, min_leaf, max_features,
                         int(rng.integers(2 ** 31 - 1)))
        leaves = tree.apply(X)
        for leaf in np.unique(leaves):
            in_leaf = leaves == leaf
            tree.value[leaf] = pinball_minimizer(resid[in_leaf], q)
        pred = pred + learning_rate * tree.value[leaves]
        losses.append(float(pinball_loss(y, pred, q).mean()))
        trees.append(tree)
    params = dict(q=q, rounds=rounds, learning_rate=learning_rate, max_depth=max_depth,
                  min_leaf=min_leaf, seed=seed, feature_subsample=feature_subsample)
    return QuantileBooster(q, init, learning_rate, trees, params, losses)


@dataclass
class BoostedInterval:
    """The pair (optionally triple) of boosted quantile models used as a baseline."""

    lower: QuantileBooster
    upper: QuantileBooster
    median: QuantileBooster | None = None

    def predict(self, X) -> np.ndarray:
        lo, hi = self.lower.predict(X), self.upper.predict(X)
        mid = self.median.predict(X) if self.median is not None else 0.5 * (lo + hi)
        return np.stack([lo, mid, hi], axis=1)


def gbq_fit_interval(X, y, fit_median: bool = False, **kwargs) -> BoostedInterval:
    seed = kwargs.pop("seed", 0)
    lower = gbq_fit(X, y, LOWER_Q, seed=seed, **kwargs)
    upper = gbq_fit(X, y, UPPER_Q, seed=seed + 1, **kwargs)
    median = gbq_fit(X, y, MEDIAN_Q, seed=seed + 2, **kwargs) if fit_median else None
    return BoostedInterval(lower, upper, median)


# ---------------------------------------------------------------- to a Gaussian

@dataclass
class GaussianFromQuantiles:
    mu: np.ndarray
    sigma: np.ndarray
    crossings: int
    crossed: np.ndarray | None = None  # per-row mask of crossed intervals


def quantiles_to_gaussian(q16, q50, q84, use_median: bool = True,
                          sigma_floor: float = SIGMA_FLOOR, strict: bool = False) -> GaussianFromQuantiles:
    """Read a +-1 sigma interval as a Gaussian.

    ``mu`` is ``q50`` when ``use_median`` (QRF) else the interval midpoint;
    ``sigma = max((q84 - q16) / 2, sigma_floor)``. Crossed intervals
    (``q16 > q84``) are counted and collapsed to their midpoint, or raise when
    ``strict``.
    """
    q16, q50, q84 = (np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in (q16, q50, q84))
    crossed = q16 > q84
    n_cross = int(crossed.sum())
    if n_cross and strict:
        raise IntervalCrossingError(f"{n_cross} crossed intervals (q16 > q84)")
    mid = 0.5 * (q16 + q84)
    lo = np.where(crossed, mid, q16)
    hi = np.where(crossed, mid, q84)
    mu = q50 if use_median else mid
    sigma = np.maximum((hi - lo) / 2.0, sigma_floor)
    return GaussianFromQuantiles(mu, sigma, n_cross, crossed)


# ---------------------------------------------------------------- serialization

def _tree_entries(prefix: str, t: TreeArrays, with_samples: bool):
    out = [(f"{prefix}.left", t.left), (f"{prefix}.right", t.right),
           (f"{prefix}.feature", t.feature), (f"{prefix}.threshold", t.threshold),
           (f"{prefix}.value", t.value)]
    if with_samples:
        out += [(f"{prefix}.sample_offsets", t.sample_offsets), (f"{prefix}.samples", t.samples)]
    return out


def _tree_from(entries, prefix: str) -> TreeArrays:
    t = TreeArrays(entries[f"{prefix}.left"], entries[f"{prefix}.right"],
                   entries[f"{prefix}.feature"], entries[f"{prefix}.threshold"],
                   entries[f"{prefix}.value"])
    if f"{prefix}.samples" in entries:
        t.sample_offsets = entries[f"{prefix}.sample_offsets"]
        t.samples = entries[f"{prefix}.samples"]
    return t


def save_baseline(path, model, extra: dict | None = None) -> None:
    entries = []
    if isinstance(model, QuantileForest):
        header = {"kind": "qrf", "params": model.params, "n_trees": len(model.trees)}
        for i, t in enumerate(model.trees):
            entries += _tree_entries(f"tree{i}", t, True)
    elif isinstance(model, BoostedInterval):
        parts = {"lower": model.lower, "upper": model.upper}
        if model.median is not None:
            parts["median"] = model.median
        header = {"kind": "gbq", "parts": {}}
        for name, b in parts.items():
            header["parts"][name] = {"q": b.q, "init": b.init, "learning_rate": b.learning_rate,
                                     "n_trees": len(b.trees), "params": b.params,
                                     "train_loss": b.train_loss}
            for i, t in enumerate(b.trees):
                entries += _tree_entries(f"{name}.tree{i}", t, False)
    else:
        raise ContractViolation(f"cannot serialize {type(model).__name__}")
    if extra:
        header.update(extra)
    save_container(path, header, entries, default_float="d")


def load_baseline(path):
    header, entries = load_container(path)
    kind = header.get("kind")
    if kind == "qrf":
        trees = [_tree_from(entries, f"tree{i}") for i in range(header["n_trees"])]
        return QuantileForest(trees, header["params"]), header
    if kind == "gbq":
        parts = {}
        for name, meta in header["parts"].items():
            trees = [_tree_from(entries, f"{name}.tree{i}") for i in range(meta["n_trees"])]
            parts[name] = QuantileBooster(meta["q"], meta["init"], meta["learning_rate"], trees,
                                          meta["params"], meta["train_loss"])
        return BoostedInterval(parts["lower"], parts["upper"], parts.get("median")), header
    raise CheckpointError(f"not a baseline checkpoint (kind={kind!r})")
