"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 4, 5 and 7 share one experiment on the canonical configuration
(``configs/example.ini``: 5x5 tiles, 5 years, 400 footprints per tile-year,
seeds 0-2), with the holdout year instrumented during every fit.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from stnp import baselines as bl
from stnp import cli
from stnp import diffcore as dc
from stnp import evalcal as ev
from stnp import pipeline as pl
from stnp.anp import ANP, collapse_mixture
from stnp.footprints import stack_footprints
from stnp.synthworld import sample_footprints
from conftest import TINY, record_criterion
from oracles import (accuracy_bf, coverage_bf, delta_bf, gradcheck, quantile_linear_bf, r2_bf,
                     z_stats_bf)
from poison import Tripwire, poison
from test_anp import random_set, randomized
from test_diffcore import _ops

ROOT = Path(__file__).resolve().parents[1]
CONFIG = ROOT / "configs" / "example.ini"


# ---------------------------------------------------------------- 1. gradient fidelity

def _mlp_check(seed):
    rng = np.random.default_rng(100 + seed)
    x = dc.Tensor(rng.normal(size=(6, 5)))
    y = dc.Tensor(rng.normal(size=(6, 1)))
    arrays = [rng.normal(scale=0.5, size=s) for s in [(5, 8), (8,), (8, 8), (8,), (8, 1), (1,)]]

    def build(t):
        h = dc.gelu(x @ t[0] + t[1])
        h = dc.softplus(h @ t[2] + t[3])
        return dc.mean_pool(dc.square(h @ t[4] + t[5] - y))

    return gradcheck(build, arrays)


def _elbo_checks(seed):
    """Per-parameter-tensor relative errors of the tiny model's ELBO gradient."""
    rng = np.random.default_rng(seed)
    model = randomized(TINY, seed, scale=0.4)
    ctx, tgt = random_set(rng, 5), random_set(rng, 3)
    noise = rng.normal(size=TINY.latent_dim)
    dc.backward(model.elbo_loss(ctx, tgt, 0.7, noise))

    def f():
        with dc.no_grad():
            return model.elbo_loss(ctx, tgt, 0.7, noise).item()

    return {name: dc.relative_error(p.grad, dc.numeric_grad(f, p.data)) for name, p in model.params.items()}


def test_criterion_1_gradient_fidelity():
    t0 = time.perf_counter()
    op_errors = []
    for seed in range(18):
        for name, build, arrays in _ops(np.random.default_rng(seed)):
            op_errors.append((name, gradcheck(build, arrays)))
    op_errors += [("mlp", _mlp_check(s)) for s in range(10)]
    elbo = _elbo_checks(0)
    n = len(op_errors) + len(elbo)
    worst_op = max(e for _, e in op_errors)
    worst_elbo = max(elbo.values())
    seconds = time.perf_counter() - t0
    ok = n >= 500 and worst_op <= 1e-4 and worst_elbo <= 1e-3 and seconds < 120
    record_criterion(1, ok, f"checks={n} worst_op={worst_op:.2e} worst_elbo={worst_elbo:.2e} "
                            f"time={seconds:.1f}s")
    assert ok


# ---------------------------------------------------------------- 2. neural-process invariants

def test_criterion_2_np_invariants():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    # context permutation invariance
    perm_err = 0.0
    for s in range(10):
        model = randomized(TINY, 200 + s)
        ctx, tgt = random_set(rng, int(rng.integers(2, 12))), random_set(rng, 5)
        perm = rng.permutation(len(ctx))
        a = model.predict(ctx, tgt.coords, tgt.patches, n_samples=4, seed=s)
        b = model.predict(ctx.take(perm), tgt.coords, tgt.patches, n_samples=4, seed=s)
        perm_err = max(perm_err, np.abs(a.mu - b.mu).max(), np.abs(a.sigma - b.sigma).max())
    # a single context point takes all the attention
    weight_err = 0.0
    for s in range(10):
        model = randomized(TINY, 300 + s)
        q = rng.normal(size=(4, TINY.feature_dim + 5))
        _, w = model.cross_attend(q, rng.normal(size=(1, TINY.feature_dim + 5)),
                                  rng.normal(size=(1, TINY.repr_dim)), return_weights=True)
        weight_err = max(weight_err, np.abs(w.data - 1.0).max())
    # moment identities of the mixture collapse
    moment_err = 0.0
    for _ in range(200):
        k = int(rng.integers(1, 20))
        mus, sig = rng.normal(size=(k, 3)), rng.uniform(1e-3, 2, size=(k, 3))
        g = collapse_mixture(mus, sig)
        second = (sig ** 2 + mus ** 2).mean(axis=0)
        moment_err = max(moment_err, np.abs(g.mu - mus.mean(axis=0)).max(),
                         np.abs(g.sigma ** 2 - (second - g.mu ** 2)).max())
    # sigma floor under 10^4 fuzzed targets
    n_cases, below = 0, 0
    for s in range(200):
        model = randomized(TINY, 400 + s, scale=float(rng.uniform(0.05, 3.0)))
        ctx, tgt = random_set(rng, int(rng.integers(1, 10))), random_set(rng, 50)
        scale = float(10 ** rng.uniform(-2, 2))
        pred = model.predict(ctx, tgt.coords, tgt.patches * scale, n_samples=2, seed=s)
        n_cases += pred.sigma.size
        below += int(np.sum(pred.sigma < TINY.sigma_floor))
    seconds = time.perf_counter() - t0
    ok = (perm_err <= 1e-6 and weight_err <= 1e-12 and moment_err <= 1e-12 and below == 0
          and n_cases >= 10_000 and seconds < 60)
    record_criterion(2, ok, f"perm={perm_err:.1e} weight={weight_err:.1e} moments={moment_err:.1e} "
                            f"sigma_floor_violations={below}/{n_cases} time={seconds:.1f}s")
    assert ok


# ---------------------------------------------------------------- 3. metric oracles

def test_criterion_3_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(2, 60))
        y, mu = rng.uniform(0, 1, n), rng.uniform(0, 1, n)
        sigma = rng.uniform(0.01, 0.5, n)
        if rng.uniform() < 0.3:  # plant exact boundary residuals
            k = float(rng.choice([1.0, 2.0]))
            sigma = np.full(n, 0.125)
            y[: n // 2] = mu[: n // 2] + k * 0.125 * rng.choice([-1, 1], n // 2)
        worst = max(worst, *np.abs(np.subtract(ev.z_stats(y, mu, sigma), z_stats_bf(y, mu, sigma))))
        for k in (1.0, 2.0):
            mismatches += ev.coverage(y, mu, sigma, k) != coverage_bf(y, mu, sigma, k)
        acc = ev.accuracy_metrics(y, mu)
        ref = accuracy_bf(y, mu)
        for a, b in zip((acc.log_r2, acc.log_rmse, acc.linear_rmse, acc.linear_mae), ref):
            worst = max(worst, abs(a - b) / max(1.0, abs(b)))
        labels = rng.choice(np.array(ev.STRATA), n)
        s = str(rng.choice(ev.STRATA))
        mask = labels == s
        if mask.sum() >= 2 and np.ptp(y[mask]) > 0:
            worst = max(worst, abs(ev.pooled_stratified_r2(y, mu, labels, s) - r2_bf(y[mask], mu[mask])))
        means = {yr: float(rng.uniform(1, 500)) for yr in (2019, 2020, 2021, 2022, 2023)}
        if rng.uniform() < 0.2:  # exact boundaries: expectation 10m, test year 7m or 9m
            m = int(rng.integers(1, 50))
            means = {yr: 10.0 * m for yr in (2019, 2020, 2022, 2023)}
            means[2021] = float(rng.choice([7, 9])) * m
        rec = ev.disturbance_delta(means, 2021)
        exp, d, st = delta_bf(means, 2021)
        worst = max(worst, abs(rec.ybar_exp - exp) / exp, abs(rec.delta - d))
        mismatches += rec.stratum != st
    # documented boundaries
    boundary_ok = (ev.coverage([1.0, -1.0], [0.0, 0.0], [1.0, 1.0], 1.0) == 1.0
                   and ev.disturbance_delta({2020: 100, 2021: 70, 2022: 100}, 2021).stratum == "Moderate"
                   and ev.stratum_of(0.3) == "Moderate")
    seconds = time.perf_counter() - t0
    ok = worst <= 1e-12 and mismatches == 0 and boundary_ok and seconds < 60
    record_criterion(3, ok, f"instances=1000 worst_abs_err={worst:.1e} label_mismatches={mismatches} "
                            f"boundaries={'ok' if boundary_ok else 'bad'} time={seconds:.1f}s")
    assert ok


# ---------------------------------------------------------------- 6. baselines

def test_criterion_6_baselines():
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    x = rng.uniform(0, 1, 5000)
    y = x + rng.normal(0, 0.1, 5000)
    X = x[:, None]
    forest = bl.qrf_fit(X, y, n_trees=200, seed=0)
    q16, q84 = bl.qrf_predict(forest, [[0.5]], [0.16, 0.84])[0]
    true16, true84 = 0.5 - 0.0994457883, 0.5 + 0.0994457883
    qrf_ok = abs(q16 - true16) <= 0.05 and abs(q84 - true84) <= 0.05
    pool = bl.pooled_leaf_samples(forest, [[0.5]])[0]
    pool_ok = abs(q16 - quantile_linear_bf(pool.tolist(), 0.16)) <= 1e-12
    model = bl.gbq_fit(X, y, 0.84, rounds=300, seed=0)
    zero = bl.gbq_fit(X, y, 0.84, rounds=0)
    init_ok = model.init == bl.pinball_minimizer(y, 0.84) and np.all(zero.predict(X[:50]) == model.init)
    grid = np.unique(y)
    init_loss = float(bl.pinball_loss(y, model.init, 0.84).mean())
    grid_best = min(float(bl.pinball_loss(y, c, 0.84).mean()) for c in grid[::25])
    minimizer_ok = init_loss <= grid_best + 1e-12
    mono_ok = bool(np.all(np.diff(model.train_loss) <= 1e-12))
    seconds = time.perf_counter() - t0
    ok = qrf_ok and pool_ok and init_ok and minimizer_ok and mono_ok and seconds < 300
    record_criterion(6, ok, f"qrf q16={q16:.3f} (true {true16:.3f}) q84={q84:.3f} (true {true84:.3f}) "
                            f"round0={'ok' if init_ok and minimizer_ok else 'bad'} "
                            f"loss_monotone={mono_ok} time={seconds:.1f}s")
    assert ok


# ---------------------------------------------------------------- shared experiment

@pytest.fixture(scope="module")
def experiment():
    cfg = cli.load_config(CONFIG)
    t0 = time.perf_counter()
    sample = sample_footprints(cfg.world)
    wire = Tripwire(armed=False)
    footprints = poison(sample.footprints, cfg.holdout_year, wire)
    result = pl.run_experiment(footprints, cfg.world.tiles, cfg.experiment, fit_guard=wire.arm)
    return cfg, sample, result, wire, time.perf_counter() - t0


def _per_seed(result, method, name):
    return [getattr(r.metrics[method], name) for r in result.runs]


def test_criterion_4_calibration(experiment):
    cfg, _, result, _, seconds = experiment
    s = {k: v[0] for k, v in result.summary["anp"].items()}
    checks = {
        "cov1": 0.60 <= s["cov1"] <= 0.76,
        "cov2": s["cov2"] >= 0.90,
        "z_mean": abs(s["z_mean"]) <= 0.3,
        "z_std": 0.8 <= s["z_std"] <= 1.3,
        "log_r2": s["log_r2"] >= 0.5,
    }
    ok = all(checks.values()) and seconds < 30 * 60
    detail = " ".join(f"{k}={s[k]:.3f}" for k in checks)
    bad = [k for k, v in checks.items() if not v]
    record_criterion(4, ok, f"anp mean over seeds {list(cfg.experiment.seeds)}: {detail} "
                            f"time={seconds / 60:.1f}min" + (f" failing={bad}" if bad else ""))
    for name in checks:
        print(f"  per-seed {name}: {[round(v, 3) for v in _per_seed(result, 'anp', name)]}")
    assert ok


def test_criterion_5_stratification(experiment):
    _, _, result, _, _ = experiment
    dist = {m: result.strata[m][ev.STRATA.index("Disturbed")] for m in ("anp", "gbq", "qrf")}
    if dist["anp"].metrics is None or dist["gbq"].metrics is None:
        record_criterion(5, False, "no Disturbed test footprints in any seed")
        pytest.fail("Disturbed stratum empty")
    anp_z, gbq_z = dist["anp"].metrics.z_mean, dist["gbq"].metrics.z_mean
    gbq_std, gbq_cross = dist["gbq"].metrics.z_std, dist["gbq"].crossings
    directional = abs(anp_z) <= abs(gbq_z)
    incident = gbq_cross > 0 or gbq_std > 1.3
    ok = directional and incident
    record_criterion(5, ok, f"Disturbed |z_mean| anp={abs(anp_z):.3f} gbq={abs(gbq_z):.3f}; "
                            f"gbq crossings={gbq_cross} z_std={gbq_std:.3f} "
                            f"(n={dist['anp'].metrics.n})")
    for m in ("qrf", "gbq", "anp"):
        for r in result.strata[m]:
            if r.metrics is not None:
                print(f"  {m} {r.stratum}: z_mean={r.metrics.z_mean:.3f} z_std={r.metrics.z_std:.3f} "
                      f"cov1={r.metrics.cov1:.3f} r2={r.metrics.log_r2:.3f} n={r.metrics.n} "
                      f"crossings={r.crossings}")
    assert ok


def test_anp_sigma_shrinks_with_context(experiment):
    """More context from the target's own tile gives a tighter predictive spread."""
    cfg, sample, result, _, _ = experiment
    run = result.runs[0]
    model = run.models["anp"]
    holdout = result.holdout_year
    tile = run.partition.tiles(ev.TEST)[0]
    ctx = stack_footprints([f for f in sample.footprints if f.tile_id == tile and f.year != holdout])
    tgt = stack_footprints([f for f in sample.footprints if f.tile_id == tile and f.year == holdout][:100])
    rng = np.random.default_rng(0)
    sig = {}
    for n in (10, 100):
        draws = [model.predict(ctx.take(rng.choice(len(ctx), n, replace=False)), tgt.coords, tgt.patches,
                               n_samples=8, seed=i).sigma.mean() for i in range(5)]
        sig[n] = float(np.mean(draws))
    print(f"  mean sigma: 10 context={sig[10]:.4f} 100 context={sig[100]:.4f}")
    assert sig[100] < sig[10]


def test_dense_context_beats_distant_context(experiment):
    """Sigma over a tile is lower with its own context than with context from a far tile.

    The targets are holdout-year footprints of a training tile, never seen during fitting.
    A test tile would mix this property with covariate shift in the embeddings.
    """
    cfg, sample, result, _, _ = experiment
    run = result.runs[0]
    model = run.models["anp"]
    holdout = result.holdout_year
    cols = cfg.world.tiles[0]
    tile = run.partition.tiles(ev.TRAIN)[0]
    far = max(range(cfg.world.n_tiles), key=lambda t: ev.chebyshev(t, tile, cols))
    tgt = stack_footprints([f for f in sample.footprints if f.tile_id == tile and f.year == holdout][:100])
    own = stack_footprints([f for f in sample.footprints if f.tile_id == tile and f.year != holdout])
    away = stack_footprints([f for f in sample.footprints if f.tile_id == far and f.year != holdout])
    s_own = model.predict(own, tgt.coords, tgt.patches, n_samples=8).sigma.mean()
    s_far = model.predict(away, tgt.coords, tgt.patches, n_samples=8).sigma.mean()
    print(f"  mean sigma: own tile={s_own:.4f} far tile={s_far:.4f}")
    assert s_own < s_far


# ---------------------------------------------------------------- 7. protocol integrity

def test_criterion_7_protocol(experiment, tmp_path):
    _, _, _, wire, _ = experiment
    never_tripped = not wire.tripped
    # buffer invariant on 100 random partitions
    buffer_ok = True
    rng = np.random.default_rng(7)
    for i in range(100):
        grid = (int(rng.integers(4, 12)), int(rng.integers(4, 12)))
        try:
            p = ev.partition_tiles(grid, seed=i)
        except ev.PartitionInfeasible:
            continue
        tests = p.tiles(ev.TEST)
        for t in p.tiles(ev.TRAIN) + p.tiles(ev.VAL):
            buffer_ok &= min(ev.chebyshev(t, x, grid[0]) for x in tests) >= 2
    # byte-identical reruns of the CLI chain on the canonical world, with a short schedule
    text = CONFIG.read_text().replace("steps = 1000", "steps = 20").replace("qrf_trees = 200", "qrf_trees = 10")
    text = text.replace("gbq_rounds = 300", "gbq_rounds = 20").replace("seeds = 0, 1, 2", "seeds = 0")
    text = text.replace("grid = 20, 20", "grid = 8, 8")
    cfg_path = tmp_path / "short.ini"
    cfg_path.write_text(text)
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert cli.main(["synth", "--config", str(cfg_path), "--out", str(out)]) == 0
        data = str(out / "dataset.csv")
        for m in ("qrf", "gbq", "anp"):
            assert cli.main(["train", "--config", str(cfg_path), "--dataset", data, "--method", m,
                             "--out", str(out)]) == 0
        ckpts = [str(out / f"{m}_seed0.ckpt") for m in ("qrf", "gbq", "anp")]
        assert cli.main(["eval", "--config", str(cfg_path), "--dataset", data, "--out", str(out),
                         "--checkpoint", *ckpts]) == 0
        assert cli.main(["predict", "--config", str(cfg_path), "--dataset", data, "--out", str(out),
                         "--checkpoint", ckpts[2]]) == 0
        outs.append(out)
    names = sorted(p.name for p in outs[0].iterdir())
    identical = [n for n in names if (outs[0] / n).read_bytes() == (outs[1] / n).read_bytes()]
    bytes_ok = identical == names and {"dataset.csv", "anp_seed0.ckpt", "table1.csv", "table2.json", "grid_anp.csv"} <= set(names)
    ok = never_tripped and buffer_ok and bytes_ok
    record_criterion(7, ok, f"holdout_reads_during_fit={len(wire.trips)} buffer_invariant={buffer_ok} "
                            f"identical_files={len(identical)}/{len(names)}")
    assert ok
