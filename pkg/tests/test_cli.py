import csv
import json
from pathlib import Path

import numpy as np
import pytest

from stnp import cli
from stnp.anp import init_params
from stnp.checkpoint import load_anp
from stnp.evalcal import METRIC_LABELS, METRIC_NAMES, STRATA
from stnp.synthworld import WorldConfig, read_dataset

ROOT = Path(__file__).resolve().parents[1]

TINY_INI = """
[world]
tiles = 4, 4
years = 2019, 2020, 2021
footprints_per_tile_year = 40
embed_dim = 4
seed = 1

[model]
feature_dim = 16
repr_dim = 16
latent_dim = 8
decoder_hidden = 16
conv_channels = 4
heads = 4

[training]
steps = {steps}
max_episode_points = 32
log_every = 1
seed = 0

[baseline]
qrf_trees = 5
gbq_rounds = 5

[experiment]
seeds = 0
buffer_radius = 0
predict_samples = 4

[predict]
grid = 6, 5
years = 2020, 2021
context_max = 64
"""


def _config(tmp_path, steps=3, name="tiny.ini"):
    path = tmp_path / name
    path.write_text(TINY_INI.format(steps=steps))
    return path


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """A synthesized dataset plus one checkpoint per method, built once."""
    d = tmp_path_factory.mktemp("cli")
    cfg = _config(d)
    assert cli.main(["synth", "--config", str(cfg), "--out", str(d)]) == 0
    data = d / "dataset.csv"
    for m in ("anp", "qrf", "gbq"):
        assert cli.main(["train", "--config", str(cfg), "--dataset", str(data), "--method", m,
                         "--out", str(d)]) == 0
    return d, cfg, data


# ---------------------------------------------------------------- config

def test_canonical_config_parses():
    cfg = cli.load_config(ROOT / "configs" / "example.ini")
    assert cfg.world == WorldConfig()
    assert cfg.experiment.seeds == (0, 1, 2) and cfg.holdout_year == 2021
    assert set(cfg.experiment.methods) == {"anp", "qrf", "gbq"}


def test_config_text_round_trip():
    cfg = cli.load_config(ROOT / "configs" / "example.ini")
    again = cli.parse_config(cfg.text)
    assert again.text == cfg.text
    assert again.world == cfg.world and again.model == cfg.model and again.training == cfg.training


def test_seed_override():
    cfg = cli.load_config(ROOT / "configs" / "example.ini", seed=7)
    assert cfg.world.seed == 7 and cfg.training.seed == 7 and cfg.experiment.seeds == (7,)
    assert "seed = 7" in cfg.text


@pytest.mark.parametrize("text", [
    "[world]\nbogus = 1\n",
    "[nonsense]\na = 1\n",
    "[world]\ntiles = x, y\n",
    "[experiment]\nholdout_year = 1999\n",
    "[experiment]\nmethods = anp, svm\n",
    "[training]\ncontext_ratio_range = 0.8, 0.2\n",
    "not an ini file",
])
def test_bad_config_exit_2(tmp_path, capsys, text):
    path = tmp_path / "bad.ini"
    path.write_text(text)
    assert cli.main(["synth", "--config", str(path), "--out", str(tmp_path)]) == 2
    assert "config error" in capsys.readouterr().err


def test_missing_config_exit_2(tmp_path, capsys):
    assert cli.main(["synth", "--config", str(tmp_path / "nope.ini"), "--out", str(tmp_path)]) == 2
    assert "nope.ini" in capsys.readouterr().err


def test_usage_error_exit_2(capsys):
    assert cli.main(["frobnicate"]) == 2
    assert cli.main(["train", "--config", "x.ini"]) == 2


def test_runtime_error_exit_1(tmp_path, capsys):
    cfg = _config(tmp_path)
    bad = tmp_path / "broken.csv"
    bad.write_text("version=1,D=4,period=2019-2021\n1,2,3\n")
    assert cli.main(["train", "--config", str(cfg), "--dataset", str(bad), "--out", str(tmp_path)]) == 1
    assert "error" in capsys.readouterr().err


# ---------------------------------------------------------------- synth

def test_synth_deterministic(workdir, tmp_path):
    d, cfg, data = workdir
    assert cli.main(["synth", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "dataset.csv").read_bytes() == data.read_bytes()
    fps = read_dataset(data)
    assert len(fps) > 0 and {f.year for f in fps} == {2019, 2020, 2021}
    assert "# [world]" in data.read_text().split("\n", 3)[1]


def test_synth_seed_flag_changes_world(workdir, tmp_path):
    d, cfg, data = workdir
    assert cli.main(["synth", "--config", str(cfg), "--out", str(tmp_path), "--seed", "5"]) == 0
    assert (tmp_path / "dataset.csv").read_bytes() != data.read_bytes()


# ---------------------------------------------------------------- train

def test_train_zero_steps_saves_init(tmp_path, workdir):
    _, _, data = workdir
    cfg = _config(tmp_path, steps=0)
    assert cli.main(["train", "--config", str(cfg), "--dataset", str(data), "--out", str(tmp_path)]) == 0
    model, header = load_anp(tmp_path / "anp_seed0.ckpt")
    init = init_params(model.config, seed=0, dtype=np.float32)
    assert all(np.array_equal(model.params[k].data, v) for k, v in init.items())
    assert header["method"] == "anp" and header["holdout_year"] == 2020


def test_train_log_monotone(workdir):
    d, _, _ = workdir
    lines = [l for l in (d / "anp_seed0.log").read_text().splitlines() if not l.startswith("#")]
    steps = [int(l.split()[0].split("=")[1]) for l in lines]
    assert steps == sorted(steps) == list(range(3))
    assert (d / "anp_seed0.log").read_text().startswith("# [world]")


def test_train_deterministic(workdir, tmp_path):
    d, cfg, data = workdir
    for m in ("anp", "gbq"):
        assert cli.main(["train", "--config", str(cfg), "--dataset", str(data), "--method", m,
                         "--out", str(tmp_path)]) == 0
        assert (tmp_path / f"{m}_seed0.ckpt").read_bytes() == (d / f"{m}_seed0.ckpt").read_bytes()


# ---------------------------------------------------------------- predict

@pytest.mark.parametrize("method", ["anp", "qrf", "gbq"])
def test_predict_grid(workdir, tmp_path, method):
    d, cfg, data = workdir
    assert cli.main(["predict", "--config", str(cfg), "--dataset", str(data),
                     "--checkpoint", str(d / f"{method}_seed0.ckpt"), "--out", str(tmp_path)]) == 0
    text = (tmp_path / f"grid_{method}.csv").read_text()
    rows = list(csv.DictReader(l for l in text.splitlines() if not l.startswith("#")))
    assert len(rows) == 6 * 5 * 2
    mu = np.array([float(r["mu_norm"]) for r in rows])
    sigma = np.array([float(r["sigma_norm"]) for r in rows])
    assert np.all(np.isfinite(mu)) and np.all(sigma >= 1e-3 - 1e-12)
    assert {int(r["year"]) for r in rows} == {2020, 2021}


def test_predict_at_training_footprint(workdir):
    d, cfg, data = workdir
    model, _ = load_anp(d / "anp_seed0.ckpt")
    fps = read_dataset(data)
    from stnp.footprints import stack_footprints
    ctx = stack_footprints(fps[:30])
    q = stack_footprints(fps[:1])
    pred = model.predict(ctx, q.coords, q.patches, n_samples=4)
    assert np.isfinite(pred.mu).all() and (pred.sigma >= model.config.sigma_floor).all()


# ---------------------------------------------------------------- eval

def _table_rows(path):
    return [r for r in csv.reader(l for l in path.read_text().splitlines() if not l.startswith("#"))]


def test_eval_from_checkpoints(workdir, tmp_path):
    d, cfg, data = workdir
    ckpts = [str(d / f"{m}_seed0.ckpt") for m in ("anp", "qrf", "gbq")]
    args = ["eval", "--config", str(cfg), "--dataset", str(data), "--out", str(tmp_path / "a"),
            "--checkpoint", *ckpts]
    assert cli.main(args) == 0
    rows = _table_rows(tmp_path / "a" / "table1.csv")
    assert rows[0][2:] == ["QRF", "GBQ", "ANP"]
    assert [r[1] for r in rows[1:]] == [METRIC_LABELS[n] for n in METRIC_NAMES]
    t1 = json.loads((tmp_path / "a" / "table1.json").read_text())
    assert all(set(v) == set(METRIC_NAMES) for v in t1["metrics"].values())
    assert {r[0] for r in _table_rows(tmp_path / "a" / "table2.csv")[1:]} <= set(STRATA)
    # rerun: identical bytes
    args[args.index(str(tmp_path / "a"))] = str(tmp_path / "b")
    assert cli.main(args) == 0
    for name in ("table1.csv", "table1.json", "table2.csv", "table2.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    assert "[world]" in t1["config"]


def test_eval_full_pipeline(workdir, tmp_path):
    _, cfg, data = workdir
    assert cli.main(["eval", "--config", str(cfg), "--dataset", str(data), "--out", str(tmp_path)]) == 0
    t2 = json.loads((tmp_path / "table2.json").read_text())
    assert set(t2["strata"]) <= set(STRATA)
    assert (tmp_path / "table1.csv").read_text().startswith("# [world]")


def test_eval_bad_jobs(workdir, tmp_path):
    _, cfg, data = workdir
    assert cli.main(["eval", "--config", str(cfg), "--dataset", str(data), "--out", str(tmp_path),
                     "--jobs", "0"]) == 2


@pytest.mark.parametrize("name", ["example.ini", "quick.ini"])
def test_shipped_configs_parse(name):
    cfg = cli.load_config(ROOT / "configs" / name)
    assert cli.parse_config(cfg.text).text == cfg.text
    assert cfg.holdout_year in cfg.world.years
