import numpy as np
import pytest

from tokenmix import experiment as E
from tokenmix.cli import main
from tokenmix.errors import ConfigError

TINY_LINES = """\
model.image_size=16
model.patch_size=4
model.embed_dim=16
model.num_layers=1
model.num_heads=2
model.num_classes=3
data.n_labeled=2
data.n_unlabeled=8
data.n_val=4
data.seed=1
train.seed=0
train.epochs=2
train.burn_in_epochs=0
train.batch_labeled=2
train.batch_unlabeled=4
train.rho=0.3
"""


def tiny_config(tmp_path, **overrides) -> E.ExperimentConfig:
    cfg = E.loads_config(TINY_LINES).replace("output_dir", str(tmp_path / "run"))
    for k, v in overrides.items():
        cfg = cfg.replace(k.replace("__", "."), v)
    return cfg


# -- config files -----------------------------------------------------------

def test_config_defaults_and_parse():
    cfg = E.loads_config("train.seed=3\ndata.seed=4\n# comment\n\naug.swap_ratio=0.5\n")
    assert cfg.train.seed == 3 and cfg.data.seed == 4 and cfg.aug.swap_ratio == 0.5
    assert cfg.train.rho == 0.95 and cfg.train.theta == 0.999 and cfg.train.branch_design == "D3"
    assert cfg.model == E.ModelConfig()


def test_config_round_trip():
    cfg = E.loads_config(TINY_LINES + "aug.strong=false\nmodel.decoder=upsample\noutput_dir=x/y\n")
    text = E.serialize_config(cfg)
    assert "aug.strong=false" in text and "train.rho=0.3" in text
    assert E.loads_config(text) == cfg


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError, match="swap_ratio"):
        E.loads_config("train.seed=0\ndata.seed=0\naug.swap_ratio=1.5\n")
    with pytest.raises(E.UnknownKeyError):
        E.loads_config("train.seed=0\ndata.seed=0\ntrain.learning_rate=0.1\n")
    with pytest.raises(E.MissingKeyError, match="data.seed"):
        E.loads_config("train.seed=0\n")
    with pytest.raises(E.ConfigSyntaxError, match="duplicate"):
        E.loads_config("train.seed=0\ndata.seed=0\ntrain.seed=1\n")
    with pytest.raises(E.ConfigSyntaxError):
        E.loads_config("train.seed 0\n")
    with pytest.raises(ConfigError):
        E.loads_config("train.seed=zero\ndata.seed=0\n")
    with pytest.raises(FileNotFoundError):
        E.parse_config(tmp_path / "nope.txt")


# -- single runs ------------------------------------------------------------

def test_run_writes_artifacts(tmp_path):
    cfg = tiny_config(tmp_path)
    rec = E.run_experiment(cfg)
    out = tmp_path / "run"
    for name in ("config.txt", "metrics.txt", "eval.txt", "report.txt", "student.ckpt", "teacher.ckpt"):
        assert (out / name).is_file(), name
    metrics = (out / "metrics.txt").read_text().splitlines()
    assert len(metrics) == 4 == len(rec.metric_lines)  # 2 epochs x 2 unlabeled batches
    first = dict(kv.split("=") for kv in metrics[0].split())
    assert {"l_unsup1", "l_unsup2"} <= first.keys()
    assert (out / "eval.txt").read_text().splitlines()[-1].startswith("epoch=1 step=4 miou=")
    assert E.loads_config((out / "config.txt").read_text()) == cfg
    assert 0.0 <= rec.final_miou <= 1.0 and len(rec.per_class_iou) == 3
    assert rec.summary().startswith("seed=0 miou=")


def test_run_is_deterministic(tmp_path):
    a = E.run_experiment(tiny_config(tmp_path), write=False)
    b = E.run_experiment(tiny_config(tmp_path), write=False)
    assert a.metric_lines == b.metric_lines and a.eval_lines == b.eval_lines
    c = E.run_experiment(tiny_config(tmp_path, train__seed=1), write=False)
    assert c.metric_lines != a.metric_lines


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergent_run_aborts(tmp_path):
    with pytest.raises(E.RunAborted) as info:
        E.run_experiment(tiny_config(tmp_path, train__lr0=1e12))
    assert all(line.startswith("step=") for line in info.value.tail)


# -- grids ------------------------------------------------------------------

@pytest.mark.parametrize("axis,csv", [("rho", "0.0,0.5,0.9,0.95,0.99"), ("theta", "0.0,0.5,0.9,0.99,0.999")])
def test_grid_axis_values(axis, csv):
    values = E.parse_axis_values(axis, csv)
    assert len(values) == 5 and all(isinstance(v, float) for v in values)
    assert E.parse_axis_values("augmentation", "tokenmix,cutmix") == ["tokenmix", "cutmix"]
    with pytest.raises(E.UnknownKeyError):
        E.axis_key("colour")


def test_grid_single_cell_prints_summary(tmp_path):
    table = E.run_ablation_grid(tiny_config(tmp_path), "rho", [0.5], [0])
    text = table.render()
    assert text.startswith("rho=0.5 seed=0 miou=") and text.count("\n") == 1
    assert (tmp_path / "run" / "grid_rho" / "0.5_s0" / "metrics.txt").is_file()
    assert (tmp_path / "run" / "grid_rho" / "table.txt").read_text() == text


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_grid_marks_failed_cells(tmp_path):
    table = E.run_ablation_grid(tiny_config(tmp_path), "train.lr0", [0.01, 1e12], [0, 1])
    assert not table.missing()
    assert sorted(table.failed()) == [(1e12, 0), (1e12, 1)]
    text = table.render()
    assert "FAILED" in text and "(2 failed)" in text
    m, s = table.mean_std(0.01)
    assert np.isfinite(m) and np.isfinite(s)


# -- command line -----------------------------------------------------------

def _write_config(tmp_path, **overrides):
    path = tmp_path / "cfg.txt"
    path.write_text(E.serialize_config(tiny_config(tmp_path, **overrides)))
    return str(path)


def test_cli_train_and_eval(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    assert main(["train", cfg, "--quiet"]) == 0
    assert capsys.readouterr().out.startswith("seed=0 miou=")
    assert main(["eval", str(tmp_path / "run" / "student.ckpt"), cfg]) == 0
    assert capsys.readouterr().out.startswith("miou=")


def test_cli_grid(tmp_path, capsys):
    cfg = _write_config(tmp_path, train__epochs=1)
    assert main(["grid", cfg, "--axis", "branch_design", "--values", "D1,D2", "--seeds", "0"]) == 0
    out = capsys.readouterr().out
    assert "D1" in out and "D2" in out and "seed 0" in out


def test_cli_errors(tmp_path, capsys):
    assert main(["train", str(tmp_path / "missing.txt")]) == 2
    assert "not found" in capsys.readouterr().err
    bad = tmp_path / "bad.txt"
    bad.write_text("train.seed=0\ndata.seed=0\naug.swap_ratio=1.5\n")
    assert main(["train", str(bad)]) == 2
    assert "swap_ratio" in capsys.readouterr().err
    with pytest.raises(SystemExit):
        main(["bogus"])


def test_cli_gradcheck(capsys):
    assert main(["gradcheck", "--seeds", "1"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines and all(line.startswith("PASS ") for line in lines)
