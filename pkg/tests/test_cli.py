import csv
import json

import pytest

from microdarts.cli import main
from microdarts.config import RunConfig, documented_defaults
from microdarts.errors import InputError

TINY = """\
# small enough to search in a couple of seconds
space = S3
cells = 3
init_channels = 4
nodes = 2
k = 2
image_size = 8
n_per_class = 20
epochs = 2
batch_size = 16
diag_interval = 1
retrain_epochs = 2
retrain_batch_size = 16
"""


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.cfg"
    cfg.write_text(TINY)
    assert main(["search", "--config", str(cfg), "--out", str(root / "s"), "--norm", "pre"]) == 0
    return root, cfg


def test_missing_config_names_path(tmp_path, capsys):
    assert main(["search", "--config", str(tmp_path / "nope.cfg")]) == 2
    assert "nope.cfg" in capsys.readouterr().err


def test_unknown_key(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("epochs = 2\nlearning_rate = 0.1\n")
    assert main(["search", "--config", str(cfg)]) == 2
    assert "learning_rate" in capsys.readouterr().err


def test_bad_argument_is_usage_error():
    assert main(["search"]) == 2
    assert main(["frobnicate"]) == 2


def test_config_parse_rules():
    with pytest.raises(InputError):
        RunConfig.parse("epochs = 1\nepochs = 2\n")
    with pytest.raises(InputError):
        RunConfig.parse("epochs = lots\n")
    with pytest.raises(InputError):
        RunConfig.parse("norm = sideways\n")
    assert RunConfig.parse(documented_defaults()) == RunConfig()


def test_search_outputs(run):
    root, _ = run
    out = root / "s"
    assert "norm = pre" in (out / "resolved.cfg").read_text().splitlines()
    assert len((out / "diag.csv").read_text().splitlines()) == 3
    doc = json.loads((out / "alpha.json").read_text())
    assert len(doc["alpha_normal"]) == 5 and doc["ops"] == ["zero", "skip_connect", "sep_conv_3x3"]


def test_search_is_deterministic(run, tmp_path):
    root, cfg = run
    assert main(["search", "--config", str(cfg), "--out", str(tmp_path), "--norm", "pre"]) == 0
    for name in ("alpha.json", "diag.csv", "checkpoint.mdrt"):
        assert (tmp_path / name).read_bytes() == (root / "s" / name).read_bytes()


def test_discretize_decorr_report(run, tmp_path):
    root, _ = run
    assert main(["discretize", "--checkpoint", str(root / "s" / "checkpoint.mdrt"), "--mode", "decorr",
                 "--batches", "1", "--out", str(tmp_path)]) == 0
    with open(tmp_path / "similarity_report.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert sum(r["cell_type"] == "normal" for r in rows) == 2 * 2
    assert sum(r["cell_type"] == "reduce" for r in rows) == 2 * 2
    assert all(float(r["residual_max_cos"]) <= 1e-5 for r in rows)
    assert (tmp_path / "genotype.dot").read_text().startswith("digraph normal")


def test_discretize_value_warns(run, tmp_path, caplog):
    root, _ = run
    ckpt = str(root / "s" / "checkpoint.mdrt")
    assert main(["discretize", "--checkpoint", ckpt, "--mode", "value", "--batches", "3",
                 "--out", str(tmp_path)]) == 0
    assert "ignored" in caplog.text
    assert not (tmp_path / "similarity_report.csv").exists()


def test_discretize_oracle_and_cap(run, tmp_path):
    root, _ = run
    ckpt = str(root / "s" / "checkpoint.mdrt")
    assert main(["discretize", "--checkpoint", ckpt, "--mode", "oracle", "--out", str(tmp_path)]) == 0
    assert (tmp_path / "similarity_report.csv").exists()
    assert main(["discretize", "--checkpoint", ckpt, "--mode", "oracle", "--cap", "1",
                 "--out", str(tmp_path / "cap")]) == 4


def test_bad_checkpoint_is_runtime_error(tmp_path):
    bad = tmp_path / "bad.mdrt"
    bad.write_bytes(b"not a checkpoint")
    assert main(["discretize", "--checkpoint", str(bad), "--out", str(tmp_path)]) == 3


def test_retrain_rejects_foreign_op(run, tmp_path):
    root, cfg = run
    g = {"normal": [[{"pred": 0, "op": "sep_conv_5x5"}, {"pred": 1, "op": "skip_connect"}]] * 2,
         "reduce": [[{"pred": 0, "op": "skip_connect"}, {"pred": 1, "op": "skip_connect"}]] * 2,
         "space": "S3", "nodes": 2, "k": 2}
    path = tmp_path / "g.json"
    path.write_text(json.dumps(g))
    assert main(["retrain", "--genotype", str(path), "--config", str(cfg), "--out", str(tmp_path)]) == 2


def test_retrain_deterministic(run, tmp_path):
    root, cfg = run
    assert main(["discretize", "--checkpoint", str(root / "s" / "checkpoint.mdrt"), "--mode", "value",
                 "--out", str(tmp_path)]) == 0
    g = str(tmp_path / "genotype.json")
    outs = []
    for name in ("a", "b"):
        assert main(["retrain", "--genotype", g, "--config", str(cfg), "--out", str(tmp_path / name)]) == 0
        outs.append((tmp_path / name / "retrain.csv").read_text())
    assert outs[0] == outs[1]
    lines = outs[0].splitlines()
    assert lines[0] == "epoch,loss,train_acc,test_acc,lr"
    assert lines[-1].startswith("final,,,")
    assert len(lines) == 2 + 2


def test_diagnose(run, tmp_path):
    root, _ = run
    ckpt = str(root / "s" / "checkpoint.mdrt")
    assert main(["diagnose", "--checkpoint", ckpt, "--batches", "0", "--out", str(tmp_path)]) == 2
    assert main(["diagnose", "--checkpoint", ckpt, "--out", str(tmp_path)]) == 0
    corr = sorted(p.name for p in tmp_path.glob("corr_*.csv"))
    theta = sorted(p.name for p in tmp_path.glob("theta_alpha_*.csv"))
    assert len(corr) == 3 * 2 and corr[0] == "corr_2_0_0.csv"
    assert len(theta) == 5
