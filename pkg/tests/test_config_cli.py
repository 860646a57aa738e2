import json
import os

import pytest

from apart.cli import main, output_lock
from apart.config import ConfigError, ExperimentConfig, parse_config
from apart.experiment import read_csv_with_hash, read_metrics

TINY = """\
dataset: "synthetic:6,30"
rho: 0.2
n_max: 30
scenario: shuffled
split: B2-2
precision: f64
epochs: 1
batch_size: 8
pool_size: 2
bottleneck: 4
image_size: 8
patch_size: 4
embed_dim: 8
depth: 1
num_heads: 2
mlp_ratio: 2
synthetic_test_per_class: 5
"""


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.yaml"
    path.write_text(TINY)
    return str(path)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    cfg = root / "tiny.yaml"
    cfg.write_text(TINY)
    out = root / "out"
    assert main(["run", "--config", str(cfg), "--out", str(out)]) == 0
    return out


# --- config parsing ----------------------------------------------------------

def test_defaults_and_hash_ignore_output_dir():
    a = parse_config("")
    assert a == ExperimentConfig()
    b = parse_config("output_dir: elsewhere\n")
    assert a.config_hash() == b.config_hash() and len(a.config_hash()) == 16
    assert parse_config("seed: 1\n").config_hash() != a.config_hash()


def test_unknown_key_reports_line():
    with pytest.raises(ConfigError) as info:
        parse_config("rho: 0.1\n\nlearning_rate: 0.1\n")
    assert info.value.line == 3 and info.value.field == "learning_rate"
    assert "line 3" in str(info.value)


@pytest.mark.parametrize("text,field", [("epochs: many\n", "epochs"),
                                        ("mlp_residual: 3\n", "mlp_residual"),
                                        ("rho: 2.0\n", "rho"),
                                        ("mode: sideways\n", "mode"),
                                        ("split: B10\n", "split"),
                                        ("subgroup_bounds: [5, 10]\n", "subgroup_bounds")])
def test_bad_values_name_the_field(text, field):
    with pytest.raises(ConfigError) as info:
        parse_config(text)
    assert info.value.field == field


def test_duplicate_and_malformed():
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config("seed: 1\nseed: 2\n")
    with pytest.raises(ConfigError, match="malformed"):
        parse_config("seed: [1\n")


def test_overrides_apply_and_validate():
    cfg = parse_config("seed: 1\n", {"seed": 5, "output_dir": None})
    assert cfg.seed == 5
    with pytest.raises(ConfigError):
        parse_config("", {"precision": "f16"})


def test_missing_cifar_path_exits_2(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(f"dataset: cifar100-binary:{tmp_path / 'nowhere'}\n")
    assert main(["run", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2
    err = capsys.readouterr().err
    assert "dataset" in err and "does not exist" in err


def test_missing_config_file_exits_2(tmp_path):
    assert main(["run", "--config", str(tmp_path / "none.yaml")]) == 2


# --- run / report ------------------------------------------------------------

def test_run_writes_one_record_per_task(tiny_run):
    header, tasks = read_metrics(str(tiny_run / "metrics.jsonl"))
    assert header["num_tasks"] == len(tasks) == 3
    assert [t["task"] for t in tasks] == [0, 1, 2]
    summary = json.loads((tiny_run / "summary.json").read_text())
    assert summary["config_hash"] == header["config_hash"]
    assert sorted(os.listdir(tiny_run / "checkpoints")) == [
        "task_000.ckpt", "task_001.ckpt", "task_002.ckpt"]
    assert not (tiny_run / ".lock").exists()


def test_rerun_is_byte_identical(tiny_run, tiny_config, tmp_path):
    out = tmp_path / "again"
    assert main(["run", "--config", tiny_config, "--out", str(out)]) == 0
    for name in ("metrics.jsonl", "summary.json", "assigner_weights.csv",
                 "per_class_accuracy.csv", "manifest.jsonl"):
        assert (out / name).read_bytes() == (tiny_run / name).read_bytes(), name


def test_report_is_consistent(tiny_run, capsys):
    assert main(["report", str(tiny_run)]) == 0
    text = capsys.readouterr().out
    _, tasks = read_metrics(str(tiny_run / "metrics.jsonl"))
    accs = [t["accuracy"] for t in tasks]
    assert f"average accuracy  {sum(accs) / len(accs):.2f}" in text
    assert f"last accuracy     {accs[-1]:.2f}" in text
    _, weights = read_csv_with_hash(str(tiny_run / "assigner_weights.csv"))
    _, freq = read_csv_with_hash(str(tiny_run / "frequency_weights.csv"))
    assert sorted(int(r["n_y"]) for r in freq) == sorted({int(r["n_y"]) for r in weights})
    assert sum(int(r["instances"]) for r in freq) == len(weights)
    assert (tiny_run / "report.txt").read_text().strip() == text.strip()


def test_report_refuses_mixed_hashes(tiny_run, tmp_path, capsys):
    import shutil
    mixed = tmp_path / "mixed"
    shutil.copytree(tiny_run, mixed)
    path = mixed / "per_class_accuracy.csv"
    lines = path.read_text().splitlines(keepends=True)
    path.write_text("# config_hash=0000000000000000\n" + "".join(lines[1:]))
    assert main(["report", str(mixed)]) == 1
    assert "mixes outputs" in capsys.readouterr().err


def test_corrupt_metrics_names_file(tiny_run, tmp_path, capsys):
    import shutil
    bad = tmp_path / "bad"
    shutil.copytree(tiny_run, bad)
    with open(bad / "metrics.jsonl", "a") as fh:
        fh.write("{not json\n")
    assert main(["report", str(bad)]) == 1
    assert "metrics.jsonl" in capsys.readouterr().err


def test_lock_blocks_second_writer(tiny_config, tmp_path, capsys):
    out = tmp_path / "locked"
    with output_lock(str(out)):
        assert main(["run", "--config", tiny_config, "--out", str(out)]) == 1
    assert "locked" in capsys.readouterr().err
    assert not (out / ".lock").exists()


def test_bad_mode_override_exits_2(tiny_config, tmp_path):
    assert main(["run", "--config", tiny_config, "--out", str(tmp_path / "o"),
                 "--mode", "nope"]) == 2


def test_ablate_rows_share_manifest(tiny_config, tmp_path, capsys):
    out = tmp_path / "abl"
    assert main(["ablate", "--config", tiny_config, "--out", str(out), "--seed", "3"]) == 0
    report = json.loads((out / "ablation.json").read_text())
    assert [r["mode"] for r in report["rows"]] == ["full", "no_routing", "no_aux_pool", "no_pool"]
    assert len({r["manifest_hash"] for r in report["rows"]}) == 1
    assert report["seeds"] == [3]
    assert main(["report", str(out)]) == 0
    assert "ordering" in capsys.readouterr().out
