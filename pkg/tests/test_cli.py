import json
from pathlib import Path

import numpy as np
import pytest

from icon_uda.cli import SUITES, main
from icon_uda.datagen import load_dataset, save_dataset

FAST = ["--override", "epochs=1", "--override", "hidden=8", "--override", "feature_dim=6",
        "--override", "probe_pairs=200"]


@pytest.fixture
def data(tmp_path):
    path = tmp_path / "d.csv"
    assert main(["generate", "--seed", "0", "--out", str(path), "--override", "n_per_domain=80"]) == 0
    return path


@pytest.fixture
def trained(tmp_path, data, capsys):
    out = tmp_path / "run"
    assert main(["train", "--data", str(data), "--out", str(out), "--seed", "1", *FAST]) == 0
    capsys.readouterr()
    return out


def _manifest(capsys):
    return json.loads(capsys.readouterr().out)


def test_generate_is_byte_identical(tmp_path, capsys):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    for path in (a, b):
        assert main(["generate", "--scenario", "spurious_shift", "--seed", "0", "--out", str(path)]) == 0
        man = _manifest(capsys)
    assert a.read_bytes() == b.read_bytes()
    assert man["command"] == "generate" and man["files"] == [str(b)]
    assert len(load_dataset(a).source_y) == 1000


def test_generate_usage_errors(tmp_path):
    assert main(["generate", "--seed", "0"]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["generate", "--scenario", "colored_mnist", "--out", str(tmp_path / "x.csv")])
    assert exc.value.code == 2
    assert main(["generate", "--out", str(tmp_path / "x.csv"), "--override", "nope=1"]) == 2


def test_train_writes_artifacts_and_echoes_config(tmp_path, data, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("alpha = 0.25\nbeta = 0.1\n")
    out = tmp_path / "run"
    rc = main(["train", "--data", str(data), "--out", str(out), "--config", str(cfg),
               "--override", "alpha=0.5", *FAST])
    assert rc == 0
    man = _manifest(capsys)
    assert all((out / name).exists() for name in ("metrics.csv", "summary.json", "model.ckpt"))
    assert all(Path(f).exists() for f in man["files"])
    summary = json.loads((out / "summary.json").read_text())
    assert summary["config"]["alpha"] == 0.5 and summary["config"]["beta"] == 0.1
    assert summary["config"]["epochs"] == 1 and summary["seconds"] > 0
    assert 0.0 <= summary["final"]["acc_t"] <= 1.0


def test_train_erm_preset(tmp_path, data, capsys):
    assert main(["train", "--data", str(data), "--preset", "erm", "--out", str(tmp_path / "e"), *FAST]) == 0
    assert "acc_t" in _manifest(capsys)["results"]


def test_eval(tmp_path, data, trained, capsys):
    rc = main(["eval", "--data", str(data), "--checkpoint", str(trained / "model.ckpt"),
               "--out", str(tmp_path / "ev")])
    assert rc == 0
    res = _manifest(capsys)["results"]
    assert set(res) == {"acc_s", "acc_t", "mean_class_acc_t"}
    grid = (tmp_path / "ev" / "confusion.csv").read_text().splitlines()
    assert grid[0] == "true\\pred,0,1" and len(grid) == 3


def test_probe_is_deterministic_and_bounded(tmp_path, data, trained, capsys):
    args = ["probe", "--data", str(data), "--checkpoint", str(trained / "model.ckpt"),
            "--seed", "3", "--pairs", "500", "--out", str(tmp_path / "p")]
    assert main(args) == 0
    first = _manifest(capsys)["results"]
    assert main(args) == 0
    assert _manifest(capsys)["results"] == first
    assert 0.0 <= first["percentage"] <= 100.0
    assert json.loads((tmp_path / "p" / "probe.json").read_text()) == first


def test_probe_refuses_tiny_target(tmp_path, data, trained):
    ds = load_dataset(data)
    tiny = tmp_path / "tiny.csv"
    save_dataset(type(ds)(ds.source_x, ds.source_y, ds.target_x[:1], ds.target_y[:1]), tiny)
    assert main(["probe", "--data", str(tiny), "--checkpoint", str(trained / "model.ckpt"),
                 "--out", str(tmp_path / "p")]) == 2


def test_probe_dimension_mismatch_is_io_error(tmp_path, trained):
    other = tmp_path / "wide.csv"
    assert main(["generate", "--out", str(other), "--override", "embed_dim=5",
                 "--override", "n_per_domain=20"]) == 0
    assert main(["probe", "--data", str(other), "--checkpoint", str(trained / "model.ckpt"),
                 "--out", str(tmp_path / "p")]) == 4


def test_missing_files_are_io_errors(tmp_path):
    assert main(["train", "--data", str(tmp_path / "none.csv"), "--out", str(tmp_path / "r")]) == 4


def test_nan_aborts_with_exit_3(tmp_path, data, capsys):
    lines = data.read_text().splitlines()
    parts = lines[1].split(",")
    parts[2] = "nan"
    lines[1] = ",".join(parts)
    bad = tmp_path / "nan.csv"
    bad.write_text("\n".join(lines) + "\n")
    assert main(["train", "--data", str(bad), "--out", str(tmp_path / "r"), *FAST]) == 3
    assert "ce_s" in capsys.readouterr().err


def test_ablate_param_sweep_counts(tmp_path, data, capsys):
    out = tmp_path / "ab"
    rc = main(["ablate", "--param", "alpha", "--values", "0.25,0.5,0.75,1.0", "--seeds", "3",
               "--data", str(data), "--out", str(out), *FAST])
    assert rc == 0
    agg = (out / "ablation.csv").read_text().splitlines()
    runs = (out / "runs.csv").read_text().splitlines()
    assert agg[0] == "setting,preset,runs,mean_acc_t,std_acc_t"
    assert len(agg) - 1 == 4 and len(runs) - 1 == 12
    rows = [r.split(",") for r in runs[1:]]
    first = [float(r[3]) for r in rows if r[0] == "alpha=0.25"]
    mean, std = map(float, agg[1].split(",")[3:])
    assert mean == pytest.approx(np.mean(first)) and std == pytest.approx(np.std(first))


def test_ablate_suites(tmp_path, data, capsys):
    assert [m["cluster_multiplier"] for _, _, m in SUITES["cluster_count"]] == [0.5, 1.0, 2.0]
    assert [name for _, name, _ in SUITES["components"]] == ["erm", "self_training", "con", "icon"]
    out = tmp_path / "cc"
    assert main(["ablate", "--suite", "cluster_count", "--seeds", "1", "--data", str(data),
                 "--out", str(out), *FAST]) == 0
    labels = [r.split(",")[0] for r in (out / "ablation.csv").read_text().splitlines()[1:]]
    assert labels == ["clusters_x0.5", "clusters_x1", "clusters_x2"]
    assert main(["ablate", "--suite", "table9", "--out", str(out)]) == 2
    assert main(["ablate", "--out", str(out)]) == 2
