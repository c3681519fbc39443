import json

import numpy as np
import pytest

from dspoint.cli import main
from dspoint.config import RunConfig, load_run_config
from dspoint.data import load_xyz
from dspoint.model import read_checkpoint
from dspoint.train import read_metric_log

TINY_MODEL = dict(channels=[8, 8, 16], resolutions=[2, 2, 2], k=3, heads=2, hf_levels=2,
                  n_points=32, head_dims=[32, 16], dtype="float64")


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    assert main(["gen-data", "--out", str(root), "--seed", "7", "--per-class", "5", "--points", "32"]) == 0
    return root


def write_config(path, data_root, out, **model):
    cfg = RunConfig().to_dict()
    cfg["model"].update({**TINY_MODEL, **model})
    cfg["train"].update(batch_size=8, epochs=2)
    cfg["data"]["root"] = str(data_root)
    cfg["output_dir"] = str(out)
    path.write_text(json.dumps(cfg))
    return path


def test_gen_data_layout_and_manifest(dataset, capsys, tmp_path):
    files = sorted(dataset.rglob("*.xyz"))
    assert len(files) == 25
    manifest = json.loads((dataset / "manifest.json").read_text())
    assert len(manifest["classes"]) == 5 and manifest["train"] == 20
    assert len(load_xyz(files[0])) == 32
    again = tmp_path / "again"
    main(["gen-data", "--out", str(again), "--seed", "7", "--per-class", "5", "--points", "32"])
    for f in files:
        assert (again / f.relative_to(dataset)).read_bytes() == f.read_bytes()


def test_gen_data_per_class_100(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path), "--per-class", "100", "--points", "8"]) == 0
    assert len(list(tmp_path.rglob("*.xyz"))) == 500


def test_shipped_default_config_is_back_back():
    cfg = load_run_config("configs/default.json")
    assert (cfg.model.hf_local, cfg.model.hf_global) == ("back", "back")
    assert cfg.model.channels == (64, 64, 128) and cfg.train.lr == 1e-3


def test_train_missing_data_fails_before_model(tmp_path, capsys):
    cfg = write_config(tmp_path / "c.json", tmp_path / "nowhere", tmp_path / "run")
    assert main(["train", "--config", str(cfg)]) == 2
    assert "does not exist" in capsys.readouterr().err
    assert not (tmp_path / "run").exists()


def test_train_invalid_config_lists_fields(tmp_path, dataset, capsys):
    cfg = write_config(tmp_path / "c.json", dataset, tmp_path / "run", channels=[10, 8, 16], k=0)
    assert main(["train", "--config", str(cfg)]) == 2
    err = capsys.readouterr().err
    assert "local ratio" in err and "k=0" in err


@pytest.fixture(scope="module")
def trained(tmp_path_factory, dataset):
    tmp = tmp_path_factory.mktemp("run")
    cfg = write_config(tmp / "c.json", dataset, tmp / "out")
    assert main(["train", "--config", str(cfg), "--hf-local", "none", "--hf-global", "none"]) == 0
    return tmp / "out"


def test_train_outputs(trained):
    log = read_metric_log(trained / "metrics.jsonl")
    assert len(log) == 2 and all(np.isfinite(r["train_loss"]) for r in log)
    header, _ = read_checkpoint(trained / "best.ckpt")
    assert header["config"]["hf_local"] == "none" and header["config"]["num_classes"] == 5
    assert header["metadata"]["eval_acc"] == max(r["eval_acc"] for r in log)
    effective = json.loads((trained / "config.json").read_text())
    assert effective["model"]["hf_global"] == "none"


def test_eval_and_infer(trained, dataset, capsys):
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(trained / "best.ckpt"), "--data", str(dataset)]) == 0
    out = capsys.readouterr().out
    assert "accuracy:" in out and "confusion" in out
    item = sorted((dataset / "sphere" / "test").glob("*.xyz"))[0]
    assert main(["infer", "--checkpoint", str(trained / "best.ckpt"), "--input", str(item)]) == 0
    rows = [line.split("\t") for line in capsys.readouterr().out.strip().splitlines()]
    assert len(rows) == 5
    assert sum(float(p) for _, p in rows) == pytest.approx(1.0, abs=1e-5)


def test_bad_checkpoint(tmp_path, capsys):
    bad = tmp_path / "x.ckpt"
    bad.write_bytes(b"junk")
    assert main(["infer", "--checkpoint", str(bad), "--input", "nope.xyz"]) == 2


def test_grad_check_exit_code(capsys):
    assert main(["grad-check", "--size", "tiny", "--samples", "40"]) == 0
    assert "max relative error" in capsys.readouterr().out
    # an impossible tolerance must fail
    assert main(["grad-check", "--size", "tiny", "--samples", "40", "--tolerance", "1e-14"]) == 1


def test_bench_prints_latency_and_params(capsys):
    args = ["bench", "--config", "configs/ablate.json", "--n-points", "64", "--repeat", "2"]
    assert main(args) == 0
    first = capsys.readouterr().out
    assert "latency_ms:" in first and "params:" in first
    main(args)
    second = capsys.readouterr().out
    params = [line for line in (first + second).splitlines() if line.startswith("params:")]
    assert len(params) == 2 and params[0] == params[1]
