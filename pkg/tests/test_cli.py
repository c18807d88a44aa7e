import json

import numpy as np
import pytest
import yaml

from fulltarget.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, EXIT_STALE, main
from fulltarget.wavelet import load_pyramid

TINY = {
    "dataset": {"train_per_class": 30, "test_per_class": 10, "num_classes": 4},
    "classifier": {"lr": 0.01, "epochs": 1, "batch_size": 32},
    "trigger": {"epochs": 1, "batch_size": 32},
    "poison": {"rate": 0.1},
    "defense": {"strip_inputs": 20, "strip_overlays": 4, "prune_fractions": [0.0, 0.25, 0.5]},
}


def write_cfg(tmp_path, name="c.yaml", **over):
    cfg = json.loads(json.dumps(TINY))
    for k, v in over.items():
        cfg.setdefault(k, {})
        if isinstance(v, dict):
            cfg[k].update(v)
        else:
            cfg[k] = v
    p = tmp_path / name
    p.write_text(yaml.safe_dump(cfg))
    return str(p)


@pytest.fixture(scope="module")
def finished_run(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("run")
    cfg = write_cfg(tmp)
    run_dir = tmp / "r"
    assert main(["run", "--config", cfg, "--run-dir", str(run_dir), "--dump-pyramid", str(tmp / "pyr")]) == EXIT_OK
    return tmp, cfg, run_dir


def test_run_layout(finished_run):
    tmp, _, run_dir = finished_run
    manifest = json.loads((run_dir / "manifest.json").read_text())
    assert set(manifest["seeds"]) == {"data", "proxy", "trigger", "poison", "victim", "evaluation"}
    assert manifest["config"]["trigger"]["k"] == 1.5  # defaults expanded
    for phase in ("train-proxy", "centroids", "train-trigger", "poison", "train-clean", "train-victim", "evaluate"):
        info = json.loads((run_dir / phase / "phase.json").read_text())
        assert info["hash"] == manifest["phase_hashes"][phase]
    report = json.loads((run_dir / "evaluate" / "report.json").read_text())
    assert len(report["asr_per_class"]) == 4
    lines = (run_dir / "train-trigger" / "trigger_log.jsonl").read_text().splitlines()
    assert json.loads(lines[0])["epoch"] == 0
    assert (run_dir / "config.resolved.yaml").exists()
    pyr = sorted((tmp / "pyr").glob("*.ffpy"))
    assert len(pyr) == 8 and load_pyramid(pyr[0]).source_shape == (3, 16, 16)


def test_poison_manifest_is_clean_label(finished_run):
    _, _, run_dir = finished_run
    man = json.loads((run_dir / "poison" / "manifest.json").read_text())
    assert man["per_class_count"] == 3  # floor(0.1 * 120) // 4
    assert np.bincount(man["classes"]).tolist() == [3] * 4


def test_rerun_is_byte_identical(finished_run, tmp_path):
    _, cfg, run_dir = finished_run
    again = tmp_path / "again"
    assert main(["run", "--config", cfg, "--run-dir", str(again)]) == EXIT_OK
    assert (again / "evaluate" / "report.json").read_bytes() == (run_dir / "evaluate" / "report.json").read_bytes()


def test_stale_checkpoint_rejected(finished_run, tmp_path):
    _, _, run_dir = finished_run
    changed = write_cfg(tmp_path, trigger={"lr": 5e-4})
    assert main(["train-trigger", "--config", changed, "--run-dir", str(run_dir)]) == EXIT_STALE


def test_reuse_from_other_run(finished_run, tmp_path):
    _, _, run_dir = finished_run
    cfg = write_cfg(tmp_path, poison={"rate": 0.2})
    out = tmp_path / "reuse"
    assert main(["poison", "--config", cfg, "--run-dir", str(out), "--reuse-from", str(run_dir)]) == EXIT_OK
    assert not (out / "train-proxy").exists() and not (out / "train-trigger").exists()
    man = json.loads((out / "poison" / "manifest.json").read_text())
    assert man["per_class_count"] == 6


def test_poison_plan_file(finished_run, tmp_path):
    _, cfg, run_dir = finished_run
    plan = tmp_path / "plan.yaml"
    plan.write_text("rate: 0.0\n")
    out = tmp_path / "p0"
    assert main(["poison", "--config", cfg, "--run-dir", str(out), "--reuse-from", str(run_dir),
                 "--plan", str(plan)]) == EXIT_OK
    assert json.loads((out / "poison" / "manifest.json").read_text())["indices"] == []
    plan.write_text("rate: 0.1\nbogus: 1\n")
    assert main(["poison", "--config", cfg, "--run-dir", str(out), "--plan", str(plan)]) == EXIT_CONFIG


def test_external_victim_and_evaluate(finished_run, tmp_path, capsys):
    _, cfg, run_dir = finished_run
    ckpt = tmp_path / "v.pt"
    assert main(["train-victim", "--config", cfg, "--run-dir", str(run_dir), "--data", str(run_dir / "poison"),
                 "--out", str(ckpt)]) == EXIT_OK
    capsys.readouterr()
    assert main(["evaluate", "--config", cfg, "--run-dir", str(run_dir), "--victim", str(ckpt),
                 "--generator", str(run_dir / "train-trigger" / "generator.pt")]) == EXIT_OK
    rep = json.loads(capsys.readouterr().out)
    # the external victim was trained with the same data, arch and seed as the run's own
    assert rep == json.loads((run_dir / "evaluate" / "report.json").read_text())


def test_defenses(finished_run, capsys):
    _, cfg, run_dir = finished_run
    assert main(["defend", "strip", "--config", cfg, "--run-dir", str(run_dir)]) == EXIT_OK
    strip = json.loads(capsys.readouterr().out)
    assert len(strip["clean_histogram"]["counts"]) == 50 and 0 <= strip["ks_statistic"] <= 1
    assert main(["defend", "fineprune", "--config", cfg, "--run-dir", str(run_dir)]) == EXIT_OK
    curve = json.loads(capsys.readouterr().out)
    assert [p["fraction_pruned"] for p in curve] == [0.0, 0.25, 0.5]


def test_sweep(finished_run, tmp_path, capsys):
    _, cfg, _ = finished_run
    assert main(["sweep", "--config", cfg, "--run-dir", str(tmp_path / "sw"), "--rates", "0.1", "0"]) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert [r["rate"] for r in out["rows"]] == [0.0, 0.1]
    assert (tmp_path / "sw" / "sweep.json").exists()


def test_config_errors(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump({"paradigm": "fmba", "trigger": {"stage2": {"gamma": 0.5}}}))
    assert main(["run", "--config", str(bad), "--run-dir", str(tmp_path / "x")]) == EXIT_CONFIG
    bad.write_text("unknown_key: 1\n")
    assert main(["train-proxy", "--config", str(bad), "--run-dir", str(tmp_path / "x")]) == EXIT_CONFIG


def test_dataset_errors(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump({"dataset": {"name": "folder", "path": str(tmp_path / "nope")}}))
    (tmp_path / "nope").mkdir()
    assert main(["train-proxy", "--config", str(cfg), "--run-dir", str(tmp_path / "x")]) == EXIT_DATA
    ok = write_cfg(tmp_path, "ok.yaml")
    assert main(["train-victim", "--config", ok, "--run-dir", str(tmp_path / "y"),
                 "--data", str(tmp_path / "empty")]) == EXIT_DATA


def test_verify_ntk(tmp_path, capsys):
    assert main(["verify-ntk", "--trials", "50"]) == EXIT_OK
    rep = json.loads(capsys.readouterr().out)
    assert 1 / 3 <= rep["geometric_mean"] <= 3 and "pairs" not in rep
    f = tmp_path / "k.npz"
    rng = np.random.default_rng(0)
    np.savez(f, samples=rng.standard_normal((30, 2, 2)), labels=np.repeat([0, 1, 2], 10))
    assert main(["verify-ntk", "--dataset", "file", "--file", str(f), "--trials", "5", "--gamma", "0.1",
                 "--full"]) == EXIT_OK
    rep = json.loads(capsys.readouterr().out)
    assert rep["gamma"] == 0.1 and len(rep["pairs"]) == 5 and rep["class_counts"] == [10, 10, 10]
    assert main(["verify-ntk", "--gamma", "-2"]) == EXIT_CONFIG
    assert main(["verify-ntk", "--dataset", "file", "--file", str(tmp_path / "none.npz")]) == EXIT_DATA
