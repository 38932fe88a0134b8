import json
from pathlib import Path

import pytest

from shopsim.cli import main
from shopsim.config import BUILTIN_CONFIG
from shopsim.trajectory import read_trajectories


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def _error(err):
    return json.loads(err.strip().splitlines()[-1])


def test_validate_layout(capsys, tmp_path, experiment):
    code, out, _ = _run(capsys, "validate-layout", experiment.layout)
    assert code == 0 and out.startswith("ok:")
    bad = tmp_path / "bad.yaml"
    bad.write_text(Path(experiment.layout).read_text().replace("version: 1", "version: 1\nsurprise: 2", 1))
    code, _, err = _run(capsys, "validate-layout", bad)
    assert code == 2 and _error(err)["exit_code"] == 2


def test_generate_fixed_tsp_basket(capsys, tmp_run):
    code, _, _ = _run(capsys, "generate", "--out", tmp_run, "--method", "tsp", "--basket", "hot_coffee,bakery", "--count", 100, "--seed", 7)
    assert code == 0
    files = list((tmp_run / "trajectories" / "tsp").glob("*.jsonl"))
    assert len(files) == 1
    trajs = read_trajectories(files[0])
    assert len(trajs) == 100 and all(t == trajs[0] for t in trajs)


def test_generate_manifests(capsys, tmp_run):
    code, _, _ = _run(capsys, "generate", "--out", tmp_run, "--method", "pnn", "--count", 300)
    assert code == 0
    man = json.loads((tmp_run / "manifest_generate.json").read_text())
    assert man["methods"]["pnn"]["retention"] == 1.0 and man["methods"]["pnn"]["produced"] == 300
    code, _, _ = _run(
        capsys, "generate", "--out", tmp_run, "--method", "maxent", "--tau", 0.05, "--min-reward", "default",
        "--basket", "hot_coffee", "--count", 30,
    )
    assert code == 0
    st = json.loads((tmp_run / "manifest_generate.json").read_text())["methods"]["maxent"]
    assert st["retention"] == pytest.approx(st["produced"] / st["attempts"])
    trajs = read_trajectories(next((tmp_run / "trajectories" / "maxent").glob("*.jsonl")))
    assert st["mean_steps"] == pytest.approx(sum(len(t) for t in trajs) / len(trajs))
    timings = json.loads((tmp_run / "timings_generate.json").read_text())
    assert timings["maxent"]["solve_seconds"] >= 0


def test_validation_errors_exit_2(capsys, tmp_run):
    code, _, err = _run(capsys, "generate", "--out", tmp_run, "--method", "tsp", "--basket", "caviar", "--count", 1)
    assert code == 2 and "caviar" in _error(err)["message"]
    code, _, err = _run(capsys, "generate", "--out", tmp_run, "--config", tmp_run / "none.yaml")
    assert code == 2
    code, _, err = _run(capsys, "analyze", "--out", tmp_run)
    assert code == 2


def test_report_on_empty_and_partial_runs(capsys, tmp_run):
    code, _, err = _run(capsys, "report", tmp_run)
    assert code == 2 and _error(err)["error"] == "nothing-to-report"
    assert _run(capsys, "cluster", "--out", tmp_run)[0] == 0
    code, out, _ = _run(capsys, "report", tmp_run)
    assert code == 0
    assert "Missing artifacts" in out and "divergence.tsv" in out


def test_pipeline_report_is_byte_stable(capsys, tmp_path):
    runs = []
    for name, workers in (("a", 1), ("b", 2)):
        run = tmp_path / name
        for cmd in ("generate", "analyze", "traffic"):
            extra = ["--count", 40] if cmd == "generate" else []
            code, _, err = _run(capsys, cmd, "--out", run, "--seed", 5, "--workers", workers, *extra)
            assert code == 0, err
        assert _run(capsys, "report", run)[0] == 0
        runs.append(run)
    table = (runs[0] / "analysis" / "divergence.tsv").read_text().splitlines()
    # one column per method, one row per metric
    assert table[0].split("\t") == ["metric", "tsp", "pnn", "maxent"]
    assert [r.split("\t")[0] for r in table[1:3]] == ["JSD (average heatmap)", "WD (average heatmap)"]
    for p in sorted(runs[0].rglob("*")):
        if p.is_file() and not p.name.startswith("timings_"):
            assert p.read_bytes() == (runs[1] / p.relative_to(runs[0])).read_bytes(), p


def test_bundled_config_exists():
    assert BUILTIN_CONFIG.exists()
