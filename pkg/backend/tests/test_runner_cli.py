from __future__ import annotations

import json

import pytest

import cli
from engine.errors import HypothesisFailure
from experiment_config import parse_config
from experiment_runner import run_experiment

ZERO_BETA_PROBLEM = """
import dataclasses

from problems import harmonic_disk


def build_problem():
    bundle = harmonic_disk.build()
    return dataclasses.replace(bundle, spec=bundle.spec.with_constants(beta=0.0))
"""


@pytest.fixture()
def zero_beta_config(tmp_path):
    (tmp_path / "zero_beta.py").write_text(ZERO_BETA_PROBLEM, encoding="utf-8")

    def write(experiment: str) -> str:
        path = tmp_path / f"{experiment}.json"
        payload = {"problem": "zero_beta.py", "experiment": experiment, "seed": 1, "numerics": {"grid_resolution": 9, "n_paths": 10}}
        path.write_text(json.dumps(payload), encoding="utf-8")
        return str(path)

    return write


def test_builtin_problem_passes_hypotheses(tmp_path):
    config = parse_config({"problem": "tp1", "experiment": "hypotheses", "seed": 1, "numerics": {"grid_resolution": 9}, "output": str(tmp_path)})

    result = run_experiment(config)

    assert result.exit_status == 0
    assert result.verdicts == {"hypotheses": "pass"}
    gate = json.loads((result.run_dir / "hypotheses.json").read_text(encoding="utf-8"))
    assert gate["passed"] is True
    assert gate["config"]["seed"] == 1


def test_failed_hypotheses_exit_with_status_three(zero_beta_config, tmp_path):
    status = cli.main(["hypotheses", "--config", zero_beta_config("hypotheses"), "--out", str(tmp_path / "reports")])

    assert status == 3


def test_failed_hypotheses_block_experiments_without_force(zero_beta_config, tmp_path):
    config = parse_config(
        {"problem": str(tmp_path / "zero_beta.py"), "experiment": "solve", "seed": 1, "numerics": {"grid_resolution": 9}, "output": str(tmp_path)}
    )

    with pytest.raises(HypothesisFailure) as excinfo:
        run_experiment(config)

    assert "H7" in excinfo.value.failed
    metadata = json.loads(next(tmp_path.glob("solve-*/metadata.json")).read_text(encoding="utf-8"))
    assert metadata["exit_status"] == 3
    assert metadata["error"]["error_code"] == "HYPOTHESIS_FAILED"


def test_invalid_config_exits_with_status_two(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"problem": "tp1", "experiment": "solve"}), encoding="utf-8")

    assert cli.main(["solve", "--config", str(path)]) == 2


def test_small_solve_run_writes_reports(tmp_path):
    config = parse_config(
        {
            "problem": "tp1",
            "experiment": "solve",
            "seed": 5,
            "numerics": {"h": 0.001, "n_paths": 400, "t_max": 3.0, "grid_resolution": 9, "chunk_paths": 200},
            "points": [{"x": [0.5, 0.0]}],
            "output": str(tmp_path),
        }
    )

    result = run_experiment(config)

    assert result.exit_status in (0, 1)
    body = json.loads((result.run_dir / "solve.json").read_text(encoding="utf-8"))
    entry = body["results"][0]
    assert entry["oracle"]["exact"] == [pytest.approx(0.25)]
    assert abs(entry["Y0"][0] - 0.25) < 0.1
    assert set(result.verdicts) == {"exit-0", "oracle-0"}
    assert (result.run_dir / "solve.csv").exists()
    assert result.summary[0].startswith("solve on harmonic_disk")


def test_repeated_run_with_same_seed_is_byte_identical(tmp_path):
    def solve_config(output):
        return parse_config(
            {
                "problem": "tp1",
                "experiment": "solve",
                "seed": 9,
                "numerics": {"h": 0.002, "n_paths": 200, "t_max": 2.0, "grid_resolution": 9, "chunk_paths": 100, "workers": 2},
                "points": [{"x": [0.5, 0.0]}, {"x": [0.0, 0.3]}],
                "output": str(output),
            }
        )

    first = run_experiment(solve_config(tmp_path / "a"))
    first_bytes = {name: (first.run_dir / name).read_bytes() for name in ("solve.json", "solve.csv", "hypotheses.json", "summary.txt")}
    again = run_experiment(solve_config(tmp_path / "a"))
    other = run_experiment(solve_config(tmp_path / "b"))

    assert again.run_dir == first.run_dir
    for name, body in first_bytes.items():
        assert (again.run_dir / name).read_bytes() == body
    assert (other.run_dir / "solve.csv").read_bytes() == first_bytes["solve.csv"]
    moved = json.loads((other.run_dir / "solve.json").read_text(encoding="utf-8"))
    original = json.loads(first_bytes["solve.json"])
    moved["config"].pop("output")
    original["config"].pop("output")
    assert moved == original


def test_submit_falls_back_to_inline_run(monkeypatch, tmp_path):
    path = tmp_path / "hyp.json"
    path.write_text(json.dumps({"problem": "tp1", "experiment": "hypotheses", "seed": 2, "numerics": {"grid_resolution": 9}}), encoding="utf-8")
    monkeypatch.setattr(cli, "enqueue_experiment", lambda *args, **kwargs: False)
    monkeypatch.setenv("QF_INLINE_FALLBACK", "true")

    assert cli.main(["submit", "--config", str(path), "--out", str(tmp_path / "reports")]) == 0
    assert list((tmp_path / "reports").glob("hypotheses-*/metadata.json"))


def test_submit_without_queue_or_fallback_is_an_engine_error(monkeypatch, tmp_path):
    path = tmp_path / "hyp.json"
    path.write_text(json.dumps({"problem": "tp1", "experiment": "hypotheses", "seed": 2}), encoding="utf-8")
    monkeypatch.setattr(cli, "enqueue_experiment", lambda *args, **kwargs: False)
    monkeypatch.setenv("QF_INLINE_FALLBACK", "0")

    assert cli.main(["submit", "--config", str(path)]) == cli.ENGINE_ERROR_STATUS
