from __future__ import annotations

import csv
import json

import numpy as np

from report_store import METADATA_FILE, RunStore, config_hash, to_plain


def test_to_plain_converts_numpy_and_non_finite_values():
    payload = {"a": np.float64(1.5), "b": np.array([1, 2]), "c": (np.nan, np.inf, -np.inf), "d": np.bool_(True), 3: np.int64(4)}

    assert to_plain(payload) == {"a": 1.5, "b": [1, 2], "c": ["nan", "inf", "-inf"], "d": True, "3": 4}


def test_config_hash_ignores_key_order():
    assert config_hash({"a": 1, "b": [1, 2]}) == config_hash({"b": [1, 2], "a": 1})
    assert config_hash({"a": 1}) != config_hash({"a": 2})


def test_run_store_writes_reports(tmp_path):
    config = {"problem": "tp1", "seed": 3}
    store = RunStore(tmp_path, "solve", config)

    store.write_json("solve.json", {"value": np.float32(0.25)})
    store.write_csv("solve.csv", [{"x": [0.5, 0.0], "Y0": 0.25}, {"x": [0.0, 0.0], "Y0": 0.0, "exact": None}])
    store.write_summary(["solve: pass"])
    store.write_metadata(exit_status=0)

    assert store.run_dir == tmp_path / f"solve-{config_hash(config)}"
    body = json.loads((store.run_dir / "solve.json").read_text(encoding="utf-8"))
    assert body == {"config": config, "value": 0.25}
    with (store.run_dir / "solve.csv").open(encoding="utf-8") as handle:
        rows = list(csv.DictReader(handle))
    assert list(rows[0]) == ["x", "Y0", "exact"]
    assert json.loads(rows[0]["x"]) == [0.5, 0.0]
    assert (store.run_dir / "summary.txt").read_text(encoding="utf-8") == "solve: pass\n"
    metadata = json.loads((store.run_dir / METADATA_FILE).read_text(encoding="utf-8"))
    assert metadata["exit_status"] == 0
    assert metadata["files"] == ["solve.csv", "solve.json", "summary.txt"]


def test_same_config_reuses_run_directory(tmp_path):
    first = RunStore(tmp_path, "grad", {"seed": 1})
    second = RunStore(tmp_path, "grad", {"seed": 1})

    assert first.run_dir == second.run_dir
    assert second.path_for("paths.npz") == second.run_dir / "paths.npz"
    assert second.files == ["paths.npz"]
