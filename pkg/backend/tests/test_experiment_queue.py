from __future__ import annotations

import json

import experiment_queue
import experiment_worker


class FakeRedis:
    def __init__(self):
        self.lists: dict[str, list] = {}

    def rpush(self, key, value):
        self.lists.setdefault(key, []).append(value)

    def blpop(self, key, timeout=0):
        items = self.lists.get(key) or []
        if not items:
            return None
        return key.encode("utf-8"), items.pop(0).encode("utf-8")


def test_enqueue_then_pop_returns_job(monkeypatch):
    fake = FakeRedis()
    monkeypatch.setattr(experiment_queue, "_redis_client", lambda: fake)
    monkeypatch.setenv("QF_QUEUE_KEY", "test:queue")

    assert experiment_queue.enqueue_experiment("configs/tp1_solve.json", seed=5, force=True)
    job = experiment_queue.pop_experiment(block_seconds=1)

    assert job == {"config": "configs/tp1_solve.json", "seed": 5, "force": True, "output": None}
    assert experiment_queue.pop_experiment(block_seconds=1) is None


def test_unavailable_queue_skips_enqueue(monkeypatch):
    monkeypatch.setattr(experiment_queue, "_redis_client", lambda: None)

    assert experiment_queue.enqueue_experiment("configs/tp1_solve.json") is False
    assert experiment_queue.pop_experiment() is None
    assert experiment_queue.queue_available() is False


def test_decode_job_drops_malformed_entries():
    assert experiment_queue.decode_job("not json") is None
    assert experiment_queue.decode_job(json.dumps([1, 2])) is None
    assert experiment_queue.decode_job(json.dumps({"seed": 1})) is None
    assert experiment_queue.decode_job(experiment_queue.encode_job("a.json")) == {"config": "a.json", "seed": None, "force": False, "output": None}


def test_worker_applies_job_overrides(monkeypatch, tmp_path):
    config_path = tmp_path / "job.json"
    config_path.write_text(json.dumps({"problem": "tp1", "experiment": "hypotheses", "seed": 1}), encoding="utf-8")
    seen = {}

    def fake_run(config, *, force=False):
        seen.update(seed=config.seed, output=config.output, force=force)
        return type("Result", (), {"exit_status": 0, "run_dir": tmp_path})()

    monkeypatch.setattr(experiment_worker, "run_experiment", fake_run)

    status = experiment_worker.process_job({"config": str(config_path), "seed": 11, "force": True, "output": str(tmp_path / "out")})

    assert status == 0
    assert seen == {"seed": 11, "output": str(tmp_path / "out"), "force": True}
