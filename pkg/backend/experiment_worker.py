from __future__ import annotations

import logging
import os
import time
from typing import Any

from dotenv import load_dotenv

from engine.errors import QuasiFlowError
from engine.settings import resolve_log_level
from experiment_config import load_config
from experiment_queue import pop_experiment
from experiment_runner import run_experiment

LOGGER = logging.getLogger("experiment_worker")


def process_job(job: dict[str, Any]) -> int:
    config = load_config(job["config"])
    if job.get("seed") is not None:
        config = config.with_seed(int(job["seed"]))
    if job.get("output"):
        config = config.with_output(job["output"])
    result = run_experiment(config, force=bool(job.get("force")))
    LOGGER.info("experiment %s finished with status %d in %s", config.experiment, result.exit_status, result.run_dir)
    return result.exit_status


def main() -> None:
    load_dotenv()
    logging.basicConfig(level=resolve_log_level(), format="%(asctime)s %(levelname)s %(name)s %(message)s")
    poll_seconds = max(1, int(os.environ.get("QF_WORKER_POLL_SECONDS", "5")))
    LOGGER.info("experiment worker started (poll=%ss)", poll_seconds)
    while True:
        job = pop_experiment(block_seconds=poll_seconds)
        if not job:
            continue
        LOGGER.info("processing %s", job["config"])
        try:
            process_job(job)
        except QuasiFlowError as exc:
            LOGGER.error("experiment %s failed: %s (%s)", job["config"], exc, exc.error_code)
        except Exception:
            LOGGER.exception("worker failed processing %s", job["config"])
            time.sleep(1)


if __name__ == "__main__":
    main()
