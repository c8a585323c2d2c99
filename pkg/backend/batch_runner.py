"""
Session Batch Runner
Fans independent simulation sessions out to a process pool and collects
their reports in submission order
"""

import logging
import time
from concurrent.futures import ProcessPoolExecutor, as_completed
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional

import numpy as np

from errors import ParameterError, SimulatorError
from qkd_protocols import SessionReport, analyse_session
from sim_engine import EventLog, rng_stream, run_session

logger = logging.getLogger(__name__)


class JobStatus(Enum):
    PENDING = "pending"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


@dataclass
class SessionJob:
    run_index: int
    seed: int
    config: Any


@dataclass
class JobResult:
    run_index: int
    seed: int
    status: JobStatus
    report: Optional[SessionReport] = None
    log: Optional[EventLog] = None
    error: Optional[Dict[str, Any]] = None
    exception: Optional[BaseException] = None
    execution_time: float = 0.0


def run_seeds(seed: int, runs: int) -> List[int]:
    """Seed of every run; run 0 keeps the master seed so a single run matches a plain invocation"""
    if runs < 1:
        raise ParameterError(f"runs must be >= 1, got {runs}")
    derived = [int(rng_stream(seed, f"run/{i}").integers(0, 2**63 - 1)) for i in range(1, runs)]
    return [seed] + derived


def execute_job(job: SessionJob) -> JobResult:
    """Simulate and analyse one session; failures come back as a FAILED result"""
    start = time.perf_counter()
    try:
        logger.info(f"Run {job.run_index}: session {job.config.id} with seed {job.seed}")
        log = run_session(job.config, job.seed)
        report = analyse_session(job.config, log)
        return JobResult(job.run_index, job.seed, JobStatus.COMPLETED, report, log,
                         execution_time=time.perf_counter() - start)
    except SimulatorError as e:
        logger.error(f"Run {job.run_index} failed: {e}")
        return JobResult(job.run_index, job.seed, JobStatus.FAILED, error=e.to_dict(),
                         exception=e, execution_time=time.perf_counter() - start)
    except Exception as e:
        logger.error(f"Run {job.run_index} failed unexpectedly: {e}")
        return JobResult(job.run_index, job.seed, JobStatus.FAILED,
                         error={"error": "internal_error", "message": str(e)},
                         exception=e, execution_time=time.perf_counter() - start)


@dataclass
class BatchRunner:
    """Runs session jobs serially or on a process pool of `workers` processes"""
    workers: int = 1
    job_status: Dict[int, str] = field(default_factory=dict)

    def run(self, config, seed: int, runs: int = 1) -> List[JobResult]:
        jobs = [SessionJob(i, s, config) for i, s in enumerate(run_seeds(seed, runs))]
        for job in jobs:
            self.job_status[job.run_index] = JobStatus.PENDING.value
        logger.info(f"Starting batch of {len(jobs)} run(s) on {max(1, self.workers)} worker(s)")

        results: List[JobResult] = []
        if self.workers <= 1 or len(jobs) == 1:
            for job in jobs:
                self.job_status[job.run_index] = JobStatus.RUNNING.value
                results.append(execute_job(job))
                self.job_status[job.run_index] = results[-1].status.value
        else:
            with ProcessPoolExecutor(max_workers=self.workers) as executor:
                futures = {executor.submit(execute_job, job): job for job in jobs}
                for job in jobs:
                    self.job_status[job.run_index] = JobStatus.RUNNING.value
                for future in as_completed(futures):
                    result = future.result()
                    self.job_status[result.run_index] = result.status.value
                    results.append(result)
        results.sort(key=lambda r: r.run_index)

        failed = sum(1 for r in results if r.status == JobStatus.FAILED)
        logger.info(f"Batch finished: {len(results) - failed} completed, {failed} failed")
        return results

    def summary(self, results: List[JobResult]) -> Dict[str, Any]:
        """Spread of the headline numbers across completed runs"""
        done = [r.report for r in results if r.report is not None]
        qbers = np.array([r.qber for r in done if r.qber is not None], dtype=float)
        sifted = np.array([r.sifted_rate_bps for r in done], dtype=float)
        secure = np.array([r.secure_rate_bps for r in done], dtype=float)

        def spread(values: np.ndarray) -> Optional[Dict[str, float]]:
            if values.size == 0:
                return None
            return {"mean": float(values.mean()), "std": float(values.std(ddof=1)) if values.size > 1 else 0.0}

        return {
            "runs": len(results),
            "completed": len(done),
            "failed": [{"run": r.run_index, "seed": r.seed, **(r.error or {})} for r in results if r.report is None],
            "seeds": [r.seed for r in results],
            "qber": spread(qbers),
            "sifted_rate_bps": spread(sifted),
            "secure_rate_bps": spread(secure),
            "status": dict(sorted(self.job_status.items())),
        }
