"""Bounded worker pool with per-task status tracking and error resilience."""

from __future__ import annotations

import functools
import logging
import threading
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable

logger = logging.getLogger("siftsup.workers")


class TaskStatus(str, Enum):
    PENDING = "pending"
    RUNNING = "running"
    COMPLETED = "completed"
    FAILED = "failed"


@dataclass
class TaskInfo:
    """Tracks one unit of work (one dataset sample)."""

    task_id: str
    status: TaskStatus = TaskStatus.PENDING
    created_at: float = field(default_factory=time.time)
    started_at: float | None = None
    completed_at: float | None = None
    result: Any = None
    error: str | None = None

    @property
    def duration(self) -> float | None:
        if self.started_at is None:
            return None
        end = self.completed_at or time.time()
        return round(end - self.started_at, 2)

    @property
    def ok(self) -> bool:
        return self.status == TaskStatus.COMPLETED

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "status": self.status.value,
            "duration": self.duration,
            "error": self.error,
        }


class WorkerPool:
    """Runs independent tasks on at most *workers* threads; a failing task never stops the others."""

    def __init__(self, workers: int = 1) -> None:
        if workers < 1:
            raise ValueError(f"workers must be >= 1, got {workers}")
        self.workers = workers
        self._tasks: dict[str, TaskInfo] = {}
        self._lock = threading.Lock()

    def create_task(self, task_id: str) -> TaskInfo:
        task = TaskInfo(task_id=task_id)
        with self._lock:
            if task_id in self._tasks:
                raise ValueError(f"duplicate task id {task_id!r}")
            self._tasks[task_id] = task
        return task

    def list_tasks(self, status: str | None = None) -> list[dict]:
        with self._lock:
            tasks = list(self._tasks.values())
        if status:
            tasks = [t for t in tasks if t.status.value == status]
        tasks.sort(key=lambda t: t.task_id)
        return [t.to_dict() for t in tasks]

    def wrap(self, task: TaskInfo, func: Callable[..., Any]) -> Callable[..., TaskInfo]:
        """Wrap *func* so that it records status, result and error on *task* instead of raising."""

        @functools.wraps(func)
        def wrapper(*args, **kwargs) -> TaskInfo:
            task.status = TaskStatus.RUNNING
            task.started_at = time.time()
            try:
                task.result = func(*args, **kwargs)
                task.status = TaskStatus.COMPLETED
            except Exception as e:
                task.status = TaskStatus.FAILED
                task.error = f"{type(e).__name__}: {e}"
                logger.error("Task %s failed: %s\n%s", task.task_id, e, traceback.format_exc())
            finally:
                task.completed_at = time.time()
            return task

        return wrapper

    def run(self, jobs: list[tuple[str, Callable[[], Any]]]) -> list[TaskInfo]:
        """Execute ``(task_id, thunk)`` jobs; results come back in submission order."""
        tasks = [self.create_task(task_id) for task_id, _ in jobs]
        calls = [self.wrap(task, thunk) for task, (_, thunk) in zip(tasks, jobs)]
        if self.workers == 1:
            return [call() for call in calls]
        with ThreadPoolExecutor(max_workers=self.workers, thread_name_prefix="siftsup") as pool:
            futures = [pool.submit(call) for call in calls]
            return [f.result() for f in futures]
