"""Threshold-triggered training export and model-version tracking.

Accumulated events are exported as a batch directory (manifest JSON, one
JSON-lines record file, an images/ tree) once the configured threshold is
reached, then handed to an external trainer over its wire protocol.  The
export state advances only after the batch is fully on disk, so a crash in
between re-exports the same events: duplicates are possible only in that
crash window and are detectable by comparing manifests.

Training itself is out of process: the manager only exports, submits,
polls, and swaps the active model tag when a job finishes.
"""

from __future__ import annotations

import io
import json
import os
import shutil
import tarfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import httpx

from .errors import (
    InvalidState,
    JobFailed,
    NothingToExport,
    StorageFailure,
    ThresholdNotReached,
    TrainerUnreachable,
)
from .store import EventStore

TRAIN_HINT = "update_visual_encoder"  # trainers should not freeze the visual encoder


def should_update(event_count_since_last_export: int, threshold: int) -> bool:
    """True iff the accumulated count reached the configured threshold."""
    if threshold < 1:
        raise ValueError("threshold must be >= 1")
    return event_count_since_last_export >= threshold


@dataclass
class BatchRecord:
    event_id: str
    image_path: str  # relative to the batch directory
    question: str
    answer: str


@dataclass
class TrainingBatch:
    batch_id: str
    directory: Path
    records: list[BatchRecord]
    manifest: dict


@dataclass
class PendingJob:
    job_id: str
    submitted_at: float
    status: str = "queued"  # queued | running | done | failed
    model_version: str | None = None
    batch_id: str | None = None


@dataclass
class UpdateState:
    last_exported_event_id: str | None = None
    exported_count: int = 0
    active_model_version: str = "v1"
    pending_job: PendingJob | None = None
    last_batch_id: str | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UpdateState":
        job = d.get("pending_job")
        return cls(
            last_exported_event_id=d.get("last_exported_event_id"),
            exported_count=int(d.get("exported_count", 0)),
            active_model_version=d.get("active_model_version", "v1"),
            pending_job=PendingJob(**job) if job else None,
            last_batch_id=d.get("last_batch_id"),
        )


class TrainerClient(Protocol):
    def submit(self, manifest: dict, archive: bytes) -> str: ...

    def poll(self, job_id: str) -> dict: ...


class MockTrainer:
    """In-process trainer stub: jobs finish immediately with a version bump."""

    def __init__(self, fail_jobs: bool = False):
        self.fail_jobs = fail_jobs
        self.jobs: dict[str, dict] = {}
        self._n = 0

    @staticmethod
    def _bump(version: str) -> str:
        digits = "".join(ch for ch in version if ch.isdigit())
        return f"v{int(digits) + 1}" if digits else f"{version}+1"

    def submit(self, manifest: dict, archive: bytes) -> str:
        self._n += 1
        job_id = f"job-{self._n:04d}"
        if self.fail_jobs:
            self.jobs[job_id] = {"status": "failed"}
        else:
            self.jobs[job_id] = {
                "status": "done",
                "model_version": self._bump(manifest.get("source_model_version", "v1")),
            }
        return job_id

    def poll(self, job_id: str) -> dict:
        if job_id not in self.jobs:
            raise JobFailed(f"unknown job {job_id!r}")
        return self.jobs[job_id]


class HttpTrainer:
    """Trainer over HTTP: POST /train {manifest, archive_b64} -> {job_id};
    GET /jobs/{id} -> {status, model_version?}."""

    def __init__(self, endpoint: str, timeout: float = 30.0):
        self.endpoint = endpoint.rstrip("/")
        self._client = httpx.Client(timeout=timeout)

    def submit(self, manifest: dict, archive: bytes) -> str:
        import base64

        try:
            resp = self._client.post(
                self.endpoint + "/train",
                json={"manifest": manifest, "archive_b64": base64.b64encode(archive).decode()},
            )
            resp.raise_for_status()
            return str(resp.json()["job_id"])
        except (httpx.TransportError, httpx.HTTPStatusError, KeyError, ValueError) as exc:
            raise TrainerUnreachable(f"trainer submit failed: {exc}") from exc

    def poll(self, job_id: str) -> dict:
        try:
            resp = self._client.get(f"{self.endpoint}/jobs/{job_id}")
            resp.raise_for_status()
            return dict(resp.json())
        except (httpx.TransportError, httpx.HTTPStatusError, ValueError) as exc:
            raise TrainerUnreachable(f"trainer poll failed: {exc}") from exc


class UpdateManager:
    """Counts events, exports batches, drives trainer jobs, tracks versions."""

    def __init__(
        self,
        store: EventStore,
        trainer: TrainerClient | None = None,
        threshold: int = 100,
        clock: Callable[[], float] | None = None,
        model_activator: Callable[[str], None] | None = None,
        initial_model_version: str = "v1",
    ):
        self.store = store
        self.trainer = trainer
        self.threshold = threshold
        self.clock = clock or time.time
        self.model_activator = model_activator
        self.state_path = store.data_dir / "update_state.json"
        self.batches_dir = store.data_dir / "batches"
        self.state = self._load_state(initial_model_version)

    # -- state persistence ------------------------------------------------

    def _load_state(self, initial_model_version: str) -> UpdateState:
        if self.state_path.exists():
            with open(self.state_path, "r", encoding="utf-8") as fh:
                return UpdateState.from_dict(json.load(fh))
        return UpdateState(active_model_version=initial_model_version)

    def _save_state(self) -> None:
        tmp = self.state_path.with_suffix(".tmp")
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(self.state.to_dict(), fh, indent=2, sort_keys=True)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, self.state_path)

    # -- export ------------------------------------------------------------

    def pending_event_count(self) -> int:
        return self.store.count() - self.state.exported_count

    def should_update_now(self) -> bool:
        return should_update(self.pending_event_count(), self.threshold)

    def export_training_batch(self) -> TrainingBatch:
        """Export every event after the last exported one as a batch directory.

        The state file advances only after the directory rename, so the
        export is retryable: a failure (or crash) before the advance leaves
        the same events pending.
        """
        pending = self.pending_event_count()
        if not should_update(pending, self.threshold):
            if pending == 0 and self.state.exported_count > 0:
                raise NothingToExport("no events since the last export")
            raise ThresholdNotReached(
                f"{pending} events pending, threshold is {self.threshold}"
            )
        start = self.state.exported_count
        events = self.store.list_events(start, pending)
        batch_id = f"batch-{start:08d}"
        final_dir = self.batches_dir / batch_id
        work_dir = self.batches_dir / (batch_id + ".tmp")
        if work_dir.exists():
            shutil.rmtree(work_dir)
        (work_dir / "images").mkdir(parents=True)

        records: list[BatchRecord] = []
        with open(work_dir / "records.jsonl", "w", encoding="utf-8") as fh:
            for event in events:
                image_rel = f"images/{event.image_ref}"
                src = self.store.images.path(event.image_ref)
                dst = work_dir / image_rel
                if not dst.exists():
                    shutil.copyfile(src, dst)
                records.append(
                    BatchRecord(
                        event_id=event.event_id,
                        image_path=image_rel,
                        question=event.question,
                        answer=event.answer,
                    )
                )
                fh.write(
                    json.dumps(
                        {
                            "id": event.event_id,
                            "image": image_rel,
                            "conversations": [
                                {"from": "human", "value": f"<image>\n{event.question}"},
                                {"from": "gpt", "value": event.answer},
                            ],
                        },
                        ensure_ascii=False,
                    )
                    + "\n"
                )

        manifest = {
            "batch_id": batch_id,
            "record_count": len(records),
            "created_at": self.clock(),
            "first_event_id": events[0].event_id,
            "last_event_id": events[-1].event_id,
            "source_model_version": self.state.active_model_version,
            "train_hint": TRAIN_HINT,
        }
        with open(work_dir / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(manifest, fh, indent=2, sort_keys=True)
        try:
            if final_dir.exists():
                shutil.rmtree(final_dir)  # crash leftovers from a prior attempt
            os.replace(work_dir, final_dir)
        except OSError as exc:
            raise StorageFailure(f"batch rename failed: {exc}") from exc

        self._advance_state(events[-1].event_id, start + len(events), batch_id)
        return TrainingBatch(
            batch_id=batch_id, directory=final_dir, records=records, manifest=manifest
        )

    def _advance_state(self, last_event_id: str, exported_count: int, batch_id: str) -> None:
        self.state.last_exported_event_id = last_event_id
        self.state.exported_count = exported_count
        self.state.last_batch_id = batch_id
        self._save_state()

    def load_batch(self, batch_id: str) -> TrainingBatch:
        directory = self.batches_dir / batch_id
        manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
        records = []
        with open(directory / "records.jsonl", "r", encoding="utf-8") as fh:
            for line in fh:
                row = json.loads(line)
                records.append(
                    BatchRecord(
                        event_id=row["id"],
                        image_path=row["image"],
                        question=row["conversations"][0]["value"].split("\n", 1)[1],
                        answer=row["conversations"][1]["value"],
                    )
                )
        return TrainingBatch(
            batch_id=batch_id, directory=directory, records=records, manifest=manifest
        )

    # -- trainer flow --------------------------------------------------------

    def _archive(self, batch: TrainingBatch) -> bytes:
        buf = io.BytesIO()
        with tarfile.open(fileobj=buf, mode="w:gz") as tar:
            tar.add(batch.directory, arcname=batch.batch_id)
        return buf.getvalue()

    def submit_update(self, batch: TrainingBatch) -> str:
        if self.trainer is None:
            raise TrainerUnreachable("no trainer configured")
        if self.state.pending_job is not None:
            raise InvalidState(f"job {self.state.pending_job.job_id} is still pending")
        job_id = self.trainer.submit(batch.manifest, self._archive(batch))
        self.state.pending_job = PendingJob(
            job_id=job_id,
            submitted_at=self.clock(),
            status="queued",
            batch_id=batch.batch_id,
        )
        self._save_state()
        return job_id

    def poll_job(self, job_id: str) -> PendingJob:
        """Refresh one job's status; terminal states clear the pending slot.

        A finished job activates its model version; a failed one leaves the
        batch on disk for resubmission.
        """
        if self.trainer is None:
            raise TrainerUnreachable("no trainer configured")
        pending = self.state.pending_job
        if pending is None or pending.job_id != job_id:
            raise InvalidState(f"job {job_id!r} is not the pending job")
        result = self.trainer.poll(job_id)
        pending.status = str(result.get("status", "running"))
        if pending.status == "done":
            pending.model_version = result.get("model_version")
            self.state.pending_job = None
            self._save_state()
            if pending.model_version:
                self.activate_model(pending.model_version)
        elif pending.status == "failed":
            self.state.pending_job = None
            self._save_state()
        else:
            self._save_state()
        return pending

    def activate_model(self, version: str) -> None:
        self.state.active_model_version = version
        self._save_state()
        if self.model_activator is not None:
            self.model_activator(version)

    def trigger(self) -> dict:
        """Export and submit in one step (the manual update entry point)."""
        batch = self.export_training_batch()
        job_id = self.submit_update(batch)
        return {"batch_id": batch.batch_id, "job_id": job_id, "records": len(batch.records)}

    def refresh(self) -> UpdateState:
        """Poll the pending job, if any, and return the current state."""
        pending = self.state.pending_job
        if pending is not None:
            self.poll_job(pending.job_id)
        return self.state
