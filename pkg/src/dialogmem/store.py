"""Persistent history event database.

Append-only storage of interaction events plus dual-modality threshold
retrieval over them.  Events live in a length-prefixed binary log
(``events.log``); an in-memory index is rebuilt by scanning the log on
open, so the log is the single source of truth.  Original images are kept
as content-addressed files under ``images/``.

Retrieval is an exact linear scan: at desk scale (<= 1e5 events) the
correctness and oracle-equivalence guarantees matter more than index
structures.
"""

from __future__ import annotations

import hashlib
import os
import threading
from pathlib import Path

from .errors import DimensionMismatch, InvalidEvent, NotFound, StorageFailure
from .gateway import Embedding, detect_image_format
from .records import encode_record, decode_record, scan_frames
from .similarity import cosine_similarity
from .store_types import (
    DEFAULT_MIN_BBOX_AREA,
    InteractionEvent,
    RetrievalConfig,
    RetrievalMatch,
    StoreStats,
)


class ImageStore:
    """Content-addressed image files: ``<sha256>.<format>``."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def put(self, data: bytes) -> str:
        fmt = detect_image_format(data)
        digest = hashlib.sha256(data).hexdigest()
        ref = f"{digest}.{fmt}"
        path = self.root / ref
        if not path.exists():
            tmp = path.with_suffix(path.suffix + ".tmp")
            tmp.write_bytes(data)
            os.replace(tmp, path)
        return ref

    def get(self, ref: str) -> bytes:
        path = self.root / ref
        if not path.exists():
            raise NotFound(f"image {ref!r} not in store")
        return path.read_bytes()

    def path(self, ref: str) -> Path:
        path = self.root / ref
        if not path.exists():
            raise NotFound(f"image {ref!r} not in store")
        return path


class EventStore:
    """Append-only event log with threshold retrieval.

    Single writer, many concurrent readers: appends serialize on a lock and
    each retrieval walks a snapshot of the index taken under that lock, so
    an insert never tears a concurrent scan.
    """

    def __init__(
        self,
        data_dir: str | Path,
        fsync: bool = True,
        min_bbox_area: float = DEFAULT_MIN_BBOX_AREA,
    ):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.log_path = self.data_dir / "events.log"
        self.images = ImageStore(self.data_dir / "images")
        self.fsync = fsync
        self.min_bbox_area = min_bbox_area
        self._lock = threading.Lock()
        self._events: list[InteractionEvent] = []
        self._by_id: dict[str, InteractionEvent] = {}
        self._by_session: dict[str, str] = {}
        self._dim: int | None = None
        self._provider_tag: str | None = None
        self._recover()
        self._fh = open(self.log_path, "ab")

    # -- log recovery -------------------------------------------------

    def _recover(self) -> None:
        if not self.log_path.exists():
            self.log_path.touch()
            return
        data = self.log_path.read_bytes()
        good_end = 0
        frames = scan_frames(data)
        while True:
            try:
                _, body = next(frames)
            except StopIteration as stop:
                good_end = stop.value
                break
            event = decode_record(body)
            self._index(event)
        if good_end < len(data):
            # Torn tail from a crash mid-append: the record was never
            # acknowledged, so drop it and resume from the last intact one.
            with open(self.log_path, "r+b") as fh:
                fh.truncate(good_end)

    def _index(self, event: InteractionEvent) -> None:
        self._events.append(event)
        self._by_id[event.event_id] = event
        self._by_session.setdefault(event.session_id, event.event_id)
        if self._dim is None:
            self._dim = event.e_img.dim
            self._provider_tag = event.provider_tag

    # -- writes -------------------------------------------------------

    def insert_event(self, event: InteractionEvent) -> str:
        """Durably append one event; it is retrievable once this returns."""
        event.validate(self.min_bbox_area)
        with self._lock:
            if event.event_id in self._by_id:
                raise InvalidEvent(f"duplicate event_id {event.event_id!r}")
            if self._dim is not None and event.e_img.dim != self._dim:
                raise DimensionMismatch(
                    f"event dim {event.e_img.dim} != store dim {self._dim}"
                )
            if self._provider_tag is not None and event.provider_tag != self._provider_tag:
                raise InvalidEvent(
                    f"event provider tag {event.provider_tag!r} != store tag {self._provider_tag!r}"
                )
            frame = encode_record(event)
            try:
                self._fh.write(frame)
                self._fh.flush()
                if self.fsync:
                    os.fsync(self._fh.fileno())
            except OSError as exc:
                raise StorageFailure(f"append failed: {exc}") from exc
            self._index(event)
        return event.event_id

    # -- reads ----------------------------------------------------------

    def get_event(self, event_id: str) -> InteractionEvent:
        event = self._by_id.get(event_id)
        if event is None:
            raise NotFound(f"no event {event_id!r}")
        return event

    def count(self) -> int:
        return len(self._events)

    def list_events(self, offset: int = 0, limit: int = 50) -> list[InteractionEvent]:
        if offset < 0 or limit < 0:
            raise InvalidEvent("offset and limit must be non-negative")
        return self._events[offset : offset + limit]

    def find_session_event(self, session_id: str) -> InteractionEvent | None:
        event_id = self._by_session.get(session_id)
        return self._by_id[event_id] if event_id else None

    def retrieve(
        self, q_img: Embedding, q_text: Embedding, config: RetrievalConfig
    ) -> RetrievalMatch | None:
        """Best event clearing both thresholds, or None.

        Among qualifying events the winner maximizes sim_img + sim_text;
        ties break to the most recent created_at, then to the smallest
        event_id lexicographically.  No match is a normal outcome.
        """
        config.validate()
        with self._lock:
            if self._dim is not None and (q_img.dim != self._dim or q_text.dim != self._dim):
                raise DimensionMismatch(
                    f"query dims ({q_img.dim}, {q_text.dim}) != store dim {self._dim}"
                )
            snapshot = list(self._events)
        best: RetrievalMatch | None = None
        for event in snapshot:
            sim_img = cosine_similarity(q_img, event.e_img)
            if sim_img < config.tau_img:
                continue
            sim_text = cosine_similarity(q_text, event.e_text)
            if sim_text < config.tau_text:
                continue
            if best is None or self._beats(event, sim_img + sim_text, best):
                best = RetrievalMatch(event=event, sim_img=sim_img, sim_text=sim_text)
        return best

    @staticmethod
    def _beats(event: InteractionEvent, score: float, best: RetrievalMatch) -> bool:
        best_score = best.sim_img + best.sim_text
        if score != best_score:
            return score > best_score
        if event.created_at != best.event.created_at:
            return event.created_at > best.event.created_at
        return event.event_id < best.event.event_id

    # -- lifecycle ------------------------------------------------------

    def stats(self) -> StoreStats:
        return StoreStats(
            count=self.count(),
            dim=self._dim,
            provider_tag=self._provider_tag,
            data_dir=str(self.data_dir),
        )

    @property
    def dim(self) -> int | None:
        return self._dim

    @property
    def provider_tag(self) -> str | None:
        return self._provider_tag

    def close(self) -> None:
        with self._lock:
            if not self._fh.closed:
                self._fh.flush()
                if self.fsync:
                    os.fsync(self._fh.fileno())
                self._fh.close()

    def __enter__(self) -> "EventStore":
        return self

    def __exit__(self, *exc) -> None:
        self.close()
