"""Distill a finished session into a durable interaction event.

One model call compresses the dialogue into ``Q: ... | BBOX: ... | A: ...``;
the subject is cropped out of the scene image, both crop and question are
embedded, and the resulting event is appended to the store.  A record that
cannot be parsed after one retry is dropped (with an audit-log entry)
rather than stored with defaults: a polluted history hurts retrieval more
than one lost correction.
"""

from __future__ import annotations

import io
import json
import math
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from PIL import Image

from .errors import DegenerateCrop, ParseFailure
from .gateway import ChatMessage, ChatRequest, ModelGateway
from .session import DialogueSession
from .store import EventStore
from .store_types import BoundingBox, InteractionEvent
from .templates import TemplateSet


def round_half_up(v: float) -> int:
    """Round-half-up via exact fractional comparison (no 0.5-add rounding)."""
    f = math.floor(v)
    return int(f) + (1 if v - f >= 0.5 else 0)


def crop_rect(width: int, height: int, bbox: BoundingBox) -> tuple[int, int, int, int]:
    """Pixel rectangle (left, top, right, bottom) for a ratio bbox.

    Both edges round half-up; a rectangle that rounds to zero pixels in
    either direction raises DegenerateCrop.
    """
    left = round_half_up(bbox.x0 * width)
    top = round_half_up(bbox.y0 * height)
    right = round_half_up(bbox.x1 * width)
    bottom = round_half_up(bbox.y1 * height)
    if right - left < 1 or bottom - top < 1:
        raise DegenerateCrop(
            f"bbox {bbox.as_tuple()} on {width}x{height} image rounds to zero pixels"
        )
    return left, top, right, bottom


def crop_subject(image: Image.Image, bbox: BoundingBox) -> Image.Image:
    if not bbox.is_valid():
        raise DegenerateCrop(f"invalid bbox {bbox.as_tuple()}")
    return image.crop(crop_rect(image.width, image.height, bbox))


def crop_subject_bytes(image_bytes: bytes, bbox: BoundingBox) -> bytes:
    """Crop an encoded image and re-encode the region as PNG bytes."""
    with Image.open(io.BytesIO(image_bytes)) as img:
        region = crop_subject(img, bbox)
        buf = io.BytesIO()
        region.save(buf, format="PNG")
        return buf.getvalue()


_BBOX_RE = re.compile(
    r"(?:BBOX\s*:\s*)?(-?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?)\s*,\s*"
    r"(-?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?)\s*,\s*"
    r"(-?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?)\s*,\s*"
    r"(-?\d+(?:\.\d+)?(?:[eE][-+]?\d+)?)"
)


def parse_bbox(text: str, min_area: float = 1e-4) -> BoundingBox | None:
    """Extract a ratio quadruple, clamp into [0,1], validate; None if unusable."""
    m = _BBOX_RE.search(text)
    if not m:
        return None
    bbox = BoundingBox(*(float(g) for g in m.groups())).clamped()
    return bbox if bbox.is_valid(min_area) else None


_DISTILL_RE = re.compile(r"Q:\s*(.*?)\s*\|\s*BBOX:\s*([^|]*?)\s*\|\s*A:\s*(.*)", re.DOTALL)


@dataclass(frozen=True)
class DistilledRecord:
    """Parsed distillation output for one session."""

    concise_question: str
    bbox: BoundingBox
    answer: str
    source_session: str
    localization_flagged: bool = False


class DistillationPipeline:
    """Session -> distilled record -> embedded, stored event."""

    def __init__(
        self,
        gateway: ModelGateway,
        store: EventStore,
        templates: TemplateSet,
        audit_path: str | Path | None = None,
        clock: Callable[[], float] | None = None,
        event_id_factory: Callable[[], str] | None = None,
    ):
        import time
        import uuid

        self.gateway = gateway
        self.store = store
        self.templates = templates
        self.audit_path = Path(audit_path) if audit_path else None
        self.clock = clock or time.time
        self.event_id_factory = event_id_factory or (lambda: f"evt-{uuid.uuid4().hex}")
        self._audit_lock = threading.Lock()

    # -- audit ----------------------------------------------------------

    def _audit(self, session_id: str, outcome: str, **fields) -> None:
        if self.audit_path is None:
            return
        entry = {"ts": self.clock(), "session_id": session_id, "outcome": outcome, **fields}
        with self._audit_lock:
            with open(self.audit_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(entry, sort_keys=True) + "\n")

    # -- steps ----------------------------------------------------------

    def distill(self, session: DialogueSession) -> DistilledRecord:
        """One distill-template call, one retry; ParseFailure if both fail."""
        last_error = "no output"
        for _ in range(2):
            reply = self.gateway.chat(
                ChatRequest(
                    messages=(
                        ChatMessage(
                            "user",
                            self.templates.render(
                                "distill", transcript=session.transcript_text()
                            ),
                        ),
                    ),
                    image_refs=(session.image_ref,),
                    template_id="distill",
                )
            )
            record = self._parse_distill_reply(reply, session)
            if record is not None:
                return record
            last_error = f"unparsable distill reply: {reply[:200]!r}"
        raise ParseFailure(last_error)

    def _parse_distill_reply(
        self, reply: str, session: DialogueSession
    ) -> DistilledRecord | None:
        m = _DISTILL_RE.search(reply)
        if not m:
            return None
        question, bbox_text, answer = (g.strip() for g in m.groups())
        if not question or not answer:
            return None
        bbox = parse_bbox(bbox_text, self.store.min_bbox_area)
        if bbox is None:
            return None
        return DistilledRecord(
            concise_question=question,
            bbox=bbox,
            answer=answer,
            source_session=session.session_id,
            localization_flagged=session.localization_flagged,
        )

    def finalize_event(self, record: DistilledRecord, image_ref: str) -> str:
        """Crop, embed, insert; the store is only touched by the final insert."""
        existing = self.store.find_session_event(record.source_session)
        if existing is not None:
            return existing.event_id
        image_bytes = self.store.images.get(image_ref)
        crop_png = crop_subject_bytes(image_bytes, record.bbox)
        e_img = self.gateway.embed_image(crop_png)
        e_text = self.gateway.embed_text(record.concise_question)
        event = InteractionEvent(
            event_id=self.event_id_factory(),
            image_ref=image_ref,
            subject_bbox=record.bbox,
            question=record.concise_question,
            answer=record.answer,
            e_img=e_img,
            e_text=e_text,
            created_at=self.clock(),
            session_id=record.source_session,
            provider_tag=self.gateway.provider_tag,
            localization_flagged=record.localization_flagged,
        )
        return self.store.insert_event(event)

    def run(self, session: DialogueSession) -> str | None:
        """Distill and store one session; None when the record was dropped.

        Idempotent per session: a session that already produced an event
        returns that event's id without a second insert.
        """
        existing = self.store.find_session_event(session.session_id)
        if existing is not None:
            return existing.event_id
        try:
            record = self.distill(session)
        except ParseFailure as exc:
            self._audit(session.session_id, "dropped", reason=str(exc))
            return None
        try:
            event_id = self.finalize_event(record, session.image_ref)
        except DegenerateCrop as exc:
            self._audit(session.session_id, "dropped", reason=str(exc))
            return None
        self._audit(
            session.session_id,
            "stored",
            event_id=event_id,
            question=record.concise_question,
        )
        return event_id
