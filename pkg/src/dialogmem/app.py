"""HTTP surface of the service.

JSON over HTTP; request/response schemas are documented with examples in
``docs/api.md``.  Robot turns are produced synchronously inside the POST
that triggered them, and ``GET /sessions/{id}/turns`` long-polls the
transcript so a console can render turns as they arrive.  Concurrent
messages to one session are rejected with 409; distinct sessions proceed
concurrently.
"""

from __future__ import annotations

import base64
import binascii
import logging
import threading
import time
from dataclasses import dataclass, field

from fastapi import FastAPI, Request, Response
from fastapi.exceptions import RequestValidationError
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse

from .errors import (
    EmptyInput,
    NotFound,
    ServiceError,
    SessionBusy,
    ThresholdNotReached,
)
from .gateway import Embedding
from .runtime import Runtime
from .session import (
    AskClarification,
    DialogueSession,
    FinalAnswer,
    OrchestratorAction,
    SessionClosed,
)
from .store_types import InteractionEvent, RetrievalConfig, RetrievalMatch

log = logging.getLogger("dialogmem.service")


@dataclass
class SessionSlot:
    session: DialogueSession
    lock: threading.Lock = field(default_factory=threading.Lock)


def action_json(action: OrchestratorAction) -> dict:
    if isinstance(action, AskClarification):
        return {"type": "ask_clarification", "question": action.question}
    if isinstance(action, FinalAnswer):
        return {"type": "final_answer", "text": action.text, "used_reference": action.used_reference}
    if isinstance(action, SessionClosed):
        return {"type": "session_closed", "event_id": action.event_id}
    raise TypeError(f"unknown action {action!r}")


def transcript_json(session: DialogueSession) -> list[dict]:
    return [
        {"speaker": e.speaker, "text": e.text, "timestamp": e.timestamp}
        for e in session.transcript
    ]


def match_json(match: RetrievalMatch | None) -> dict | None:
    if match is None:
        return None
    return {
        "event_id": match.event.event_id,
        "question": match.event.question,
        "answer": match.event.answer,
        "sim_img": match.sim_img,
        "sim_text": match.sim_text,
        "image_ref": match.event.image_ref,
        "bbox": list(match.event.subject_bbox.as_tuple()),
    }


def session_json(session: DialogueSession) -> dict:
    return {
        "session_id": session.session_id,
        "state": session.state.value,
        "image_ref": session.image_ref,
        "clarification_round": session.clarification_round,
        "resolved_question": session.resolved_question,
        "transcript": transcript_json(session),
        "final_answer": session.final_answer,
        "used_reference": session.used_reference,
        "retrieval": match_json(session.retrieval),
        "stored_event_id": session.stored_event_id,
    }


def event_json(event: InteractionEvent, include_embeddings: bool = False) -> dict:
    data = {
        "event_id": event.event_id,
        "image_ref": event.image_ref,
        "bbox": list(event.subject_bbox.as_tuple()),
        "question": event.question,
        "answer": event.answer,
        "created_at": event.created_at,
        "session_id": event.session_id,
        "provider_tag": event.provider_tag,
        "localization_flagged": event.localization_flagged,
        "dim": event.e_img.dim,
    }
    if include_embeddings:
        data["e_img"] = event.e_img.tolist()
        data["e_text"] = event.e_text.tolist()
    return data


def _decode_b64(name: str, value: str) -> bytes:
    try:
        return base64.b64decode(value, validate=True)
    except (binascii.Error, ValueError) as exc:
        raise EmptyInput(f"{name} is not valid base64") from exc


def create_app(runtime: Runtime) -> FastAPI:
    from contextlib import asynccontextmanager

    @asynccontextmanager
    async def lifespan(_app: FastAPI):
        yield
        runtime.close()  # flush the store on graceful shutdown

    app = FastAPI(title="dialogmem", version="0.1.0", lifespan=lifespan)
    app.add_middleware(
        CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"]
    )
    sessions: dict[str, SessionSlot] = {}
    registry_lock = threading.Lock()

    @app.exception_handler(ServiceError)
    async def service_error_handler(_request: Request, exc: ServiceError):
        return JSONResponse(
            status_code=exc.http_status,
            content={"error": {"code": exc.code, "message": str(exc)}},
        )

    @app.exception_handler(RequestValidationError)
    async def validation_error_handler(_request: Request, exc: RequestValidationError):
        # malformed request bodies get the same machine-readable shape
        return JSONResponse(
            status_code=400,
            content={"error": {"code": "InvalidRequest", "message": str(exc.errors()[:3])}},
        )

    def get_slot(session_id: str) -> SessionSlot:
        slot = sessions.get(session_id)
        if slot is None:
            raise NotFound(f"no session {session_id!r}")
        return slot

    def maybe_auto_update() -> None:
        if not runtime.config.update.auto:
            return
        manager = runtime.update_manager
        if not manager.should_update_now() or manager.state.pending_job is not None:
            return
        try:
            info = manager.trigger()
            manager.refresh()
            log.info("auto update triggered: %s", info)
        except ServiceError as exc:
            log.warning("auto update failed: %s", exc)

    # -- sessions -------------------------------------------------------

    @app.post("/sessions")
    async def create_session(request: Request):
        content_type = request.headers.get("content-type", "")
        if content_type.startswith("multipart/"):
            form = await request.form()
            upload = form.get("image")
            utterance = str(form.get("utterance", ""))
            if upload is None:
                raise EmptyInput("multipart form needs an 'image' file field")
            image = await upload.read()
        else:
            body = await request.json()
            utterance = str(body.get("utterance", ""))
            image = _decode_b64("image_b64", str(body.get("image_b64", "")))
        session, action = runtime.orchestrator.start_session(image, utterance)
        with registry_lock:
            sessions[session.session_id] = SessionSlot(session=session)
        return {
            "session_id": session.session_id,
            "state": session.state.value,
            "action": action_json(action),
            "transcript": transcript_json(session),
        }

    @app.post("/sessions/{session_id}/messages")
    def post_message(session_id: str, body: dict):
        slot = get_slot(session_id)
        text = str(body.get("text", ""))
        if not slot.lock.acquire(blocking=False):
            raise SessionBusy(f"a message for {session_id} is already being processed")
        try:
            action = runtime.orchestrator.step(slot.session, text)
        finally:
            slot.lock.release()
        if isinstance(action, SessionClosed) and action.event_id is not None:
            maybe_auto_update()
        return {
            "session_id": session_id,
            "state": slot.session.state.value,
            "action": action_json(action),
            "transcript": transcript_json(slot.session),
        }

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str):
        return session_json(get_slot(session_id).session)

    @app.get("/sessions/{session_id}/turns")
    def poll_turns(session_id: str, after: int = 0, wait_s: float = 0.0):
        """Long-poll: turns after index ``after``, waiting up to ``wait_s``."""
        slot = get_slot(session_id)
        deadline = time.monotonic() + min(wait_s, 30.0)
        while True:
            transcript = transcript_json(slot.session)
            if len(transcript) > after or time.monotonic() >= deadline:
                return {
                    "turns": transcript[after:],
                    "next": len(transcript),
                    "state": slot.session.state.value,
                }
            time.sleep(0.05)

    # -- events ----------------------------------------------------------

    @app.get("/events")
    def list_events(offset: int = 0, limit: int = 50, include_embeddings: bool = False):
        events = runtime.store.list_events(offset, limit)
        return {
            "total": runtime.store.count(),
            "offset": offset,
            "events": [event_json(e, include_embeddings) for e in events],
        }

    @app.get("/events/{event_id}")
    def get_event(event_id: str, include_embeddings: bool = False):
        return event_json(runtime.store.get_event(event_id), include_embeddings)

    @app.get("/events/{event_id}/image")
    def get_event_image(event_id: str):
        event = runtime.store.get_event(event_id)
        data = runtime.store.images.get(event.image_ref)
        suffix = event.image_ref.rsplit(".", 1)[-1]
        return Response(content=data, media_type=f"image/{suffix}")

    @app.post("/events/search")
    def search_events(body: dict):
        """Dual-modality search: raw text+image or precomputed embeddings."""
        if "q_img" in body and "q_text" in body:
            tag = runtime.gateway.provider_tag
            q_img = Embedding.from_raw(body["q_img"], tag)
            q_text = Embedding.from_raw(body["q_text"], tag)
        elif "text" in body and "image_b64" in body:
            q_text = runtime.gateway.embed_text(str(body["text"]))
            q_img = runtime.gateway.embed_image(_decode_b64("image_b64", str(body["image_b64"])))
        else:
            raise EmptyInput("search needs q_img+q_text or text+image_b64")
        config = RetrievalConfig(
            tau_img=float(body.get("tau_img", runtime.config.retrieval.tau_img)),
            tau_text=float(body.get("tau_text", runtime.config.retrieval.tau_text)),
        )
        return {"match": match_json(runtime.store.retrieve(q_img, q_text, config))}

    # -- update ------------------------------------------------------------

    @app.post("/update/trigger")
    def trigger_update():
        manager = runtime.update_manager
        if not manager.should_update_now():
            raise ThresholdNotReached(
                f"{manager.pending_event_count()} events pending, threshold is {manager.threshold}"
            )
        info = manager.trigger()
        manager.refresh()
        return info

    @app.get("/update/status")
    def update_status():
        manager = runtime.update_manager
        state = manager.refresh()
        pending_job = None
        if state.pending_job is not None:
            pending_job = {
                "job_id": state.pending_job.job_id,
                "status": state.pending_job.status,
                "submitted_at": state.pending_job.submitted_at,
                "batch_id": state.pending_job.batch_id,
            }
        return {
            "event_count": runtime.store.count(),
            "exported_count": state.exported_count,
            "pending_toward_threshold": manager.pending_event_count(),
            "threshold": manager.threshold,
            "last_batch_id": state.last_batch_id,
            "last_exported_event_id": state.last_exported_event_id,
            "pending_job": pending_job,
            "active_model_version": state.active_model_version,
        }

    # -- health ------------------------------------------------------------

    @app.get("/healthz")
    def healthz():
        return {
            "status": "ok",
            "model_version": runtime.update_manager.state.active_model_version,
            "event_count": runtime.store.count(),
        }

    console_dir = runtime.config.listen.console_dir
    if console_dir:
        from fastapi.staticfiles import StaticFiles

        app.mount("/console", StaticFiles(directory=console_dir, html=True), name="console")

    return app
