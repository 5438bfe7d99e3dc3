"""Chain-of-question dialogue orchestration.

A session clarifies the user's intent through iterative follow-ups (the
model replies with ``ASK: ...`` or ``CLEAR: ...`` protocol markers), then
localizes the subject, retrieves a similar past event by dual-modality
similarity, answers (conditioned on the retrieved reference when there is
one), and finally captures the user's confirmation or correction for
distillation.

Termination is unconditional: after ``max_clarification_rounds`` follow-ups
the orchestrator forces the answer path with the model's best-guess concise
question, whatever the model replies.  Unparsable clarification replies
count as ASK: failing toward one more question is safer than failing
toward a wrong confident answer.
"""

from __future__ import annotations

import time
import uuid
from dataclasses import dataclass
from typing import Callable

from .distill import DistillationPipeline, crop_subject_bytes, parse_bbox
from .errors import DegenerateCrop, EmptyInput, InvalidState
from .gateway import ChatMessage, ChatRequest, ModelGateway
from .session import (
    LEGAL_TRANSITIONS,
    AskClarification,
    DialogueSession,
    FinalAnswer,
    OrchestratorAction,
    SessionClosed,
    SessionState,
    TranscriptEntry,
)
from .store import EventStore
from .store_types import BoundingBox, RetrievalConfig
from .templates import TemplateSet


@dataclass
class DialogueConfig:
    max_clarification_rounds: int = 5
    retrieval_enabled: bool = True


def _parse_marker(reply: str) -> tuple[str, str]:
    """Split a clarification reply into (kind, payload).

    kind is "ask", "clear", or "raw" for replies carrying no marker.
    """
    text = reply.strip()
    if text.startswith("ASK:"):
        return "ask", text[4:].strip()
    if text.startswith("CLEAR:"):
        return "clear", text[6:].strip()
    return "raw", text


class DialogueOrchestrator:
    """Drives sessions through clarification, retrieval, answer, feedback."""

    def __init__(
        self,
        gateway: ModelGateway,
        store: EventStore,
        pipeline: DistillationPipeline,
        templates: TemplateSet,
        retrieval_config: RetrievalConfig = RetrievalConfig(),
        dialogue_config: DialogueConfig = DialogueConfig(),
        clock: Callable[[], float] | None = None,
        session_id_factory: Callable[[], str] | None = None,
    ):
        self.gateway = gateway
        self.store = store
        self.pipeline = pipeline
        self.templates = templates
        self.retrieval_config = retrieval_config
        self.config = dialogue_config
        self.clock = clock or time.time
        self.session_id_factory = session_id_factory or (
            lambda: f"sess-{uuid.uuid4().hex[:16]}"
        )

    # -- session plumbing ------------------------------------------------

    def _transition(self, session: DialogueSession, new_state: SessionState) -> None:
        pair = (session.state, new_state)
        if pair not in LEGAL_TRANSITIONS:
            raise InvalidState(f"illegal transition {pair[0].value} -> {pair[1].value}")
        session.transitions.append(pair)
        session.state = new_state

    def _append(self, session: DialogueSession, speaker: str, text: str) -> None:
        last = session.transcript[-1].timestamp if session.transcript else float("-inf")
        session.transcript.append(
            TranscriptEntry(speaker=speaker, text=text, timestamp=max(self.clock(), last))
        )

    def _chat(self, session: DialogueSession, template_id: str, **placeholders) -> str:
        prompt = self.templates.render(template_id, **placeholders)
        return self.gateway.chat(
            ChatRequest(
                messages=(ChatMessage("user", prompt),),
                image_refs=(session.image_ref,),
                template_id=template_id,
            )
        )

    # -- operations --------------------------------------------------------

    def start_session(
        self, image: bytes, first_utterance: str
    ) -> tuple[DialogueSession, OrchestratorAction]:
        """Open a session around one scene image and process the first query."""
        if not first_utterance or not first_utterance.strip():
            raise EmptyInput("first utterance is empty")
        image_ref = self.store.images.put(image)  # raises UndecodableImage
        session = DialogueSession(
            session_id=self.session_id_factory(),
            image_ref=image_ref,
        )
        self._transition(session, SessionState.CLARIFYING)
        action = self._clarify_turn(session, first_utterance)
        return session, action

    def step(self, session: DialogueSession, user_utterance: str) -> OrchestratorAction:
        """Advance the session with one user utterance.

        Model-call failures leave the session untouched, so a failed step
        can be retried with the same utterance.
        """
        if not user_utterance or not user_utterance.strip():
            raise EmptyInput("utterance is empty")
        if session.state == SessionState.CLARIFYING:
            if session.clarification_round >= self.config.max_clarification_rounds:
                return self._forced_finalize(session, user_utterance)
            return self._clarify_turn(session, user_utterance)
        if session.state == SessionState.AWAITING_FEEDBACK:
            event_id = self.record_feedback(session, user_utterance)
            return SessionClosed(event_id=event_id)
        raise InvalidState(f"step not valid in state {session.state.value}")

    def _clarify_turn(self, session: DialogueSession, utterance: str) -> OrchestratorAction:
        reply = self._chat(
            session, "clarify", transcript=session.transcript_text(utterance)
        )
        kind, payload = _parse_marker(reply)
        self._append(session, "user", utterance)
        if kind == "clear" and payload:
            session.resolved_question = payload
            self._transition(session, SessionState.ANSWERING)
            return self.answer(session)
        # ask, raw, or an empty CLEAR all fail toward one more question
        question = payload if payload else reply.strip() or "Could you say more about what you mean?"
        self._append(session, "robot", question)
        session.clarification_round += 1
        self._transition(session, SessionState.CLARIFYING)
        return AskClarification(question=question)

    def _forced_finalize(self, session: DialogueSession, utterance: str) -> OrchestratorAction:
        reply = self._chat(
            session, "finalize", transcript=session.transcript_text(utterance)
        )
        # CLEAR, ASK, and bare replies all contribute their payload the same
        # way here: the budget is spent, so whatever came back becomes the
        # best-guess concise question.
        _, payload = _parse_marker(reply)
        self._append(session, "user", utterance)
        question = payload.strip()
        if not question:
            # adversarial or empty reply: fall back to the user's own words
            user_turns = [e.text for e in session.transcript if e.speaker == "user"]
            question = user_turns[0] if user_turns else "What is this?"
        session.resolved_question = question
        self._transition(session, SessionState.ANSWERING)
        return self.answer(session)

    def answer(self, session: DialogueSession) -> FinalAnswer:
        """Localize, retrieve, and generate the final answer."""
        if session.resolved_question is None:
            raise InvalidState("answer requires a resolved question")
        if session.state != SessionState.ANSWERING:
            raise InvalidState(f"answer not valid in state {session.state.value}")
        question = session.resolved_question

        bbox = self._localize(session, question)
        image_bytes = self.store.images.get(session.image_ref)
        try:
            crop_png = crop_subject_bytes(image_bytes, bbox)
        except DegenerateCrop:
            session.localization_flagged = True
            bbox = BoundingBox.FULL_IMAGE
            crop_png = crop_subject_bytes(image_bytes, bbox)
        session.query_bbox = bbox

        q_img = self.gateway.embed_image(crop_png)
        q_text = self.gateway.embed_text(question)
        match = None
        if self.config.retrieval_enabled:
            match = self.store.retrieve(q_img, q_text, self.retrieval_config)
        session.retrieval = match

        if match is not None:
            reply = self._chat(
                session,
                "answer_with_reference",
                transcript=session.transcript_text(),
                question=question,
                reference_q=match.event.question,
                reference_a=match.event.answer,
            )
        else:
            reply = self._chat(
                session,
                "answer_plain",
                transcript=session.transcript_text(),
                question=question,
            )
        session.final_answer = reply
        session.used_reference = match is not None
        self._append(session, "robot", reply)
        self._transition(session, SessionState.AWAITING_FEEDBACK)
        return FinalAnswer(text=reply, used_reference=session.used_reference)

    def _localize(self, session: DialogueSession, question: str) -> BoundingBox:
        """Localization prompt with one retry; full image on failure."""
        for _ in range(2):
            reply = self._chat(session, "localize", question=question)
            bbox = parse_bbox(reply, self.store.min_bbox_area)
            if bbox is not None:
                return bbox
        session.localization_flagged = True
        return BoundingBox.FULL_IMAGE

    def record_feedback(self, session: DialogueSession, feedback: str) -> str | None:
        """Classify feedback, distill on confirm/correct, close the session.

        Returns the stored event id, or None when no event was stored
        (unclassifiable feedback, or the distilled record was dropped).
        """
        if session.state != SessionState.AWAITING_FEEDBACK:
            raise InvalidState(f"feedback not valid in state {session.state.value}")
        reply = self._chat(
            session,
            "feedback_classify",
            answer=session.final_answer or "",
            feedback=feedback,
        )
        self._append(session, "user", feedback)
        verdict = reply.strip()
        if verdict.startswith("CONFIRM"):
            session.correct_answer = session.final_answer
        elif verdict.startswith("CORRECT:") and verdict[8:].strip():
            session.correction = verdict[8:].strip()
            session.correct_answer = session.correction
        else:
            # conservative: unknown feedback stores nothing
            self._transition(session, SessionState.CLOSED)
            return None
        self._transition(session, SessionState.DISTILLING)
        event_id = self.pipeline.run(session)
        session.stored_event_id = event_id
        self._transition(session, SessionState.CLOSED)
        return event_id

    def retry_distillation(self, session: DialogueSession) -> str | None:
        """Re-run a distillation that failed with a provider error."""
        if session.state != SessionState.DISTILLING:
            raise InvalidState(f"retry not valid in state {session.state.value}")
        event_id = self.pipeline.run(session)
        session.stored_event_id = event_id
        self._transition(session, SessionState.CLOSED)
        return event_id

    def abandon(self, session: DialogueSession) -> None:
        """Close without storing (e.g. feedback never arrived)."""
        if session.state == SessionState.CLOSED:
            return
        if session.state != SessionState.AWAITING_FEEDBACK:
            raise InvalidState(f"abandon not valid in state {session.state.value}")
        self._transition(session, SessionState.CLOSED)
