"""Per-conversation session state and the actions the orchestrator emits."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

from .store_types import BoundingBox, RetrievalMatch


class SessionState(str, enum.Enum):
    AWAITING_QUERY = "awaiting_query"
    CLARIFYING = "clarifying"
    ANSWERING = "answering"
    AWAITING_FEEDBACK = "awaiting_feedback"
    DISTILLING = "distilling"
    CLOSED = "closed"


# Legal transitions; everything else is a bug.
LEGAL_TRANSITIONS = {
    (SessionState.AWAITING_QUERY, SessionState.CLARIFYING),
    (SessionState.CLARIFYING, SessionState.CLARIFYING),
    (SessionState.CLARIFYING, SessionState.ANSWERING),
    (SessionState.ANSWERING, SessionState.AWAITING_FEEDBACK),
    (SessionState.AWAITING_FEEDBACK, SessionState.DISTILLING),
    (SessionState.DISTILLING, SessionState.CLOSED),
    (SessionState.AWAITING_FEEDBACK, SessionState.CLOSED),
}


@dataclass(frozen=True)
class TranscriptEntry:
    speaker: str  # user | robot
    text: str
    timestamp: float


@dataclass(frozen=True)
class AskClarification:
    question: str


@dataclass(frozen=True)
class FinalAnswer:
    text: str
    used_reference: bool


@dataclass(frozen=True)
class SessionClosed:
    event_id: str | None = None


OrchestratorAction = AskClarification | FinalAnswer | SessionClosed


@dataclass
class DialogueSession:
    """State machine for one conversation about one scene image."""

    session_id: str
    image_ref: str
    state: SessionState = SessionState.AWAITING_QUERY
    transcript: list[TranscriptEntry] = field(default_factory=list)
    clarification_round: int = 0
    resolved_question: str | None = None
    retrieval: RetrievalMatch | None = None
    final_answer: str | None = None
    used_reference: bool = False
    correction: str | None = None
    correct_answer: str | None = None
    localization_flagged: bool = False
    query_bbox: BoundingBox | None = None
    stored_event_id: str | None = None
    transitions: list[tuple[SessionState, SessionState]] = field(default_factory=list)

    def transcript_text(self, extra_user_utterance: str | None = None) -> str:
        lines = [f"{e.speaker}: {e.text}" for e in self.transcript]
        if extra_user_utterance is not None:
            lines.append(f"user: {extra_user_utterance}")
        return "\n".join(lines)
