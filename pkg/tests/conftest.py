"""Shared fixtures: mock-backed gateways, image helpers, event factories."""

from __future__ import annotations

import io
import itertools

import pytest
from PIL import Image


def pytest_runtest_logreport(report):
    # one visible verdict line per acceptance criterion
    if report.when == "call" and "test_acceptance" in report.nodeid:
        name = report.nodeid.split("::")[-1]
        verdict = "PASS" if report.passed else "FAIL"
        print(f"\nACCEPTANCE {verdict}: {name}")

from dialogmem.gateway import (
    ChatMessage,
    ChatRequest,
    MockEmbeddingProvider,
    ModelGateway,
    ScriptedChatProvider,
    ScriptedRule,
)
from dialogmem.store import EventStore
from dialogmem.store_types import BoundingBox, InteractionEvent


def make_png(color=(200, 30, 30), size=(64, 64)) -> bytes:
    buf = io.BytesIO()
    Image.new("RGB", size, color).save(buf, format="PNG")
    return buf.getvalue()


@pytest.fixture
def red_png() -> bytes:
    return make_png((200, 30, 30))


@pytest.fixture
def blue_png() -> bytes:
    return make_png((30, 30, 200))


def scripted_gateway(rules, dim=8, image_loader=None) -> ModelGateway:
    provider = ScriptedChatProvider([ScriptedRule(*r) for r in rules])
    return ModelGateway(
        embedder=MockEmbeddingProvider(dim=dim),
        chatter=provider,
        image_loader=image_loader,
    )


@pytest.fixture
def mock_gateway() -> ModelGateway:
    return scripted_gateway([("*", "", "ok")])


def chat_request(text: str, template_id: str = "", image_refs=()) -> ChatRequest:
    return ChatRequest(
        messages=(ChatMessage("user", text),),
        image_refs=tuple(image_refs),
        template_id=template_id,
    )


_event_counter = itertools.count()


def make_event(
    gateway: ModelGateway,
    store: EventStore,
    question: str = "What is the name of this medicine bottle?",
    answer: str = "Vitamin B1 (Thiamine)",
    image: bytes | None = None,
    created_at: float | None = None,
    session_id: str | None = None,
    event_id: str | None = None,
    bbox: BoundingBox = BoundingBox(0.25, 0.25, 0.75, 0.75),
) -> InteractionEvent:
    n = next(_event_counter)
    image = image if image is not None else make_png((n % 251, (n * 7) % 251, (n * 13) % 251))
    ref = store.images.put(image)
    return InteractionEvent(
        event_id=event_id or f"evt-{n:08d}",
        image_ref=ref,
        subject_bbox=bbox,
        question=question,
        answer=answer,
        e_img=gateway.embed_image(image),
        e_text=gateway.embed_text(question),
        created_at=created_at if created_at is not None else float(n),
        session_id=session_id or f"sess-{n:08d}",
        provider_tag=gateway.provider_tag,
    )


@pytest.fixture
def store(tmp_path) -> EventStore:
    s = EventStore(tmp_path / "data", fsync=False)
    yield s
    s.close()


class Stack:
    """One fully wired service core over a scripted chat mock."""

    def __init__(self, tmp_path, rules, dim=8, max_rounds=5, tau=(0.8, 0.75),
                 retrieval_enabled=True, chatter=None):
        from dialogmem.distill import DistillationPipeline
        from dialogmem.orchestrator import DialogueConfig, DialogueOrchestrator
        from dialogmem.store_types import RetrievalConfig
        from dialogmem.templates import TemplateSet

        self.counter = itertools.count()
        self.clock_value = [0.0]
        self.store = EventStore(tmp_path / "data", fsync=False)
        self.chatter = chatter or ScriptedChatProvider([ScriptedRule(*r) for r in rules])
        self.gateway = ModelGateway(
            embedder=MockEmbeddingProvider(dim=dim),
            chatter=self.chatter,
            image_loader=self.store.images.get,
        )
        self.templates = TemplateSet()
        self.pipeline = DistillationPipeline(
            self.gateway,
            self.store,
            self.templates,
            audit_path=tmp_path / "audit.jsonl",
            clock=self._clock,
            event_id_factory=lambda: f"evt-{next(self.counter):06d}",
        )
        self.orchestrator = DialogueOrchestrator(
            self.gateway,
            self.store,
            self.pipeline,
            self.templates,
            retrieval_config=RetrievalConfig(tau_img=tau[0], tau_text=tau[1]),
            dialogue_config=DialogueConfig(
                max_clarification_rounds=max_rounds,
                retrieval_enabled=retrieval_enabled,
            ),
            clock=self._clock,
            session_id_factory=lambda: f"sess-{next(self.counter):06d}",
        )
        self.audit_path = tmp_path / "audit.jsonl"

    def _clock(self) -> float:
        self.clock_value[0] += 1.0
        return self.clock_value[0]

    def close(self):
        self.store.close()


MEDICINE_RULES = [
    ("clarify", "left hand", "CLEAR: What is the name of the medicine bottle?"),
    ("clarify", "", "ASK: Could you point to the object you mean?"),
    ("finalize", "", "CLEAR: What is the name of the medicine bottle?"),
    ("localize", "", "BBOX: 0.25,0.25,0.75,0.75"),
    ("answer_with_reference", "", "It is Vitamin B6."),
    ("answer_plain", "", "It looks like Vitamin B1 (Thiamine)."),
    ("feedback_classify", "No, it's Vitamin B6", "CORRECT: Vitamin B6"),
    ("feedback_classify", "Yes", "CONFIRM"),
    ("feedback_classify", "", "UNKNOWN"),
    (
        "distill",
        "",
        "Q: What is the name of the medicine bottle? | BBOX: 0.25,0.25,0.75,0.75 | A: Vitamin B6",
    ),
]
