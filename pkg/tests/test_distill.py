"""Distillation: parse rules, crop geometry, event finalization."""

from __future__ import annotations

import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from dialogmem.distill import (
    DistilledRecord,
    crop_rect,
    crop_subject,
    parse_bbox,
    round_half_up,
)
from dialogmem.errors import DegenerateCrop, ProviderUnreachable
from dialogmem.session import DialogueSession, SessionState
from dialogmem.similarity import cosine_similarity
from dialogmem.store_types import BoundingBox

from .conftest import MEDICINE_RULES, Stack, make_png
from .oracles import oracle_crop_rect, oracle_round_half_up
from .test_orchestrator import FlakyChatter


@pytest.fixture
def stack(tmp_path):
    s = Stack(tmp_path, MEDICINE_RULES)
    yield s
    s.close()


def finished_session(stack, image: bytes) -> DialogueSession:
    session, _ = stack.orchestrator.start_session(
        image, "The bottle in my left hand, its name"
    )
    # put the session into the distilling state without running the pipeline
    session.correct_answer = "Vitamin B6"
    session.state = SessionState.DISTILLING
    return session


# -- distill parsing ---------------------------------------------------


def test_distill_parses_all_three_fields(tmp_path, red_png):
    rules = [r for r in MEDICINE_RULES if r[0] != "distill"] + [
        (
            "distill",
            "",
            "Q: What is the name of this medicine bottle? | BBOX: 0.32,0.18,0.61,0.74 "
            "| A: Vitamin B1 (Thiamine)",
        )
    ]
    stack = Stack(tmp_path, rules)
    try:
        session = finished_session(stack, red_png)
        record = stack.pipeline.distill(session)
        assert record.concise_question == "What is the name of this medicine bottle?"
        assert record.bbox == BoundingBox(0.32, 0.18, 0.61, 0.74)
        assert record.answer == "Vitamin B1 (Thiamine)"
        assert record.source_session == session.session_id
    finally:
        stack.close()


def test_zero_width_bbox_is_dropped_with_audit(tmp_path, red_png):
    rules = [r for r in MEDICINE_RULES if r[0] != "distill"] + [
        ("distill", "", "Q: What is this? | BBOX: 0.5,0.5,0.5,0.9 | A: something")
    ]
    stack = Stack(tmp_path, rules)
    try:
        session = finished_session(stack, red_png)
        assert stack.pipeline.run(session) is None
        assert stack.store.count() == 0
        entries = [json.loads(l) for l in stack.audit_path.read_text().splitlines()]
        assert entries[-1]["outcome"] == "dropped"
        assert entries[-1]["session_id"] == session.session_id
    finally:
        stack.close()


def test_slightly_out_of_range_bbox_is_clamped(tmp_path, red_png):
    rules = [r for r in MEDICINE_RULES if r[0] != "distill"] + [
        ("distill", "", "Q: What is this? | BBOX: -0.02,0.1,0.5,0.9 | A: something")
    ]
    stack = Stack(tmp_path, rules)
    try:
        record = stack.pipeline.distill(finished_session(stack, red_png))
        assert record.bbox.x0 == 0.0
        assert record.bbox.is_valid()
    finally:
        stack.close()


def test_parse_bbox_accepts_bare_quadruple():
    assert parse_bbox("0.1, 0.2, 0.6, 0.9") == BoundingBox(0.1, 0.2, 0.6, 0.9)
    assert parse_bbox("no numbers here") is None
    assert parse_bbox("BBOX: 0.9,0.1,0.2,0.5") is None  # x0 >= x1 after clamp


# -- crop geometry ------------------------------------------------------


def test_crop_worked_example():
    assert crop_rect(1000, 800, BoundingBox(0.1, 0.2, 0.5, 0.6)) == (100, 160, 500, 480)
    img = Image.new("RGB", (1000, 800))
    region = crop_subject(img, BoundingBox(0.1, 0.2, 0.5, 0.6))
    assert region.size == (400, 320)


def test_crop_full_image_is_identity():
    img = Image.new("RGB", (33, 21))
    region = crop_subject(img, BoundingBox.FULL_IMAGE)
    assert region.size == (33, 21)


def test_crop_rounding_to_zero_pixels_is_degenerate():
    # oracle check: round(0.1 * 3) = 0 -> zero-width rect
    assert oracle_round_half_up(0.1 * 3) == 0
    with pytest.raises(DegenerateCrop):
        crop_rect(3, 3, BoundingBox(0.0, 0.0, 0.1, 0.1))


def test_round_half_up_matches_decimal_oracle_on_halves():
    # crop inputs are ratio * size, always non-negative
    for v in [0.0, 0.5, 1.5, 2.5, 3.5, 0.49999999999999994, 7.499999999999999]:
        assert round_half_up(v) == oracle_round_half_up(v)


@given(
    width=st.integers(min_value=1, max_value=4000),
    height=st.integers(min_value=1, max_value=4000),
    x0=st.floats(min_value=0, max_value=0.98),
    y0=st.floats(min_value=0, max_value=0.98),
    dx=st.floats(min_value=0.02, max_value=1.0),
    dy=st.floats(min_value=0.02, max_value=1.0),
)
@settings(max_examples=200, deadline=None)
def test_crop_rect_matches_oracle(width, height, x0, y0, dx, dy):
    bbox = BoundingBox(x0, y0, min(1.0, x0 + dx), min(1.0, y0 + dy))
    if not bbox.is_valid():
        return
    want = oracle_crop_rect(width, height, bbox.as_tuple())
    if want[2] - want[0] < 1 or want[3] - want[1] < 1:
        with pytest.raises(DegenerateCrop):
            crop_rect(width, height, bbox)
    else:
        assert crop_rect(width, height, bbox) == want


# -- finalize_event -----------------------------------------------------


def test_finalize_event_embeds_exactly_what_it_stores(stack, red_png):
    session = finished_session(stack, red_png)
    event_id = stack.pipeline.run(session)
    event = stack.store.get_event(event_id)
    assert stack.store.count() == 1
    recomputed = stack.gateway.embed_text(event.question)
    assert event.e_text.values.tobytes() == recomputed.values.tobytes()
    assert cosine_similarity(event.e_text, recomputed) == 1.0


def test_provider_outage_leaves_store_unchanged_then_retry_succeeds(tmp_path, red_png):
    from dialogmem.gateway import ScriptedChatProvider, ScriptedRule

    inner = ScriptedChatProvider([ScriptedRule(*r) for r in MEDICINE_RULES])
    stack = Stack(tmp_path, [], chatter=FlakyChatter(inner, failures=0))
    try:
        session = finished_session(stack, red_png)
        stack.chatter.remaining = 1  # transport errors propagate, no auto-retry
        with pytest.raises(ProviderUnreachable):
            stack.pipeline.run(session)
        assert stack.store.count() == 0
        first = stack.pipeline.run(session)
        second = stack.pipeline.run(session)  # idempotent per session
        assert first == second
        assert stack.store.count() == 1
    finally:
        stack.close()


def test_two_sessions_same_subject_store_two_events(stack, red_png):
    a = finished_session(stack, red_png)
    b = finished_session(stack, red_png)
    id_a = stack.pipeline.run(a)
    id_b = stack.pipeline.run(b)
    assert id_a != id_b
    assert stack.store.count() == 2


def test_finalize_event_is_atomic_on_degenerate_crop(stack):
    tiny = make_png(size=(3, 3))
    session = finished_session(stack, tiny)
    record = DistilledRecord(
        concise_question="What is this?",
        bbox=BoundingBox(0.0, 0.0, 0.1, 0.1),
        answer="something",
        source_session=session.session_id,
    )
    with pytest.raises(DegenerateCrop):
        stack.pipeline.finalize_event(record, session.image_ref)
    assert stack.store.count() == 0
