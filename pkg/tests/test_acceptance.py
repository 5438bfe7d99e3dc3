"""Acceptance criteria, one test per criterion.

Each test prints an ``ACCEPTANCE PASS/FAIL: <name>`` line (see conftest).
Run with ``pytest tests/test_acceptance.py -v``.
"""

from __future__ import annotations

import math
import os
import random
import subprocess
import sys
import textwrap
import time
from pathlib import Path

import pytest

from dialogmem.distill import crop_rect
from dialogmem.errors import DegenerateCrop
from dialogmem.gateway import Embedding, MockEmbeddingProvider
from dialogmem.session import AskClarification, FinalAnswer
from dialogmem.similarity import cosine_similarity
from dialogmem.sim import SimScript, reports_equal, run_rounds, write_report_file
from dialogmem.store import EventStore
from dialogmem.store_types import BoundingBox, InteractionEvent, RetrievalConfig
from dialogmem.update import UpdateManager, should_update

from .conftest import MEDICINE_RULES, Stack, make_png
from .oracles import oracle_crop_rect, oracle_retrieve

REPO_ROOT = Path(__file__).resolve().parent.parent
DIM = 8


# -- randomized retrieval corpus (shared by the first two criteria) -----


def _corpus_event(provider: MockEmbeddingProvider, i: int, content: int, created_at: float):
    return InteractionEvent(
        event_id=f"evt-{i:06d}",
        image_ref=f"img-{content}.png",
        subject_bbox=BoundingBox(0.2, 0.2, 0.8, 0.8),
        question=f"question {content}",
        answer=f"answer {content}",
        e_img=Embedding.from_raw(provider.embed_image(f"img-{content}".encode()), provider.tag),
        e_text=Embedding.from_raw(provider.embed_text(f"question {content}"), provider.tag),
        created_at=created_at,
        session_id=f"sess-{i:06d}",
        provider_tag=provider.tag,
    )


@pytest.fixture(scope="module")
def retrieval_corpus(tmp_path_factory):
    """25 randomized stores (1-500 events each) and 4 trials per store."""
    rng = random.Random(0xC0FFEE)
    provider = MockEmbeddingProvider(dim=DIM)
    root = tmp_path_factory.mktemp("corpus")
    stores = []
    for s in range(25):
        store = EventStore(root / f"store-{s}", fsync=False)
        size = rng.randint(1, 500)
        for i in range(size):
            # small content pool -> exact-duplicate embeddings and ties
            content = rng.randrange(max(2, size // 2))
            store.insert_event(
                _corpus_event(provider, i, content, created_at=float(rng.randrange(40)))
            )
        trials = []
        for _ in range(4):
            if rng.random() < 0.5:
                event = store.list_events(rng.randrange(size), 1)[0]
                q_img, q_text = event.e_img, event.e_text
            else:
                q_img = Embedding.from_raw(
                    provider.embed_image(f"probe-{rng.randrange(10**6)}".encode()), provider.tag
                )
                q_text = Embedding.from_raw(
                    provider.embed_text(f"probe-{rng.randrange(10**6)}"), provider.tag
                )
            trials.append((q_img, q_text, rng.random(), rng.random()))
        stores.append((store, trials))
    yield stores
    for store, _ in stores:
        store.close()


def _dump(store: EventStore) -> list[dict]:
    return [
        {
            "event_id": e.event_id,
            "created_at": e.created_at,
            "e_img": e.e_img.tolist(),
            "e_text": e.e_text.tolist(),
        }
        for e in store.list_events(0, store.count())
    ]


def test_retrieval_oracle_equivalence(retrieval_corpus):
    """>=100 randomized trials match the brute-force scan, in under 60 s."""
    start = time.monotonic()
    trials_run = 0
    for store, trials in retrieval_corpus:
        events = _dump(store)
        for q_img, q_text, tau_img, tau_text in trials:
            got = store.retrieve(q_img, q_text, RetrievalConfig(tau_img, tau_text))
            want = oracle_retrieve(events, q_img.tolist(), q_text.tolist(), tau_img, tau_text)
            if want is None:
                assert got is None
            else:
                assert got is not None
                assert got.event.event_id == want["event_id"]
                assert got.sim_img == pytest.approx(want["sim_img"], abs=1e-12)
                assert got.sim_text == pytest.approx(want["sim_text"], abs=1e-12)
            trials_run += 1
    elapsed = time.monotonic() - start
    assert trials_run >= 100
    assert elapsed < 60.0, f"oracle equivalence took {elapsed:.1f}s"


def test_dual_threshold_soundness_completeness_monotonicity(retrieval_corpus):
    """Matches satisfy both thresholds; any qualifying event yields a match;
    raising thresholds never turns NoMatch into a match."""
    for store, trials in retrieval_corpus:
        events = _dump(store)
        for q_img, q_text, tau_img, tau_text in trials:
            config = RetrievalConfig(tau_img, tau_text)
            got = store.retrieve(q_img, q_text, config)
            qualifying = oracle_retrieve(
                events, q_img.tolist(), q_text.tolist(), tau_img, tau_text
            )
            if got is not None:  # soundness
                assert got.sim_img >= tau_img
                assert got.sim_text >= tau_text
            if qualifying is not None:  # completeness
                assert got is not None
            raised = RetrievalConfig(
                min(1.0, tau_img + 0.1), min(1.0, tau_text + 0.1)
            )
            if got is None:  # monotonicity
                assert store.retrieve(q_img, q_text, raised) is None


def test_cosine_reference_values():
    """Identity, orthogonality, and the 45-degree pair at 1e-9."""
    provider = MockEmbeddingProvider(dim=6)
    v = Embedding.from_raw(provider.embed_text("any fixed text"), provider.tag)
    assert abs(cosine_similarity(v, v) - 1.0) <= 1e-9

    e1 = Embedding.from_raw([1.0, 0.0, 0.0, 0.0], "t")
    e2 = Embedding.from_raw([0.0, 1.0, 0.0, 0.0], "t")
    assert abs(cosine_similarity(e1, e2) - 0.0) <= 1e-9

    a = Embedding.from_raw([1.0, 0.0], "t")
    b = Embedding.from_raw([1.0, 1.0], "t")
    assert abs(cosine_similarity(a, b) - math.sqrt(0.5)) <= 1e-9


@pytest.mark.parametrize("max_rounds", [1, 3, 5])
def test_chain_of_question_termination(tmp_path, max_rounds):
    """An always-ASK adversary gets exactly max_rounds questions, then an answer."""
    stack = Stack(
        tmp_path / f"m{max_rounds}", [("*", "", "ASK: and what else?")], max_rounds=max_rounds
    )
    try:
        session, action = stack.orchestrator.start_session(make_png(), "What is that?")
        asks = 0
        while isinstance(action, AskClarification):
            asks += 1
            assert asks <= max_rounds, "clarification exceeded the budget"
            action = stack.orchestrator.step(session, f"still ambiguous {asks}")
        assert asks == max_rounds
        assert isinstance(action, FinalAnswer)
    finally:
        stack.close()


def test_end_to_end_correction_loop(tmp_path):
    """Wrong answer -> correction -> stored event -> identical re-query uses it."""
    stack = Stack(tmp_path, MEDICINE_RULES)
    image = make_png((201, 33, 33))
    try:
        before = stack.store.count()
        session, action = stack.orchestrator.start_session(
            image, "The bottle in my left hand, its name"
        )
        assert isinstance(action, FinalAnswer)
        assert action.used_reference is False
        assert action.text == "It looks like Vitamin B1 (Thiamine)."  # the wrong answer

        event_id = stack.orchestrator.record_feedback(session, "No, it's Vitamin B6")
        assert stack.store.count() == before + 1
        assert stack.store.get_event(event_id).answer == "Vitamin B6"

        requery, action = stack.orchestrator.start_session(
            image, "The bottle in my left hand, its name"
        )
        assert isinstance(action, FinalAnswer)
        assert action.used_reference is True
        assert "Vitamin B6" in action.text
        assert requery.retrieval.event.event_id == event_id
    finally:
        stack.close()


def test_simulation_trend(tmp_path):
    """Shipped script: accuracy rises round over round; boundary script exact;
    two consecutive runs bit-identical."""
    script = SimScript.load(REPO_ROOT / "scripts" / "three_rounds.yaml")
    first = run_rounds(script, workdir=tmp_path / "run1")
    second = run_rounds(script, workdir=tmp_path / "run2")
    acc = [r.accuracy for r in first]
    assert acc[0] < acc[1] <= acc[2], f"trend violated: {acc}"
    assert reports_equal(first, second)
    write_report_file(first, tmp_path / "r1.jsonl")
    write_report_file(second, tmp_path / "r2.jsonl")
    assert (tmp_path / "r1.jsonl").read_bytes() == (tmp_path / "r2.jsonl").read_bytes()

    boundary = SimScript.load(REPO_ROOT / "scripts" / "faithful_reference.yaml")
    reports = run_rounds(boundary, workdir=tmp_path / "boundary")
    assert reports[0].accuracy == 0.0
    assert reports[1].accuracy == 1.0


def test_update_exactness(tmp_path):
    """Trigger on exactly the 100th insert; batches partition 250 ids;
    crash between batch write and state advance re-exports the same batch."""
    from .conftest import make_event, scripted_gateway

    gateway = scripted_gateway([("*", "", "ok")], dim=DIM)
    store = EventStore(tmp_path / "data", fsync=False)
    try:
        manager = UpdateManager(store, threshold=100)
        for i in range(1, 101):
            store.insert_event(make_event(gateway, store))
            assert manager.should_update_now() == (i == 100), f"insert {i}"
            assert should_update(i, 100) == (i >= 100)

        first = manager.export_training_batch()
        assert first.manifest["record_count"] == 100

        for _ in range(150):
            store.insert_event(make_event(gateway, store))
        second = manager.export_training_batch()
        ids = [r.event_id for r in first.records] + [r.event_id for r in second.records]
        assert len(ids) == 250
        assert len(set(ids)) == 250
        assert ids == [e.event_id for e in store.list_events(0, 250)]

        # crash injection: batch written, state not advanced
        for _ in range(100):
            store.insert_event(make_event(gateway, store))
        saved_advance = UpdateManager._advance_state
        UpdateManager._advance_state = lambda self, *a: (_ for _ in ()).throw(
            RuntimeError("crash")
        )
        try:
            with pytest.raises(RuntimeError):
                manager.export_training_batch()
        finally:
            UpdateManager._advance_state = saved_advance
        recovered = UpdateManager(store, threshold=100)
        assert recovered.state.exported_count == 250
        third = recovered.export_training_batch()
        assert third.manifest["record_count"] == 100
        assert [r.event_id for r in third.records] == [
            e.event_id for e in store.list_events(250, 100)
        ]
    finally:
        store.close()


def test_crop_geometry(tmp_path):
    """1000 random (size, bbox) pairs match the rounding oracle; worked
    examples hold exactly."""
    assert crop_rect(1000, 800, BoundingBox(0.1, 0.2, 0.5, 0.6)) == (100, 160, 500, 480)
    assert crop_rect(33, 21, BoundingBox(0.0, 0.0, 1.0, 1.0)) == (0, 0, 33, 21)
    with pytest.raises(DegenerateCrop):
        crop_rect(3, 3, BoundingBox(0.0, 0.0, 0.1, 0.1))

    rng = random.Random(1234)
    checked = 0
    while checked < 1000:
        width = rng.randint(1, 5000)
        height = rng.randint(1, 5000)
        x0 = rng.uniform(0.0, 0.98)
        y0 = rng.uniform(0.0, 0.98)
        bbox = BoundingBox(
            x0, y0, min(1.0, x0 + rng.uniform(0.001, 1.0)), min(1.0, y0 + rng.uniform(0.001, 1.0))
        )
        if not bbox.is_valid():
            continue
        want = oracle_crop_rect(width, height, bbox.as_tuple())
        if want[2] - want[0] < 1 or want[3] - want[1] < 1:
            with pytest.raises(DegenerateCrop):
                crop_rect(width, height, bbox)
        else:
            assert crop_rect(width, height, bbox) == want
        checked += 1


DURABILITY_CHILD = textwrap.dedent(
    """
    import os, sys
    from dialogmem.gateway import Embedding, MockEmbeddingProvider
    from dialogmem.store import EventStore
    from dialogmem.store_types import BoundingBox, InteractionEvent

    data_dir = sys.argv[1]
    provider = MockEmbeddingProvider(dim=8)
    store = EventStore(data_dir, fsync=True)
    for i in range(200):
        store.insert_event(InteractionEvent(
            event_id=f"evt-{i:05d}",
            image_ref=f"img-{i}.png",
            subject_bbox=BoundingBox(0.1, 0.1, 0.9, 0.9),
            question=f"durable question {i}",
            answer=f"durable answer {i}",
            e_img=Embedding.from_raw(provider.embed_image(f"img-{i}".encode()), provider.tag),
            e_text=Embedding.from_raw(provider.embed_text(f"durable question {i}"), provider.tag),
            created_at=float(i),
            session_id=f"sess-{i:05d}",
            provider_tag=provider.tag,
        ))
    os._exit(1)  # hard kill: no close(), no atexit
    """
)


def test_durability_after_kill(tmp_path):
    """200 fsynced inserts survive a hard process kill bit-exactly."""
    data_dir = tmp_path / "durable"
    env = dict(os.environ)
    env["PYTHONPATH"] = str(REPO_ROOT / "src") + os.pathsep + env.get("PYTHONPATH", "")
    proc = subprocess.run(
        [sys.executable, "-c", DURABILITY_CHILD, str(data_dir)],
        env=env,
        capture_output=True,
        text=True,
        timeout=120,
    )
    assert proc.returncode == 1, proc.stderr

    provider = MockEmbeddingProvider(dim=8)
    store = EventStore(data_dir, fsync=False)
    try:
        assert store.count() == 200
        for i in range(200):
            event = store.get_event(f"evt-{i:05d}")
            expected_img = Embedding.from_raw(
                provider.embed_image(f"img-{i}".encode()), provider.tag
            )
            expected_text = Embedding.from_raw(
                provider.embed_text(f"durable question {i}"), provider.tag
            )
            assert event.e_img.values.tobytes() == expected_img.values.tobytes()
            assert event.e_text.values.tobytes() == expected_text.values.tobytes()
            assert event.question == f"durable question {i}"
    finally:
        store.close()
