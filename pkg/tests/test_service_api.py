"""HTTP surface: endpoint contracts, error codes, session concurrency."""

from __future__ import annotations

import base64
import threading

import pytest
import yaml
from fastapi.testclient import TestClient

from dialogmem.app import create_app
from dialogmem.config import ServiceConfig
from dialogmem.runtime import build_runtime

from .conftest import MEDICINE_RULES, make_png


def write_rules(tmp_path) -> str:
    rules = [
        {"template_id": t, "match_substring": m, "reply": r} for t, m, r in MEDICINE_RULES
    ]
    path = tmp_path / "rules.yaml"
    path.write_text(yaml.safe_dump({"rules": rules}), encoding="utf-8")
    return str(path)


def make_config(tmp_path, threshold=100, auto=False) -> ServiceConfig:
    config = ServiceConfig()
    config.embedding.dim = 8
    config.chat.rules_file = write_rules(tmp_path)
    config.storage.data_dir = str(tmp_path / "data")
    config.storage.fsync = False
    config.update.threshold = threshold
    config.update.auto = auto
    return config


@pytest.fixture
def client(tmp_path):
    runtime = build_runtime(make_config(tmp_path))
    app = create_app(runtime)
    with TestClient(app, raise_server_exceptions=False) as c:
        c.runtime = runtime
        yield c


def b64(data: bytes) -> str:
    return base64.b64encode(data).decode()


def open_session(client, image: bytes, utterance: str) -> dict:
    resp = client.post("/sessions", json={"image_b64": b64(image), "utterance": utterance})
    assert resp.status_code == 200, resp.text
    return resp.json()


def run_correction_loop(client, image: bytes) -> str:
    data = open_session(client, image, "The bottle in my left hand, its name")
    assert data["action"]["type"] == "final_answer"
    resp = client.post(
        f"/sessions/{data['session_id']}/messages", json={"text": "No, it's Vitamin B6"}
    )
    assert resp.status_code == 200
    closed = resp.json()
    assert closed["action"]["type"] == "session_closed"
    return closed["action"]["event_id"]


def test_session_flow_over_http(client):
    image = make_png()
    data = open_session(client, image, "What is that?")
    assert data["action"]["type"] == "ask_clarification"
    assert data["action"]["question"]
    session_id = data["session_id"]

    resp = client.post(
        f"/sessions/{session_id}/messages",
        json={"text": "the bottle in my left hand, its name"},
    )
    assert resp.status_code == 200
    body = resp.json()
    assert body["action"]["type"] == "final_answer"
    assert body["action"]["used_reference"] is False
    assert body["state"] == "awaiting_feedback"

    view = client.get(f"/sessions/{session_id}").json()
    assert [t["text"] for t in view["transcript"]] == [t["text"] for t in body["transcript"]]
    assert view["resolved_question"] == "What is the name of the medicine bottle?"


def test_multipart_upload(client):
    resp = client.post(
        "/sessions",
        files={"image": ("scene.png", make_png(), "image/png")},
        data={"utterance": "What is that?"},
    )
    assert resp.status_code == 200
    assert resp.json()["action"]["type"] == "ask_clarification"


def test_healthz(client):
    resp = client.get("/healthz")
    assert resp.status_code == 200
    body = resp.json()
    assert body["status"] == "ok"
    assert body["model_version"] == "v1"


def test_error_codes_are_machine_readable(client):
    resp = client.get("/sessions/nope")
    assert resp.status_code == 404
    assert resp.json()["error"]["code"] == "NotFound"

    resp = client.post("/sessions", json={"image_b64": "!!!", "utterance": "hi"})
    assert resp.status_code == 400
    assert resp.json()["error"]["code"] == "EmptyInput"

    resp = client.post(
        "/sessions", json={"image_b64": b64(b"not an image"), "utterance": "hi"}
    )
    assert resp.status_code == 400
    assert resp.json()["error"]["code"] == "UndecodableImage"

    resp = client.get("/events/evt-missing")
    assert resp.status_code == 404
    assert resp.json()["error"]["code"] == "NotFound"

    # malformed bodies also carry the machine-readable shape
    resp = client.post(
        "/sessions/whatever/messages",
        content=b"not json",
        headers={"Content-Type": "application/json"},
    )
    assert resp.status_code == 400
    assert resp.json()["error"]["code"] == "InvalidRequest"


def test_correction_loop_populates_event_endpoints(client):
    image = make_png((42, 160, 20))
    event_id = run_correction_loop(client, image)
    assert event_id

    listing = client.get("/events").json()
    assert listing["total"] == 1
    assert listing["events"][0]["event_id"] == event_id

    event = client.get(f"/events/{event_id}").json()
    assert event["answer"] == "Vitamin B6"

    img = client.get(f"/events/{event_id}/image")
    assert img.status_code == 200
    assert img.headers["content-type"].startswith("image/")
    assert img.content  # original scene image bytes

    search = client.post(
        "/events/search",
        json={
            "text": "What is the name of the medicine bottle?",
            "image_b64": b64(client.runtime.store.images.get(event["image_ref"])),
        },
    ).json()
    # text matches exactly; the full scene image differs from the stored crop
    sess = client.runtime.store.get_event(event_id)
    assert search["match"] is None or search["match"]["event_id"] == sess.event_id

    q_img = sess.e_img.tolist()
    q_text = sess.e_text.tolist()
    search = client.post("/events/search", json={"q_img": q_img, "q_text": q_text}).json()
    assert search["match"]["event_id"] == event_id
    assert search["match"]["sim_img"] == 1.0
    assert search["match"]["sim_text"] == 1.0


def test_update_endpoints(tmp_path):
    runtime = build_runtime(make_config(tmp_path, threshold=1))
    with TestClient(app := create_app(runtime), raise_server_exceptions=False) as client:
        del app
        resp = client.post("/update/trigger")
        assert resp.status_code == 409
        assert resp.json()["error"]["code"] == "ThresholdNotReached"

        client.runtime = runtime
        run_correction_loop(client, make_png((9, 9, 200)))

        status = client.get("/update/status").json()
        assert status["event_count"] == 1
        assert status["pending_toward_threshold"] == 1

        resp = client.post("/update/trigger")
        assert resp.status_code == 200
        assert resp.json()["records"] == 1

        status = client.get("/update/status").json()
        assert status["exported_count"] == 1
        assert status["active_model_version"] == "v2"
        assert status["pending_job"] is None

        health = client.get("/healthz").json()
        assert health["model_version"] == "v2"


def test_auto_update_fires_on_threshold(tmp_path):
    runtime = build_runtime(make_config(tmp_path, threshold=1, auto=True))
    with TestClient(create_app(runtime), raise_server_exceptions=False) as client:
        client.runtime = runtime
        run_correction_loop(client, make_png((120, 30, 77)))
        status = client.get("/update/status").json()
        assert status["exported_count"] == 1
        assert status["active_model_version"] == "v2"


def test_turn_long_poll(client):
    data = open_session(client, make_png(), "What is that?")
    session_id = data["session_id"]
    resp = client.get(f"/sessions/{session_id}/turns", params={"after": 0, "wait_s": 0})
    body = resp.json()
    assert body["next"] == 2  # user turn + robot clarification
    assert [t["speaker"] for t in body["turns"]] == ["user", "robot"]
    resp = client.get(f"/sessions/{session_id}/turns", params={"after": 2, "wait_s": 0})
    assert resp.json()["turns"] == []


def test_concurrent_messages_to_one_session_conflict(tmp_path):
    import time as time_mod

    from dialogmem.gateway import ScriptedChatProvider, ScriptedRule

    class GateChatter:
        """Blocks inside the first clarify completion until released."""

        model_tag = "gate"

        def __init__(self, inner):
            self.inner = inner
            self.entered = threading.Event()
            self.release = threading.Event()
            self.block_next = False

        def complete(self, request):
            if self.block_next and request.template_id == "clarify":
                self.block_next = False
                self.entered.set()
                assert self.release.wait(timeout=10)
            return self.inner.complete(request)

    config = make_config(tmp_path)
    runtime = build_runtime(config)
    gate = GateChatter(ScriptedChatProvider([ScriptedRule(*r) for r in MEDICINE_RULES]))
    runtime.gateway.chatter = gate
    runtime.orchestrator.gateway = runtime.gateway

    with TestClient(create_app(runtime), raise_server_exceptions=False) as client:
        data = client.post(
            "/sessions", json={"image_b64": b64(make_png()), "utterance": "What is that?"}
        ).json()
        session_id = data["session_id"]

        gate.block_next = True
        results = {}

        def slow_post():
            results["slow"] = client.post(
                f"/sessions/{session_id}/messages", json={"text": "still thinking"}
            )

        t = threading.Thread(target=slow_post)
        t.start()
        assert gate.entered.wait(timeout=10)
        time_mod.sleep(0.02)
        busy = client.post(f"/sessions/{session_id}/messages", json={"text": "second"})
        assert busy.status_code == 409
        assert busy.json()["error"]["code"] == "SessionBusy"
        gate.release.set()
        t.join(timeout=10)
        assert results["slow"].status_code == 200


def test_distinct_sessions_run_concurrently(client):
    ids = []
    for i in range(3):
        data = open_session(client, make_png((i * 40, 10, 10)), "What is that?")
        ids.append(data["session_id"])
    assert len(set(ids)) == 3
    for session_id in ids:
        resp = client.post(
            f"/sessions/{session_id}/messages",
            json={"text": "the bottle in my left hand, its name"},
        )
        assert resp.status_code == 200
