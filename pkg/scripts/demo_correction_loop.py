"""End-to-end demo of the correction loop with the scripted mock model.

Runs entirely in-process: asks an ambiguous question, gets a wrong answer,
corrects it, and shows that an identical re-query answers from the stored
event instead of repeating the mistake.

    python3 scripts/demo_correction_loop.py [workdir]
"""

import io
import sys
import tempfile
from pathlib import Path

from PIL import Image

from dialogmem.config import ServiceConfig
from dialogmem.runtime import build_runtime
from dialogmem.session import AskClarification

HERE = Path(__file__).resolve().parent


def scene_image() -> bytes:
    buf = io.BytesIO()
    Image.new("RGB", (96, 96), (204, 52, 31)).save(buf, format="PNG")
    return buf.getvalue()


def main() -> None:
    workdir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path(tempfile.mkdtemp(prefix="dm-demo-"))
    config = ServiceConfig()
    config.embedding.dim = 32
    config.chat.rules_file = str(HERE / "mock_chat_rules.yaml")
    config.storage.data_dir = str(workdir / "data")
    config.update.auto = False
    runtime = build_runtime(config)
    orch = runtime.orchestrator
    image = scene_image()

    print("=== first dialogue: the model answers wrongly and gets corrected")
    session, action = orch.start_session(image, "What is that?")
    while isinstance(action, AskClarification):
        print(f"  robot: {action.question}")
        print("  user:  The bottle in my left hand, its name")
        action = orch.step(session, "The bottle in my left hand, its name")
    print(f"  robot: {action.text}   (used_reference={action.used_reference})")
    print("  user:  No, it's Vitamin B6")
    event_id = orch.record_feedback(session, "No, it's Vitamin B6")
    print(f"  -> stored event {event_id}, store count = {runtime.store.count()}")

    print("=== identical re-query: the stored correction is retrieved")
    session, action = orch.start_session(image, "The bottle in my left hand, its name")
    match = session.retrieval
    print(f"  robot: {action.text}   (used_reference={action.used_reference})")
    print(f"  -> matched event {match.event.event_id}: sim_img={match.sim_img:.3f}, "
          f"sim_text={match.sim_text:.3f}")
    print("  user:  Yes, correct")
    orch.record_feedback(session, "Yes, correct")
    print(f"  -> store count = {runtime.store.count()} (confirmation stored too)")
    runtime.close()
    print(f"data kept in {workdir}")


if __name__ == "__main__":
    main()
