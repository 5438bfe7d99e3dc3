"""Three-round experiment harness with scripted users and a scripted robot.

Round 1 runs with retrieval disabled and a baseline error rate: the robot
answers questions about catalog objects it has never seen, the scripted
user corrects every wrong answer, and corrected dialogues accumulate as
events.  Round 2 enables retrieval over those events.  Round 3 disables
retrieval again and lowers the error rate, simulating a model fine-tuned
on the exported corrections.

Everything is derived from the script's seed: object images are
procedurally generated tiles, the robot mock draws its mistakes from a
seeded generator, and ids/timestamps come from counters, so two runs of
the same script produce bit-identical reports.
"""

from __future__ import annotations

import io
import itertools
import json
import random
import re
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml
from PIL import Image, ImageDraw

from .distill import DistillationPipeline
from .errors import ScriptInvalid
from .gateway import MockEmbeddingProvider, ModelGateway, stable_seed
from .orchestrator import DialogueConfig, DialogueOrchestrator
from .session import AskClarification, FinalAnswer, SessionClosed
from .store import EventStore
from .store_types import RetrievalConfig
from .templates import TemplateSet

ATTRIBUTES = ("name", "color", "use")

VAGUE_OPENING = "What is that?"
SPECIFIC_REPLY = "I am holding the bottle labeled {label}. What is its {attribute}?"
CANONICAL_QUESTION = "What is the {attribute} of the bottle labeled {label}?"
SIM_BBOX = "0.20,0.20,0.80,0.80"

_REPLY_RE = re.compile(r"bottle labeled ([A-Za-z0-9_-]+)\. What is its (name|color|use)\?")
_CANONICAL_RE = re.compile(r"What is the (name|color|use) of the bottle labeled ([A-Za-z0-9_-]+)\?")
_CORRECTION_RE = re.compile(r"No, the (?:name|color|use) is (.+?)\.?$")


@dataclass(frozen=True)
class CatalogObject:
    object_id: str
    name: str
    color: str
    use: str
    tile: str  # background color spec, e.g. "#e8d44d"

    def attribute(self, attr: str) -> str:
        return {"name": self.name, "color": self.color, "use": self.use}[attr]


@dataclass(frozen=True)
class RoundPolicy:
    retrieval: bool = False
    error_rate: float = 0.0
    reference_adherence: float = 1.0


@dataclass
class SimScript:
    seed: int
    participants: int
    embedding_dim: int
    tau_img: float
    tau_text: float
    max_clarification_rounds: int
    catalog: list[CatalogObject]
    rounds: list[RoundPolicy]

    def validate(self) -> None:
        if self.participants < 1:
            raise ScriptInvalid("participants must be >= 1")
        if self.embedding_dim < 1:
            raise ScriptInvalid("embedding_dim must be >= 1")
        if not self.catalog:
            raise ScriptInvalid("catalog must not be empty")
        if len({o.object_id for o in self.catalog}) != len(self.catalog):
            raise ScriptInvalid("catalog object ids must be unique")
        if not self.rounds:
            raise ScriptInvalid("at least one round is required")
        for i, policy in enumerate(self.rounds, start=1):
            if not 0.0 <= policy.error_rate <= 1.0:
                raise ScriptInvalid(f"round {i}: error_rate must lie in [0, 1]")
            if not 0.0 <= policy.reference_adherence <= 1.0:
                raise ScriptInvalid(f"round {i}: reference_adherence must lie in [0, 1]")

    @classmethod
    def load(cls, path: str | Path) -> "SimScript":
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh)
        if not isinstance(data, dict):
            raise ScriptInvalid("script file must hold a mapping")
        try:
            catalog = [
                CatalogObject(
                    object_id=str(o["id"]),
                    name=str(o["name"]),
                    color=str(o["color"]),
                    use=str(o["use"]),
                    tile=str(o.get("tile", "#888888")),
                )
                for o in data["catalog"]
            ]
            rounds = [
                RoundPolicy(
                    retrieval=bool(r.get("retrieval", False)),
                    error_rate=float(r.get("error_rate", 0.0)),
                    reference_adherence=float(r.get("reference_adherence", 1.0)),
                )
                for r in data["rounds"]
            ]
            retrieval = data.get("retrieval", {})
            script = cls(
                seed=int(data["seed"]),
                participants=int(data["participants"]),
                embedding_dim=int(data.get("embedding_dim", 32)),
                tau_img=float(retrieval.get("tau_img", 0.80)),
                tau_text=float(retrieval.get("tau_text", 0.75)),
                max_clarification_rounds=int(data.get("max_clarification_rounds", 5)),
                catalog=catalog,
                rounds=rounds,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ScriptInvalid(f"bad script field: {exc!r}") from exc
        script.validate()
        return script


def tile_image(obj: CatalogObject, size: int = 64) -> bytes:
    """Labeled tile: solid background plus an id-derived pixel stripe."""
    img = Image.new("RGB", (size, size), obj.tile)
    draw = ImageDraw.Draw(img)
    digest = stable_seed(b"tile:", obj.object_id.encode("utf-8"))
    for i in range(8):
        shade = (digest >> (i * 8)) & 0xFF
        x = i * (size // 8)
        draw.rectangle([x, 0, x + size // 8 - 1, size // 8 - 1], fill=(shade, 255 - shade, 128))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


class SimChatProvider:
    """Scripted robot brain: answers by catalog truth, errs by policy.

    Reads its own rendered prompts the way a model would: it extracts the
    last user utterance, the reference answer, or the transcript from the
    prompt text, never from harness internals.
    """

    model_tag = "sim-mock"

    def __init__(self, catalog: list[CatalogObject], rng: random.Random):
        self.by_label = {o.object_id: o for o in catalog}
        self.catalog = catalog
        self.rng = rng
        self.policy = RoundPolicy()

    # -- prompt parsing helpers --

    @staticmethod
    def _transcript_lines(text: str) -> list[tuple[str, str]]:
        out = []
        for line in text.splitlines():
            if line.startswith("user: "):
                out.append(("user", line[6:]))
            elif line.startswith("robot: "):
                out.append(("robot", line[7:]))
        return out

    def _lookup(self, attribute: str, label: str) -> CatalogObject | None:
        return self.by_label.get(label)

    def _plain_answer(self, attribute: str, label: str) -> str:
        obj = self._lookup(attribute, label)
        if obj is None:
            return "I am not sure."
        if self.rng.random() < self.policy.error_rate:
            others = [o for o in self.catalog if o.object_id != obj.object_id]
            if not others:
                return "I am not sure."
            return self.rng.choice(others).attribute(attribute)
        return obj.attribute(attribute)

    # -- template dispatch --

    def complete(self, request) -> str:
        text = request.joined_text()
        handler = {
            "clarify": self._clarify,
            "finalize": self._finalize,
            "localize": lambda t: f"BBOX: {SIM_BBOX}",
            "answer_plain": self._answer_plain,
            "answer_with_reference": self._answer_with_reference,
            "feedback_classify": self._feedback_classify,
            "distill": self._distill,
        }.get(request.template_id)
        if handler is None:
            return "I am not sure."
        return handler(text)

    def _clarify(self, text: str) -> str:
        lines = self._transcript_lines(text)
        last_user = next((t for s, t in reversed(lines) if s == "user"), "")
        m = _REPLY_RE.search(last_user)
        if m:
            label, attribute = m.group(1), m.group(2)
            return "CLEAR: " + CANONICAL_QUESTION.format(attribute=attribute, label=label)
        return "ASK: Which object do you mean, and what would you like to know about it?"

    def _finalize(self, text: str) -> str:
        lines = self._transcript_lines(text)
        for _, t in reversed([l for l in lines if l[0] == "user"]):
            m = _REPLY_RE.search(t)
            if m:
                return "CLEAR: " + CANONICAL_QUESTION.format(attribute=m.group(2), label=m.group(1))
        last_user = next((t for s, t in reversed(lines) if s == "user"), "this object")
        return "CLEAR: " + last_user

    def _question_parts(self, text: str) -> tuple[str, str] | None:
        m = _CANONICAL_RE.search(text)
        return (m.group(1), m.group(2)) if m else None

    def _answer_plain(self, text: str) -> str:
        parts = self._question_parts(text)
        if parts is None:
            return "I am not sure."
        return self._plain_answer(*parts)

    def _answer_with_reference(self, text: str) -> str:
        ref = None
        for line in text.splitlines():
            if line.startswith("Reference answer: "):
                ref = line[len("Reference answer: ") :]
        if ref is not None and self.rng.random() < self.policy.reference_adherence:
            return ref
        return self._answer_plain(text)

    def _feedback_classify(self, text: str) -> str:
        m = re.search(r"The user then said:\n\n(.*?)\n\nClassify", text, re.DOTALL)
        feedback = m.group(1).strip() if m else ""
        if feedback.startswith("Yes"):
            return "CONFIRM"
        corr = _CORRECTION_RE.search(feedback)
        if corr:
            return f"CORRECT: {corr.group(1)}"
        return "UNKNOWN"

    def _distill(self, text: str) -> str:
        lines = self._transcript_lines(text)
        question = None
        for _, t in lines:
            m = _REPLY_RE.search(t)
            if m:
                question = CANONICAL_QUESTION.format(attribute=m.group(2), label=m.group(1))
        feedback = next((t for s, t in reversed(lines) if s == "user"), "")
        corr = _CORRECTION_RE.search(feedback)
        if corr:
            answer = corr.group(1)
        else:
            robot_turns = [t for s, t in lines if s == "robot"]
            answer = robot_turns[-1] if robot_turns else "unknown"
        if question is None:
            question = "What is this?"
        return f"Q: {question} | BBOX: {SIM_BBOX} | A: {answer}"


@dataclass(frozen=True)
class DialogueRow:
    round_index: int
    participant: int
    object_id: str
    attribute: str
    question: str
    final_answer: str
    truth: str
    correct: bool
    used_reference: bool
    clarification_rounds: int


@dataclass
class RoundReport:
    round_index: int
    retrieval_enabled: bool
    accuracy: float
    per_object_accuracy: dict[str, float]
    used_reference_rate: float
    clarification_histogram: dict[int, int]
    dialogues: list[DialogueRow] = field(default_factory=list)
    events_in_store: int | None = None

    def summary_dict(self) -> dict:
        return {
            "round_index": self.round_index,
            "retrieval_enabled": self.retrieval_enabled,
            "accuracy": self.accuracy,
            "per_object_accuracy": dict(sorted(self.per_object_accuracy.items())),
            "used_reference_rate": self.used_reference_rate,
            "clarification_histogram": {
                str(k): v for k, v in sorted(self.clarification_histogram.items())
            },
            "events_in_store": self.events_in_store,
        }


def _build_report(round_index: int, policy: RoundPolicy, rows: list[DialogueRow]) -> RoundReport:
    by_object: dict[str, list[bool]] = {}
    histogram: dict[int, int] = {}
    for row in rows:
        by_object.setdefault(row.object_id, []).append(row.correct)
        histogram[row.clarification_rounds] = histogram.get(row.clarification_rounds, 0) + 1
    return RoundReport(
        round_index=round_index,
        retrieval_enabled=policy.retrieval,
        accuracy=sum(r.correct for r in rows) / len(rows),
        per_object_accuracy={
            obj: sum(flags) / len(flags) for obj, flags in by_object.items()
        },
        used_reference_rate=sum(r.used_reference for r in rows) / len(rows),
        clarification_histogram=histogram,
        dialogues=rows,
    )


def run_rounds(script: SimScript, workdir: str | Path | None = None) -> list[RoundReport]:
    """Run every scripted round against one shared store; deterministic."""
    script.validate()
    if workdir is None:
        with tempfile.TemporaryDirectory(prefix="dialogmem-sim-") as tmp:
            return _run_rounds_in(script, Path(tmp))
    return _run_rounds_in(script, Path(workdir))


def _run_rounds_in(script: SimScript, workdir: Path) -> list[RoundReport]:
    rng = random.Random(script.seed)
    store = EventStore(workdir / "store", fsync=False)
    provider = SimChatProvider(script.catalog, rng)
    gateway = ModelGateway(
        embedder=MockEmbeddingProvider(dim=script.embedding_dim),
        chatter=provider,
        image_loader=store.images.get,
    )
    templates = TemplateSet()
    counter = itertools.count()
    clock_state = [0.0]

    def clock() -> float:
        clock_state[0] += 1.0
        return clock_state[0]

    pipeline = DistillationPipeline(
        gateway,
        store,
        templates,
        audit_path=workdir / "distill_audit.jsonl",
        clock=clock,
        event_id_factory=lambda: f"evt-{next(counter):06d}",
    )
    tiles = {o.object_id: tile_image(o) for o in script.catalog}

    reports: list[RoundReport] = []
    try:
        for round_index, policy in enumerate(script.rounds, start=1):
            provider.policy = policy
            orchestrator = DialogueOrchestrator(
                gateway,
                store,
                pipeline,
                templates,
                retrieval_config=RetrievalConfig(
                    tau_img=script.tau_img, tau_text=script.tau_text
                ),
                dialogue_config=DialogueConfig(
                    max_clarification_rounds=script.max_clarification_rounds,
                    retrieval_enabled=policy.retrieval,
                ),
                clock=clock,
                session_id_factory=lambda: f"sess-{next(counter):06d}",
            )
            rows = [
                _run_dialogue(orchestrator, script, tiles, round_index, participant, obj, attr)
                for participant in range(1, script.participants + 1)
                for obj in script.catalog
                for attr in ATTRIBUTES
            ]
            report = _build_report(round_index, policy, rows)
            report.events_in_store = store.count()
            reports.append(report)
    finally:
        store.close()
    return reports


def _run_dialogue(
    orchestrator: DialogueOrchestrator,
    script: SimScript,
    tiles: dict[str, bytes],
    round_index: int,
    participant: int,
    obj: CatalogObject,
    attribute: str,
) -> DialogueRow:
    truth = obj.attribute(attribute)
    session, action = orchestrator.start_session(tiles[obj.object_id], VAGUE_OPENING)
    replies = 0
    while isinstance(action, AskClarification):
        action = orchestrator.step(
            session,
            SPECIFIC_REPLY.format(label=obj.object_id, attribute=attribute),
        )
        replies += 1
        if replies > script.max_clarification_rounds + 1:
            raise RuntimeError("dialogue did not terminate")
    assert isinstance(action, FinalAnswer)
    correct = action.text == truth
    feedback = "Yes, that is right." if correct else f"No, the {attribute} is {truth}."
    closed = orchestrator.step(session, feedback)
    assert isinstance(closed, SessionClosed)
    return DialogueRow(
        round_index=round_index,
        participant=participant,
        object_id=obj.object_id,
        attribute=attribute,
        question=session.resolved_question or "",
        final_answer=action.text,
        truth=truth,
        correct=correct,
        used_reference=action.used_reference,
        clarification_rounds=session.clarification_round,
    )


# -- reporting ----------------------------------------------------------


def render_table(reports: list[RoundReport]) -> str:
    """Aligned per-round accuracy table."""
    header = f"{'round':>5}  {'retrieval':>9}  {'accuracy':>8}  {'ref_rate':>8}  {'dialogues':>9}"
    lines = [header, "-" * len(header)]
    for r in reports:
        lines.append(
            f"{r.round_index:>5}  {('on' if r.retrieval_enabled else 'off'):>9}  "
            f"{r.accuracy:>8.3f}  {r.used_reference_rate:>8.3f}  {len(r.dialogues):>9}"
        )
    return "\n".join(lines)


def write_report_file(reports: list[RoundReport], path: str | Path) -> None:
    """One JSON-lines file per run: a dialogue row per line plus summaries."""
    with open(path, "w", encoding="utf-8") as fh:
        for report in reports:
            for row in report.dialogues:
                fh.write(json.dumps({"type": "dialogue", **asdict(row)}, sort_keys=True) + "\n")
            summary = report.summary_dict()
            summary["events_in_store"] = getattr(report, "events_in_store", None)
            fh.write(json.dumps({"type": "round_summary", **summary}, sort_keys=True) + "\n")


def load_report_file(path: str | Path) -> list[RoundReport]:
    """Reconstruct reports from a report file (inverse of write_report_file)."""
    rows_by_round: dict[int, list[DialogueRow]] = {}
    reports: list[RoundReport] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            entry = json.loads(line)
            kind = entry.pop("type")
            if kind == "dialogue":
                row = DialogueRow(**entry)
                rows_by_round.setdefault(row.round_index, []).append(row)
            elif kind == "round_summary":
                reports.append(
                    RoundReport(
                        round_index=entry["round_index"],
                        retrieval_enabled=entry["retrieval_enabled"],
                        accuracy=entry["accuracy"],
                        per_object_accuracy=dict(entry["per_object_accuracy"]),
                        used_reference_rate=entry["used_reference_rate"],
                        clarification_histogram={
                            int(k): v for k, v in entry["clarification_histogram"].items()
                        },
                        dialogues=rows_by_round.get(entry["round_index"], []),
                        events_in_store=entry.get("events_in_store"),
                    )
                )
    return reports


def reports_equal(a: list[RoundReport], b: list[RoundReport]) -> bool:
    def normalize(reports):
        return [
            (
                r.round_index,
                r.retrieval_enabled,
                r.accuracy,
                tuple(sorted(r.per_object_accuracy.items())),
                r.used_reference_rate,
                tuple(sorted(r.clarification_histogram.items())),
                tuple(r.dialogues),
            )
            for r in reports
        ]

    return normalize(a) == normalize(b)
