"""Domain types for the history event database."""

from __future__ import annotations

from dataclasses import dataclass, field

from .errors import InvalidEvent
from .gateway import Embedding

DEFAULT_MIN_BBOX_AREA = 1e-4


@dataclass(frozen=True)
class BoundingBox:
    """Subject region in ratio form: fractions of image width/height."""

    x0: float
    y0: float
    x1: float
    y1: float

    def area(self) -> float:
        return (self.x1 - self.x0) * (self.y1 - self.y0)

    def is_valid(self, min_area: float = DEFAULT_MIN_BBOX_AREA) -> bool:
        return (
            0.0 <= self.x0 < self.x1 <= 1.0
            and 0.0 <= self.y0 < self.y1 <= 1.0
            and self.area() >= min_area
        )

    def clamped(self) -> "BoundingBox":
        clip = lambda v: min(1.0, max(0.0, v))  # noqa: E731
        return BoundingBox(clip(self.x0), clip(self.y0), clip(self.x1), clip(self.y1))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)

    FULL_IMAGE: "BoundingBox" = None  # type: ignore[assignment]


BoundingBox.FULL_IMAGE = BoundingBox(0.0, 0.0, 1.0, 1.0)


@dataclass(frozen=True, eq=False)
class InteractionEvent:
    """One distilled, corrected dialogue held in the history database.

    Pairs the original image reference and subject region with the concise
    question, the human-verified answer, and the two embeddings used for
    dual-modality retrieval.
    """

    event_id: str
    image_ref: str
    subject_bbox: BoundingBox
    question: str
    answer: str
    e_img: Embedding
    e_text: Embedding
    created_at: float  # unix seconds, UTC
    session_id: str
    provider_tag: str
    localization_flagged: bool = False

    def validate(self, min_bbox_area: float = DEFAULT_MIN_BBOX_AREA) -> None:
        if not self.question.strip():
            raise InvalidEvent("event question is empty")
        if not self.answer.strip():
            raise InvalidEvent("event answer is empty")
        if not self.subject_bbox.is_valid(min_bbox_area):
            raise InvalidEvent(f"invalid bounding box {self.subject_bbox.as_tuple()}")
        if self.e_img.dim != self.e_text.dim:
            raise InvalidEvent(
                f"embedding dims differ: image {self.e_img.dim}, text {self.e_text.dim}"
            )
        if self.e_img.provider_tag != self.provider_tag or self.e_text.provider_tag != self.provider_tag:
            raise InvalidEvent("embedding provider tags do not match the event's tag")
        if not self.event_id or not self.image_ref:
            raise InvalidEvent("event_id and image_ref are required")

    def equals(self, other: "InteractionEvent") -> bool:
        """Field-wise equality with bit-exact embedding comparison."""
        return (
            self.event_id == other.event_id
            and self.image_ref == other.image_ref
            and self.subject_bbox == other.subject_bbox
            and self.question == other.question
            and self.answer == other.answer
            and self.created_at == other.created_at
            and self.session_id == other.session_id
            and self.provider_tag == other.provider_tag
            and self.localization_flagged == other.localization_flagged
            and self.e_img.same_values(other.e_img)
            and self.e_text.same_values(other.e_text)
        )


@dataclass(frozen=True)
class RetrievalConfig:
    """Dual thresholds for a retrieval call."""

    tau_img: float = 0.80
    tau_text: float = 0.75
    max_candidates: int = 100  # reserved for future top-k surfaces; single-best
    # retrieval only ever needs the running maximum

    def validate(self) -> None:
        if not (-1.0 <= self.tau_img <= 1.0) or not (-1.0 <= self.tau_text <= 1.0):
            raise InvalidEvent("retrieval thresholds must lie in [-1, 1]")
        if self.max_candidates < 1:
            raise InvalidEvent("max_candidates must be positive")


@dataclass(frozen=True)
class RetrievalMatch:
    """A stored event that cleared both thresholds, with its scores."""

    event: InteractionEvent
    sim_img: float
    sim_text: float


@dataclass
class StoreStats:
    count: int
    dim: int | None
    provider_tag: str | None
    data_dir: str = ""
    extra: dict = field(default_factory=dict)
