"""Uniform access to embedding and chat model backends.

All model I/O flows through :class:`ModelGateway`: it validates inputs,
enforces the provider's advertised embedding dimension, and L2-normalizes
every vector before it reaches the rest of the system.  Two provider
families exist per modality: HTTP providers speaking the JSON wire protocol
documented in ``docs/api.md``, and deterministic in-process mocks used by
the test suite and the simulation harness.  No other module performs
network I/O to model backends.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field
from typing import Callable, Protocol, Sequence

import httpx
import numpy as np
import yaml
from PIL import Image, UnidentifiedImageError

from .errors import (
    ConfigInvalid,
    DimensionMismatch,
    EmptyInput,
    InvalidEmbedding,
    NotFound,
    ProviderRefusal,
    ProviderTimeout,
    ProviderUnreachable,
    UndecodableImage,
    ZeroVector,
)

NORM_TOLERANCE = 1e-6


@dataclass(frozen=True, eq=False)
class Embedding:
    """Unit-normalized embedding vector with its originating model tag.

    ``values`` is a 1-D float32 array; float32 is the at-rest dtype, so a
    vector survives a store round-trip bit-exactly.
    """

    values: np.ndarray
    provider_tag: str

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    @classmethod
    def from_raw(cls, values: Sequence[float], provider_tag: str) -> "Embedding":
        """Normalize a raw provider vector into an at-rest embedding.

        Normalization happens in float64, then the result is cast to
        float32; the float32 norm stays within ``NORM_TOLERANCE`` of 1.
        """
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise InvalidEmbedding("embedding must be a non-empty 1-D vector")
        if not np.all(np.isfinite(arr)):
            raise InvalidEmbedding("embedding contains NaN or Inf")
        norm = float(np.linalg.norm(arr))
        if norm == 0.0:
            raise ZeroVector("cannot normalize the zero vector")
        return cls(values=(arr / norm).astype(np.float32), provider_tag=provider_tag)

    @classmethod
    def from_stored(cls, values: np.ndarray, provider_tag: str) -> "Embedding":
        """Wrap already-normalized float32 values read back from storage."""
        arr = np.asarray(values, dtype=np.float32)
        if not np.all(np.isfinite(arr)):
            raise InvalidEmbedding("stored embedding contains NaN or Inf")
        norm = float(np.linalg.norm(arr.astype(np.float64)))
        if abs(norm - 1.0) > NORM_TOLERANCE:
            raise InvalidEmbedding(f"stored embedding norm {norm!r} is not unit")
        return cls(values=arr, provider_tag=provider_tag)

    def same_values(self, other: "Embedding") -> bool:
        return bool(np.array_equal(self.values, other.values))

    def tolist(self) -> list[float]:
        return [float(v) for v in self.values]


@dataclass(frozen=True)
class ChatMessage:
    role: str  # system | user | assistant
    text: str


@dataclass(frozen=True)
class ChatRequest:
    """Carrier for one prompt-driven model call.

    ``image_refs`` are content-hash references resolved through the image
    store; ``template_id`` names the prompt template the messages were
    rendered from, which is also what the scripted mock matches on.
    """

    messages: tuple[ChatMessage, ...]
    image_refs: tuple[str, ...] = ()
    template_id: str = ""

    def joined_text(self) -> str:
        return "\n".join(m.text for m in self.messages)


class EmbeddingProvider(Protocol):
    dim: int
    tag: str

    def embed_text(self, text: str) -> Sequence[float]: ...

    def embed_image(self, data: bytes) -> Sequence[float]: ...


class ChatProvider(Protocol):
    model_tag: str

    def complete(self, request: ChatRequest) -> str: ...


def stable_seed(*parts: bytes) -> int:
    """64-bit stable hash of the given byte strings."""
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(p)
    return int.from_bytes(h.digest(), "big")


class MockEmbeddingProvider:
    """Deterministic hash-seeded embedding stub.

    Seeds a PRNG from a 64-bit stable hash of the input bytes, draws ``dim``
    standard-normal values and L2-normalizes them.  Pure function of the
    input: no network, no global state, safe under concurrency.
    """

    def __init__(self, dim: int = 576, tag: str | None = None):
        if dim < 1:
            raise ConfigInvalid("embedding dim must be >= 1")
        self.dim = dim
        self.tag = tag or f"mock-{dim}d"

    def _draw(self, domain: bytes, payload: bytes) -> list[float]:
        rng = np.random.default_rng(stable_seed(domain, payload))
        vec = rng.standard_normal(self.dim)
        return (vec / np.linalg.norm(vec)).tolist()

    def embed_text(self, text: str) -> list[float]:
        return self._draw(b"text:", text.encode("utf-8"))

    def embed_image(self, data: bytes) -> list[float]:
        return self._draw(b"image:", data)


class HttpEmbeddingProvider:
    """JSON-over-HTTP embedding backend.

    ``POST {endpoint}/embed/text {"text": ...}`` and
    ``POST {endpoint}/embed/image`` (binary body, image/* content type),
    both answering ``{"values": [...]}``.
    """

    def __init__(self, endpoint: str, dim: int, tag: str, timeout: float = 30.0):
        self.endpoint = endpoint.rstrip("/")
        self.dim = dim
        self.tag = tag
        self._client = httpx.Client(timeout=timeout)

    def _post(self, path: str, **kwargs) -> list[float]:
        try:
            resp = self._client.post(self.endpoint + path, **kwargs)
            resp.raise_for_status()
            return list(resp.json()["values"])
        except httpx.TimeoutException as exc:
            raise ProviderTimeout(f"embedding call timed out: {exc}") from exc
        except (httpx.TransportError, httpx.HTTPStatusError, KeyError, ValueError) as exc:
            raise ProviderUnreachable(f"embedding provider failed: {exc}") from exc

    def embed_text(self, text: str) -> list[float]:
        return self._post("/embed/text", json={"text": text})

    def embed_image(self, data: bytes) -> list[float]:
        content_type = f"image/{detect_image_format(data)}"
        return self._post("/embed/image", content=data, headers={"Content-Type": content_type})


@dataclass(frozen=True)
class ScriptedRule:
    """One reply rule: template match + substring match -> canned reply."""

    template_id: str
    match_substring: str
    reply: str

    def matches(self, request: ChatRequest) -> bool:
        if self.template_id not in ("*", request.template_id):
            return False
        return self.match_substring in request.joined_text()


class ScriptedChatProvider:
    """Chat stub answering from an ordered rule list (first match wins).

    Unmatched requests yield an empty completion, which the gateway turns
    into ``ProviderRefusal`` so that missing rules fail loudly in tests.
    """

    def __init__(self, rules: Sequence[ScriptedRule], model_tag: str = "scripted-mock"):
        self.rules = list(rules)
        self.model_tag = model_tag

    @classmethod
    def from_file(cls, path: str, model_tag: str = "scripted-mock") -> "ScriptedChatProvider":
        with open(path, "r", encoding="utf-8") as fh:
            data = yaml.safe_load(fh) or {}
        raw = data.get("rules", data if isinstance(data, list) else [])
        rules = [
            ScriptedRule(
                template_id=str(r.get("template_id", "*")),
                match_substring=str(r.get("match_substring", "")),
                reply=str(r["reply"]),
            )
            for r in raw
        ]
        return cls(rules, model_tag=model_tag)

    def complete(self, request: ChatRequest) -> str:
        for rule in self.rules:
            if rule.matches(request):
                return rule.reply
        return ""


class HttpChatProvider:
    """JSON-over-HTTP chat backend.

    ``POST {endpoint}/chat {"messages": [...], "images": [b64], "model": ...}``
    answering ``{"text": "..."}``.
    """

    def __init__(self, endpoint: str, model_tag: str, timeout: float = 30.0):
        self.endpoint = endpoint.rstrip("/")
        self.model_tag = model_tag
        self._client = httpx.Client(timeout=timeout)
        self.image_encoder: Callable[[str], str] | None = None

    def complete(self, request: ChatRequest) -> str:
        images = []
        if self.image_encoder is not None:
            images = [self.image_encoder(ref) for ref in request.image_refs]
        payload = {
            "messages": [{"role": m.role, "text": m.text} for m in request.messages],
            "images": images,
            "template_id": request.template_id,
            "model": self.model_tag,
        }
        try:
            resp = self._client.post(self.endpoint + "/chat", json=payload)
            resp.raise_for_status()
            return str(resp.json()["text"])
        except httpx.TimeoutException as exc:
            raise ProviderTimeout(f"chat call timed out: {exc}") from exc
        except (httpx.TransportError, httpx.HTTPStatusError, KeyError, ValueError) as exc:
            raise ProviderUnreachable(f"chat provider failed: {exc}") from exc


def detect_image_format(data: bytes) -> str:
    """Return the lowercase format name of an encoded image, validating it."""
    try:
        with Image.open(io.BytesIO(data)) as img:
            fmt = (img.format or "png").lower()
            if img.width < 1 or img.height < 1:
                raise UndecodableImage("image has zero extent")
            return fmt
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise UndecodableImage(f"cannot decode image: {exc}") from exc


@dataclass
class ModelGateway:
    """Validating front door for all model calls.

    Checks inputs, rejects provider responses that violate the advertised
    dimension, normalizes every embedding, and resolves chat image
    references through ``image_loader`` when one is wired in.
    """

    embedder: EmbeddingProvider
    chatter: ChatProvider
    image_loader: Callable[[str], bytes] | None = field(default=None)

    def embed_text(self, text: str) -> Embedding:
        if not text or not text.strip():
            raise EmptyInput("text to embed is empty")
        values = self.embedder.embed_text(text)
        return self._finish(values)

    def embed_image(self, data: bytes) -> Embedding:
        detect_image_format(data)  # raises UndecodableImage on bad bytes
        values = self.embedder.embed_image(data)
        return self._finish(values)

    def _finish(self, values: Sequence[float]) -> Embedding:
        if len(values) != self.embedder.dim:
            raise DimensionMismatch(
                f"provider returned {len(values)} values, advertised dim is {self.embedder.dim}"
            )
        return Embedding.from_raw(values, provider_tag=self.embedder.tag)

    def chat(self, request: ChatRequest) -> str:
        if not request.messages:
            raise EmptyInput("chat request has no messages")
        for m in request.messages:
            if m.role not in ("system", "user", "assistant"):
                raise EmptyInput(f"invalid message role {m.role!r}")
        if self.image_loader is not None:
            for ref in request.image_refs:
                self.image_loader(ref)  # raises NotFound on dangling refs
        completion = self.chatter.complete(request)
        if not completion or not completion.strip():
            raise ProviderRefusal("provider returned an empty completion")
        return completion

    @property
    def model_tag(self) -> str:
        return self.chatter.model_tag

    @property
    def provider_tag(self) -> str:
        return self.embedder.tag

    @property
    def dim(self) -> int:
        return self.embedder.dim


__all__ = [
    "ChatMessage",
    "ChatProvider",
    "ChatRequest",
    "Embedding",
    "EmbeddingProvider",
    "HttpChatProvider",
    "HttpEmbeddingProvider",
    "MockEmbeddingProvider",
    "ModelGateway",
    "NotFound",
    "ScriptedChatProvider",
    "ScriptedRule",
    "detect_image_format",
    "stable_seed",
]
