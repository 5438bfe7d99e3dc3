"""Binary on-disk record codec for the event log.

Frame layout (all integers little-endian, documented in
``docs/storage_format.md``):

    frame := u32 body_len | u32 crc32(body) | body
    body  := u16 magic 0x4945 | u8 version | u8 flags
             | f64 created_at
             | f64 x0 | f64 y0 | f64 x1 | f64 y1        (ratio bounding box)
             | u32 dim
             | dim * f32 e_img | dim * f32 e_text       (unit vectors)
             | str event_id | str session_id | str image_ref
             | str provider_tag | str question | str answer
    str   := u32 byte_len | utf-8 bytes

The CRC lets the reader detect a torn tail after a crash and resume
appending from the last intact record.
"""

from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import StorageFailure
from .store_types import BoundingBox, InteractionEvent
from .gateway import Embedding

MAGIC = 0x4945
VERSION = 1
FLAG_LOCALIZATION_FALLBACK = 0x01

_FIXED_HEAD = struct.Struct("<HBBd4dI")
_FRAME_HEAD = struct.Struct("<II")


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def encode_record(event: InteractionEvent) -> bytes:
    flags = FLAG_LOCALIZATION_FALLBACK if event.localization_flagged else 0
    bbox = event.subject_bbox
    body = bytearray(
        _FIXED_HEAD.pack(
            MAGIC,
            VERSION,
            flags,
            event.created_at,
            bbox.x0,
            bbox.y0,
            bbox.x1,
            bbox.y1,
            event.e_img.dim,
        )
    )
    body += event.e_img.values.astype("<f4").tobytes()
    body += event.e_text.values.astype("<f4").tobytes()
    for s in (
        event.event_id,
        event.session_id,
        event.image_ref,
        event.provider_tag,
        event.question,
        event.answer,
    ):
        body += _pack_str(s)
    return _FRAME_HEAD.pack(len(body), zlib.crc32(bytes(body))) + bytes(body)


class _Cursor:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise StorageFailure("record body truncated")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def take_str(self) -> str:
        (n,) = struct.unpack("<I", self.take(4))
        return self.take(n).decode("utf-8")


def decode_record(body: bytes) -> InteractionEvent:
    cur = _Cursor(body)
    magic, version, flags, created_at, x0, y0, x1, y1, dim = _FIXED_HEAD.unpack(
        cur.take(_FIXED_HEAD.size)
    )
    if magic != MAGIC:
        raise StorageFailure(f"bad record magic 0x{magic:04x}")
    if version != VERSION:
        raise StorageFailure(f"unsupported record version {version}")
    e_img = np.frombuffer(cur.take(dim * 4), dtype="<f4").copy()
    e_text = np.frombuffer(cur.take(dim * 4), dtype="<f4").copy()
    event_id = cur.take_str()
    session_id = cur.take_str()
    image_ref = cur.take_str()
    provider_tag = cur.take_str()
    question = cur.take_str()
    answer = cur.take_str()
    return InteractionEvent(
        event_id=event_id,
        image_ref=image_ref,
        subject_bbox=BoundingBox(x0, y0, x1, y1),
        question=question,
        answer=answer,
        e_img=Embedding.from_stored(e_img, provider_tag),
        e_text=Embedding.from_stored(e_text, provider_tag),
        created_at=created_at,
        session_id=session_id,
        provider_tag=provider_tag,
        localization_flagged=bool(flags & FLAG_LOCALIZATION_FALLBACK),
    )


def scan_frames(data: bytes):
    """Yield (offset, body) for each intact frame; stop at a torn tail.

    Returns via StopIteration the byte offset just past the last intact
    frame, which the store uses as the resume-append position.
    """
    pos = 0
    while True:
        if pos + _FRAME_HEAD.size > len(data):
            return pos
        body_len, crc = _FRAME_HEAD.unpack(data[pos : pos + _FRAME_HEAD.size])
        start = pos + _FRAME_HEAD.size
        end = start + body_len
        if end > len(data):
            return pos
        body = data[start:end]
        if zlib.crc32(body) != crc:
            return pos
        yield pos, body
        pos = end
