"""Canonical binary encoding for signed structures, plus small text codecs.

Signed forms are built with :func:`pack_fields`: a domain tag followed by
typed, length-prefixed fields in a fixed order.  The same inputs always give
the same bytes, which is what signatures are computed over.  JSON renderings
of the same structures are for transport and debugging only.
"""

from __future__ import annotations

import base64
import json
import struct
from typing import Any, Iterable

_LEN = struct.Struct(">I")


def _lp(data: bytes) -> bytes:
    return _LEN.pack(len(data)) + data


def _field(value: Any) -> bytes:
    if isinstance(value, bool):
        return b"T" if value else b"F"
    if isinstance(value, bytes):
        return b"B" + _lp(value)
    if isinstance(value, str):
        return b"S" + _lp(value.encode("utf-8"))
    if isinstance(value, int):
        nbytes = (value.bit_length() + 8) // 8
        return b"I" + _lp(value.to_bytes(nbytes, "big", signed=True))
    if isinstance(value, (list, tuple, frozenset, set)):
        items = sorted(value) if isinstance(value, (frozenset, set)) else list(value)
        return b"L" + _LEN.pack(len(items)) + b"".join(_field(v) for v in items)
    if value is None:
        return b"N"
    raise TypeError(f"cannot canonically encode {type(value).__name__}")


def pack_fields(tag: bytes, *fields: Any) -> bytes:
    return _lp(tag) + b"".join(_field(f) for f in fields)


class _Reader:
    def __init__(self, data: bytes) -> None:
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ValueError("truncated canonical encoding")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def lp(self) -> bytes:
        (n,) = _LEN.unpack(self.take(4))
        return self.take(n)

    def value(self) -> Any:
        kind = self.take(1)
        if kind == b"T":
            return True
        if kind == b"F":
            return False
        if kind == b"N":
            return None
        if kind == b"B":
            return self.lp()
        if kind == b"S":
            return self.lp().decode("utf-8")
        if kind == b"I":
            return int.from_bytes(self.lp(), "big", signed=True)
        if kind == b"L":
            (n,) = _LEN.unpack(self.take(4))
            return [self.value() for _ in range(n)]
        raise ValueError(f"unknown field kind {kind!r}")


def unpack_fields(tag: bytes, data: bytes) -> list[Any]:
    reader = _Reader(data)
    if reader.lp() != tag:
        raise ValueError(f"expected tag {tag!r}")
    out = []
    while reader.pos < len(data):
        out.append(reader.value())
    return out


def b64e(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def b64d(text: str) -> bytes:
    return base64.b64decode(text.encode("ascii"), validate=True)


def hex128(value: int) -> str:
    return f"{value:032x}"


def parse_hex128(text: str) -> int:
    if len(text) != 32:
        raise ValueError(f"expected 32 hex digits, got {len(text)}")
    return int(text, 16)


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def ndjson_lines(objs: Iterable[Any]) -> str:
    return "".join(canonical_json(o) + "\n" for o in objs)
