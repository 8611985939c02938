"""Little-endian, length-prefixed building blocks for the binary file formats.

Layout of every file: 8 magic bytes, a ``<u8`` byte count followed by a
UTF-8 JSON header, then a sequence of arrays. Each array is a ``<u8``
element count followed by that many ``<f8`` values.

The header carries a ``checksum`` field: the SHA-256 of the canonical JSON
of the other header fields followed by the array bytes. It makes any
single-byte corruption, including one that still parses as JSON, a
detectable format error.
"""
from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .errors import FormatError, UnsupportedVersionError

_U64 = struct.Struct("<Q")


def _canonical(header: dict) -> bytes:
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def _checksum(header: dict, payload: bytes) -> str:
    body = {k: v for k, v in header.items() if k != "checksum"}
    return hashlib.sha256(_canonical(body) + payload).hexdigest()


def encode_header(header: dict) -> bytes:
    text = _canonical(header)
    return _U64.pack(len(text)) + text


def encode_array(values) -> bytes:
    arr = np.ascontiguousarray(values, dtype="<f8").ravel()
    return _U64.pack(arr.size) + arr.tobytes()


def encode_file(magic: bytes, header: dict, arrays) -> bytes:
    payload = b"".join(encode_array(a) for a in arrays)
    header = {**header, "checksum": _checksum(header, payload)}
    return magic + encode_header(header) + payload


class Reader:
    """Cursor over a byte buffer that raises FormatError on any short read."""

    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.data):
            raise FormatError(f"{self.what}: truncated at byte {self.pos} (wanted {n} more)")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def magic(self, expected: bytes) -> None:
        got = self.take(len(expected))
        if got != expected:
            raise FormatError(f"{self.what}: bad magic {got!r}, expected {expected!r}")

    def header(self, version: int) -> dict:
        (size,) = _U64.unpack(self.take(8))
        if size > len(self.data):
            raise FormatError(f"{self.what}: header length {size} exceeds file size")
        raw = self.take(size)
        try:
            header = json.loads(raw.decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"{self.what}: unreadable header ({exc})") from None
        if not isinstance(header, dict):
            raise FormatError(f"{self.what}: header is not a JSON object")
        if _canonical(header) != raw:
            # catches edits that parse to the same values, e.g. surplus float digits
            raise FormatError(f"{self.what}: header is not in canonical form")
        found = header.get("format_version")
        if found != version:
            raise UnsupportedVersionError(f"{self.what}: unsupported version {found!r}")
        if header.get("checksum") != _checksum(header, self.data[self.pos:]):
            raise FormatError(f"{self.what}: checksum mismatch (file corrupted)")
        return header

    def array(self, expected_size: int | None = None) -> np.ndarray:
        (count,) = _U64.unpack(self.take(8))
        if expected_size is not None and count != expected_size:
            raise FormatError(f"{self.what}: array of {count} values, expected {expected_size}")
        raw = self.take(8 * count)
        return np.frombuffer(raw, dtype="<f8").astype(np.float64)

    def finish(self) -> None:
        if self.pos != len(self.data):
            raise FormatError(f"{self.what}: {len(self.data) - self.pos} trailing bytes")



def header_field(header: dict, key: str, what: str):
    try:
        return header[key]
    except KeyError:
        raise FormatError(f"{what}: header lacks {key!r}") from None
