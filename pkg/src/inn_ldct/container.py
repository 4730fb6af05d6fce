"""Shared binary layout of RVOL volumes and INNC checkpoints.

    magic (4 bytes) | version u32 LE | header length u32 LE | UTF-8 JSON header | payload
"""

from __future__ import annotations

import json
import struct

_PREAMBLE = struct.Struct("<4sII")


class FormatError(ValueError):
    """Base class for unreadable RVOL/INNC files."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class TruncatedFileError(FormatError):
    """File ends before the fixed preamble or the JSON header is complete."""


class HeaderError(FormatError):
    """JSON header is malformed or describes an impossible layout."""


class PayloadSizeError(FormatError):
    """Payload byte count disagrees with what the header declares."""


def dump_header(header: dict) -> bytes:
    # sorted keys and fixed separators keep files byte-stable
    return json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")


def pack(magic: bytes, version: int, header: dict, payload: bytes) -> bytes:
    head = dump_header(header)
    return _PREAMBLE.pack(magic, version, len(head)) + head + payload


def unpack(blob: bytes, magic: bytes, versions: tuple[int, ...]) -> tuple[int, dict, bytes]:
    """Split ``blob`` into (version, header, payload), validating the preamble."""
    if len(blob) < 4 or blob[:4] != magic:
        raise BadMagicError(f"bad magic: expected {magic!r}, got {blob[:4]!r}")
    if len(blob) < _PREAMBLE.size:
        raise TruncatedFileError(f"truncated file: {len(blob)} bytes, preamble needs {_PREAMBLE.size}")
    _, version, hlen = _PREAMBLE.unpack_from(blob)
    if version not in versions:
        raise UnsupportedVersionError(f"unsupported {magic.decode()} version {version}; known {versions}")
    end = _PREAMBLE.size + hlen
    if len(blob) < end:
        raise TruncatedFileError(f"truncated file: header claims {hlen} bytes, only {len(blob) - _PREAMBLE.size} present")
    try:
        header = json.loads(blob[_PREAMBLE.size:end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderError(f"malformed header: {exc}") from exc
    if not isinstance(header, dict):
        raise HeaderError("malformed header: not a JSON object")
    return version, header, blob[end:]
