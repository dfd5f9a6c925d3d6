"""Shared container layout for the binary artifacts.

``magic | u32 LE header length | UTF-8 JSON header | little-endian float64 payload``
"""

import json
import struct

import numpy as np

from .errors import FormatError


def pack(magic, header, arrays):
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in arrays)
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return magic + struct.pack("<I", len(head)) + head + payload


def unpack(data, magic, what):
    """Split a container into ``(header dict, payload memoryview)``."""
    if len(data) < len(magic) + 4 or data[:len(magic)] != magic:
        raise FormatError(f"{what}: bad magic, expected {magic.decode()}")
    (hlen,) = struct.unpack_from("<I", data, len(magic))
    start = len(magic) + 4
    if len(data) < start + hlen:
        raise FormatError(f"{what}: header truncated")
    try:
        header = json.loads(bytes(data[start:start + hlen]).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{what}: header is not valid JSON ({exc})") from None
    if not isinstance(header, dict):
        raise FormatError(f"{what}: header must be a JSON object")
    return header, memoryview(data)[start + hlen:]
