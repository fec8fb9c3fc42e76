"""Freestanding CAT1 writer.

Implements the published byte format so this package stays decoupled
from the analysis toolkit: magic "CAT1", u16 version, five little-endian
u32 header fields (layer, heads, queries, keys, image tokens) padded to
a 64-byte header, float32 payload in [head][query][key] order, one role
byte per query, then an optional length-prefixed UTF-8 string table.
"""

from __future__ import annotations

import struct
from typing import BinaryIO, Optional, Sequence

import numpy as np

MAGIC = b"CAT1"
VERSION = 1
HEADER_SIZE = 64

ROLE_CODES = {"content": 0, "conditioning": 1, "eos": 2, "pad": 3, "image": 4}


def write_cat1(
    destination: BinaryIO,
    layer_index: int,
    values: np.ndarray,
    num_image_tokens: int,
    roles: Sequence[str],
    strings: Optional[Sequence[str]] = None,
) -> int:
    """Serialize one layer's attention tensor; returns bytes written."""
    values = np.asarray(values)
    if values.ndim != 3:
        raise ValueError(f"attention must be (heads, queries, keys), got {values.shape}")
    h, q, k = values.shape
    if len(roles) != q:
        raise ValueError(f"{len(roles)} roles for {q} queries")
    if num_image_tokens > k:
        raise ValueError(f"{num_image_tokens} image tokens exceed {k} keys")

    header = bytearray(HEADER_SIZE)
    header[0:4] = MAGIC
    struct.pack_into("<HIIIII", header, 4, VERSION, layer_index, h, q, k, num_image_tokens)
    written = destination.write(bytes(header))
    written += destination.write(np.ascontiguousarray(values, dtype="<f4").tobytes())
    written += destination.write(bytes(ROLE_CODES[r] for r in roles))
    if strings is not None:
        body = bytearray(struct.pack("<I", len(strings)))
        for s in strings:
            raw = s.encode("utf-8")
            body += struct.pack("<I", len(raw))
            body += raw
        written += destination.write(struct.pack("<I", len(body)))
        written += destination.write(bytes(body))
    return written
