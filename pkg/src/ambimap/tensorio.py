"""CAT1 binary format and in-memory types for attention tensors.

A CAT1 file holds one layer's post-softmax attention tensor (heads x
queries x keys, float32) plus a role tag per query position and an
optional string table with the surface text of content queries.

Layout (all integers little-endian):

    bytes 0..3    magic b"CAT1"
    bytes 4..5    u16 format version (currently 1)
    bytes 6..25   u32 layer_index, num_heads, num_queries, num_keys,
                  num_image_tokens
    bytes 26..63  reserved, zero
    then          4*H*Q*K payload bytes, float32, row-major [head][query][key]
    then          Q role bytes (codes below)
    then          optional string table: u32 byte length of the table body,
                  body = u32 count + count * (u32 length + UTF-8 bytes)

The fixed-width header lets every dimension be validated before the payload
is read. Aggregation math happens in float64 regardless of the f32 storage.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Optional

import numpy as np

MAGIC = b"CAT1"
VERSION = 1
HEADER_SIZE = 64

ROLE_CONTENT = "content"
ROLE_CONDITIONING = "conditioning"
ROLE_EOS = "eos"
ROLE_PAD = "pad"
ROLE_IMAGE = "image"

ROLE_TO_CODE = {
    ROLE_CONTENT: 0,
    ROLE_CONDITIONING: 1,
    ROLE_EOS: 2,
    ROLE_PAD: 3,
    ROLE_IMAGE: 4,
}
CODE_TO_ROLE = {v: k for k, v in ROLE_TO_CODE.items()}

SOFTMAX_ROW_TOL = 1e-5


class FormatError(ValueError):
    """Raised when a byte stream is not a well-formed CAT1 file."""


class DimensionMismatch(ValueError):
    """Raised when tensor and token metadata disagree on shapes."""


@dataclass(frozen=True)
class AttentionTensor:
    """Raw decoder attention for one layer: values[h, q, k] >= 0."""

    layer_index: int
    num_heads: int
    num_queries: int
    num_keys: int
    num_image_tokens: int
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.ndim != 3:
            raise ValueError(f"values must be 3-D, got ndim={v.ndim}")
        if v.shape != (self.num_heads, self.num_queries, self.num_keys):
            raise ValueError(
                f"values shape {v.shape} does not match header "
                f"({self.num_heads}, {self.num_queries}, {self.num_keys})"
            )
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class TokenMeta:
    """Role tag per query position, plus optional surface strings."""

    query_roles: list[str]
    text_strings: Optional[list[str]] = None

    def __post_init__(self):
        for r in self.query_roles:
            if r not in ROLE_TO_CODE:
                raise ValueError(f"unknown query role {r!r}")


@dataclass
class ValidationReport:
    """Every violated invariant, one human-readable line each."""

    violations: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, message: str) -> None:
        self.violations.append(message)


def expected_file_size(t: AttentionTensor, m: TokenMeta) -> int:
    """Exact byte size write_tensor will produce for (t, m)."""
    size = HEADER_SIZE + 4 * t.num_heads * t.num_queries * t.num_keys + t.num_queries
    if m.text_strings is not None:
        body = 4
        for s in m.text_strings:
            body += 4 + len(s.encode("utf-8"))
        size += 4 + body
    return size


def write_tensor(t: AttentionTensor, m: TokenMeta, destination: BinaryIO) -> int:
    """Serialize (t, m) as CAT1. Returns the number of bytes written."""
    if len(m.query_roles) != t.num_queries:
        raise DimensionMismatch(
            f"{len(m.query_roles)} roles for {t.num_queries} queries"
        )
    if t.layer_index < 0:
        raise ValueError("layer_index must be >= 0 for serialization")

    header = bytearray(HEADER_SIZE)
    header[0:4] = MAGIC
    struct.pack_into(
        "<HIIIII",
        header,
        4,
        VERSION,
        t.layer_index,
        t.num_heads,
        t.num_queries,
        t.num_keys,
        t.num_image_tokens,
    )
    written = destination.write(bytes(header))

    payload = np.ascontiguousarray(t.values, dtype="<f4")
    written += destination.write(payload.tobytes())

    written += destination.write(bytes(ROLE_TO_CODE[r] for r in m.query_roles))

    if m.text_strings is not None:
        body = bytearray()
        body += struct.pack("<I", len(m.text_strings))
        for s in m.text_strings:
            raw = s.encode("utf-8")
            body += struct.pack("<I", len(raw))
            body += raw
        written += destination.write(struct.pack("<I", len(body)))
        written += destination.write(bytes(body))
    return written


def _read_exact(source: BinaryIO, n: int, what: str) -> bytes:
    data = source.read(n)
    if len(data) != n:
        raise FormatError(f"truncated {what}: expected {n} bytes, got {len(data)}")
    return data


def read_tensor(source: BinaryIO) -> tuple[AttentionTensor, TokenMeta]:
    """Inverse of write_tensor; validates header fields against the payload."""
    header = _read_exact(source, HEADER_SIZE, "header")
    if header[0:4] != MAGIC:
        raise FormatError(f"bad magic {header[0:4]!r}, expected {MAGIC!r}")
    version, layer_index, h, q, k, l_img = struct.unpack_from("<HIIIII", header, 4)
    if version != VERSION:
        raise FormatError(f"unsupported CAT1 version {version}")
    if h < 1 or q < 1 or k < 1:
        raise FormatError(f"degenerate dimensions H={h} Q={q} K={k}")
    if l_img > k:
        raise FormatError(f"num_image_tokens {l_img} exceeds num_keys {k}")

    payload = _read_exact(source, 4 * h * q * k, "payload")
    values = np.frombuffer(payload, dtype="<f4").reshape(h, q, k)
    if np.isnan(values).any():
        raise FormatError("payload contains NaN")
    if (values < 0).any():
        raise FormatError("payload contains negative values")

    role_bytes = _read_exact(source, q, "role section")
    roles = []
    for i, code in enumerate(role_bytes):
        if code not in CODE_TO_ROLE:
            raise FormatError(f"unknown role code {code} at query {i}")
        roles.append(CODE_TO_ROLE[code])

    text_strings = None
    table_len_raw = source.read(4)
    if table_len_raw:
        if len(table_len_raw) != 4:
            raise FormatError("truncated string-table length prefix")
        (table_len,) = struct.unpack("<I", table_len_raw)
        body = _read_exact(source, table_len, "string table")
        (count,) = struct.unpack_from("<I", body, 0)
        offset = 4
        text_strings = []
        for _ in range(count):
            if offset + 4 > len(body):
                raise FormatError("string table count exceeds table length")
            (n,) = struct.unpack_from("<I", body, offset)
            offset += 4
            if offset + n > len(body):
                raise FormatError("string entry exceeds table length")
            text_strings.append(body[offset : offset + n].decode("utf-8"))
            offset += n

    t = AttentionTensor(
        layer_index=layer_index,
        num_heads=h,
        num_queries=q,
        num_keys=k,
        num_image_tokens=l_img,
        values=values,
    )
    return t, TokenMeta(query_roles=roles, text_strings=text_strings)


def validate_tensor(t: AttentionTensor, softmax_rows: bool = False) -> ValidationReport:
    """Check every AttentionTensor invariant; pure, report-based.

    With softmax_rows set, additionally requires each (head, query) row to
    sum to 1 within 1e-5. Masked keys hold exact zeros in decoder output,
    so the sum over all keys equals the sum over unmasked keys.
    """
    report = ValidationReport()
    if t.num_heads < 1:
        report.add(f"num_heads must be >= 1, got {t.num_heads}")
    if t.num_queries < 1:
        report.add(f"num_queries must be >= 1, got {t.num_queries}")
    if t.num_image_tokens > t.num_keys:
        report.add(
            f"num_image_tokens {t.num_image_tokens} exceeds num_keys {t.num_keys}"
        )

    values = np.asarray(t.values, dtype=np.float64)
    nan_idx = np.argwhere(np.isnan(values))
    for h, q, k in nan_idx:
        report.add(f"NaN value at [{h},{q},{k}]")
    neg_idx = np.argwhere(values < 0)
    for h, q, k in neg_idx:
        report.add(f"negative value {values[h, q, k]:g} at [{h},{q},{k}]")

    if softmax_rows and not nan_idx.size:
        sums = values.sum(axis=2)
        bad = np.argwhere(np.abs(sums - 1.0) > SOFTMAX_ROW_TOL)
        for h, q in bad:
            report.add(
                f"row sum {sums[h, q]:.8f} != 1 at head {h}, query {q}"
            )
    return report
