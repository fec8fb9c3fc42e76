"""Attention aggregation into a spatial ambiguity map.

The pipeline, per sample:

  1. select the content query positions, dropping conditioning/eos/pad
     (and image) roles;
  2. renormalize each (head, query) row over the image keys so its image
     attention sums to 1, removing head-magnitude dominance:
     abar[h,q,k] = a[h,q,k] / (sum_j<L_img a[h,q,j] + eps);
  3. mean-aggregate over heads and selected queries into a vector v of
     length L_img;
  4. reshape v row-major onto the G x G patch grid and min-max normalize.

Renormalizing by image mass rather than the full softmax row means v sums
to ~1 whenever rows put non-negligible mass on the image, independent of
how much attention text keys absorb. A row whose image mass is comparable
to eps stays near zero instead of becoming a distribution; the raw
pre-normalization sum is kept in the trace so such samples are visible.

Everything is computed in float64 with a fixed reduction order (keys
innermost, then queries, then heads) regardless of storage precision.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

from ambimap.tensorio import ROLE_CONTENT, AttentionTensor, TokenMeta

DEFAULT_EPSILON = 1e-8
MAP_MAGIC = b"AMF1"


class NoContentQueries(ValueError):
    """Aggregation is undefined without at least one content query."""


@dataclass(frozen=True)
class AmbiguityMap:
    """Min-max-normalized attention mass over the G x G patch grid."""

    grid_side: int
    values: np.ndarray
    source_layer: int
    pre_normalization_sum: float

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.shape != (self.grid_side, self.grid_side):
            raise ValueError(f"map shape {v.shape} != ({self.grid_side}, {self.grid_side})")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class AggregationTrace:
    """Intermediates kept for interpretability output."""

    content_query_indices: list[int]
    renormalized: np.ndarray  # (H, |selected|, L_img)
    pooled: np.ndarray  # (L_img,)
    epsilon: float


def select_queries(meta: TokenMeta) -> list[int]:
    """Ascending indices of content-role queries; image roles never qualify."""
    selected = [i for i, role in enumerate(meta.query_roles) if role == ROLE_CONTENT]
    if not selected:
        raise NoContentQueries("no content queries to aggregate over")
    return selected


def renormalize_per_head(
    t: AttentionTensor, queries: list[int], epsilon: float = DEFAULT_EPSILON
) -> np.ndarray:
    """Per-head L1 renormalization over the image keys, float64."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    for q in queries:
        if not 0 <= q < t.num_queries:
            raise ValueError(f"query index {q} outside [0, {t.num_queries})")
    img = np.asarray(t.values, dtype=np.float64)[:, queries, : t.num_image_tokens]
    mass = img.sum(axis=2, keepdims=True)
    return img / (mass + epsilon)


def aggregate_mean(renorm: np.ndarray, queries: list[int]) -> np.ndarray:
    """Mean over heads and selected queries: v[k] = sum_h sum_q abar / (H |Q|)."""
    if not queries:
        raise NoContentQueries("empty query list")
    h, nq, _ = renorm.shape
    if nq != len(queries):
        raise ValueError(f"renorm has {nq} query rows for {len(queries)} queries")
    return renorm.sum(axis=(0, 1)) / float(h * nq)


def finalize_map(v: np.ndarray, grid_side: int, source_layer: int = -1) -> AmbiguityMap:
    """Reshape row-major to the grid and min-max normalize to [0, 1].

    A constant input carries no spatial evidence and maps to all zeros,
    which also avoids the 0/0 at zero range.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.shape != (grid_side**2,):
        raise ValueError(f"vector length {v.shape} != grid_side^2 = {grid_side**2}")
    grid = v.reshape(grid_side, grid_side)
    lo = grid.min()
    hi = grid.max()
    if hi - lo == 0.0:
        normalized = np.zeros_like(grid)
    else:
        normalized = (grid - lo) / (hi - lo)
    return AmbiguityMap(
        grid_side=grid_side,
        values=normalized,
        source_layer=source_layer,
        pre_normalization_sum=float(v.sum()),
    )


def extract_map(
    t: AttentionTensor,
    meta: TokenMeta,
    grid_side: int,
    epsilon: float = DEFAULT_EPSILON,
) -> tuple[AmbiguityMap, AggregationTrace]:
    """Full pipeline: select, renormalize, pool, reshape, normalize."""
    if t.num_image_tokens != grid_side**2:
        raise ValueError(
            f"tensor has {t.num_image_tokens} image tokens, expected {grid_side**2}"
        )
    queries = select_queries(meta)
    renorm = renormalize_per_head(t, queries, epsilon)
    pooled = aggregate_mean(renorm, queries)
    amap = finalize_map(pooled, grid_side, source_layer=t.layer_index)
    trace = AggregationTrace(
        content_query_indices=queries,
        renormalized=renorm,
        pooled=pooled,
        epsilon=epsilon,
    )
    return amap, trace


def write_map(m: AmbiguityMap, destination: BinaryIO) -> int:
    """Portable float image: b"AMF1" + u32 grid side, then G*G f32 row-major."""
    written = destination.write(MAP_MAGIC)
    written += destination.write(struct.pack("<I", m.grid_side))
    written += destination.write(
        np.ascontiguousarray(m.values, dtype="<f4").tobytes()
    )
    return written


def read_map(source: BinaryIO) -> AmbiguityMap:
    """Read an AMF1 map file; layer and pre-normalization sum are unknown."""
    header = source.read(8)
    if len(header) != 8 or header[:4] != MAP_MAGIC:
        raise ValueError(f"not an AMF1 map file (header {header!r})")
    (grid_side,) = struct.unpack("<I", header[4:])
    payload = source.read(4 * grid_side * grid_side)
    if len(payload) != 4 * grid_side * grid_side:
        raise ValueError(
            f"truncated map payload: expected {4 * grid_side * grid_side} bytes, "
            f"got {len(payload)}"
        )
    values = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return AmbiguityMap(
        grid_side=grid_side,
        values=values.reshape(grid_side, grid_side),
        source_layer=-1,
        pre_normalization_sum=float("nan"),
    )
