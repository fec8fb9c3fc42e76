"""Attention-map ambiguity toolkit.

Turns a multimodal decoder's text-to-image attention into a spatial
ambiguity signal: tensor extraction and serialization, per-head
renormalization and mean aggregation into a grid map, a small CNN probe
scoring the map, a location-token bounding-box codec, and the interactive
grounding dialog loop built on top.
"""

from ambimap.tensorio import (
    AttentionTensor,
    TokenMeta,
    read_tensor,
    validate_tensor,
    write_tensor,
)
from ambimap.aggregate import AmbiguityMap, AggregationTrace, extract_map
from ambimap.loccodec import BoxNorm, LocQuad, decode_box, encode_box, parse_loc_sequence
from ambimap.decoder import DecoderConfig, TokenSequence, ToyDecoder

__all__ = [
    "AttentionTensor",
    "TokenMeta",
    "read_tensor",
    "write_tensor",
    "validate_tensor",
    "AmbiguityMap",
    "AggregationTrace",
    "extract_map",
    "BoxNorm",
    "LocQuad",
    "encode_box",
    "decode_box",
    "parse_loc_sequence",
    "DecoderConfig",
    "TokenSequence",
    "ToyDecoder",
]

__version__ = "0.1.0"
