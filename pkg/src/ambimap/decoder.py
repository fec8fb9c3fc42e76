"""Minimal multimodal decoder used to produce genuine attention tensors.

Inference-only transformer with grouped-query attention and prefix-LM
masking: image tokens plus the text prefix attend bidirectionally among
themselves, generated suffix tokens attend causally. Weights are fixed
random (He-uniform from the config seed); the decoder exists to give the
aggregation pipeline structurally correct attention, not to model
language. Image tokens are learned embeddings indexed by grid position.

All math is float64; outputs are a pure function of (config, sequence,
layer index).
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

from ambimap.tensorio import (
    ROLE_CONDITIONING,
    ROLE_CONTENT,
    ROLE_EOS,
    ROLE_IMAGE,
    ROLE_PAD,
    AttentionTensor,
    TokenMeta,
)

TEXT_POSITION_BUDGET = 512

PAD_ID = 0
IMAGE_ID = 1
CLARIFY_ID = 2
EOS_ID = 3
LOC_BASE = 4

_LOC_RE = re.compile(r"<loc([0-9]{4})>")
_RESERVED_LITERALS = (
    ("<image>", IMAGE_ID),
    ("<pad>", PAD_ID),
    ("<eos>", EOS_ID),
    ("clarify", CLARIFY_ID),
)


@dataclass(frozen=True)
class DecoderConfig:
    num_layers: int = 4
    num_heads: int = 4
    num_kv_heads: int = 2
    model_dim: int = 64
    vocab_size: int = 256
    grid_side: int = 8
    num_image_tokens: int = -1  # defaults to grid_side**2
    seed: int = 0

    def __post_init__(self):
        if self.num_image_tokens < 0:
            object.__setattr__(self, "num_image_tokens", self.grid_side**2)
        if self.num_heads % self.num_kv_heads != 0:
            raise ValueError(
                f"num_kv_heads {self.num_kv_heads} must divide num_heads {self.num_heads}"
            )
        if self.num_image_tokens != self.grid_side**2:
            raise ValueError(
                f"num_image_tokens {self.num_image_tokens} != grid_side^2 "
                f"({self.grid_side}^2)"
            )
        if self.model_dim % self.num_heads != 0:
            raise ValueError("num_heads must divide model_dim")
        if self.vocab_size < LOC_BASE + 8 + 128:
            raise ValueError(f"vocab_size {self.vocab_size} too small for the toy vocabulary")

    @property
    def loc_block_size(self) -> int:
        # Loc tokens get whatever the vocab can spare after specials and a
        # full 7-bit byte range; coarser than 1024 bins when the vocab is small.
        return min(1024, self.vocab_size - LOC_BASE - 128)

    @property
    def byte_base(self) -> int:
        return LOC_BASE + self.loc_block_size

    @property
    def num_byte_ids(self) -> int:
        return self.vocab_size - self.byte_base


@dataclass(frozen=True)
class TokenSequence:
    """Image block first, then text prefix, then generated suffix."""

    image_token_count: int
    prefix_token_ids: list[int]
    suffix_token_ids: list[int] = field(default_factory=list)

    @property
    def total_length(self) -> int:
        return self.image_token_count + len(self.prefix_token_ids) + len(self.suffix_token_ids)

    @property
    def prefix_length(self) -> int:
        """Length of the bidirectional block (image + text prefix)."""
        return self.image_token_count + len(self.prefix_token_ids)


def _encode_with_surfaces(text: str, cfg: DecoderConfig) -> list[tuple[int, str]]:
    out: list[tuple[int, str]] = []
    i = 0
    while i < len(text):
        matched = False
        for literal, tok_id in _RESERVED_LITERALS:
            if text.startswith(literal, i):
                out.append((tok_id, literal))
                i += len(literal)
                matched = True
                break
        if matched:
            continue
        m = _LOC_RE.match(text, i)
        if m and int(m.group(1)) < 1024:
            k = int(m.group(1))
            out.append((LOC_BASE + (k * cfg.loc_block_size) // 1024, m.group(0)))
            i = m.end()
            continue
        raw = text[i].encode("utf-8")
        for b in raw:
            out.append((cfg.byte_base + b % cfg.num_byte_ids, text[i]))
        i += 1
    return out


def tokenize_toy(text: str, cfg: DecoderConfig | None = None) -> list[int]:
    """Deterministic byte-level tokenizer with reserved special ids.

    "<image>", "<pad>", "<eos>", "clarify" and loc tokens map to single
    reserved ids; everything else is one id per UTF-8 byte.
    """
    cfg = cfg or DecoderConfig()
    return [tok_id for tok_id, _ in _encode_with_surfaces(text, cfg)]


def make_sequence(cfg: DecoderConfig, text: str, suffix: str = "") -> tuple[TokenSequence, TokenMeta]:
    """Tokenize an instruction into a sequence plus per-query role tags.

    A leading "<image>" literal stands for the whole image block and
    expands to cfg.num_image_tokens positions.
    """
    image_count = 0
    if text.startswith("<image>"):
        text = text[len("<image>") :]
        image_count = cfg.num_image_tokens

    prefix_pairs = _encode_with_surfaces(text, cfg)
    suffix_pairs = _encode_with_surfaces(suffix, cfg)
    seq = TokenSequence(
        image_token_count=image_count,
        prefix_token_ids=[t for t, _ in prefix_pairs],
        suffix_token_ids=[t for t, _ in suffix_pairs],
    )

    roles = [ROLE_IMAGE] * image_count
    surfaces: list[str] = []
    for tok_id, surface in prefix_pairs + suffix_pairs:
        role = _role_of_id(tok_id)
        roles.append(role)
        if role == ROLE_CONTENT:
            surfaces.append(surface)
    return seq, TokenMeta(query_roles=roles, text_strings=surfaces)


def _role_of_id(tok_id: int) -> str:
    if tok_id == CLARIFY_ID:
        return ROLE_CONDITIONING
    if tok_id == EOS_ID:
        return ROLE_EOS
    if tok_id == PAD_ID:
        return ROLE_PAD
    if tok_id == IMAGE_ID:
        return ROLE_IMAGE
    return ROLE_CONTENT


def build_mask(seq: TokenSequence) -> np.ndarray:
    """Allowed-attention matrix, True where query row may attend.

    The image+prefix block is fully bidirectional; suffix position i sees
    the whole block plus suffix positions <= i; nothing sees later suffix.
    """
    t = seq.total_length
    if t == 0:
        raise ValueError("empty sequence")
    p = seq.prefix_length
    mask = np.zeros((t, t), dtype=bool)
    mask[:, :p] = True
    for i in range(p, t):
        mask[i, p : i + 1] = True
    return mask


def _he_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    limit = math.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape)


def _layer_norm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return gain * (x - mu) / np.sqrt(var + 1e-6) + bias


class ToyDecoder:
    """Fixed-weight decoder; reusable across forward passes and threads."""

    def __init__(self, cfg: DecoderConfig):
        self.cfg = cfg
        d = cfg.model_dim
        self.head_dim = d // cfg.num_heads
        self.group_size = cfg.num_heads // cfg.num_kv_heads
        rng = np.random.default_rng(cfg.seed)

        self.tok_emb = _he_uniform(rng, (cfg.vocab_size, d), d)
        self.img_emb = _he_uniform(rng, (cfg.num_image_tokens, d), d)
        self.max_positions = cfg.num_image_tokens + TEXT_POSITION_BUDGET
        self.pos_emb = _he_uniform(rng, (self.max_positions, d), d)

        kv_dim = cfg.num_kv_heads * self.head_dim
        self.layers = []
        for _ in range(cfg.num_layers):
            self.layers.append(
                {
                    "ln1_g": np.ones(d),
                    "ln1_b": np.zeros(d),
                    "wq": _he_uniform(rng, (d, d), d),
                    "wk": _he_uniform(rng, (d, kv_dim), d),
                    "wv": _he_uniform(rng, (d, kv_dim), d),
                    "wo": _he_uniform(rng, (d, d), d),
                    "ln2_g": np.ones(d),
                    "ln2_b": np.zeros(d),
                    "w1": _he_uniform(rng, (d, 4 * d), d),
                    "b1": np.zeros(4 * d),
                    "w2": _he_uniform(rng, (4 * d, d), 4 * d),
                    "b2": np.zeros(d),
                }
            )
        self.lnf_g = np.ones(d)
        self.lnf_b = np.zeros(d)
        self.lm_head = _he_uniform(rng, (d, cfg.vocab_size), d)

    def _embed(self, seq: TokenSequence) -> np.ndarray:
        cfg = self.cfg
        if seq.image_token_count > cfg.num_image_tokens:
            raise ValueError(
                f"sequence has {seq.image_token_count} image tokens, "
                f"config allows {cfg.num_image_tokens}"
            )
        text_ids = list(seq.prefix_token_ids) + list(seq.suffix_token_ids)
        for tok in text_ids:
            if not 0 <= tok < cfg.vocab_size:
                raise ValueError(f"token id {tok} outside vocabulary")
        t = seq.total_length
        if t > self.max_positions:
            raise ValueError(f"sequence length {t} exceeds position budget")
        parts = []
        if seq.image_token_count:
            parts.append(self.img_emb[: seq.image_token_count])
        if text_ids:
            parts.append(self.tok_emb[text_ids])
        x = np.concatenate(parts, axis=0)
        return x + self.pos_emb[:t]

    def _attention_weights(self, h_in: np.ndarray, layer: dict, mask: np.ndarray) -> np.ndarray:
        cfg = self.cfg
        t = h_in.shape[0]
        q = (h_in @ layer["wq"]).reshape(t, cfg.num_heads, self.head_dim).transpose(1, 0, 2)
        k = (h_in @ layer["wk"]).reshape(t, cfg.num_kv_heads, self.head_dim).transpose(1, 0, 2)
        # Each kv head serves a contiguous group of query heads.
        k_full = np.repeat(k, self.group_size, axis=0)
        scores = q @ k_full.transpose(0, 2, 1) / math.sqrt(self.head_dim)
        scores = np.where(mask[None, :, :], scores, -np.inf)
        scores -= scores.max(axis=2, keepdims=True)
        weights = np.exp(scores)
        weights /= weights.sum(axis=2, keepdims=True)
        return weights

    def forward(self, seq: TokenSequence, upto_layer: int | None = None):
        """Run blocks 0..upto_layer (default all); returns (logits, attentions).

        logits is None unless all layers ran. attentions[i] is the
        post-softmax (H, T, T) tensor of block i, masked entries exactly 0.
        """
        cfg = self.cfg
        last = cfg.num_layers - 1 if upto_layer is None else upto_layer
        if not 0 <= last < cfg.num_layers:
            raise ValueError(f"layer {last} out of range [0, {cfg.num_layers})")
        mask = build_mask(seq)
        x = self._embed(seq)
        attentions = []
        for li in range(last + 1):
            layer = self.layers[li]
            h = _layer_norm(x, layer["ln1_g"], layer["ln1_b"])
            weights = self._attention_weights(h, layer, mask)
            attentions.append(weights)
            t = x.shape[0]
            v = (h @ layer["wv"]).reshape(t, cfg.num_kv_heads, self.head_dim).transpose(1, 0, 2)
            v_full = np.repeat(v, self.group_size, axis=0)
            ctx = (weights @ v_full).transpose(1, 0, 2).reshape(t, cfg.model_dim)
            x = x + ctx @ layer["wo"]
            h2 = _layer_norm(x, layer["ln2_g"], layer["ln2_b"])
            x = x + np.maximum(h2 @ layer["w1"] + layer["b1"], 0.0) @ layer["w2"] + layer["b2"]

        logits = None
        if last == cfg.num_layers - 1:
            logits = _layer_norm(x, self.lnf_g, self.lnf_b) @ self.lm_head
        return logits, attentions

    def attention(self, seq: TokenSequence, read_layer: int) -> AttentionTensor:
        _, attentions = self.forward(seq, upto_layer=read_layer)
        weights = attentions[read_layer]
        return AttentionTensor(
            layer_index=read_layer,
            num_heads=self.cfg.num_heads,
            num_queries=seq.total_length,
            num_keys=seq.total_length,
            num_image_tokens=seq.image_token_count,
            values=weights,
        )

    def logits(self, seq: TokenSequence) -> np.ndarray:
        logits, _ = self.forward(seq)
        return logits


def forward_attention(cfg: DecoderConfig, seq: TokenSequence, read_layer: int) -> AttentionTensor:
    """Post-softmax attention of one block, deterministic in (cfg, seq, layer)."""
    return ToyDecoder(cfg).attention(seq, read_layer)
