"""Build a miniature local checkpoint for offline exporter runs.

The directory this produces has the same anatomy as a real checkpoint
(model weights, config, processor, fast tokenizer with loc tokens), just
at toy scale: an 8x8 patch grid and a word-level vocabulary. Weights are
random but seeded, so repeated builds are identical. Use it for tests
and demos; real exports should point at a full pretrained checkpoint.
"""

from __future__ import annotations

from pathlib import Path

import torch

WORDS = (
    "detect", "clarify", "disambiguate", "caption",
    "the", "a", "an", "red", "green", "blue", "left", "right",
    "apple", "mug", "bottle", "box", "banana", "bowl", "cup", "on",
)


def build_tiny_checkpoint(path: str, grid_side: int = 8, seed: int = 0) -> str:
    from tokenizers import Tokenizer, models, pre_tokenizers
    from transformers import (
        GemmaConfig,
        PaliGemmaConfig,
        PaliGemmaForConditionalGeneration,
        PaliGemmaProcessor,
        PreTrainedTokenizerFast,
        SiglipImageProcessor,
        SiglipVisionConfig,
    )

    patch = 8
    image_size = grid_side * patch
    vocab = {"<pad>": 0, "<eos>": 1, "<bos>": 2, "<unk>": 3}
    for w in WORDS:
        vocab[w] = len(vocab)
    tok = Tokenizer(models.WordLevel(vocab=vocab, unk_token="<unk>"))
    tok.pre_tokenizer = pre_tokenizers.WhitespaceSplit()
    tokenizer = PreTrainedTokenizerFast(
        tokenizer_object=tok,
        pad_token="<pad>",
        eos_token="<eos>",
        bos_token="<bos>",
        unk_token="<unk>",
    )
    image_processor = SiglipImageProcessor(
        size={"height": image_size, "width": image_size},
        image_seq_length=grid_side**2,
    )
    # the processor registers <image> plus the loc/seg token blocks
    processor = PaliGemmaProcessor(image_processor=image_processor, tokenizer=tokenizer)

    vision = SiglipVisionConfig(
        hidden_size=32,
        intermediate_size=64,
        num_attention_heads=4,
        num_hidden_layers=2,
        image_size=image_size,
        patch_size=patch,
        num_channels=3,
    )
    text = GemmaConfig(
        vocab_size=len(processor.tokenizer),
        hidden_size=32,
        intermediate_size=64,
        num_hidden_layers=3,
        num_attention_heads=4,
        num_key_value_heads=2,
        head_dim=8,
        max_position_embeddings=max(512, grid_side**2 + 64),
    )
    config = PaliGemmaConfig(
        vision_config=vision,
        text_config=text,
        image_token_index=processor.image_token_id,
        projection_dim=32,
    )
    torch.manual_seed(seed)
    model = PaliGemmaForConditionalGeneration(config)

    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    model.save_pretrained(out)
    processor.save_pretrained(out)
    return str(out)
