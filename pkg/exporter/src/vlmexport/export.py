"""Run a multimodal checkpoint and export one layer's text-to-image attention.

The exporter drives the checkpoint exactly the way the model family is
normally used: the processor expands the image into patch-token
positions ahead of the text, the prompt starts with the task
conditioning word (e.g. "detect" or "clarify"), and the forward pass
runs with eager attention so per-head weights are observable.

The exported tensor keeps every key (so softmax rows still sum to 1)
but only text-query rows; the image-token count in the header tells the
consumer where the image keys end. Role tags are derived from the
tokenizer's special ids: BOS and the leading conditioning word map to
"conditioning", EOS and the prompt separator to "eos", padding to
"pad", everything else is "content".
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch
from PIL import Image

from vlmexport.cat1 import write_cat1

DEFAULT_LAYER = 14  # mid-depth block of the 26-layer reference checkpoint


@dataclass(frozen=True)
class ExportRequest:
    image_path: str
    instruction: str
    layer_index: int = DEFAULT_LAYER
    output_path: str = "attention.cat1"


def load_checkpoint(checkpoint: str):
    """Local checkpoint directory -> (model, processor), eval mode, eager attention."""
    from transformers import AutoModelForImageTextToText, AutoProcessor

    processor = AutoProcessor.from_pretrained(checkpoint)
    model = AutoModelForImageTextToText.from_pretrained(
        checkpoint, attn_implementation="eager", dtype=torch.float32
    )
    model.eval()
    return model, processor


def _query_roles(ids, tokenizer, separator_ids):
    """Role per text position; the first prompt word is the conditioning token."""
    special = {
        tokenizer.pad_token_id: "pad",
        tokenizer.eos_token_id: "eos",
        tokenizer.bos_token_id: "conditioning",
    }
    roles = []
    conditioning_spent = False
    for tok_id in ids:
        if tok_id in special and special[tok_id] is not None:
            roles.append(special[tok_id])
        elif tok_id in separator_ids:
            roles.append("eos")
        elif not conditioning_spent:
            roles.append("conditioning")
            conditioning_spent = True
        else:
            roles.append("content")
    return roles


def export_attention(req: ExportRequest, model=None, processor=None, checkpoint=None) -> int:
    """Write the requested layer's attention as CAT1; returns bytes written."""
    if model is None or processor is None:
        if checkpoint is None:
            raise ValueError("either a loaded (model, processor) or a checkpoint path is required")
        model, processor = load_checkpoint(checkpoint)

    num_layers = model.config.text_config.num_hidden_layers
    if not 0 <= req.layer_index < num_layers:
        raise ValueError(
            f"layer {req.layer_index} out of range for a {num_layers}-layer decoder"
        )

    image = Image.open(req.image_path).convert("RGB")
    batch = processor(text=req.instruction, images=image, return_tensors="pt")
    inputs = {
        key: batch[key]
        for key in ("input_ids", "pixel_values", "attention_mask", "token_type_ids")
        if key in batch
    }
    with torch.no_grad():
        out = model(**inputs, output_attentions=True)

    weights = out.attentions[req.layer_index][0].to(torch.float32).numpy()
    input_ids = batch["input_ids"][0].tolist()
    image_token_id = model.config.image_token_index
    num_image = sum(1 for t in input_ids if t == image_token_id)
    if num_image == 0:
        raise ValueError("processor produced no image-token positions")
    if any(t == image_token_id for t in input_ids[num_image:]):
        raise ValueError("image tokens are not a contiguous leading block")

    text_positions = list(range(num_image, len(input_ids)))
    text_ids = [input_ids[p] for p in text_positions]
    tokenizer = processor.tokenizer
    separator_ids = {
        tok_id
        for tok_id in (tokenizer.convert_tokens_to_ids("\n"),)
        if tok_id is not None and tok_id != tokenizer.unk_token_id
    }
    roles = _query_roles(text_ids, tokenizer, separator_ids)
    strings = [
        tokenizer.convert_ids_to_tokens(tok_id)
        for tok_id, role in zip(text_ids, roles)
        if role == "content"
    ]

    output = Path(req.output_path)
    output.parent.mkdir(parents=True, exist_ok=True)
    with open(output, "wb") as f:
        return write_cat1(
            f,
            layer_index=req.layer_index,
            values=weights[:, text_positions, :],
            num_image_tokens=num_image,
            roles=roles,
            strings=strings,
        )
