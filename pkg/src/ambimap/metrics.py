"""Box IoU, binary-classification metrics, and the decoder-layer sweep.

The sweep harness validates the mechanics of the layer choice experiment
on the toy decoder: for each requested layer it regenerates ambiguity
maps from that layer's attention, trains a fresh probe with the same
seed, and records test F1 and accuracy. It does not reproduce the
full-scale system's layer curve; those scores live in
FULL_SCALE_REFERENCE as constants.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ambimap.aggregate import extract_map
from ambimap.decoder import DecoderConfig, ToyDecoder, make_sequence
from ambimap.loccodec import BoxNorm
from ambimap.probe import LabeledMap, TrainConfig, evaluate_confusion, train

# Published scores of the full-scale system (3B backbone, real images).
# Stored for context only; not reproducible at desk scale.
FULL_SCALE_REFERENCE = {
    "detector_f1_in_domain": 0.846,
    "detector_f1_ood": 0.765,
    "layer_sweep_peak_f1": 0.726,  # best mid-depth layer (index 14 of 26)
    "layer_sweep_last_f1": 0.596,  # final layer (index 25)
    "guesser_acc_at_05_baseline": 0.712,
    "guesser_acc_at_05_ours": 0.7566,
}


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.tn, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


@dataclass(frozen=True)
class MetricsResult:
    accuracy: float
    precision: float
    recall: float
    f1: float
    zero_division: frozenset = frozenset()


def iou(a: BoxNorm, b: BoxNorm) -> float:
    """Intersection over union; a zero-area union yields 0 by convention."""
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    inter = max(0.0, iy) * max(0.0, ix)
    union = a.area() + b.area() - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def classification_metrics(c: ConfusionCounts) -> MetricsResult:
    """Accuracy, precision, recall, F1; zero denominators score 0, flagged."""
    if c.total == 0:
        raise ValueError("all-zero confusion counts")
    flags = set()

    def ratio(num: int, den: int, name: str) -> float:
        if den == 0:
            flags.add(name)
            return 0.0
        return num / den

    accuracy = (c.tp + c.tn) / c.total
    precision = ratio(c.tp, c.tp + c.fp, "precision")
    recall = ratio(c.tp, c.tp + c.fn, "recall")
    f1 = ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, "f1")
    return MetricsResult(
        accuracy=accuracy,
        precision=precision,
        recall=recall,
        f1=f1,
        zero_division=frozenset(flags),
    )


@dataclass(frozen=True)
class SweepConfig:
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    epochs: int = 4
    batch_size: int = 16
    lr: float = 1e-3
    weight_decay: float = 1e-4
    train_fraction: float = 0.8
    seed: int = 0


@dataclass(frozen=True)
class LayerSweepResult:
    rows: list[tuple[int, float, float]]  # (layer_index, f1, accuracy)
    seed: int

    def __post_init__(self):
        indices = [r[0] for r in self.rows]
        if any(b <= a for a, b in zip(indices, indices[1:])):
            raise ValueError("layer indices must be strictly increasing")


def maps_for_layer(
    decoder: ToyDecoder, data: list[tuple[str, int]], layer: int
) -> list[LabeledMap]:
    """Ambiguity maps from one decoder layer for labeled instructions."""
    grid = decoder.cfg.grid_side
    out = []
    for instruction, label in data:
        seq, meta = make_sequence(decoder.cfg, "<image>clarify " + instruction)
        tensor = decoder.attention(seq, layer)
        amap, _ = extract_map(tensor, meta, grid)
        out.append(LabeledMap(map=amap, label=label))
    return out


def layer_sweep(
    layers: list[int], data: list[tuple[str, int]], cfg: SweepConfig
) -> LayerSweepResult:
    """Train and score one fresh probe per layer; pure in (layers, data, cfg)."""
    if len(set(layers)) != len(layers):
        raise ValueError("duplicate layer indices")
    layers = sorted(layers)
    if layers and (layers[0] < 0 or layers[-1] >= cfg.decoder.num_layers):
        raise ValueError(
            f"layers {layers} out of range for a {cfg.decoder.num_layers}-layer decoder"
        )
    decoder = ToyDecoder(cfg.decoder)

    split_rng = np.random.default_rng(cfg.seed)
    order = split_rng.permutation(len(data))
    n_train = int(round(len(data) * cfg.train_fraction))
    train_idx, test_idx = order[:n_train], order[n_train:]
    if not len(train_idx) or not len(test_idx):
        raise ValueError("dataset too small for the train/test split")

    rows = []
    for layer in layers:
        labeled = maps_for_layer(decoder, data, layer)
        train_set = [labeled[i] for i in train_idx]
        test_set = [labeled[i] for i in test_idx]
        params, _ = train(
            train_set,
            TrainConfig(
                epochs=cfg.epochs,
                batch_size=cfg.batch_size,
                lr=cfg.lr,
                weight_decay=cfg.weight_decay,
                seed=cfg.seed,
                val_fraction=0.0,
            ),
        )
        tp, fp, tn, fn = evaluate_confusion(params, test_set)
        scores = classification_metrics(ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn))
        rows.append((layer, scores.f1, scores.accuracy))
    return LayerSweepResult(rows=rows, seed=cfg.seed)
