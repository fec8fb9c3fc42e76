"""Desk-scale labeled datasets: blob maps, duplicate-object scenes, dialogs.

Map generation stands in for real attention maps: unambiguous samples
carry a single Gaussian blob, ambiguous ones two to three well-separated
blobs, both with a little uniform noise so the classes overlap in the
tails. Scene generation follows the duplicated-object labeling rule: an
instruction is ambiguous exactly when its class name matches at least
two objects in the scene.

Everything derives per-sample seeds from (seed, index), so generation is
a pure function of its arguments and order-independent.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ambimap.aggregate import AmbiguityMap, read_map, write_map
from ambimap.dialog import DialogRecord
from ambimap.loccodec import BoxNorm
from ambimap.probe import LabeledMap

DEFAULT_CLASSES = ("apple", "mug", "bottle", "box", "banana", "bowl")
ATTRIBUTES = ("red", "green", "blue", "yellow", "black", "white")
SCENE_GRID = 16  # layout grid for object positions


@dataclass(frozen=True)
class SceneObject:
    class_name: str
    position: tuple[int, int]  # (row, col) on the layout grid
    attribute: str


@dataclass(frozen=True)
class SyntheticScene:
    objects: tuple[SceneObject, ...]
    instruction: str
    label: int

    def instructed_class(self) -> str:
        return self.instruction.removeprefix("Get the ").strip()

    def matching_objects(self) -> list[SceneObject]:
        """Objects of the class the instruction names."""
        name = self.instructed_class()
        return [o for o in self.objects if o.class_name == name]


def recount_label(scene: SyntheticScene) -> int:
    """Label recomputed from scene contents: 1 iff >= 2 matches."""
    return 1 if len(scene.matching_objects()) >= 2 else 0


def _place_blobs(rng: np.random.Generator, grid_side: int, count: int) -> list[tuple[float, float]]:
    margin = 2.0
    min_dist = grid_side / 4.0
    while True:
        centers = [
            (rng.uniform(margin, grid_side - 1 - margin), rng.uniform(margin, grid_side - 1 - margin))
            for _ in range(count)
        ]
        ok = all(
            np.hypot(a[0] - b[0], a[1] - b[1]) >= min_dist
            for i, a in enumerate(centers)
            for b in centers[i + 1 :]
        )
        if ok:
            return centers


def gen_map_dataset(
    n: int, grid_side: int, seed: int, noise: float = 0.05
) -> list[LabeledMap]:
    """Balanced blob maps: label 0 = one blob, label 1 = 2-3 separated blobs."""
    if n <= 0:
        raise ValueError("n must be positive")
    if grid_side < 8:
        raise ValueError(
            f"grid_side {grid_side} too small for the blob separation constraint"
        )
    yy, xx = np.mgrid[0:grid_side, 0:grid_side].astype(np.float64)
    out = []
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        label = i % 2
        count = 1 if label == 0 else int(rng.integers(2, 4))
        centers = _place_blobs(rng, grid_side, count)
        values = np.zeros((grid_side, grid_side))
        for cy, cx in centers:
            sigma = rng.uniform(1.5, 3.0)
            values += np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2))
        if noise > 0:
            values += rng.uniform(0.0, noise, size=values.shape)
        pre_sum = float(values.sum())
        lo, hi = values.min(), values.max()
        values = (values - lo) / (hi - lo)
        out.append(
            LabeledMap(
                map=AmbiguityMap(
                    grid_side=grid_side,
                    values=values,
                    source_layer=-1,
                    pre_normalization_sum=pre_sum,
                ),
                label=label,
            )
        )
    return out


def _sample_scene_objects(
    rng: np.random.Generator, classes: tuple[str, ...]
) -> tuple[SceneObject, ...]:
    # At least two visually similar objects per scene, by construction.
    dup = classes[rng.integers(len(classes))]
    names = [dup, dup]
    for extra in rng.choice(classes, size=int(rng.integers(1, 4)), replace=True):
        names.append(str(extra))
    cells = rng.choice(SCENE_GRID * SCENE_GRID, size=len(names), replace=False)
    attribute_pool = rng.permutation(len(ATTRIBUTES))
    objects = []
    for j, name in enumerate(names):
        # The two forced duplicates get distinct attributes so a
        # clarification can tell them apart.
        attr = ATTRIBUTES[attribute_pool[j % len(ATTRIBUTES)]]
        objects.append(
            SceneObject(
                class_name=name,
                position=(int(cells[j]) // SCENE_GRID, int(cells[j]) % SCENE_GRID),
                attribute=attr,
            )
        )
    return tuple(objects)


def gen_scene_dataset(
    n: int, seed: int, classes: tuple[str, ...] = DEFAULT_CLASSES
) -> list[SyntheticScene]:
    """Instruction records from duplicate-object scenes.

    Each scene emits "Get the <duplicated>" labeled ambiguous, plus
    "Get the <unique>" labeled unambiguous when a unique object exists.
    """
    if len(classes) < 2:
        raise ValueError("need at least 2 object classes")
    records = []
    for i in range(n):
        rng = np.random.default_rng([seed, 1_000_000 + i])
        objects = _sample_scene_objects(rng, classes)
        counts: dict[str, int] = {}
        for o in objects:
            counts[o.class_name] = counts.get(o.class_name, 0) + 1
        duplicated = sorted(name for name, c in counts.items() if c >= 2)
        unique = sorted(name for name, c in counts.items() if c == 1)

        dup = duplicated[int(rng.integers(len(duplicated)))]
        records.append(
            SyntheticScene(objects=objects, instruction=f"Get the {dup}", label=1)
        )
        if unique:
            uniq = unique[int(rng.integers(len(unique)))]
            records.append(
                SyntheticScene(objects=objects, instruction=f"Get the {uniq}", label=0)
            )
    return records


def save_map_dataset(dataset: list[LabeledMap], directory: str) -> None:
    """One .f32 file per map plus a labels.csv sidecar."""
    root = Path(directory)
    root.mkdir(parents=True, exist_ok=True)
    with open(root / "labels.csv", "w", newline="") as sidecar:
        writer = csv.writer(sidecar)
        writer.writerow(["index", "filename", "label"])
        for i, item in enumerate(dataset):
            name = f"map_{i:05d}.f32"
            with open(root / name, "wb") as f:
                write_map(item.map, f)
            writer.writerow([i, name, item.label])


def load_map_dataset(directory: str) -> list[LabeledMap]:
    root = Path(directory)
    sidecar = root / "labels.csv"
    if not sidecar.exists():
        raise FileNotFoundError(f"no labels.csv in {directory}")
    out = []
    with open(sidecar, newline="") as f:
        for row in csv.DictReader(f):
            with open(root / row["filename"], "rb") as mf:
                out.append(LabeledMap(map=read_map(mf), label=int(row["label"])))
    return out


def save_scene_dataset(scenes: list[SyntheticScene], destination) -> int:
    count = 0
    for s in scenes:
        destination.write(
            json.dumps(
                {
                    "objects": [
                        {
                            "class": o.class_name,
                            "position": list(o.position),
                            "attribute": o.attribute,
                        }
                        for o in s.objects
                    ],
                    "instruction": s.instruction,
                    "label": s.label,
                }
            )
            + "\n"
        )
        count += 1
    return count


def load_scene_dataset(source) -> list[SyntheticScene]:
    scenes = []
    for line in source:
        line = line.strip()
        if not line:
            continue
        obj = json.loads(line)
        scenes.append(
            SyntheticScene(
                objects=tuple(
                    SceneObject(
                        class_name=o["class"],
                        position=(o["position"][0], o["position"][1]),
                        attribute=o["attribute"],
                    )
                    for o in obj["objects"]
                ),
                instruction=obj["instruction"],
                label=obj["label"],
            )
        )
    return scenes


def _cell_box(position: tuple[int, int]) -> BoxNorm:
    r, c = position
    return BoxNorm(
        y_min=r / SCENE_GRID,
        x_min=c / SCENE_GRID,
        y_max=(r + 1) / SCENE_GRID,
        x_max=(c + 1) / SCENE_GRID,
    )


def gen_dialog_dataset(
    n: int, seed: int, classes: tuple[str, ...] = DEFAULT_CLASSES
) -> list[DialogRecord]:
    """Dialog corpus over synthetic scenes.

    Ambiguous requests get one clarification turn resolving by attribute;
    unambiguous ones ground immediately with zero turns.
    """
    records = []
    for i in range(n):
        rng = np.random.default_rng([seed, 2_000_000 + i])
        objects = _sample_scene_objects(rng, classes)
        counts: dict[str, int] = {}
        for o in objects:
            counts[o.class_name] = counts.get(o.class_name, 0) + 1
        unique = sorted(name for name, c in counts.items() if c == 1)

        if unique and rng.random() < 0.5:
            name = unique[int(rng.integers(len(unique)))]
            target = next(o for o in objects if o.class_name == name)
            turns: list[tuple[str, str]] = []
            request = f"Get the {name}"
        else:
            dup = objects[0].class_name  # the forced duplicate pair
            candidates = [o for o in objects if o.class_name == dup]
            target = candidates[int(rng.integers(len(candidates)))]
            request = f"Get the {dup}"
            turns = [
                (f"Which {dup} do you mean?", f"The {target.attribute} one")
            ]
        records.append(
            DialogRecord(
                image_id=f"scene-{seed}-{i:05d}",
                user_request=request,
                turns=turns,
                gold_box=_cell_box(target.position),
            )
        )
    return records
