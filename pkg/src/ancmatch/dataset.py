"""Synthetic dataset generation and on-disk layout.

A dataset directory holds ``pair_NNNN_s.tns`` / ``pair_NNNN_t.tns`` feature
files, the keypoint annotations in ``pairs.json``, and ``manifest.json``
tying them together. Generation is fully determined by the seed.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidArgumentError
from .features import (
    FeatureMap,
    GridTransform,
    SyntheticPair,
    annotations_to_doc,
    load_annotations,
    normalize_cells,
    pair_annotation,
    synth_pair,
    synth_pair_repeated,
)
from .tensor_core import Rng, tns_read, tns_write
from .training import TrainingPair

MANIFEST_NAME = "manifest.json"
PAIRS_NAME = "pairs.json"

TRANSFORM_FAMILIES = ("translate", "flip", "scale")


def sample_transform(r: Rng, families: tuple[str, ...], max_translation: int,
                     h: int, w: int) -> GridTransform:
    kinds = []
    for fam in families:
        if fam == "translate":
            kinds.append("translate")
        elif fam == "flip":
            kinds.extend(["flip_h", "flip_v"])
        elif fam == "scale":
            kinds.extend(["scale_up", "scale_down"])
        else:
            raise InvalidArgumentError(
                f"unknown transform family {fam!r}; use {TRANSFORM_FAMILIES}"
            )
    kind = kinds[int(r.integers(0, len(kinds), 1)[0])]
    if kind == "translate":
        span = min(max_translation, w - 1), min(max_translation, h - 1)
        dx = int(r.integers(-span[0], span[0] + 1, 1)[0])
        dy = int(r.integers(-span[1], span[1] + 1, 1)[0])
        return GridTransform("translate", dx=dx, dy=dy)
    return GridTransform(kind)


def generate_pairs(seed: int, n_pairs: int, h: int, w: int, d: int,
                   families: tuple[str, ...] = ("translate", "flip"),
                   max_translation: int = 4, n_keypoints: int = 8,
                   noise_std: float = 0.3, stride: int = 16,
                   repeated_blocks: bool = False) -> list[SyntheticPair]:
    if n_pairs < 1:
        raise InvalidArgumentError(f"n_pairs must be >= 1, got {n_pairs}")
    root = Rng(seed)
    make = synth_pair_repeated if repeated_blocks else synth_pair
    pairs = []
    for idx in range(n_pairs):
        r = root.child(idx)
        transform = sample_transform(r.child(0), tuple(families), max_translation, h, w)
        pairs.append(make(r.child(1), h, w, d, transform, n_keypoints, noise_std,
                          stride=stride))
    return pairs


def write_dataset(directory, pairs: list[SyntheticPair], seed: int | None = None) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = []
    for idx, pair in enumerate(pairs):
        s_name = f"pair_{idx:04d}_s.tns"
        t_name = f"pair_{idx:04d}_t.tns"
        tns_write(pair.source.values, directory / s_name)
        tns_write(pair.target.values, directory / t_name)
        files.append({"source": s_name, "target": t_name})
    annotations = annotations_to_doc([pair_annotation(p) for p in pairs])
    with open(directory / PAIRS_NAME, "w", encoding="utf-8") as fh:
        json.dump({"schema_version": 1, **annotations}, fh, sort_keys=True, indent=1)
    manifest = {
        "schema_version": 1,
        "n_pairs": len(pairs),
        "stride": pairs[0].source.stride if pairs else 16,
        "seed": seed,
        "files": files,
    }
    with open(directory / MANIFEST_NAME, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)


def load_dataset(directory) -> list[TrainingPair]:
    directory = Path(directory)
    manifest_path = directory / MANIFEST_NAME
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise FormatError(f"cannot read dataset manifest {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: invalid JSON: {exc}") from exc

    annotations = load_annotations(directory / PAIRS_NAME)
    files = manifest.get("files", [])
    if len(files) != len(annotations):
        raise FormatError(
            f"{manifest_path}: {len(files)} feature pairs but "
            f"{len(annotations)} annotation entries"
        )
    stride = int(manifest.get("stride", 16))
    dataset = []
    for entry, ann in zip(files, annotations):
        src = tns_read(directory / entry["source"])
        tgt = tns_read(directory / entry["target"])
        if src.ndim != 3 or tgt.ndim != 3:
            raise FormatError("dataset feature files must be rank 3")
        dataset.append(TrainingPair(
            source=FeatureMap(normalize_cells(src), stride),
            target=FeatureMap(normalize_cells(tgt), stride),
            annotation=ann,
        ))
    return dataset
