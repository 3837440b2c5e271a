"""Feature-map ingestion, L2 normalization, raw 4D correlation, and the
synthetic correspondence-task generator that stands in for a CNN backbone.

Feature files are rank-3 TNS tensors laid out (h, w, d). Keypoint
annotations are JSON documents::

    {"pairs": [{"source": {"width": W, "height": H, "keypoints": [[x, y], ...]},
                "target": {...}}]}

with pixel coordinates, x rightward, y downward, origin at the top-left
pixel center; the i-th source keypoint corresponds to the i-th target
keypoint.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import (
    FormatError,
    GenerationError,
    InvalidArgumentError,
    NumericError,
)
from .tensor_core import Rng, tns_read

DEFAULT_STRIDE = 16


@dataclass(frozen=True)
class FeatureMap:
    """An h x w grid of d-dimensional descriptors with a pixel stride."""

    values: np.ndarray
    stride: int = DEFAULT_STRIDE

    def __post_init__(self):
        if self.values.ndim != 3:
            raise InvalidArgumentError(f"feature map must be rank 3, got {self.values.ndim}")
        if self.stride < 1:
            raise InvalidArgumentError(f"stride must be >= 1, got {self.stride}")

    @property
    def h(self) -> int:
        return self.values.shape[0]

    @property
    def w(self) -> int:
        return self.values.shape[1]

    @property
    def d(self) -> int:
        return self.values.shape[2]

    @property
    def image_width(self) -> int:
        return self.w * self.stride

    @property
    def image_height(self) -> int:
        return self.h * self.stride


def normalize_cells(values: np.ndarray) -> np.ndarray:
    """Per-cell unit L2 norm along the last axis; zero cells stay zero."""
    if not np.isfinite(values).all():
        raise NumericError("feature values contain non-finite entries")
    norms = np.sqrt((values ** 2).sum(axis=-1, keepdims=True))
    return values / np.where(norms == 0, 1.0, norms)


def l2_normalize(f: FeatureMap) -> FeatureMap:
    return FeatureMap(normalize_cells(f.values), f.stride)


def correlation_map(fs: FeatureMap, ft: FeatureMap) -> np.ndarray:
    """c[i,j,k,l] = <fs[i,j], ft[k,l]> as an (hs, ws, ht, wt) volume."""
    if fs.d != ft.d:
        raise InvalidArgumentError(f"depth mismatch: {fs.d} vs {ft.d}")
    return kernels.correlate4d(fs.values, ft.values)


def load_feature_pair(path_s, path_t, stride: int = DEFAULT_STRIDE) -> tuple[FeatureMap, FeatureMap]:
    """Read two rank-3 TNS feature files and return normalized maps."""
    maps = []
    for path in (path_s, path_t):
        arr = tns_read(path)
        if arr.ndim != 3:
            raise FormatError(f"{path}: feature file must be rank 3, got rank {arr.ndim}")
        maps.append(arr)
    if maps[0].shape[2] != maps[1].shape[2]:
        raise InvalidArgumentError(
            f"depth mismatch between {path_s} ({maps[0].shape[2]}) "
            f"and {path_t} ({maps[1].shape[2]})"
        )
    return (
        FeatureMap(normalize_cells(maps[0]), stride),
        FeatureMap(normalize_cells(maps[1]), stride),
    )


# ---------------------------------------------------------------------------
# grid <-> pixel (cell centers map to pixel centers)


def cell_to_pixel(pos: float, stride: int) -> float:
    return (pos + 0.5) * stride - 0.5


def pixel_to_cell(px: float, stride: int) -> float:
    return (px + 0.5) / stride - 0.5


# ---------------------------------------------------------------------------
# synthetic pairs


@dataclass(frozen=True)
class GridTransform:
    """Cell-grid transform: integer translation, axis flip, or 2x scaling.

    ``map_cell`` returns the target cell for a source cell, or None where
    the transform is undefined (moved out of bounds, or cells lost to
    subsampling).
    """

    kind: str
    dx: int = 0
    dy: int = 0

    _KINDS = ("translate", "flip_h", "flip_v", "scale_up", "scale_down")

    def __post_init__(self):
        if self.kind not in self._KINDS:
            raise InvalidArgumentError(f"unknown transform kind {self.kind!r}")

    def map_cell(self, i: int, j: int, h: int, w: int):
        if self.kind == "translate":
            ti, tj = i + self.dy, j + self.dx
            return (ti, tj) if 0 <= ti < h and 0 <= tj < w else None
        if self.kind == "flip_h":
            return (i, w - 1 - j)
        if self.kind == "flip_v":
            return (h - 1 - i, j)
        if self.kind == "scale_up":
            return (2 * i, 2 * j) if 2 * i < h and 2 * j < w else None
        # scale_down: only even cells survive the subsampling
        return (i // 2, j // 2) if i % 2 == 0 and j % 2 == 0 else None

    def build_target_grid(self, source: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Target grid plus a bool mask of cells that carry source content."""
        h, w, d = source.shape
        target = np.zeros_like(source)
        filled = np.zeros((h, w), dtype=bool)
        if self.kind == "translate":
            ys = slice(max(0, self.dy), min(h, h + self.dy))
            xs = slice(max(0, self.dx), min(w, w + self.dx))
            sy = slice(max(0, -self.dy), max(0, -self.dy) + (ys.stop - ys.start))
            sx = slice(max(0, -self.dx), max(0, -self.dx) + (xs.stop - xs.start))
            target[ys, xs] = source[sy, sx]
            filled[ys, xs] = True
        elif self.kind == "flip_h":
            target[:] = source[:, ::-1]
            filled[:] = True
        elif self.kind == "flip_v":
            target[:] = source[::-1, :]
            filled[:] = True
        elif self.kind == "scale_up":
            idx_i = np.arange(h) // 2
            idx_j = np.arange(w) // 2
            target[:] = source[np.ix_(idx_i, idx_j)]
            filled[:] = True
        else:  # scale_down
            hh, ww = (h + 1) // 2, (w + 1) // 2
            target[:hh, :ww] = source[::2, ::2]
            filled[:hh, :ww] = True
        return target, filled

    def defined_cells(self, h: int, w: int) -> list[tuple[int, int]]:
        return [
            (i, j)
            for i in range(h)
            for j in range(w)
            if self.map_cell(i, j, h, w) is not None
        ]


@dataclass(frozen=True)
class SyntheticPair:
    source: FeatureMap
    target: FeatureMap
    keypoints: list = field(default_factory=list)  # [((sx, sy), (tx, ty)), ...]
    transform: GridTransform | None = None

    def source_pixels(self) -> np.ndarray:
        return np.array([kp[0] for kp in self.keypoints], dtype=np.float64)

    def target_pixels(self) -> np.ndarray:
        return np.array([kp[1] for kp in self.keypoints], dtype=np.float64)


def synth_pair(r: Rng, h: int, w: int, d: int, transform: GridTransform,
               n_keypoints: int, noise_std: float,
               stride: int = DEFAULT_STRIDE, dtype=np.float64) -> SyntheticPair:
    """Random normalized source grid plus a transformed, noised target.

    Keypoints sit at cell centers of cells where the transform is defined,
    sampled without replacement. Target cells with no source preimage are
    filled with fresh random descriptors so the volume stays non-degenerate.
    """
    if n_keypoints > h * w:
        raise InvalidArgumentError(f"n_keypoints {n_keypoints} exceeds {h}x{w} grid")
    if noise_std < 0:
        raise InvalidArgumentError(f"noise_std must be >= 0, got {noise_std}")

    src = normalize_cells(r.normal(0.0, 1.0, (h, w, d), dtype=dtype))
    tgt, filled = transform.build_target_grid(src)
    holes = ~filled
    if holes.any():
        fill = normalize_cells(r.normal(0.0, 1.0, (int(holes.sum()), d), dtype=dtype))
        tgt[holes] = fill
    if noise_std > 0:
        # cells are unit vectors already, so renormalize only after noise
        tgt = normalize_cells(tgt + r.normal(0.0, noise_std, (h, w, d), dtype=dtype))

    defined = transform.defined_cells(h, w)
    if not defined:
        raise GenerationError(
            f"transform {transform.kind} leaves no in-bounds cells on a {h}x{w} grid"
        )
    if n_keypoints > len(defined):
        raise GenerationError(
            f"transform {transform.kind} leaves only {len(defined)} valid cells, "
            f"need {n_keypoints}"
        )
    picks = r.choice_without_replacement(len(defined), n_keypoints)
    keypoints = []
    for p in sorted(picks):
        i, j = defined[p]
        ti, tj = transform.map_cell(i, j, h, w)
        keypoints.append((
            (cell_to_pixel(j, stride), cell_to_pixel(i, stride)),
            (cell_to_pixel(tj, stride), cell_to_pixel(ti, stride)),
        ))

    return SyntheticPair(
        source=FeatureMap(src, stride),
        target=FeatureMap(tgt, stride),
        keypoints=keypoints,
        transform=transform,
    )


def synth_pair_repeated(r: Rng, h: int, w: int, d: int, transform: GridTransform,
                        n_keypoints: int, noise_std: float,
                        stride: int = DEFAULT_STRIDE, dtype=np.float64) -> SyntheticPair:
    """Like :func:`synth_pair` but the source's right half duplicates its
    left half, producing repeated patterns with ambiguous matches."""
    pair = synth_pair(r, h, w, d, transform, n_keypoints, noise_std,
                      stride=stride, dtype=dtype)
    half = w // 2
    src = pair.source.values.copy()
    src[:, half:2 * half] = src[:, :half]
    tgt, filled = transform.build_target_grid(src)
    holes = ~filled
    if holes.any():
        fill = normalize_cells(r.normal(0.0, 1.0, (int(holes.sum()), d), dtype=dtype))
        tgt[holes] = fill
    if noise_std > 0:
        tgt = normalize_cells(tgt + r.normal(0.0, noise_std, (h, w, d), dtype=dtype))
    return SyntheticPair(
        source=FeatureMap(src, stride),
        target=FeatureMap(tgt, stride),
        keypoints=pair.keypoints,
        transform=transform,
    )


# ---------------------------------------------------------------------------
# keypoint annotations


@dataclass(frozen=True)
class ImageAnnotation:
    width: int
    height: int
    keypoints: np.ndarray  # (n, 2) pixel (x, y)


@dataclass(frozen=True)
class PairAnnotation:
    source: ImageAnnotation
    target: ImageAnnotation

    def __post_init__(self):
        if len(self.source.keypoints) != len(self.target.keypoints):
            raise InvalidArgumentError(
                f"keypoint count mismatch: {len(self.source.keypoints)} vs "
                f"{len(self.target.keypoints)}"
            )


def _parse_image(doc: dict, where: str) -> ImageAnnotation:
    try:
        width = int(doc["width"])
        height = int(doc["height"])
        kps = np.asarray(doc["keypoints"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{where}: malformed image annotation: {exc}") from exc
    if kps.size == 0:
        kps = kps.reshape(0, 2)
    if kps.ndim != 2 or kps.shape[1] != 2:
        raise FormatError(f"{where}: keypoints must be a list of [x, y] pairs")
    return ImageAnnotation(width, height, kps)


def parse_annotations(doc) -> list[PairAnnotation]:
    if isinstance(doc, (str, bytes)):
        try:
            doc = json.loads(doc)
        except json.JSONDecodeError as exc:
            raise FormatError(f"annotation JSON is invalid: {exc}") from exc
    if not isinstance(doc, dict) or "pairs" not in doc:
        raise FormatError('annotation document must be an object with a "pairs" list')
    pairs = []
    for n, entry in enumerate(doc["pairs"]):
        where = f"pairs[{n}]"
        if "source" not in entry or "target" not in entry:
            raise FormatError(f"{where}: needs source and target")
        pairs.append(PairAnnotation(
            _parse_image(entry["source"], where + ".source"),
            _parse_image(entry["target"], where + ".target"),
        ))
    return pairs


def load_annotations(path) -> list[PairAnnotation]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise FormatError(f"cannot read annotations from {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    return parse_annotations(doc)


def annotations_to_doc(pairs: list[PairAnnotation]) -> dict:
    return {
        "pairs": [
            {
                "source": {
                    "width": p.source.width,
                    "height": p.source.height,
                    "keypoints": [[float(x), float(y)] for x, y in p.source.keypoints],
                },
                "target": {
                    "width": p.target.width,
                    "height": p.target.height,
                    "keypoints": [[float(x), float(y)] for x, y in p.target.keypoints],
                },
            }
            for p in pairs
        ]
    }


def pair_annotation(pair: SyntheticPair) -> PairAnnotation:
    src = ImageAnnotation(pair.source.image_width, pair.source.image_height,
                          pair.source_pixels())
    tgt = ImageAnnotation(pair.target.image_width, pair.target.image_height,
                          pair.target_pixels())
    return PairAnnotation(src, tgt)
