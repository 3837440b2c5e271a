"""From refined correlation volumes to correspondences: soft mutual
nearest-neighbour filtering, per-direction matching probabilities, argmax
retrieval with sub-cell refinement, dense flow, and bilinear warping.

Grid/pixel convention: cell centers map to pixel centers,
``pixel = (pos + 0.5) * stride - 0.5``. Positions are (row, col) = (i, j)
or (k, l); pixel keypoints are (x, y) with x rightward and y downward.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Variable
from .errors import InvalidArgumentError, NumericError
from .features import cell_to_pixel, pixel_to_cell

SOURCE_TO_TARGET = "source_to_target"
TARGET_TO_SOURCE = "target_to_source"


@dataclass(frozen=True)
class ProbabilityMap4D:
    """Rank-4 matching probabilities; rows along the named direction sum to 1."""

    values: np.ndarray
    direction: str

    def __post_init__(self):
        if self.direction not in (SOURCE_TO_TARGET, TARGET_TO_SOURCE):
            raise InvalidArgumentError(f"unknown direction {self.direction!r}")
        if self.values.ndim != 4:
            raise InvalidArgumentError(f"probability map must be rank 4, got {self.values.ndim}")


@dataclass(frozen=True)
class FlowField:
    """Per-pixel displacements (dx rightward, dy downward)."""

    dx: np.ndarray
    dy: np.ndarray

    def __post_init__(self):
        if self.dx.shape != self.dy.shape:
            raise InvalidArgumentError("flow components must share a shape")


def mutual_nn_filter(tape: Tape, c: Variable) -> Variable:
    """Down-weight scores that are not mutual nearest neighbours.

    Each score is multiplied by its ratio to the best score over all
    source cells (for its target cell) and to the best over all target
    cells (for its source cell). Zero maxima give zero ratios.
    """
    if c.value.ndim != 4:
        raise InvalidArgumentError(f"expected rank-4 volume, got rank {c.value.ndim}")
    if not np.isfinite(c.value).all():
        raise NumericError("mutual_nn_filter received non-finite scores")
    max_over_targets = tape.amax(c, axes=(2, 3), keepdims=True)
    max_over_sources = tape.amax(c, axes=(0, 1), keepdims=True)
    r_t = tape.safe_div(c, max_over_targets)
    r_s = tape.safe_div(c, max_over_sources)
    return tape.mul(tape.mul(r_s, r_t), c)


def mutual_nn_filter_array(c: np.ndarray) -> np.ndarray:
    return mutual_nn_filter(Tape(), Variable(c)).value


def softmax_probabilities(c_hat: np.ndarray, direction: str) -> ProbabilityMap4D:
    """Normalize filtered scores into matching probabilities.

    ``source_to_target`` normalizes over target cells per source cell;
    ``target_to_source`` the reverse. Stabilized by max subtraction.
    """
    if not np.isfinite(c_hat).all():
        raise NumericError("softmax received non-finite scores")
    if direction == SOURCE_TO_TARGET:
        axes = (2, 3)
    elif direction == TARGET_TO_SOURCE:
        axes = (0, 1)
    else:
        raise InvalidArgumentError(f"unknown direction {direction!r}")
    shifted = c_hat - c_hat.max(axis=axes, keepdims=True)
    e = np.exp(shifted)
    return ProbabilityMap4D(e / e.sum(axis=axes, keepdims=True), direction)


def argmax_match(v: ProbabilityMap4D, at: tuple[int, int]) -> tuple[int, int]:
    """Most likely match for a cell; lexicographically first on ties."""
    if v.direction == SOURCE_TO_TARGET:
        i, j = at
        plane = v.values[i, j]
    else:
        k, l = at
        plane = v.values[:, :, k, l]
    flat = int(np.argmax(plane))
    return tuple(int(x) for x in np.unravel_index(flat, plane.shape))


def refine_subcell(v: ProbabilityMap4D, at: tuple[int, int],
                   window: int = 3) -> tuple[float, float]:
    """Probability-weighted centroid of the window around the argmax cell."""
    if window < 1 or window % 2 == 0:
        raise InvalidArgumentError(f"window must be odd and positive, got {window}")
    if v.direction == SOURCE_TO_TARGET:
        plane = v.values[at[0], at[1]]
    else:
        plane = v.values[:, :, at[0], at[1]]
    pk, pl = argmax_match(v, at)
    r = window // 2
    k0, k1 = max(0, pk - r), min(plane.shape[0], pk + r + 1)
    l0, l1 = max(0, pl - r), min(plane.shape[1], pl + r + 1)
    patch = plane[k0:k1, l0:l1]
    total = patch.sum()
    if total <= 0:
        return float(pk), float(pl)
    ks = np.arange(k0, k1, dtype=np.float64)
    ls = np.arange(l0, l1, dtype=np.float64)
    ck = float((patch.sum(axis=1) * ks).sum() / total)
    cl = float((patch.sum(axis=0) * ls).sum() / total)
    return ck, cl


def to_pixel(pos: float, stride: int) -> float:
    if stride < 1:
        raise InvalidArgumentError(f"stride must be >= 1, got {stride}")
    return cell_to_pixel(pos, stride)


def from_pixel(px: float, stride: int) -> float:
    if stride < 1:
        raise InvalidArgumentError(f"stride must be >= 1, got {stride}")
    return pixel_to_cell(px, stride)


def cell_flow(v: ProbabilityMap4D, stride: int, window: int = 3) -> np.ndarray:
    """(h, w, 2) pixel displacements (dx, dy) at source cells."""
    if v.direction != SOURCE_TO_TARGET:
        raise InvalidArgumentError("cell_flow needs a source_to_target map")
    hs, ws = v.values.shape[:2]
    flow = np.empty((hs, ws, 2), dtype=np.float64)
    for i in range(hs):
        for j in range(ws):
            ck, cl = refine_subcell(v, (i, j), window=window)
            flow[i, j, 0] = to_pixel(cl, stride) - to_pixel(j, stride)
            flow[i, j, 1] = to_pixel(ck, stride) - to_pixel(i, stride)
    return flow


def _bilinear_grid_sample(grid: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample a (h, w) grid at fractional positions, clamping to the edges."""
    h, w = grid.shape
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.clip(np.floor(ys).astype(int), 0, max(h - 2, 0))
    x0 = np.clip(np.floor(xs).astype(int), 0, max(w - 2, 0))
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = ys - y0
    fx = xs - x0
    return ((1 - fy) * (1 - fx) * grid[y0, x0]
            + (1 - fy) * fx * grid[y0, x1]
            + fy * (1 - fx) * grid[y1, x0]
            + fy * fx * grid[y1, x1])


def dense_flow(v: ProbabilityMap4D, stride: int,
               image_size: tuple[int, int], window: int = 3) -> FlowField:
    """Upsample cell displacements to a per-pixel flow at (width, height)."""
    width, height = image_size
    cf = cell_flow(v, stride, window=window)
    ys, xs = np.meshgrid(np.arange(height, dtype=np.float64),
                         np.arange(width, dtype=np.float64), indexing="ij")
    gy = pixel_to_cell(ys, stride)
    gx = pixel_to_cell(xs, stride)
    dx = _bilinear_grid_sample(cf[:, :, 0], gy, gx)
    dy = _bilinear_grid_sample(cf[:, :, 1], gy, gx)
    return FlowField(dx=dx, dy=dy)


def warp_bilinear(image: np.ndarray, flow: FlowField) -> np.ndarray:
    """Sample ``image`` at p + flow[p]; out-of-bounds contributions are 0."""
    if image.shape[:2] != flow.dx.shape:
        raise InvalidArgumentError(
            f"flow shape {flow.dx.shape} does not match image {image.shape[:2]}"
        )
    h, w = image.shape[:2]
    ys, xs = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    sy = ys + flow.dy
    sx = xs + flow.dx
    y0 = np.floor(sy).astype(int)
    x0 = np.floor(sx).astype(int)
    fy = sy - y0
    fx = sx - x0

    chans = image if image.ndim == 3 else image[:, :, None]
    out = np.zeros_like(chans, dtype=np.float64)
    for dy_c, dx_c, wgt in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        yy = y0 + dy_c
        xx = x0 + dx_c
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        yc = np.clip(yy, 0, h - 1)
        xc = np.clip(xx, 0, w - 1)
        out += np.where(valid, wgt, 0.0)[:, :, None] * chans[yc, xc]
    return out if image.ndim == 3 else out[:, :, 0]


def match_records(v: ProbabilityMap4D, stride: int,
                  source_pixels: np.ndarray | None = None,
                  window: int = 3) -> list[dict]:
    """JSON-ready match entries, per supplied keypoint or per grid cell."""
    if v.direction != SOURCE_TO_TARGET:
        raise InvalidArgumentError("match_records needs a source_to_target map")
    hs, ws = v.values.shape[:2]
    records = []
    if source_pixels is None:
        cells = [(i, j) for i in range(hs) for j in range(ws)]
        pixels = [(to_pixel(j, stride), to_pixel(i, stride)) for i, j in cells]
    else:
        cells, pixels = [], []
        for x, y in source_pixels:
            i = int(np.clip(round(from_pixel(y, stride)), 0, hs - 1))
            j = int(np.clip(round(from_pixel(x, stride)), 0, ws - 1))
            cells.append((i, j))
            pixels.append((float(x), float(y)))
    for (i, j), (px, py) in zip(cells, pixels):
        pk, pl = argmax_match(v, (i, j))
        ck, cl = refine_subcell(v, (i, j), window=window)
        records.append({
            "source_px": [px, py],
            "target_px": [to_pixel(pl, stride), to_pixel(pk, stride)],
            "target_px_refined": [to_pixel(cl, stride), to_pixel(ck, stride)],
            "probability": float(v.values[i, j, pk, pl]),
        })
    return records
