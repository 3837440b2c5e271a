"""Supervision from sparse keypoints: ground-truth probability maps, match
matrices for both directions, the keypoint loss, and the orthogonal
(one-to-one) regularizer.

A keypoint rescaled to the feature grid lands between four cells; those
cells receive bilinear weights summing to exactly 1, optionally smoothed
with a small Gaussian, and the flattened map is L2-normalized into one row
of the ground-truth match matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Variable
from .errors import InvalidArgumentError
from .features import PairAnnotation, pixel_to_cell


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 0.001
    gaussian_kernel: int = 5
    gaussian_sigma: float | None = None  # default: kernel / 4

    def __post_init__(self):
        if self.alpha < 0:
            raise InvalidArgumentError(f"alpha must be >= 0, got {self.alpha}")
        if self.gaussian_kernel != 0 and (
            self.gaussian_kernel < 3 or self.gaussian_kernel % 2 == 0
        ):
            raise InvalidArgumentError(
                f"gaussian_kernel must be 0 or an odd size >= 3, got {self.gaussian_kernel}"
            )
        if self.gaussian_sigma is not None and self.gaussian_sigma <= 0:
            raise InvalidArgumentError("gaussian_sigma must be positive")

    @property
    def sigma(self) -> float:
        if self.gaussian_sigma is not None:
            return self.gaussian_sigma
        return self.gaussian_kernel / 4.0 if self.gaussian_kernel else 1.0

    def with_kernel(self, kernel: int) -> "LossConfig":
        return LossConfig(self.alpha, kernel, self.gaussian_sigma)


def gaussian_kernel_2d(size: int, sigma: float, dtype=np.float64) -> np.ndarray:
    r = size // 2
    xs = np.arange(-r, r + 1, dtype=np.float64)
    g1 = np.exp(-(xs ** 2) / (2.0 * sigma * sigma))
    g2 = np.outer(g1, g1)
    return (g2 / g2.sum()).astype(dtype)


def _smooth_zero_padded(m: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    h, w = m.shape
    k = kernel.shape[0]
    r = k // 2
    padded = np.zeros((h + k - 1, w + k - 1), dtype=m.dtype)
    padded[r:r + h, r:r + w] = m
    out = np.zeros_like(m)
    for dy in range(k):
        for dx in range(k):
            out += kernel[dy, dx] * padded[dy:dy + h, dx:dx + w]
    return out


def gt_probability_map(kp_px: tuple[float, float], grid: tuple[int, int],
                       stride: int, cfg: LossConfig, dtype=np.float64) -> np.ndarray:
    """Per-keypoint target map over an (h_c, w_c) grid.

    Bilinear weights on the four enclosing cells sum to exactly 1 (the last
    corner takes the residual), then optional Gaussian smoothing and L2
    normalization of the flattened map.
    """
    h_c, w_c = grid
    if h_c < 1 or w_c < 1:
        raise InvalidArgumentError(f"degenerate grid {grid}")
    x, y = kp_px
    x_c = float(np.clip(pixel_to_cell(x, stride), 0.0, w_c - 1.0))
    y_c = float(np.clip(pixel_to_cell(y, stride), 0.0, h_c - 1.0))

    x0 = min(int(np.floor(x_c)), max(w_c - 2, 0))
    y0 = min(int(np.floor(y_c)), max(h_c - 2, 0))
    x1 = min(x0 + 1, w_c - 1)
    y1 = min(y0 + 1, h_c - 1)
    fx = x_c - x0
    fy = y_c - y0

    t1 = (1.0 - fx) * (1.0 - fy)
    t2 = fx * (1.0 - fy)
    t3 = (1.0 - fx) * fy
    t4 = 1.0 - (t1 + t2 + t3)  # residual keeps the total at exactly 1

    m = np.zeros((h_c, w_c), dtype=np.float64)
    m[y0, x0] += t1
    m[y0, x1] += t2
    m[y1, x0] += t3
    m[y1, x1] += t4

    if cfg.gaussian_kernel:
        m = _smooth_zero_padded(m, gaussian_kernel_2d(cfg.gaussian_kernel, cfg.sigma))
    norm = np.sqrt((m ** 2).sum())
    if norm > 0:
        m = m / norm
    return m.astype(dtype)


def nearest_cell(kp_px: tuple[float, float], grid: tuple[int, int],
                 stride: int) -> tuple[int, int]:
    h_c, w_c = grid
    x, y = kp_px
    i = int(np.clip(round(pixel_to_cell(y, stride)), 0, h_c - 1))
    j = int(np.clip(round(pixel_to_cell(x, stride)), 0, w_c - 1))
    return i, j


def build_match_matrices(ann: PairAnnotation, c_hat: Variable, cfg: LossConfig,
                         stride: int, tape: Tape,
                         gt_cache: dict | None = None
                         ) -> tuple[Variable, Variable, Variable, Variable]:
    """Predicted and ground-truth match matrices for both directions.

    Row i of M_s is the softmax target distribution for the grid cell
    nearest the i-th source keypoint; M_s_gt row i is the target keypoint's
    probability map. M_t / M_t_gt swap the roles. ``gt_cache`` memoizes
    ground-truth rows across epochs (keyed per keypoint and kernel size).
    """
    n = len(ann.source.keypoints)
    if n < 1:
        raise InvalidArgumentError("need at least one annotated keypoint pair")
    hs, ws, ht, wt = c_hat.value.shape
    dtype = c_hat.value.dtype

    def gt_rows(kps: np.ndarray, grid: tuple[int, int], side: str) -> np.ndarray:
        rows = np.empty((len(kps), grid[0] * grid[1]), dtype=dtype)
        for r, (x, y) in enumerate(kps):
            key = (side, float(x), float(y), grid, cfg.gaussian_kernel)
            cached = gt_cache.get(key) if gt_cache is not None else None
            if cached is None:
                cached = gt_probability_map((x, y), grid, stride, cfg, dtype=dtype).ravel()
                if gt_cache is not None:
                    gt_cache[key] = cached
            rows[r] = cached
        return rows

    src_cells = [nearest_cell((x, y), (hs, ws), stride) for x, y in ann.source.keypoints]
    tgt_cells = [nearest_cell((x, y), (ht, wt), stride) for x, y in ann.target.keypoints]

    m_s = tape.softmax(tape.take_source_rows(c_hat, src_cells), axes=(1,))
    m_t = tape.softmax(tape.take_target_rows(c_hat, tgt_cells), axes=(1,))
    m_s_gt = tape.constant(gt_rows(ann.target.keypoints, (ht, wt), "t"))
    m_t_gt = tape.constant(gt_rows(ann.source.keypoints, (hs, ws), "s"))
    return m_s, m_s_gt, m_t, m_t_gt


def loss_keypoint(tape: Tape, m_s: Variable, m_s_gt: Variable,
                  m_t: Variable, m_t_gt: Variable) -> Variable:
    """Frobenius distance to the targets, summed over both directions."""
    for a, b in ((m_s, m_s_gt), (m_t, m_t_gt)):
        if a.value.shape != b.value.shape:
            raise InvalidArgumentError(
                f"match matrix shape {a.value.shape} != target {b.value.shape}"
            )
    return tape.add(
        tape.frobenius(tape.sub(m_s, m_s_gt)),
        tape.frobenius(tape.sub(m_t, m_t_gt)),
    )


def loss_orthogonal(tape: Tape, m_s: Variable, m_s_gt: Variable,
                    m_t: Variable, m_t_gt: Variable) -> Variable:
    """Frobenius distance between predicted and target Gram matrices.

    The target Gram has zeros where keypoints are one-to-none, so both
    one-to-one and one-to-none structure is penalized. Only meaningful
    added to the keypoint loss.
    """
    for a, b in ((m_s, m_s_gt), (m_t, m_t_gt)):
        if a.value.shape != b.value.shape:
            raise InvalidArgumentError(
                f"match matrix shape {a.value.shape} != target {b.value.shape}"
            )

    def one_direction(m: Variable, m_gt: Variable) -> Variable:
        gram = tape.matmul(m, m, transpose_b=True)
        gram_gt = tape.constant(m_gt.value @ m_gt.value.T)
        return tape.frobenius(tape.sub(gram, gram_gt))

    return tape.add(one_direction(m_s, m_s_gt), one_direction(m_t, m_t_gt))


def loss_total(tape: Tape, l_k: Variable, l_o: Variable | None,
               alpha: float) -> Variable:
    """l_k + alpha * l_o; the orthogonal term is skipped when alpha is 0."""
    if alpha < 0:
        raise InvalidArgumentError(f"alpha must be >= 0, got {alpha}")
    if alpha == 0 or l_o is None:
        return l_k
    return tape.add(l_k, tape.scale(l_o, alpha))
