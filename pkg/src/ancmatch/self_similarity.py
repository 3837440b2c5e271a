"""Multi-scale self-similarity descriptors.

The base map S0 holds, per cell, the cosine similarities between that
cell's descriptor and each neighbour in an odd window (zero for neighbours
off the grid, 1 at the center channel for nonzero cells). Two learnable 2D
convolutions with ReLU lift S0 to S1 and S2; the three scales concatenate
and renormalize into the enhanced map S.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .autodiff import Tape, Variable
from .errors import InvalidArgumentError
from .features import FeatureMap
from .tensor_core import Rng


@dataclass(frozen=True)
class SelfSimConfig:
    window: int = 5
    conv_kernel: int = 3
    channels_1: int | None = None  # default: window**2
    channels_2: int | None = None

    def __post_init__(self):
        if self.window < 1 or self.window % 2 == 0:
            raise InvalidArgumentError(f"window must be odd and positive, got {self.window}")
        if self.conv_kernel < 1 or self.conv_kernel % 2 == 0:
            raise InvalidArgumentError(
                f"conv_kernel must be odd and positive, got {self.conv_kernel}"
            )

    @property
    def c1(self) -> int:
        return self.channels_1 if self.channels_1 is not None else self.window ** 2

    @property
    def c2(self) -> int:
        return self.channels_2 if self.channels_2 is not None else self.window ** 2

    @property
    def out_depth(self) -> int:
        return self.window ** 2 + self.c1 + self.c2


@dataclass
class SelfSimParams:
    k1: Variable  # (k, k, window^2, c1)
    b1: Variable
    k2: Variable  # (k, k, c1, c2)
    b2: Variable

    def named(self, prefix: str = "selfsim") -> list[tuple[str, Variable]]:
        return [
            (f"{prefix}.k1", self.k1),
            (f"{prefix}.b1", self.b1),
            (f"{prefix}.k2", self.k2),
            (f"{prefix}.b2", self.b2),
        ]


def init_selfsim_params(cfg: SelfSimConfig, rng: Rng, dtype=np.float64) -> SelfSimParams:
    k = cfg.conv_kernel
    win2 = cfg.window ** 2

    def kernel_var(c_in, c_out, r):
        a = 1.0 / np.sqrt(k * k * c_in)
        return Variable(r.uniform(-a, a, (k, k, c_in, c_out), dtype=dtype), requires_grad=True)

    return SelfSimParams(
        k1=kernel_var(win2, cfg.c1, rng.child(1)),
        b1=Variable(np.zeros(cfg.c1, dtype=dtype), requires_grad=True),
        k2=kernel_var(cfg.c1, cfg.c2, rng.child(2)),
        b2=Variable(np.zeros(cfg.c2, dtype=dtype), requires_grad=True),
    )


def self_sim_base(f: FeatureMap, window: int) -> np.ndarray:
    """S0: per-cell window of cosine similarities, row-major channel order.

    Assumes the map is normalized, so inner products are cosine scores.
    """
    return kernels.self_sim_base(f.values, window)


def multiscale_forward(f: FeatureMap, cfg: SelfSimConfig, params: SelfSimParams,
                       tape: Tape, s0: np.ndarray | None = None) -> Variable:
    """Concatenated [S0 | S1 | S2], renormalized per cell.

    ``s0`` can carry a precomputed base map (it depends only on the frozen
    features, so training loops cache it per pair).
    """
    if params.k1.value.shape[2] != cfg.window ** 2:
        raise InvalidArgumentError(
            f"k1 expects {params.k1.value.shape[2]} input channels, "
            f"config window gives {cfg.window ** 2}"
        )
    if s0 is None:
        s0 = self_sim_base(f, cfg.window)
    s0_var = tape.constant(s0.astype(params.k1.value.dtype, copy=False))
    s1 = tape.conv2d(s0_var, params.k1, params.b1, relu=True)
    s2 = tape.conv2d(s1, params.k2, params.b2, relu=True)
    cat = tape.concat((s0_var, s1, s2), axis=2)
    return tape.normalize_cells(cat)
