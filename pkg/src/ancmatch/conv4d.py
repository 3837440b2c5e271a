"""Neighbourhood-consensus filtering: 4D convolution layers, the consensus
module built from them, and its bidirectional application.

A consensus module is a stack of layers; each layer applies one or more 4D
convolution branches to the same input and combines them (channel
concatenation, or a sum for single-channel outputs), with ReLU between
layers and none after the last. Branch kernels may be isotropic (5x5x5x5)
or non-isotropic (3x3x5x5), letting the two images contribute differently
sized neighbourhoods. Only one orientation of the non-isotropic shape is
ever instantiated: applying the module in both matching directions covers
the mirrored case.

Variants:
    a   three isotropic layers (plain consensus baseline)
    b   isotropic layers with a non-isotropic middle layer
    c   every layer non-isotropic
    d   every layer splits into parallel isotropic + non-isotropic branches
        (the final single-channel layer sums its two branches)
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Variable
from .errors import InvalidArgumentError
from .tensor_core import Rng

ISO_SHAPE = (5, 5, 5, 5)
NONISO_SHAPE = (3, 3, 5, 5)

_TRANSPOSE_5D = (0, 3, 4, 1, 2)  # swap matching direction under a channel axis


@dataclass(frozen=True)
class BranchSpec:
    c_out: int
    shape: tuple[int, int, int, int]

    def __post_init__(self):
        if self.c_out < 1:
            raise InvalidArgumentError(f"branch channels must be >= 1, got {self.c_out}")
        if len(self.shape) != 4 or any(s < 1 or s % 2 == 0 for s in self.shape):
            raise InvalidArgumentError(f"kernel extents must be odd, got {self.shape}")


@dataclass(frozen=True)
class LayerSpec:
    c_in: int
    branches: tuple[BranchSpec, ...]
    combine: str = "concat"  # or "sum"

    @property
    def c_out(self) -> int:
        if self.combine == "sum":
            return self.branches[0].c_out
        return sum(b.c_out for b in self.branches)

    def __post_init__(self):
        if self.combine not in ("concat", "sum"):
            raise InvalidArgumentError(f"unknown combine mode {self.combine!r}")
        if self.combine == "sum" and len({b.c_out for b in self.branches}) != 1:
            raise InvalidArgumentError("sum-combined branches need equal channel counts")


@dataclass(frozen=True)
class AncConfig:
    variant: str
    channels: tuple[int, ...] = (1, 16, 16, 1)
    layers: tuple[LayerSpec, ...] = field(default=())

    @property
    def n_layers(self) -> int:
        return len(self.layers)


def anc_config(variant: str, channels: tuple[int, ...] = (1, 16, 16, 1)) -> AncConfig:
    """Build the layer plan for one of the architecture variants."""
    if variant not in ("a", "b", "c", "d"):
        raise InvalidArgumentError(f"variant must be one of a/b/c/d, got {variant!r}")
    channels = tuple(int(c) for c in channels)
    if len(channels) < 2 or channels[0] != 1 or channels[-1] != 1:
        raise InvalidArgumentError(
            f"channel plan must start and end at 1 channel, got {channels}"
        )
    n_layers = len(channels) - 1
    layers = []
    for li in range(n_layers):
        c_in, c_out = channels[li], channels[li + 1]
        middle = li == n_layers // 2 and n_layers > 1
        if variant == "a":
            branches = (BranchSpec(c_out, ISO_SHAPE),)
            combine = "concat"
        elif variant == "b":
            shape = NONISO_SHAPE if middle else ISO_SHAPE
            branches = (BranchSpec(c_out, shape),)
            combine = "concat"
        elif variant == "c":
            branches = (BranchSpec(c_out, NONISO_SHAPE),)
            combine = "concat"
        else:  # d: parallel iso + non-iso branches
            if c_out == 1:
                branches = (BranchSpec(1, ISO_SHAPE), BranchSpec(1, NONISO_SHAPE))
                combine = "sum"
            else:
                if c_out < 2:
                    raise InvalidArgumentError(
                        f"variant d needs >= 2 channels per hidden layer, got {c_out}"
                    )
                half = c_out // 2
                branches = (
                    BranchSpec(half, ISO_SHAPE),
                    BranchSpec(c_out - half, NONISO_SHAPE),
                )
                combine = "concat"
        layers.append(LayerSpec(c_in, branches, combine))
    return AncConfig(variant=variant, channels=channels, layers=tuple(layers))


@dataclass
class Kernel4D:
    weights: Variable  # (c_out, c_in, ps, qs, pt, qt)
    bias: Variable     # (c_out,)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return tuple(self.weights.value.shape[2:])

    @property
    def c_in(self) -> int:
        return self.weights.value.shape[1]

    @property
    def c_out(self) -> int:
        return self.weights.value.shape[0]


@dataclass
class AncParams:
    layers: list[list[Kernel4D]]

    def named(self, prefix: str = "anc") -> list[tuple[str, Variable]]:
        out = []
        for li, branches in enumerate(self.layers):
            for bi, k in enumerate(branches):
                out.append((f"{prefix}.l{li}.b{bi}.weights", k.weights))
                out.append((f"{prefix}.l{li}.b{bi}.bias", k.bias))
        return out


def init_anc_params(cfg: AncConfig, rng: Rng, dtype=np.float64) -> AncParams:
    layers = []
    for li, layer in enumerate(cfg.layers):
        branches = []
        for bi, br in enumerate(layer.branches):
            ps, qs, pt, qt = br.shape
            fan_in = layer.c_in * ps * qs * pt * qt
            a = 1.0 / np.sqrt(fan_in)
            w = rng.child(101 + 7 * li + bi).uniform(
                -a, a, (br.c_out, layer.c_in) + br.shape, dtype=dtype
            )
            branches.append(Kernel4D(
                weights=Variable(w, requires_grad=True),
                bias=Variable(np.zeros(br.c_out, dtype=dtype), requires_grad=True),
            ))
        layers.append(branches)
    return AncParams(layers)


def _check_params(cfg: AncConfig, params: AncParams) -> None:
    if len(params.layers) != len(cfg.layers):
        raise InvalidArgumentError(
            f"params have {len(params.layers)} layers, config wants {len(cfg.layers)}"
        )
    for li, (layer, branches) in enumerate(zip(cfg.layers, params.layers)):
        if len(branches) != len(layer.branches):
            raise InvalidArgumentError(f"layer {li}: branch count mismatch")
        for bi, (spec, k) in enumerate(zip(layer.branches, branches)):
            expect = (spec.c_out, layer.c_in) + spec.shape
            if tuple(k.weights.value.shape) != expect:
                raise InvalidArgumentError(
                    f"layer {li} branch {bi}: weights {k.weights.value.shape}, "
                    f"config wants {expect}"
                )


def anc_forward(x: Variable, cfg: AncConfig, params: AncParams, tape: Tape,
                impl: str = "fast") -> Variable:
    """Apply the consensus stack to a (1, hs, ws, ht, wt) volume."""
    if x.value.ndim != 5 or x.value.shape[0] != 1:
        raise InvalidArgumentError(
            f"consensus input must be (1, hs, ws, ht, wt), got {x.value.shape}"
        )
    _check_params(cfg, params)
    h = x
    last = len(cfg.layers) - 1
    for li, (layer, branches) in enumerate(zip(cfg.layers, params.layers)):
        outs = [tape.conv4d(h, k.weights, k.bias, impl=impl) for k in branches]
        if layer.combine == "sum":
            h = outs[0]
            for o in outs[1:]:
                h = tape.add(h, o)
        elif len(outs) == 1:
            h = outs[0]
        else:
            h = tape.concat(outs, axis=0)
        if li != last:
            h = tape.relu(h)
    return h


def transpose_volume(tape: Tape, x: Variable) -> Variable:
    """Swap the matching direction of a channelled 4D volume."""
    return tape.permute(x, _TRANSPOSE_5D)


def bidirectional_refine(cs: Variable, cf: Variable, cfg: AncConfig,
                         params: AncParams, tape: Tape, impl: str = "fast") -> Variable:
    """Refine both correlation volumes in both matching directions.

    One parameter set serves all four applications. Terms group per input
    volume before the final sum, which is what makes swapping the images
    an exact transposition of the result.
    """
    if cs.value.shape != cf.value.shape:
        raise InvalidArgumentError(
            f"volume shapes differ: {cs.value.shape} vs {cf.value.shape}"
        )

    def refine_one(c: Variable) -> Variable:
        direct = anc_forward(c, cfg, params, tape, impl=impl)
        swapped = anc_forward(transpose_volume(tape, c), cfg, params, tape, impl=impl)
        return tape.add(direct, transpose_volume(tape, swapped))

    return tape.add(refine_one(cs), refine_one(cf))
