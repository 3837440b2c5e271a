"""End-to-end pipeline assembly: features -> self-similarity -> correlation
volumes -> bidirectional consensus refinement -> mutual-NN filtering ->
losses or probability maps.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tape, Variable
from .conv4d import AncConfig, AncParams, anc_config, bidirectional_refine, init_anc_params
from .errors import InvalidArgumentError
from .features import FeatureMap, PairAnnotation
from .losses import LossConfig, build_match_matrices, loss_keypoint, loss_orthogonal, loss_total
from .matching import ProbabilityMap4D, mutual_nn_filter, softmax_probabilities, SOURCE_TO_TARGET
from .self_similarity import SelfSimConfig, SelfSimParams, init_selfsim_params, multiscale_forward, self_sim_base
from .tensor_core import Rng


@dataclass(frozen=True)
class ModelConfig:
    selfsim: SelfSimConfig = field(default_factory=SelfSimConfig)
    anc: AncConfig = field(default_factory=lambda: anc_config("d"))
    loss: LossConfig = field(default_factory=LossConfig)
    stride: int = 16
    dtype: str = "float64"
    conv_impl: str = "fast"

    def np_dtype(self):
        if self.dtype not in ("float32", "float64"):
            raise InvalidArgumentError(f"dtype must be float32/float64, got {self.dtype}")
        return np.dtype(self.dtype)


@dataclass
class ModelParams:
    selfsim: SelfSimParams
    anc: AncParams

    def named(self) -> list[tuple[str, Variable]]:
        return self.selfsim.named() + self.anc.named()

    def variables(self) -> list[Variable]:
        return [v for _, v in self.named()]


def init_model_params(cfg: ModelConfig, rng: Rng) -> ModelParams:
    dtype = cfg.np_dtype()
    return ModelParams(
        selfsim=init_selfsim_params(cfg.selfsim, rng.child(11), dtype=dtype),
        anc=init_anc_params(cfg.anc, rng.child(12), dtype=dtype),
    )


def config_fingerprint(cfg: ModelConfig) -> str:
    """Stable hash of everything a checkpoint must agree on to resume."""
    doc = {
        "selfsim": [cfg.selfsim.window, cfg.selfsim.conv_kernel, cfg.selfsim.c1, cfg.selfsim.c2],
        "anc": {
            "variant": cfg.anc.variant,
            "channels": list(cfg.anc.channels),
            "layers": [
                [layer.c_in, layer.combine, [[b.c_out, list(b.shape)] for b in layer.branches]]
                for layer in cfg.anc.layers
            ],
        },
        "loss": [cfg.loss.alpha, cfg.loss.gaussian_kernel, cfg.loss.gaussian_sigma],
        "stride": cfg.stride,
        "dtype": cfg.dtype,
    }
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


@dataclass
class PairCache:
    """Per-pair tensors that never change across training steps."""

    fs_values: np.ndarray
    ft_values: np.ndarray
    s0_s: np.ndarray
    s0_t: np.ndarray


def build_pair_cache(cfg: ModelConfig, fs: FeatureMap, ft: FeatureMap) -> PairCache:
    dtype = cfg.np_dtype()
    fsv = fs.values.astype(dtype, copy=False)
    ftv = ft.values.astype(dtype, copy=False)
    return PairCache(
        fs_values=fsv,
        ft_values=ftv,
        s0_s=self_sim_base(FeatureMap(fsv, fs.stride), cfg.selfsim.window),
        s0_t=self_sim_base(FeatureMap(ftv, ft.stride), cfg.selfsim.window),
    )


def forward_filtered(tape: Tape, params: ModelParams, cfg: ModelConfig,
                     cache: PairCache) -> Variable:
    """Full differentiable forward pass to the filtered volume c-hat."""
    stride = cfg.stride
    s_s = multiscale_forward(FeatureMap(cache.fs_values, stride), cfg.selfsim,
                             params.selfsim, tape, s0=cache.s0_s)
    s_t = multiscale_forward(FeatureMap(cache.ft_values, stride), cfg.selfsim,
                             params.selfsim, tape, s0=cache.s0_t)
    cs = tape.correlation(s_s, s_t)
    cf = tape.correlation(tape.constant(cache.fs_values), tape.constant(cache.ft_values))
    hs, ws, ht, wt = cs.value.shape
    cs5 = tape.reshape(cs, (1, hs, ws, ht, wt))
    cf5 = tape.reshape(cf, (1, hs, ws, ht, wt))
    cbar = bidirectional_refine(cs5, cf5, cfg.anc, params.anc, tape, impl=cfg.conv_impl)
    cbar4 = tape.reshape(cbar, (hs, ws, ht, wt))
    return mutual_nn_filter(tape, cbar4)


@dataclass
class PairLoss:
    total: Variable
    l_k: float
    l_o: float


def pair_loss(tape: Tape, params: ModelParams, cfg: ModelConfig, cache: PairCache,
              ann: PairAnnotation, gaussian_kernel: int,
              gt_cache: dict | None = None) -> PairLoss:
    """Loss for one annotated pair under the given smoothing kernel."""
    c_hat = forward_filtered(tape, params, cfg, cache)
    loss_cfg = cfg.loss.with_kernel(gaussian_kernel)
    m_s, m_s_gt, m_t, m_t_gt = build_match_matrices(
        ann, c_hat, loss_cfg, cfg.stride, tape, gt_cache=gt_cache
    )
    l_k = loss_keypoint(tape, m_s, m_s_gt, m_t, m_t_gt)
    l_o = None
    if loss_cfg.alpha > 0:
        l_o = loss_orthogonal(tape, m_s, m_s_gt, m_t, m_t_gt)
    total = loss_total(tape, l_k, l_o, loss_cfg.alpha)
    return PairLoss(
        total=total,
        l_k=float(l_k.value),
        l_o=float(l_o.value) if l_o is not None else 0.0,
    )


def predict_probability(params: ModelParams, cfg: ModelConfig, fs: FeatureMap,
                        ft: FeatureMap, direction: str = SOURCE_TO_TARGET,
                        cache: PairCache | None = None) -> ProbabilityMap4D:
    """Inference: matching probabilities for a feature pair."""
    if cache is None:
        cache = build_pair_cache(cfg, fs, ft)
    tape = Tape()
    c_hat = forward_filtered(tape, params, cfg, cache)
    return softmax_probabilities(c_hat.value, direction)
