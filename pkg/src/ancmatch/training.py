"""Training loop: Adam, the Gaussian-smoothing phase schedule, epoch
orchestration, and bit-exact checkpoint/resume.

Determinism contract: a fixed seed fixes the parameter trajectory exactly.
Per-epoch shuffles derive statelessly from (seed, epoch index), so a
resumed run shuffles identically to an uninterrupted one.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, Variable, backward, zero_grads
from .errors import FormatError, InvalidArgumentError, IoError, NumericError
from .features import FeatureMap, PairAnnotation
from .model import (
    ModelConfig,
    ModelParams,
    PairCache,
    build_pair_cache,
    config_fingerprint,
    init_model_params,
    pair_loss,
)
from .tensor_core import Rng, tns_read, tns_write

CHECKPOINT_MANIFEST = "manifest.json"
CHECKPOINT_VERSION = 1


class Adam:
    """Bias-corrected Adam over named parameters; grads zeroed after a step."""

    def __init__(self, params: Sequence[tuple[str, Variable]], lr: float = 0.001,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise InvalidArgumentError(f"lr must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = {name: np.zeros_like(p.value) for name, p in self.params}
        self.v = {name: np.zeros_like(p.value) for name, p in self.params}

    def step(self) -> None:
        for name, p in self.params:
            if p.grad is None or not np.isfinite(p.grad).all():
                raise NumericError(f"non-finite gradient in {name}; step aborted")
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        for name, p in self.params:
            g = p.grad
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * np.square(g)
            p.value -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)
        zero_grads([p for _, p in self.params])


@dataclass(frozen=True)
class TrainConfig:
    phases: tuple[tuple[int, int], ...] = ((10, 5), (5, 3), (5, 0))
    lr: float = 0.001
    seed: int = 0

    def __post_init__(self):
        if not self.phases:
            raise InvalidArgumentError("need at least one phase")
        for epochs, kernel in self.phases:
            if epochs < 1:
                raise InvalidArgumentError(f"phase epochs must be >= 1, got {epochs}")
            if kernel != 0 and (kernel < 3 or kernel % 2 == 0):
                raise InvalidArgumentError(f"phase kernel must be 0 or odd >= 3, got {kernel}")

    @property
    def total_epochs(self) -> int:
        return sum(e for e, _ in self.phases)

    def kernel_for_epoch(self, epoch: int) -> int:
        """Smoothing kernel for a 1-based global epoch number."""
        done = 0
        for epochs, kernel in self.phases:
            done += epochs
            if epoch <= done:
                return kernel
        raise InvalidArgumentError(f"epoch {epoch} beyond schedule ({done} epochs)")


@dataclass
class TrainingPair:
    source: FeatureMap
    target: FeatureMap
    annotation: PairAnnotation


@dataclass
class EpochReport:
    epoch: int
    kernel: int
    mean_l_k: float
    mean_l_o: float
    pairs: int

    def to_line(self) -> str:
        return (f"epoch={self.epoch} kernel={self.kernel} "
                f"mean_lk={self.mean_l_k:.10g} mean_lo={self.mean_l_o:.10g} "
                f"pairs={self.pairs}")


@dataclass
class TrainState:
    params: ModelParams
    optimizer: Adam
    epoch: int = 0  # last completed global epoch
    reports: list[EpochReport] = field(default_factory=list)


def _shuffle_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return Rng(seed).child(3).child(epoch).permutation(n)


def train_epoch(dataset: Sequence[TrainingPair], state: TrainState,
                model_cfg: ModelConfig, train_cfg: TrainConfig,
                caches: list[PairCache] | None = None,
                gt_cache: dict | None = None) -> EpochReport:
    """One seeded-shuffled pass, batch size one pair."""
    if not dataset:
        raise InvalidArgumentError("dataset is empty")
    epoch = state.epoch + 1
    kernel = train_cfg.kernel_for_epoch(epoch)
    order = _shuffle_order(train_cfg.seed, epoch, len(dataset))
    sum_lk = 0.0
    sum_lo = 0.0
    for pos in order:
        pair = dataset[pos]
        cache = caches[pos] if caches is not None else build_pair_cache(
            model_cfg, pair.source, pair.target)
        tape = Tape()
        try:
            pl = pair_loss(tape, state.params, model_cfg, cache, pair.annotation,
                           kernel, gt_cache=gt_cache)
            if not np.isfinite(pl.total.value):
                raise NumericError("loss is not finite")
            backward(tape, pl.total)
            state.optimizer.step()
        except NumericError as exc:
            raise NumericError(f"pair {int(pos)}: {exc}") from exc
        sum_lk += pl.l_k
        sum_lo += pl.l_o
    report = EpochReport(
        epoch=epoch,
        kernel=kernel,
        mean_l_k=sum_lk / len(dataset),
        mean_l_o=sum_lo / len(dataset),
        pairs=len(dataset),
    )
    state.epoch = epoch
    state.reports.append(report)
    return report


def init_train_state(model_cfg: ModelConfig, train_cfg: TrainConfig) -> TrainState:
    params = init_model_params(model_cfg, Rng(train_cfg.seed))
    optimizer = Adam(params.named(), lr=train_cfg.lr)
    return TrainState(params=params, optimizer=optimizer)


def run_training(dataset: Sequence[TrainingPair], model_cfg: ModelConfig,
                 train_cfg: TrainConfig, state: TrainState | None = None,
                 checkpoint_dir=None,
                 log: Callable[[str], None] | None = None) -> TrainState:
    """Run the phase schedule (or the remainder of it when resuming)."""
    if state is None:
        state = init_train_state(model_cfg, train_cfg)
    caches = [build_pair_cache(model_cfg, p.source, p.target) for p in dataset]
    gt_cache: dict = {}
    while state.epoch < train_cfg.total_epochs:
        report = train_epoch(dataset, state, model_cfg, train_cfg,
                             caches=caches, gt_cache=gt_cache)
        if log is not None:
            log(report.to_line())
        if checkpoint_dir is not None:
            checkpoint_save(checkpoint_dir, state, model_cfg, train_cfg)
    return state


# ---------------------------------------------------------------------------
# checkpointing


def checkpoint_save(directory, state: TrainState, model_cfg: ModelConfig,
                    train_cfg: TrainConfig) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = {}

    def store(name: str, arr: np.ndarray) -> None:
        # TNS files carry rank <= 5; fold leading axes of 4D-conv weights
        # and record the true dims in the manifest
        arr = np.asarray(arr)
        flat = arr.reshape((-1,) + arr.shape[-4:]) if arr.ndim > 5 else arr
        fname = name + ".tns"
        tns_write(flat, directory / fname)
        tensors[name] = {"file": fname, "dims": list(arr.shape), "dtype": str(arr.dtype)}

    for name, p in state.params.named():
        store("param." + name, p.value)
        store("adam.m." + name, state.optimizer.m[name])
        store("adam.v." + name, state.optimizer.v[name])

    manifest = {
        "schema_version": 1,
        "checkpoint_version": CHECKPOINT_VERSION,
        "config_hash": config_fingerprint(model_cfg),
        "epoch": state.epoch,
        "adam": {
            "t": state.optimizer.t,
            "lr": state.optimizer.lr,
            "beta1": state.optimizer.beta1,
            "beta2": state.optimizer.beta2,
            "eps": state.optimizer.eps,
        },
        "phases": [list(p) for p in train_cfg.phases],
        "seed": train_cfg.seed,
        "tensors": tensors,
        "reports": [
            [r.epoch, r.kernel, r.mean_l_k, r.mean_l_o, r.pairs] for r in state.reports
        ],
    }
    with open(directory / CHECKPOINT_MANIFEST, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)


def checkpoint_load(directory, model_cfg: ModelConfig,
                    train_cfg: TrainConfig | None = None) -> TrainState:
    """Restore params and optimizer state; resume continues bit-exactly."""
    directory = Path(directory)
    manifest_path = directory / CHECKPOINT_MANIFEST
    try:
        with open(manifest_path, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise FormatError(f"cannot read checkpoint manifest {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{manifest_path}: invalid JSON: {exc}") from exc

    if manifest.get("checkpoint_version") != CHECKPOINT_VERSION:
        raise FormatError(
            f"checkpoint version {manifest.get('checkpoint_version')} != {CHECKPOINT_VERSION}"
        )
    if manifest.get("config_hash") != config_fingerprint(model_cfg):
        raise FormatError("checkpoint was written under a different model config")
    if train_cfg is not None:
        if manifest.get("seed") != train_cfg.seed or \
                [list(p) for p in train_cfg.phases] != manifest.get("phases"):
            raise FormatError("checkpoint was written under a different train config")

    tensors = manifest.get("tensors", {})

    def load(name: str) -> np.ndarray:
        entry = tensors.get(name)
        if entry is None:
            raise FormatError(f"checkpoint is missing tensor {name!r}")
        path = directory / entry["file"]
        try:
            arr = tns_read(path)
        except IoError as exc:
            raise FormatError(f"checkpoint tensor unreadable: {exc}") from exc
        dims = entry["dims"]
        if arr.size != int(np.prod(dims)):
            raise FormatError(
                f"{path}: {arr.size} values disagree with manifest dims {dims}"
            )
        return arr.reshape(dims)

    params = init_model_params(model_cfg, Rng(int(manifest.get("seed", 0))))
    adam_cfg = manifest["adam"]
    optimizer = Adam(params.named(), lr=adam_cfg["lr"], beta1=adam_cfg["beta1"],
                     beta2=adam_cfg["beta2"], eps=adam_cfg["eps"])
    for name, p in params.named():
        val = load("param." + name)
        if val.shape != p.value.shape:
            raise FormatError(f"tensor {name} has shape {val.shape}, expected {p.value.shape}")
        p.value[...] = val
        optimizer.m[name][...] = load("adam.m." + name)
        optimizer.v[name][...] = load("adam.v." + name)
    optimizer.t = int(adam_cfg["t"])

    state = TrainState(params=params, optimizer=optimizer, epoch=int(manifest["epoch"]))
    state.reports = [
        EpochReport(epoch=e, kernel=k, mean_l_k=lk, mean_l_o=lo, pairs=n)
        for e, k, lk, lo, n in manifest.get("reports", [])
    ]
    return state
