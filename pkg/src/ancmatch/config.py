"""Plain ``key = value`` configuration with CLI flag overrides.

One option per line, ``#`` starts a comment, unknown keys are rejected.
Every key is mirrored as a ``--key`` command-line flag, which wins over the
file value.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

from .conv4d import anc_config
from .errors import InvalidArgumentError
from .losses import LossConfig
from .model import ModelConfig
from .self_similarity import SelfSimConfig
from .training import TrainConfig


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise InvalidArgumentError(f"expected a boolean, got {s!r}")


def parse_phases(s: str) -> tuple[tuple[int, int], ...]:
    """``"10:5,5:3,5:0"`` -> ((10, 5), (5, 3), (5, 0))."""
    phases = []
    for part in s.split(","):
        part = part.strip()
        if not part:
            continue
        bits = part.split(":")
        if len(bits) != 2:
            raise InvalidArgumentError(f"phase {part!r} must look like EPOCHS:KERNEL")
        phases.append((int(bits[0]), int(bits[1])))
    if not phases:
        raise InvalidArgumentError(f"no phases in {s!r}")
    return tuple(phases)


def parse_ints(s: str) -> tuple[int, ...]:
    return tuple(int(p) for p in s.split(",") if p.strip())


def parse_grid(s: str) -> tuple[int, int]:
    bits = s.lower().split("x")
    if len(bits) != 2:
        raise InvalidArgumentError(f"grid must look like HxW, got {s!r}")
    return int(bits[0]), int(bits[1])


@dataclass(frozen=True)
class _Key:
    parse: Callable[[str], Any]
    default: Any
    help: str


KEYS: dict[str, _Key] = {
    "seed": _Key(int, 0, "RNG seed for everything derived from this run"),
    "stride": _Key(int, 16, "pixels per feature-grid cell"),
    "window": _Key(int, 5, "self-similarity window side"),
    "conv_kernel": _Key(int, 3, "self-similarity conv layer kernel size"),
    "channels_1": _Key(int, 0, "first self-sim conv output channels (0 = window^2)"),
    "channels_2": _Key(int, 0, "second self-sim conv output channels (0 = window^2)"),
    "anc_variant": _Key(str, "d", "consensus architecture variant: a, b, c or d"),
    "channels": _Key(str, "1,16,16,1", "consensus layer channel plan"),
    "alpha": _Key(float, 0.001, "orthogonal loss weight"),
    "lr": _Key(float, 0.001, "Adam learning rate"),
    "phases": _Key(str, "10:5,5:3,5:0", "training phases as EPOCHS:KERNEL,..."),
    "gaussian_sigma": _Key(float, 0.0, "Gaussian sigma override (0 = kernel/4)"),
    "dataset": _Key(str, "", "dataset directory"),
    "out": _Key(str, "", "output directory or file"),
    "checkpoint": _Key(str, "", "checkpoint directory"),
    "grid": _Key(str, "16x16", "feature grid size HxW for gen"),
    "depth": _Key(int, 32, "feature depth for gen"),
    "n_pairs": _Key(int, 500, "number of pairs for gen"),
    "n_keypoints": _Key(int, 8, "keypoints per pair for gen"),
    "noise_std": _Key(float, 0.3, "target feature noise for gen"),
    "transforms": _Key(str, "translate,flip", "transform families for gen"),
    "max_translation": _Key(int, 4, "translation bound in cells for gen"),
    "repeated_blocks": _Key(_parse_bool, False, "duplicate feature blocks in gen"),
    "dtype": _Key(str, "float64", "compute dtype: float64 or float32"),
    "threads": _Key(int, 0, "worker cap (0 = ANC_THREADS or cpu count)"),
    "pck_alpha": _Key(float, 0.1, "PCK threshold fraction"),
    "pck_reference": _Key(str, "image", "PCK reference extent: image or bounding_box"),
    "conv_impl": _Key(str, "fast", "4D convolution path: fast or naive"),
}


def default_config() -> dict[str, Any]:
    return {name: key.default for name, key in KEYS.items()}


def parse_config_text(text: str, where: str = "<config>") -> dict[str, Any]:
    values: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InvalidArgumentError(f"{where}:{lineno}: expected 'key = value'")
        name, _, value = line.partition("=")
        name = name.strip()
        if name not in KEYS:
            raise InvalidArgumentError(f"{where}:{lineno}: unknown key {name!r}")
        try:
            values[name] = KEYS[name].parse(value.strip())
        except (ValueError, InvalidArgumentError) as exc:
            raise InvalidArgumentError(f"{where}:{lineno}: bad value for {name}: {exc}")
    return values


def load_config_file(path) -> dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return parse_config_text(fh.read(), where=str(path))
    except OSError as exc:
        raise InvalidArgumentError(f"cannot read config {path}: {exc}") from exc


def merge_config(file_values: dict[str, Any], overrides: dict[str, Any]) -> dict[str, Any]:
    cfg = default_config()
    cfg.update(file_values)
    cfg.update(overrides)
    return cfg


def build_model_config(cfg: dict[str, Any]) -> ModelConfig:
    selfsim = SelfSimConfig(
        window=cfg["window"],
        conv_kernel=cfg["conv_kernel"],
        channels_1=cfg["channels_1"] or None,
        channels_2=cfg["channels_2"] or None,
    )
    anc = anc_config(cfg["anc_variant"], parse_ints(cfg["channels"]))
    phases = parse_phases(cfg["phases"])
    loss = LossConfig(
        alpha=cfg["alpha"],
        gaussian_kernel=phases[0][1],
        gaussian_sigma=cfg["gaussian_sigma"] or None,
    )
    return ModelConfig(
        selfsim=selfsim,
        anc=anc,
        loss=loss,
        stride=cfg["stride"],
        dtype=cfg["dtype"],
        conv_impl=cfg["conv_impl"],
    )


def build_train_config(cfg: dict[str, Any]) -> TrainConfig:
    return TrainConfig(
        phases=parse_phases(cfg["phases"]),
        lr=cfg["lr"],
        seed=cfg["seed"],
    )
