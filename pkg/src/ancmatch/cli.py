"""Command-line entry point.

Commands: gen, train, eval, match, heatmap, bench. Every config key is
available as a ``--key`` flag overriding the ``--config`` file. All JSON
outputs carry ``"schema_version": 1``; failures print one structured line
to stderr and exit nonzero.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import backend
from .config import KEYS, build_model_config, build_train_config, load_config_file, merge_config, parse_grid, parse_ints
from .dataset import generate_pairs, load_dataset, write_dataset
from .errors import AncError, InvalidArgumentError
from .evaluation import PckConfig, bench_conv4d, evaluate_pairs, identity_baseline
from .features import load_annotations, load_feature_pair
from .matching import SOURCE_TO_TARGET, match_records
from .model import predict_probability
from .training import TrainState, checkpoint_load, checkpoint_save, init_train_state, run_training


def write_pgm(path, values: np.ndarray) -> None:
    """Binary PGM (P5, maxval 255), min-max scaled; flat slices become black."""
    lo = float(values.min())
    hi = float(values.max())
    if hi > lo:
        scaled = np.round((values - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        scaled = np.zeros(values.shape, dtype=np.uint8)
    h, w = values.shape
    try:
        with open(path, "wb") as fh:
            fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
            fh.write(scaled.tobytes())
    except OSError as exc:
        raise AncError(f"cannot write heatmap to {path}: {exc}") from exc


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ancmatch",
        description="correspondence matching with adaptive neighbourhood consensus",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (
        ("gen", "generate a synthetic dataset"),
        ("train", "train a model on a dataset"),
        ("eval", "evaluate a checkpoint (PCK report)"),
        ("match", "match two feature files"),
        ("heatmap", "export one probability slice as PGM"),
        ("bench", "benchmark the 4D convolution paths"),
    ):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--config", help="key = value config file")
        for key, spec in KEYS.items():
            p.add_argument(f"--{key}", dest=f"opt_{key}", metavar="V", help=spec.help)
        if name == "match":
            p.add_argument("source_features", help="source TNS feature file")
            p.add_argument("target_features", help="target TNS feature file")
            p.add_argument("--keypoints", help="JSON file with [[x, y], ...] source pixels")
            p.add_argument("--dense", action="store_true", help="one record per grid cell")
        if name == "heatmap":
            p.add_argument("source_features")
            p.add_argument("target_features")
            p.add_argument("--cell", help="source cell as I,J")
            p.add_argument("--keypoint", help="source pixel as X,Y")
        if name == "eval":
            p.add_argument("--identity-baseline", action="store_true",
                           help="score the identity mapping on an annotation file")
            p.add_argument("--annotations", help="annotation JSON for --identity-baseline")
        if name == "bench":
            p.add_argument("--sizes", default="6,10,16", help="volume extents")
            p.add_argument("--bench-channels", default="1,16", help="channel counts")
            p.add_argument("--repetitions", type=int, default=5)
            p.add_argument("--json", action="store_true", help="emit a JSON report")
    return parser


def _gather_config(args) -> dict:
    file_values = load_config_file(args.config) if args.config else {}
    overrides = {}
    for key, spec in KEYS.items():
        raw = getattr(args, f"opt_{key}", None)
        if raw is not None:
            try:
                overrides[key] = spec.parse(raw)
            except (ValueError, InvalidArgumentError) as exc:
                raise InvalidArgumentError(f"bad value for --{key}: {exc}")
    return merge_config(file_values, overrides)


def _require(cfg: dict, key: str, what: str) -> str:
    if not cfg[key]:
        raise InvalidArgumentError(f"{what} requires --{key}")
    return cfg[key]


def _apply_threads(cfg: dict) -> None:
    n = cfg["threads"] or backend.default_threads()
    backend.set_threads(n)


def cmd_gen(args) -> int:
    cfg = _gather_config(args)
    _apply_threads(cfg)
    out = Path(_require(cfg, "out", "gen"))
    h, w = parse_grid(cfg["grid"])
    pairs = generate_pairs(
        seed=cfg["seed"], n_pairs=cfg["n_pairs"], h=h, w=w, d=cfg["depth"],
        families=tuple(f.strip() for f in cfg["transforms"].split(",") if f.strip()),
        max_translation=cfg["max_translation"], n_keypoints=cfg["n_keypoints"],
        noise_std=cfg["noise_std"], stride=cfg["stride"],
        repeated_blocks=cfg["repeated_blocks"],
    )
    write_dataset(out, pairs, seed=cfg["seed"])
    print(json.dumps({"schema_version": 1, "pairs": len(pairs), "dir": str(out)}))
    return 0


def cmd_train(args) -> int:
    cfg = _gather_config(args)
    _apply_threads(cfg)
    # validate the full configuration before any dataset work
    model_cfg = build_model_config(cfg)
    train_cfg = build_train_config(cfg)
    dataset = load_dataset(_require(cfg, "dataset", "train"))
    out = Path(_require(cfg, "out", "train"))
    out.mkdir(parents=True, exist_ok=True)
    state: TrainState | None = None
    if (out / "manifest.json").exists():
        state = checkpoint_load(out, model_cfg, train_cfg)
    log_path = out / "train.log"
    with open(log_path, "a", encoding="utf-8") as logf:
        def log(line: str) -> None:
            print(line)
            logf.write(line + "\n")
            logf.flush()

        state = run_training(dataset, model_cfg, train_cfg, state=state,
                             checkpoint_dir=out, log=log)
    checkpoint_save(out, state, model_cfg, train_cfg)
    return 0


def _load_model(cfg: dict):
    model_cfg = build_model_config(cfg)
    train_cfg = build_train_config(cfg)
    ckpt = cfg["checkpoint"]
    if ckpt:
        state = checkpoint_load(ckpt, model_cfg, train_cfg)
    else:
        state = init_train_state(model_cfg, train_cfg)
    return model_cfg, state


def cmd_eval(args) -> int:
    cfg = _gather_config(args)
    _apply_threads(cfg)
    pck_cfg = PckConfig(alpha=cfg["pck_alpha"], reference=cfg["pck_reference"])
    if args.identity_baseline:
        ann_path = args.annotations or (
            Path(_require(cfg, "dataset", "eval --identity-baseline")) / "pairs.json")
        annotations = load_annotations(ann_path)
        report = {
            "schema_version": 1,
            "pck": identity_baseline(annotations, pck_cfg),
            "alpha": pck_cfg.alpha,
            "reference": pck_cfg.reference,
            "pairs": len(annotations),
        }
    else:
        dataset = load_dataset(_require(cfg, "dataset", "eval"))
        model_cfg, state = _load_model(cfg)
        report = evaluate_pairs(state.params, model_cfg, dataset, pck_cfg)
    text = json.dumps(report, sort_keys=True)
    print(text)
    if cfg["out"]:
        Path(cfg["out"]).write_text(text + "\n", encoding="utf-8")
    return 0


def cmd_match(args) -> int:
    cfg = _gather_config(args)
    _apply_threads(cfg)
    model_cfg, state = _load_model(cfg)
    fs, ft = load_feature_pair(args.source_features, args.target_features,
                               stride=cfg["stride"])
    v = predict_probability(state.params, model_cfg, fs, ft, SOURCE_TO_TARGET)
    pixels = None
    if args.keypoints and not args.dense:
        with open(args.keypoints, "r", encoding="utf-8") as fh:
            pixels = np.asarray(json.load(fh), dtype=np.float64)
    records = match_records(v, cfg["stride"], source_pixels=pixels)
    text = json.dumps({"schema_version": 1, "matches": records})
    print(text)
    if cfg["out"]:
        Path(cfg["out"]).write_text(text + "\n", encoding="utf-8")
    return 0


def cmd_heatmap(args) -> int:
    cfg = _gather_config(args)
    _apply_threads(cfg)
    out = _require(cfg, "out", "heatmap")
    model_cfg, state = _load_model(cfg)
    fs, ft = load_feature_pair(args.source_features, args.target_features,
                               stride=cfg["stride"])
    v = predict_probability(state.params, model_cfg, fs, ft, SOURCE_TO_TARGET)
    hs, ws = v.values.shape[:2]
    if args.cell:
        i, j = (int(p) for p in args.cell.split(","))
    elif args.keypoint:
        x, y = (float(p) for p in args.keypoint.split(","))
        from .losses import nearest_cell

        i, j = nearest_cell((x, y), (hs, ws), cfg["stride"])
    else:
        raise InvalidArgumentError("heatmap needs --cell I,J or --keypoint X,Y")
    if not (0 <= i < hs and 0 <= j < ws):
        raise InvalidArgumentError(f"cell ({i}, {j}) outside {hs}x{ws} grid")
    write_pgm(out, v.values[i, j])
    return 0


def cmd_bench(args) -> int:
    cfg = _gather_config(args)
    _apply_threads(cfg)
    rows = bench_conv4d(
        sizes=parse_ints(args.sizes),
        channels=parse_ints(args.bench_channels),
        repetitions=args.repetitions,
        seed=cfg["seed"],
    )
    if args.json:
        print(json.dumps({"schema_version": 1, "rows": [r.to_dict() for r in rows]}))
    else:
        print(f"{'extent':>6} {'ch':>3} {'kernel':>10} {'backend':>7} "
              f"{'naive_ms':>10} {'fast_ms':>10} {'speedup':>8} {'max_diff':>10}")
        for r in rows:
            kshape = "x".join(str(s) for s in r.kernel_shape)
            print(f"{r.extent:>6} {r.channels:>3} {kshape:>10} {r.backend:>7} "
                  f"{r.naive_s * 1e3:>10.2f} {r.fast_s * 1e3:>10.2f} "
                  f"{r.speedup:>8.1f} {r.max_abs_diff:>10.2e}")
    return 0


_COMMANDS = {
    "gen": cmd_gen,
    "train": cmd_train,
    "eval": cmd_eval,
    "match": cmd_match,
    "heatmap": cmd_heatmap,
    "bench": cmd_bench,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except AncError as exc:
        print(f"error: {exc.kind}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
