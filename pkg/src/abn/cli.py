"""Command-line pipeline: synth -> train -> infer -> eval, plus gradcheck/plot.

Configuration is a flat dotted-key JSON object; ``--config`` loads a file,
repeated ``--set key=value`` flags override it, and unknown keys are
rejected.  Every run echoes the effective configuration to the output
directory so it can be replayed with ``--config`` byte-for-byte.

Exit codes: 0 success, 2 configuration error, 3 IO/format error,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from .boundary import make_sampler
from .data import ModelConfig
from .errors import (AbnError, AnnotationError, BundleError, CheckpointError,
                     ConfigError, DataError, DivergenceError, PackingError)
from .evaluation import (detection_thresholds, evaluate_proposals,
                         proposal_thresholds)
from .inference import (InferenceConfig, read_proposals, video_proposals,
                        write_proposals)
from .io_synth import SynthSpec, generate, parse_annotations, read_dataset, write_dataset
from .training import (augment_dataset, config_from_header, grad_check,
                       load_checkpoint, save_checkpoint, train)

OUT_DIR_ENV = "ABN_OUT_DIR"
GRADCHECK_TOLERANCE = 1e-4

DEFAULT_CONFIG: dict = {
    "seed": 7,
    # synthetic data
    "synth.n_train": 20,
    "synth.n_val": 10,
    "synth.T": 50,
    "synth.C": 32,
    "synth.classes": 5,
    "synth.actions_min": 1,
    "synth.actions_max": 3,
    "synth.agent_rate": 1.5,
    "synth.snr": 2.5,
    # model / training
    "model.T": 50,
    "model.C": 32,
    "model.D": 25,
    "model.n_samples": 8,
    "model.heads": 4,
    "model.layers": 1,
    "model.lambda1": 1.0,
    "model.lambda2": 1.0,
    "model.lambda_reg": 10.0,
    "model.lr": 2e-3,
    "model.epochs": 40,
    "model.tau_upper": 0.98,
    "model.tau_lower": 0.3,
    "model.rho_ext": 0.25,
    "model.dtype": "float32",
    "model.batch_size": 16,
    "model.encoder_residual": True,
    "model.encoder_ffn": True,
    "model.feature_mode": "agent_env",
    "model.regress_binary": False,
    # inference
    "infer.split": "val",
    "infer.tau_rel": 0.5,
    "infer.nms": "soft",
    "infer.sigma": 0.4,
    "infer.score_floor": 0.001,
    "infer.iou_thresh": 0.65,
    "infer.top_k": 100,
    # evaluation
    "eval.an_values": [1, 5, 10, 50, 100],
    "eval.proposal_thresholds": "anet",
    "eval.detection_thresholds": "anet",
    "eval.an_mode": "per_video",
    # plots
    "plot.top_k": 10,
}


def _parse_set(item: str) -> tuple[str, object]:
    if "=" not in item:
        raise ConfigError(f"--set expects key=value, got {item!r}")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def load_config(config_path, sets, seed) -> dict:
    config = dict(DEFAULT_CONFIG)
    if config_path is not None:
        try:
            with open(config_path, "r", encoding="utf-8") as fh:
                loaded = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{config_path}: config is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError(f"{config_path}: config must be a flat JSON object")
        for key, value in loaded.items():
            if key not in config:
                raise ConfigError(f"{config_path}: unknown config key {key!r}")
            config[key] = value
    for item in sets or []:
        key, value = _parse_set(item)
        if key not in config:
            raise ConfigError(f"--set: unknown config key {key!r}")
        config[key] = value
    if seed is not None:
        config["seed"] = int(seed)
    return config


def model_config(config: dict) -> ModelConfig:
    return ModelConfig(
        C=int(config["model.C"]),
        T=int(config["model.T"]),
        D=int(config["model.D"]),
        n_samples=int(config["model.n_samples"]),
        heads=int(config["model.heads"]),
        layers=int(config["model.layers"]),
        lambda1=float(config["model.lambda1"]),
        lambda2=float(config["model.lambda2"]),
        lambda_reg=float(config["model.lambda_reg"]),
        lr=float(config["model.lr"]),
        epochs=int(config["model.epochs"]),
        tau_upper=float(config["model.tau_upper"]),
        tau_lower=float(config["model.tau_lower"]),
        seed=int(config["seed"]),
        rho_ext=float(config["model.rho_ext"]),
        dtype=str(config["model.dtype"]),
        batch_size=int(config["model.batch_size"]),
        encoder_residual=bool(config["model.encoder_residual"]),
        encoder_ffn=bool(config["model.encoder_ffn"]),
        feature_mode=str(config["model.feature_mode"]),
        regress_binary=bool(config["model.regress_binary"]),
    )


def infer_config(config: dict) -> InferenceConfig:
    return InferenceConfig(
        tau_rel=float(config["infer.tau_rel"]),
        nms=str(config["infer.nms"]),
        sigma=float(config["infer.sigma"]),
        score_floor=float(config["infer.score_floor"]),
        iou_thresh=float(config["infer.iou_thresh"]),
        top_k=int(config["infer.top_k"]),
    )


def _thresholds(value, kind: str):
    if isinstance(value, str):
        return proposal_thresholds(value) if kind == "proposal" else detection_thresholds(value)
    return [float(v) for v in value]


def resolve_out_dir(args) -> Path:
    out = args.out or os.environ.get(OUT_DIR_ENV)
    if not out:
        raise ConfigError(f"an output directory is required (--out or ${OUT_DIR_ENV})")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def echo_config(config: dict, out_dir: Path) -> None:
    with open(out_dir / "effective_config.json", "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=1, sort_keys=True)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args, config) -> int:
    out = resolve_out_dir(args)
    echo_config(config, out)
    base = dict(
        T=int(config["synth.T"]), C=int(config["synth.C"]),
        n_classes=int(config["synth.classes"]),
        actions_min=int(config["synth.actions_min"]),
        actions_max=int(config["synth.actions_max"]),
        agent_rate=float(config["synth.agent_rate"]),
        snr=float(config["synth.snr"]),
    )
    seed = int(config["seed"])
    for split, n, seed_off in (("train", int(config["synth.n_train"]), 0),
                               ("val", int(config["synth.n_val"]), 1)):
        spec = SynthSpec(n_videos=n, seed=seed + seed_off, id_prefix=split, **base)
        bundles, records = generate(spec)
        write_dataset(bundles, records, out / split)
        print(f"synth: wrote {n} {split} videos to {out / split}")
    return 0


def _load_split(data_dir, split: str):
    path = Path(data_dir) / split
    if not path.exists():
        raise ConfigError(f"--data: no {split}/ directory under {data_dir}")
    return read_dataset(path)


def cmd_train(args, config) -> int:
    out = resolve_out_dir(args)
    echo_config(config, out)
    cfg = model_config(config)
    train_pairs = _load_split(args.data, "train")
    val_pairs = _load_split(args.data, "val")
    sample = train_pairs[0][1]
    if sample.T != cfg.T or sample.C != cfg.C:
        raise ConfigError(
            f"model.T/model.C = ({cfg.T}, {cfg.C}) but data has "
            f"(T={sample.T}, C={sample.C}); adjust the config or regenerate"
        )
    by_id = {rec.video_id: (rec, bundle) for rec, bundle in train_pairs}
    kept = augment_dataset([rec for rec, _ in train_pairs], cfg.tau_upper, cfg.tau_lower)
    train_set = [by_id[rec.video_id] for rec in kept]

    def progress(row):
        auc = f"{row['val_auc']:.2f}" if row["val_auc"] is not None else "-"
        print(f"epoch {row['epoch']:3d}  loss {row['loss']:.4f}  val AUC {auc}")

    state = train(train_set, val_pairs, cfg, progress=progress)
    save_checkpoint(out / "checkpoint.ckpt", state.best_params, cfg,
                    epoch=state.best_epoch, best_auc=state.best_auc)
    with open(out / "train_log.json", "w", encoding="utf-8") as fh:
        json.dump(state.history, fh, indent=1)
    best = f"{state.best_auc:.2f}" if state.best_auc is not None else "-"
    print(f"train: best val AUC {best} at epoch {state.best_epoch}; "
          f"checkpoint -> {out / 'checkpoint.ckpt'}")
    return 0


def cmd_infer(args, config) -> int:
    out = resolve_out_dir(args)
    echo_config(config, out)
    params, header = load_checkpoint(args.checkpoint)
    cfg = config_from_header(header)
    icfg = infer_config(config)
    split = str(config["infer.split"])
    pairs = _load_split(args.data, split)
    sampler = make_sampler(cfg)

    def run_one(pair):
        rec, bundle = pair
        return rec.video_id, video_proposals(params, bundle, rec, cfg, icfg, sampler=sampler)

    if args.jobs > 1:
        sampler._weights(cfg.np_dtype)  # warm shared caches before threading
        if sampler.backend == "numpy":
            sampler._csr(cfg.np_dtype)
        with ThreadPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(run_one, pairs))
    else:
        results = [run_one(p) for p in pairs]
    proposals = dict(sorted(results))
    write_proposals(out / "proposals.json", proposals)
    n = sum(len(v) for v in proposals.values())
    print(f"infer: wrote {n} proposals for {len(proposals)} {split} videos")
    return 0


def cmd_eval(args, config) -> int:
    out = resolve_out_dir(args)
    echo_config(config, out)
    records = parse_annotations(args.annotations)
    proposals = read_proposals(args.proposals)
    report = evaluate_proposals(
        records, proposals,
        an_values=[int(a) for a in config["eval.an_values"]],
        prop_thresholds=_thresholds(config["eval.proposal_thresholds"], "proposal"),
        det_thresholds=_thresholds(config["eval.detection_thresholds"], "detection"),
        an_mode=str(config["eval.an_mode"]),
    )
    with open(out / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=1, sort_keys=True)
    for an, v in report.ar_at_an.items():
        print(f"AR@{an}: {v:.4f}")
    print(f"AUC: {report.auc:.2f}")
    if report.average_map is not None:
        for th, v in report.map_at_tiou.items():
            print(f"mAP@{th}: {v:.4f}")
        print(f"average mAP: {report.average_map:.4f}")
    return 0


def cmd_gradcheck(args, config) -> int:
    report = grad_check(seed=int(config["seed"]) + 195)
    for name in sorted(report["per_group"]):
        print(f"{name:24s} {report['per_group'][name]:.3e}")
    print(f"max relative error: {report['max_rel_err']:.3e} (h={report['h']})")
    if args.out:
        out = resolve_out_dir(args)
        echo_config(config, out)
        with open(out / "gradcheck.json", "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=1, sort_keys=True)
    if report["max_rel_err"] > GRADCHECK_TOLERANCE:
        print(f"gradient check FAILED tolerance {GRADCHECK_TOLERANCE}", file=sys.stderr)
        return 4
    return 0


def cmd_plot(args, config) -> int:
    from .plotting import plot_video_timeline

    out = resolve_out_dir(args)
    echo_config(config, out)
    records = {r.video_id: r for r in parse_annotations(args.annotations)}
    proposals = read_proposals(args.proposals)
    plots = out / "plots"
    count = 0
    for vid in sorted(proposals):
        if vid not in records:
            continue
        plot_video_timeline(records[vid], proposals[vid], plots / f"{vid}.png",
                            top_k=int(config["plot.top_k"]))
        count += 1
    print(f"plot: wrote {count} timelines to {plots}")
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="abn",
        description="temporal action proposal pipeline on precomputed features",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="flat JSON config file")
        p.add_argument("--out", help=f"output directory (or ${OUT_DIR_ENV})")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--jobs", type=int, default=1, help="worker threads (default 1)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")

    p = sub.add_parser("synth", help="generate synthetic train/val datasets")
    common(p)
    p = sub.add_parser("train", help="train on a synth directory")
    common(p)
    p.add_argument("--data", required=True, help="directory with train/ and val/")
    p = sub.add_parser("infer", help="decode proposals with a checkpoint")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("eval", help="score a proposal file against annotations")
    common(p)
    p.add_argument("--proposals", required=True)
    p.add_argument("--annotations", required=True)
    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    common(p)
    p = sub.add_parser("plot", help="timeline plots of proposals vs ground truth")
    common(p)
    p.add_argument("--proposals", required=True)
    p.add_argument("--annotations", required=True)
    return parser


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
    "plot": cmd_plot,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = load_config(args.config, args.set, args.seed)
        return _COMMANDS[args.command](args, config)
    except (ConfigError, PackingError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (AnnotationError, BundleError, CheckpointError, DataError, OSError,
            json.JSONDecodeError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 3
    except (DivergenceError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
