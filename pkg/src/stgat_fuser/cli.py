"""Command-line entry point: synth, train, evaluate, ablate, baseline, gradcheck.

Exit codes: 0 success, 1 validation error, 2 runtime/numeric error.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

from . import data as data_mod
from .errors import NumericError, SchemaError, ValidationError
from .evaluation import (DEFAULT_SEEDS, evaluate_model, run_ablation, run_baselines, run_one)
from .gradcheck import run_gradcheck
from .model import BASELINE_KINDS, FUSER, ModelConfig, build, read_model_file, save_model
from .training import TrainConfig

log = logging.getLogger("stgat_fuser")

ARTIFACT_ROOT_ENV = "STGAT_ARTIFACT_ROOT"
ALL_KINDS = (*BASELINE_KINDS, FUSER)

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME = 0, 1, 2


# --------------------------------------------------------------------------
# helpers


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def load_config(path) -> tuple[ModelConfig, TrainConfig]:
    """Flat JSON document whose keys are ModelConfig and TrainConfig fields.

    ``seed`` is shared by both.
    """
    if path is None:
        return ModelConfig(), TrainConfig()
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise ValidationError(f"config {path}: expected a flat JSON object")
    model_keys = {f.name for f in dataclasses.fields(ModelConfig)}
    train_keys = {f.name for f in dataclasses.fields(TrainConfig)}
    unknown = set(raw) - model_keys - train_keys
    if unknown:
        raise ValidationError(f"config {path}: unknown keys {sorted(unknown)}")
    try:
        model_cfg = ModelConfig(**{k: v for k, v in raw.items() if k in model_keys})
        train_cfg = TrainConfig(**{k: v for k, v in raw.items() if k in train_keys})
    except TypeError as exc:
        raise ValidationError(f"config {path}: {exc}") from None
    return model_cfg, train_cfg


def apply_overrides(model_cfg: ModelConfig, train_cfg: TrainConfig, args) -> tuple[ModelConfig, TrainConfig]:
    if getattr(args, "seed", None) is not None:
        model_cfg = dataclasses.replace(model_cfg, seed=args.seed)
        train_cfg = dataclasses.replace(train_cfg, seed=args.seed)
    for flag in ("max_epochs", "patience", "batch_size", "learning_rate"):
        value = getattr(args, flag, None)
        if value is not None:
            train_cfg = dataclasses.replace(train_cfg, **{flag: value})
    return model_cfg, train_cfg


def effective_config(model_cfg: ModelConfig, train_cfg: TrainConfig) -> dict:
    merged = model_cfg.to_dict()
    merged.update(train_cfg.to_dict())
    return merged


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()[:8]


def resolve_out_dir(out: str | None, command: str, config: dict) -> Path:
    if out:
        path = Path(out)
    else:
        root = Path(os.environ.get(ARTIFACT_ROOT_ENV, "runs"))
        stamp = datetime.now(timezone.utc).strftime("%Y%m%dT%H%M%S")
        path = root / f"{stamp}-{command}-{config_hash(config)}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_json_atomic(path: Path, payload: dict) -> Path:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    tmp.replace(path)
    return path


def now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_manifest(out_dir: Path, command: str, argv, config: dict | None, corpus: Path | None,
                   seeds, started: str, artifacts: dict, stop_reasons: dict | None = None) -> Path:
    missing = [str(p) for p in artifacts.values() if not Path(p).exists()]
    if missing:
        raise RuntimeError(f"manifest lists missing artifacts: {missing}")
    manifest = {
        "command": command,
        "argv": list(argv),
        "config": config,
        "corpus_sha256": file_sha256(corpus) if corpus else None,
        "seeds": list(seeds) if seeds is not None else None,
        "started": started,
        "finished": now_iso(),
        "artifacts": {k: str(v) for k, v in artifacts.items()},
        "stop_reasons": stop_reasons or {},
    }
    return write_json_atomic(out_dir / "manifest.json", manifest)


def parse_seeds(text: str | None) -> tuple[int, ...]:
    if text is None:
        return DEFAULT_SEEDS
    try:
        seeds = tuple(int(s) for s in text.split(",") if s.strip())
    except ValueError:
        raise ValidationError(f"--seeds: expected comma-separated integers, got {text!r}") from None
    if not seeds:
        raise ValidationError("--seeds: at least one seed required")
    return seeds


def _check_corpus_channels(series_channels: int, model_cfg: ModelConfig, path):
    if series_channels != model_cfg.num_channels:
        raise SchemaError(f"data: corpus {path} has {series_channels} channels, "
                          f"config num_channels={model_cfg.num_channels}")


# --------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    started = now_iso()
    series = data_mod.synthesize(args.len, args.seed)  # validates length before anything is written
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    data_mod.write_csv(series, out)
    manifest_path = out.with_name(out.name + ".manifest.json")
    write_json_atomic(manifest_path, {
        "command": "synth",
        "argv": list(args.argv),
        "length": args.len,
        "seed": args.seed,
        "synth_params": dataclasses.asdict(data_mod.SynthParams()),
        "corpus_sha256": file_sha256(out),
        "started": started,
        "finished": now_iso(),
        "artifacts": {"corpus": str(out)},
    })
    print(f"wrote {len(series)} rows to {out} (sha256 {file_sha256(out)[:16]})")
    return EXIT_OK


def cmd_train(args) -> int:
    started = now_iso()
    model_cfg, train_cfg = apply_overrides(*load_config(args.config), args)
    kind = args.kind or FUSER
    if kind not in ALL_KINDS:
        raise ValidationError(f"unknown kind {kind!r}; valid kinds: {', '.join(ALL_KINDS)}")
    series = data_mod.load_csv(args.data)
    _check_corpus_channels(series.num_channels, model_cfg, args.data)
    data = data_mod.prepare(series, window_len=model_cfg.window_len)
    config = effective_config(model_cfg, train_cfg)
    out_dir = resolve_out_dir(args.out, "train", config)
    model, result, history = run_one(kind, build(kind, model_cfg), data, train_cfg, train_cfg.seed)

    scaler = data.scaler.to_dict()
    model_path = save_model(model, out_dir / "model.stgf", scaler=scaler,
                            extra={"corpus_sha256": file_sha256(args.data)})
    scaler_path = write_json_atomic(out_dir / "scaler.json", scaler)
    history_path = out_dir / "history.csv"
    history_path.write_text(history.to_csv() if history else "epoch,train_mse,val_mse\n")
    metrics = {"kind": kind, "test_mse_scaled": result.test_mse_scaled, "rmse_ugm3": result.rmse,
               "mae_ugm3": result.mae, "best_epoch": result.best_epoch, "epochs_run": result.epochs_run,
               "stop_reason": result.stop_reason}
    metrics_path = write_json_atomic(out_dir / "metrics.json", metrics)
    write_manifest(out_dir, "train", args.argv, config, Path(args.data), [train_cfg.seed], started,
                   {"model": model_path, "scaler": scaler_path, "history": history_path, "metrics": metrics_path},
                   {kind: result.stop_reason})
    print(f"{kind}: test RMSE {result.rmse:.4f} µg/m³, MAE {result.mae:.4f} µg/m³, "
          f"scaled MSE {result.test_mse_scaled:.6g} ({result.stop_reason}, best epoch {result.best_epoch})")
    print(f"artifacts in {out_dir}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    mf = read_model_file(args.model)
    if mf.scaler is None:
        raise ValidationError(f"model file {args.model}: no scaler parameters stored")
    series = data_mod.load_csv(args.data)
    _check_corpus_channels(series.num_channels, mf.config, args.data)
    scaler = data_mod.ScalerParams.from_dict(mf.scaler)
    if tuple(series.channel_names) != scaler.channel_names:
        raise SchemaError(f"data: corpus channels {series.channel_names} differ from the model's "
                          f"{scaler.channel_names}")
    data = data_mod.prepare(series, window_len=mf.config.window_len, scaler=scaler)
    m = evaluate_model(mf.model, data)
    metrics = {"kind": mf.kind, "test_mse_scaled": m["test_mse_scaled"], "rmse_ugm3": m["rmse"],
               "mae_ugm3": m["mae"]}
    out = Path(args.out) if args.out else Path(args.model).with_name("evaluation.json")
    write_json_atomic(out, metrics)
    print(f"test MSE (scaled units): {m['test_mse_scaled']:.6g}")
    print(f"test RMSE (µg/m³): {m['rmse']:.4f}")
    print(f"test MAE (µg/m³): {m['mae']:.4f}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    started = now_iso()
    model_cfg, train_cfg = apply_overrides(*load_config(args.config), args)
    seeds = parse_seeds(args.seeds)
    series = data_mod.load_csv(args.data)
    _check_corpus_channels(series.num_channels, model_cfg, args.data)
    data = data_mod.prepare(series, window_len=model_cfg.window_len)
    config = effective_config(model_cfg, train_cfg)
    out_dir = resolve_out_dir(args.out, "ablate", config)
    report = run_ablation(data, model_cfg, train_cfg, seeds, out_dir=out_dir / "runs")
    csv_path, txt_path = report.write(out_dir)
    write_manifest(out_dir, "ablate", args.argv, config, Path(args.data), seeds, started,
                   {"report_csv": csv_path, "report_txt": txt_path, "runs": out_dir / "runs"},
                   _stop_reasons(out_dir / "runs"))
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_baseline(args) -> int:
    started = now_iso()
    if args.kind == "all":
        kinds = ALL_KINDS
    elif args.kind in ALL_KINDS:
        kinds = (args.kind,)
    else:
        raise ValidationError(f"unknown kind {args.kind!r}; valid kinds: {', '.join(ALL_KINDS)}, all")
    model_cfg, train_cfg = apply_overrides(*load_config(args.config), args)
    seeds = parse_seeds(args.seeds)
    series = data_mod.load_csv(args.data)
    _check_corpus_channels(series.num_channels, model_cfg, args.data)
    data = data_mod.prepare(series, window_len=model_cfg.window_len)
    config = effective_config(model_cfg, train_cfg)
    out_dir = resolve_out_dir(args.out, "baseline", config)
    report = run_baselines(kinds, data, model_cfg, train_cfg, seeds, out_dir=out_dir / "runs")
    csv_path, txt_path = report.write(out_dir)
    write_manifest(out_dir, "baseline", args.argv, config, Path(args.data), seeds, started,
                   {"report_csv": csv_path, "report_txt": txt_path, "runs": out_dir / "runs"},
                   _stop_reasons(out_dir / "runs"))
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    model_cfg, _ = load_config(args.config)
    seed = args.seed if args.seed is not None else model_cfg.seed
    t0 = time.perf_counter()
    results = run_gradcheck(model_cfg, seed)
    failed = [r.name for r in results if not r.passed]
    for r in results:
        print(f"{r.name:<18} max_rel_err={r.max_rel_err:.3e}  {'PASS' if r.passed else 'FAIL'}")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {time.perf_counter() - t0:.1f}s")
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _stop_reasons(runs_dir: Path) -> dict:
    reasons = {}
    for metrics in sorted(runs_dir.glob("*/seed_*/metrics.json")):
        m = json.loads(metrics.read_text())
        reasons[f"{m['method']}/seed_{m['seed']}"] = m["stop_reason"]
    return reasons


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stgat-fuser", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-run progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus CSV")
    p.add_argument("--out", required=True)
    p.add_argument("--len", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    def training_flags(p):
        p.add_argument("--config", help="flat JSON config (ModelConfig + TrainConfig keys)")
        p.add_argument("--out", help=f"output directory (default: ${ARTIFACT_ROOT_ENV}/<timestamp>-<hash>)")
        p.add_argument("--max-epochs", type=int, dest="max_epochs")
        p.add_argument("--patience", type=int)
        p.add_argument("--batch-size", type=int, dest="batch_size")
        p.add_argument("--learning-rate", type=float, dest="learning_rate")

    p = sub.add_parser("train", help="train one model and write model, scaler, history, manifest")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--kind", help=f"model kind: {', '.join(ALL_KINDS)} (default {FUSER})")
    training_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="test-split metrics of a saved model")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", help="metrics JSON path (default: evaluation.json next to the model)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="four-row ablation report over seeded runs")
    p.add_argument("--data", required=True)
    p.add_argument("--seeds", help="comma-separated seeds (default 1,2,3,4,5)")
    p.add_argument("--seed", type=int, help=argparse.SUPPRESS)
    training_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("baseline", help="baseline comparison report")
    p.add_argument("--data", required=True)
    p.add_argument("--kind", required=True, help=f"one of {', '.join(ALL_KINDS)}, or all")
    p.add_argument("--seeds", help="comma-separated seeds (default 1,2,3,4,5)")
    p.add_argument("--seed", type=int, help=argparse.SUPPRESS)
    training_flags(p)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("gradcheck", help="finite-difference check of every layer and the full model")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_VALIDATION if exc.code else EXIT_OK
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
