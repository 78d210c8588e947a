"""Command line: phantom, train, eval, segment, ablate, profile, gradcheck.

Exit codes: 0 success, 1 usage or validation error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from .errors import ConfigurationError, DimensionError, FormatError, SegStitchError, ValidationError

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_INVALID)


def _load_json(path) -> dict:
    if path is None:
        return {}
    with open(path) as f:
        return json.load(f)


def _split_config(raw: dict) -> tuple[dict, dict]:
    """Config files may be flat model configs or ``{"model": {...}, "train": {...}}``."""
    if "model" in raw or "train" in raw:
        return raw.get("model", {}), raw.get("train", {})
    return raw, {}


def _model_config(raw: dict):
    from .model import ModelConfig

    return ModelConfig.from_dict(raw)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--threads", type=int, default=None, help="BLAS threads (env SEGSTITCH_THREADS)")
    common.add_argument("--out-dir", default=".")

    p = _Parser(prog="segstitch", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("phantom", parents=[common], help="emit a phantom dataset from a PhantomSpec JSON")
    s.add_argument("--count", type=int, default=None, help="benchmark phantoms when no config is given")
    s.add_argument("--val", type=int, default=0, help="number of trailing volumes put in the val split")

    s = sub.add_parser("train", parents=[common], help="train on a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--epochs", type=int, default=None)
    s.add_argument("--resume", default=None)

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--split", default="val")

    s = sub.add_parser("segment", parents=[common], help="segment one volume")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--volume", required=True)
    s.add_argument("--heatmaps", action="store_true")

    s = sub.add_parser("ablate", parents=[common], help="train a variant grid")
    s.add_argument("--manifest", required=True)

    sub.add_parser("profile", parents=[common], help="parameter and MACC counts")

    s = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    s.add_argument("--skip-model", action="store_true")
    return p


def _set_threads(n):
    if n is None and os.environ.get("SEGSTITCH_THREADS"):
        n = int(os.environ["SEGSTITCH_THREADS"])
    if n is None:
        return None
    if n < 1:
        raise ConfigurationError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def cmd_phantom(args) -> int:
    from .volio import PhantomSpec, benchmark_phantom_specs, emit_dataset

    raw = _load_json(args.config)
    if raw:
        items = raw if isinstance(raw, list) else [raw]
        specs = [PhantomSpec.from_dict(d) for d in items]
    else:
        specs = benchmark_phantom_specs(args.count or 4, args.seed or 0)
    if args.seed is not None and raw:
        specs = [PhantomSpec.from_dict({**s.to_dict(), "seed": args.seed + i}) for i, s in enumerate(specs)]
    n_val = min(args.val, len(specs))
    splits = ["train"] * (len(specs) - n_val) + ["val"] * n_val
    print(emit_dataset(specs, splits, args.out_dir))
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import TrainConfig, train

    model_raw, train_raw = _split_config(_load_json(args.config))
    if args.seed is not None:
        train_raw = {**train_raw, "seed": args.seed}
    if args.epochs is not None:
        train_raw = {**train_raw, "max_epochs": args.epochs}
    train_raw = {**train_raw, "checkpoint_dir": train_raw.get("checkpoint_dir") or args.out_dir}
    state = train(TrainConfig.from_dict(train_raw), _model_config(model_raw), args.manifest, resume=args.resume,
                  verbose=True)
    print(f"finished at epoch {state.epoch}; best val mDSC {state.best_mdsc:.4f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate

    os.makedirs(args.out_dir, exist_ok=True)
    res = evaluate(args.checkpoint, args.manifest, args.split, csv_path=Path(args.out_dir) / "report.csv")
    print(res.table())
    return EXIT_OK


def cmd_segment(args) -> int:
    from .checkpoint import load_checkpoint
    from .metrics import export_attention_heatmap
    from .train import segment
    from .volio import read_volume, write_volume

    params, _ = load_checkpoint(args.checkpoint)
    sample = read_volume(args.volume)
    maps = [] if args.heatmaps else None
    out = segment(params, sample, maps)
    os.makedirs(args.out_dir, exist_ok=True)
    path = Path(args.out_dir) / (Path(args.volume).stem + "_seg.vol")
    write_volume(out, path)
    print(path)
    if maps:
        for i, m in enumerate(maps):
            export_attention_heatmap(m, m.layout, Path(args.out_dir) / f"attn_block{i:02d}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .ablation import AblationConfig, ablate, comparison_table, summarize

    raw = _load_json(args.config)
    grid = AblationConfig.from_dict(raw)
    if args.seed is not None:
        grid.seeds = [args.seed]
    os.makedirs(args.out_dir, exist_ok=True)
    rows = ablate(grid, args.manifest, Path(args.out_dir) / "ablation.csv", verbose=True)
    print(comparison_table(summarize(rows)))
    return EXIT_OK


def cmd_profile(args) -> int:
    from .profile import profile

    model_raw, _ = _split_config(_load_json(args.config))
    print(profile(_model_config(model_raw)).table())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import format_results, run_suite

    results = run_suite(args.seed or 0, include_model=not args.skip_model)
    print(format_results(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


COMMANDS = {"phantom": cmd_phantom, "train": cmd_train, "eval": cmd_eval, "segment": cmd_segment,
            "ablate": cmd_ablate, "profile": cmd_profile, "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        limiter = _set_threads(args.threads)
        try:
            return COMMANDS[args.command](args)
        finally:
            if limiter is not None:
                limiter.restore_original_limits()
    except (ConfigurationError, DimensionError, ValidationError, FormatError, json.JSONDecodeError,
            FileNotFoundError, TypeError, KeyError) as exc:
        print(f"segstitch {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (SegStitchError, FloatingPointError, OSError) as exc:
        print(f"segstitch {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
