"""Command-line entry point: ``utnet {synth,train,eval,bench,gradcheck,ablate,compare}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 failed
verification (gradient check).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import synthdata
from .config import RunConfig, desk_config
from .errors import ConfigError, UTNetError


def _formatter(prog):
    return argparse.HelpFormatter(prog, width=88, max_help_position=30)


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _say(msg: str) -> None:
    print(msg, flush=True)


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(a) -> int:
    from .experiment import prepare_out

    out = prepare_out(a.out, a.force)
    manifest = synthdata.make_splits(
        n_train=a.train, n_test=a.test, n_val=a.val, size=a.size,
        train_vendors=tuple(a.train_vendors.split(",")), test_vendors=tuple(a.test_vendors.split(",")),
    )
    files = synthdata.export_dataset(manifest, out)
    _say(f"wrote {len(files)} samples and manifest.json to {out}")
    return 0


def _load_run_config(a) -> RunConfig:
    cfg = RunConfig.load(a.config) if a.config else desk_config()
    if a.epochs is not None:
        from dataclasses import replace

        cfg = replace(cfg, train=replace(cfg.train, epochs=a.epochs))
    return cfg


def cmd_train(a) -> int:
    from .experiment import prepare_out, run_training
    from .plotting import plot_eval, plot_training

    cfg = _load_run_config(a)
    out = prepare_out(a.out, a.force)
    run = run_training(cfg, out, log=None if a.quiet else _say)
    plot_training(run.fit.history, out / "training.svg")
    if run.report is not None:
        plot_eval(run.report, out / "eval.svg")
        _say(run.report.table())
    _say(f"report: {out / 'report.csv'}")
    return 0


def cmd_eval(a) -> int:
    from .experiment import prepare_out
    from .metrics import evaluate
    from .model import load_checkpoint
    from .plotting import plot_eval
    from .train import predict_logits

    model, meta = load_checkpoint(a.checkpoint)
    manifest = synthdata.load_manifest(a.manifest)
    out = prepare_out(a.out, a.force, is_file=True)
    report = evaluate(lambda im: predict_logits(model, im), manifest, split=a.split, multiple=model.multiple)
    out.write_text(report.to_csv({"checkpoint": Path(a.checkpoint).name, "epoch": meta.get("epoch")}))
    plot_eval(report, out.with_suffix(".svg"))
    _say(report.table())
    return 0


def cmd_bench(a) -> int:
    from .attention import AttentionConfig
    from .bench import loglog_slope, records_csv, run_bench
    from .experiment import prepare_out
    from .plotting import plot_bench

    cfg = AttentionConfig(heads=a.heads, reduced_size=a.reduced, projection=a.projection, use_relpos=False)
    out = prepare_out(a.out, a.force, is_file=True)
    records = run_bench(a.sizes, cfg, repeats=a.repeats, channels=a.channels, cap_bytes=a.cap_bytes, budget_seconds=a.budget)
    out.write_text(records_csv(records, cfg))
    if a.emit_plot:
        plot_bench(records, out.with_suffix(".svg"))
    for v in sorted({r.variant for r in records}):
        if sum(r.variant == v for r in records) > 1:
            _say(f"{v}: log-log slope {loglog_slope(records, v):.3f}")
    return 0


def cmd_gradcheck(a) -> int:
    from .gradcheck import REGISTRY, format_results, require_all_pass, run_all

    names = a.only.split(",") if a.only else None
    if names:
        bad = [n for n in names if n not in REGISTRY]
        if bad:
            raise ConfigError(f"unknown checks {bad}; available: {sorted(REGISTRY)}")
    results = run_all(names, seeds=tuple(range(a.seeds)), include_negative_control=a.negative_control)
    _say(format_results(results))
    require_all_pass(results)
    return 0


def cmd_ablate(a) -> int:
    from .experiment import ablate, prepare_out
    from .plotting import plot_ablation

    cfg = _load_run_config(a)
    out = prepare_out(a.out, a.force)
    rows = ablate(cfg, a.axis, a.values, out, log=None if a.quiet else _say)
    plot_ablation(rows, out / "ablate.svg")
    for r in rows:
        _say(f"{r['axis']}={r['value']}: best val dice {r['best_val_dice_mean']}")
    return 0


def cmd_compare(a) -> int:
    from .experiment import compare, mean_over, prepare_out
    from .plotting import plot_compare

    cfg = _load_run_config(a)
    out = prepare_out(a.out, a.force)
    rows = compare(a.seeds, out, cfg, log=None if a.quiet else _say)
    plot_compare(rows, out / "compare.svg")
    for m in ("utnet", "baseline"):
        _say(f"{m}: test dice {mean_over(rows, m, 'test_dice'):.4f}, mean drop C/D {mean_over(rows, m, 'mean_drop_CD'):.4f}")
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="utnet", description="UTNet segmentation toolkit on synthetic cardiac phantoms.", formatter_class=_formatter)
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    s = sub.add_parser("synth", help="generate a phantom dataset (PGM + manifest)", formatter_class=_formatter)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--train", type=int, default=150, help="training samples (default 150)")
    s.add_argument("--val", type=int, default=20, help="validation samples (default 20)")
    s.add_argument("--test", type=int, default=200, help="test samples (default 200)")
    s.add_argument("--size", type=int, default=256, help="image side, multiple of 16 (default 256)")
    s.add_argument("--train-vendors", default="A,B", help="vendors for train/val (default A,B)")
    s.add_argument("--test-vendors", default="A,B,C,D", help="vendors for test (default A,B,C,D)")
    s.add_argument("--force", action="store_true", help="overwrite an existing output")
    s.set_defaults(func=cmd_synth)

    def run_args(sp):
        sp.add_argument("--config", help="run config JSON (default: desk-scale preset)")
        sp.add_argument("--epochs", type=int, help="override train.epochs")
        sp.add_argument("--quiet", action="store_true", help="no per-epoch log lines")
        sp.add_argument("--force", action="store_true", help="overwrite an existing output")

    t = sub.add_parser("train", help="train one model and evaluate it on the test split", formatter_class=_formatter)
    t.add_argument("--out", required=True, help="run directory")
    run_args(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint per vendor and class", formatter_class=_formatter)
    e.add_argument("--checkpoint", required=True, help="checkpoint directory (contains model.json)")
    e.add_argument("--manifest", required=True, help="dataset manifest JSON")
    e.add_argument("--out", required=True, help="report CSV path; a .svg figure is written beside it")
    e.add_argument("--split", default="test", help="manifest split to score (default test)")
    e.add_argument("--force", action="store_true", help="overwrite an existing output")
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="time standard vs efficient attention", formatter_class=_formatter)
    b.add_argument("--sizes", type=_int_list, default=[16, 32, 64, 128], help="map sides H=W (default 16,32,64,128)")
    b.add_argument("--reduced", type=int, default=8, help="reduced size for efficient attention (default 8)")
    b.add_argument("--projection", choices=["bilinear", "maxpool"], default="bilinear", help="key/value projection")
    b.add_argument("--heads", type=int, default=4, help="attention heads (default 4)")
    b.add_argument("--channels", type=int, default=32, help="model channels (default 32)")
    b.add_argument("--repeats", type=int, default=20, help="timed repeats per point (default 20)")
    b.add_argument("--budget", type=float, default=20.0, help="seconds of timing per point (default 20)")
    b.add_argument("--cap-bytes", type=int, default=3 * 2**30, help="largest attention matrix allowed (bytes)")
    b.add_argument("--out", required=True, help="CSV path")
    b.add_argument("--emit-plot", action="store_true", help="write log-log curves to an .svg beside the CSV")
    b.add_argument("--force", action="store_true", help="overwrite an existing output")
    b.set_defaults(func=cmd_bench)

    g = sub.add_parser("gradcheck", help="finite-difference check of every op (exit 4 on failure)", formatter_class=_formatter)
    g.add_argument("--seeds", type=int, default=1, help="random seeds per check (default 1)")
    g.add_argument("--only", help="comma-separated check names")
    g.add_argument("--negative-control", action="store_true", help="add a deliberately broken op")
    g.set_defaults(func=cmd_gradcheck)

    ab = sub.add_parser("ablate", help="one run per value of an ablation axis", formatter_class=_formatter)
    ab.add_argument("--axis", required=True, help="levels, reduced_size, projection or relpos")
    ab.add_argument("--values", help="comma-separated values (default: every value of the axis)")
    ab.add_argument("--out", required=True, help="output directory")
    run_args(ab)
    ab.set_defaults(func=cmd_ablate)

    c = sub.add_parser("compare", help="seed-matched UTNet vs baseline runs", formatter_class=_formatter)
    c.add_argument("--seeds", type=_int_list, default=[0, 1, 2], help="training seeds (default 0,1,2)")
    c.add_argument("--out", required=True, help="output directory")
    run_args(c)
    c.set_defaults(func=cmd_compare)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except UTNetError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
