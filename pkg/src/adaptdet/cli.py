"""Command-line entry points: generate / train / eval / ablate / plot.

All commands are driven by one declarative config (YAML) with dotted-path
``--set key=value`` overrides, so every artifact carries a reproducible
fingerprint. Exit codes: 0 success, 2 configuration error, 3 missing
artifact, 4 training divergence, 5 variant failure during ablation.

Set ADAPTDET_DETERMINISTIC=1 to pin torch to one thread and deterministic
kernels for bitwise-reproducible runs.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .detector import FingerprintMismatch, load_checkpoint, model_from_checkpoint
from .experiment import (
    ORACLE,
    TABLE_VARIANTS,
    TARGET_EVAL,
    ExperimentSpec,
    ablation,
    coverage_plot_data,
    evaluate_on_target,
    generate_datasets,
    load_spec,
    save_spec,
    train_variant,
)
from .training import TrainingDiverged

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_MISSING = 3
EXIT_DIVERGED = 4
EXIT_VARIANT = 5

DETERMINISTIC_ENV = "ADAPTDET_DETERMINISTIC"


def _apply_determinism_env():
    if os.environ.get(DETERMINISTIC_ENV, "") in ("1", "true", "yes"):
        import torch

        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def _build_spec(args) -> ExperimentSpec:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed={args.seed}")
    if getattr(args, "out", None) is not None:
        overrides.append(f"out_dir={args.out}")
    if getattr(args, "variant", None) is not None:
        overrides.append(f"variant={args.variant}")
    return load_spec(args.config, overrides)


def _progress_printer(every: int):
    def cb(rec):
        if every > 0 and rec.iteration % every == 0:
            parts = " ".join(f"{k}={v:.4f}" for k, v in sorted(rec.losses.items()))
            print(f"[{rec.stage}] iter {rec.iteration}: {parts}", flush=True)

    return cb


def cmd_generate(args) -> int:
    spec = _build_spec(args)
    data_dir = Path(spec.data_dir)
    if data_dir.exists() and any(data_dir.iterdir()) and not args.force:
        print(f"error: {data_dir} exists and is not empty (use --force to overwrite)",
              file=sys.stderr)
        return EXIT_CONFIG
    digests = generate_datasets(spec)
    save_spec(spec, data_dir / "experiment.yaml")
    for split, digest in digests.items():
        print(f"{split}: manifest {digest[:12]}")
    print(f"datasets written under {data_dir}")
    return EXIT_OK


def cmd_train(args) -> int:
    spec = _build_spec(args)
    if not spec.datasets_ready():
        print(f"error: no datasets under {spec.data_dir}; run `adaptdet generate` first",
              file=sys.stderr)
        return EXIT_MISSING
    seed = spec.train.seed
    run_dir = Path(spec.out_dir) / f"{spec.variant}_seed{seed}"
    try:
        model, _, records = train_variant(
            spec, spec.variant, seed, out_dir=run_dir,
            progress=_progress_printer(spec.train.log_every), resume=args.resume,
        )
    except TrainingDiverged as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"trained variant={spec.variant} seed={seed}: {len(records)} iterations, "
          f"checkpoints in {run_dir}")
    return EXIT_OK


def cmd_eval(args) -> int:
    spec = _build_spec(args)
    ckpt_path = Path(args.checkpoint)
    if not ckpt_path.exists():
        print(f"error: checkpoint {ckpt_path} not found", file=sys.stderr)
        return EXIT_MISSING
    payload = load_checkpoint(ckpt_path)
    if payload["data_fingerprint"] != spec.data_fingerprint():
        print("error: checkpoint was trained against a different dataset config "
              f"({payload['data_fingerprint'][:12]} != {spec.data_fingerprint()[:12]})",
              file=sys.stderr)
        return EXIT_CONFIG
    if not (spec.split_dir(TARGET_EVAL) / "manifest.json").exists():
        print(f"error: no {TARGET_EVAL} split under {spec.data_dir}", file=sys.stderr)
        return EXIT_MISSING
    model, _ = model_from_checkpoint(payload)
    report = evaluate_on_target(spec, model, seed=spec.train.seed)
    out = Path(args.out) if args.out else ckpt_path.parent
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "metrics_report.json"
    report_path.write_text(report.to_json())
    print(f"mAP={report.map:.3f} rpn_recall@0.5={report.rpn_recall_at_05:.3f} "
          f"coverage_zero_fraction={report.coverage.zero_fraction:.3f} -> {report_path}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    spec = _build_spec(args)
    if not spec.datasets_ready():
        print(f"error: no datasets under {spec.data_dir}; run `adaptdet generate` first",
              file=sys.stderr)
        return EXIT_MISSING
    out = Path(args.out) if args.out else Path(spec.out_dir) / "ablation"
    out.mkdir(parents=True, exist_ok=True)
    seeds = list(spec.seeds)
    variants = TABLE_VARIANTS + [ORACLE]  # oracle feeds the coverage plot only
    result = ablation(spec, variants=variants, seeds=seeds, out_dir=out / "runs",
                      progress=_progress_printer(spec.train.log_every))

    table_rows = [r for r in result.rows if r.variant != ORACLE]
    table = type(result)(rows=table_rows).table()
    (out / "ablation_table.txt").write_text(table + "\n")
    (out / "ablation.json").write_text(json.dumps(
        {r.variant: {"seeds": r.seeds, "maps": r.maps, "mean_map": r.mean_map,
                     "std_map": r.std_map, "error": r.error,
                     "reports": [rep.to_dict() for rep in r.reports]}
         for r in result.rows}, sort_keys=True, indent=1))
    (out / "coverage_plotdata.json").write_text(
        json.dumps(coverage_plot_data(result), sort_keys=True, indent=1))
    print(table)
    print(f"ablation artifacts in {out}")
    return EXIT_VARIANT if result.failed() else EXIT_OK


def cmd_plot(args) -> int:
    spec = _build_spec(args)
    src = Path(args.out) if args.out else Path(spec.out_dir) / "ablation"
    data_path = src / "coverage_plotdata.json"
    if not data_path.exists():
        print(f"error: {data_path} not found; run `adaptdet ablate` first", file=sys.stderr)
        return EXIT_MISSING
    data = json.loads(data_path.read_text())
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    series = data["series"]
    names = [n for n, s in series.items() if s is not None]
    fig, axes = plt.subplots(1, len(names), figsize=(4 * len(names), 3), sharey=True)
    if len(names) == 1:
        axes = [axes]
    for ax, name in zip(axes, names):
        s = series[name]
        edges = np.asarray(s["bin_edges"])
        centers = 0.5 * (edges[:-1] + edges[1:])
        ax.bar(centers, s["mean_counts"], width=0.09)
        ax.set_title(name)
        ax.set_xlabel("proposal coverage")
    axes[0].set_ylabel("ground-truth boxes")
    fig.tight_layout()
    out_png = src / "coverage.png"
    fig.savefig(out_png, dpi=120)
    print(f"wrote {out_png}")
    return EXIT_OK


def _add_common(p: argparse.ArgumentParser, with_variant=True):
    p.add_argument("--config", type=str, default=None, help="YAML experiment config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="dotted-path config override, e.g. train.lr=0.01")
    p.add_argument("--seed", type=int, default=None, help="training seed override")
    p.add_argument("--out", type=str, default=None, help="output directory override")
    if with_variant:
        p.add_argument("--variant", type=str, default=None,
                       help=f"method variant: {', '.join(TABLE_VARIANTS + [ORACLE])}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="adaptdet",
        description="Domain-adaptive two-stage detection on synthetic paired domains",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="emit source/target dataset splits")
    _add_common(p, with_variant=False)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty data dir")
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="train one variant/seed through all stages")
    _add_common(p)
    p.add_argument("--resume", action="store_true",
                   help="continue from the last stage checkpoint if present")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the target eval split")
    _add_common(p)
    p.add_argument("--checkpoint", type=str, required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="train + evaluate the full variant matrix")
    _add_common(p, with_variant=False)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("plot", help="render coverage histograms from ablation data")
    _add_common(p, with_variant=False)
    p.set_defaults(fn=cmd_plot)
    return parser


def main(argv=None) -> int:
    _apply_determinism_env()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, KeyError) as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as e:
        print(f"missing artifact: {e}", file=sys.stderr)
        return EXIT_MISSING
    except FingerprintMismatch as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
