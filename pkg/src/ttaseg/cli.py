"""Command-line entry point: gen, pretrain, adapt, eval, calibrate.

Every subcommand writes a replayable run manifest (resolved config, seed,
versions, paths, wall clock) before exiting, on success and on failure.
Config precedence for pretrain is defaults < config file < CLI flags.
Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import difflib
import json
import sys
import time
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__, adapt, metrics, netpbm, pretrain, synthdata
from .model import load_checkpoint

COMMANDS = ("gen", "pretrain", "adapt", "eval", "calibrate")


class _Parser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _versions() -> dict:
    return {
        "ttaseg": __version__,
        "numpy": np.__version__,
        "python": ".".join(map(str, sys.version_info[:3])),
    }


def _write_run_manifest(path: Path, payload: dict, merge: bool = False):
    """Write the manifest; with merge=True, fold in keys the subcommand
    body already wrote to the same file (the adapt stream logs engine
    state there)."""
    path.parent.mkdir(parents=True, exist_ok=True)
    if merge and path.exists():
        try:
            existing = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError):
            existing = {}
        payload = {**existing, **payload}
    path.write_text(json.dumps(payload, indent=2, default=str) + "\n")


def _execute(subcommand: str, run_path: Path, config: dict, inputs: dict, outputs: dict, fn,
             merge: bool = False) -> int:
    """Run a subcommand body with the run-manifest contract around it."""
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "seed": config.get("seed"),
        "versions": _versions(),
        "inputs": inputs,
        "outputs": outputs,
        "status": "running",
    }
    t0 = time.time()
    try:
        result = fn()
        manifest["status"] = "success"
        if result:
            manifest["result"] = result
        return 0
    except Exception as exc:  # runtime failure -> exit 2, manifest still written
        manifest["status"] = "error"
        manifest["error"] = f"{type(exc).__name__}: {exc}"
        print(f"ttaseg {subcommand}: error: {exc}", file=sys.stderr)
        return 2
    finally:
        manifest["wall_clock_sec"] = time.time() - t0
        _write_run_manifest(run_path, manifest, merge=merge)


# -- subcommand bodies --------------------------------------------------------


def _cmd_gen(args) -> int:
    out = Path(args.out)

    def body():
        samples = synthdata.generate(args.seed, args.n, args.profile)
        manifest = synthdata.write_dataset(samples, out)
        print(f"wrote {args.n} samples to {out} (manifest: {manifest})")
        return {"manifest": str(manifest)}

    config = {"profile": args.profile, "n": args.n, "seed": args.seed}
    return _execute("gen", out / "run.json", config, {}, {"out": str(out)}, body)


def _parse_config_file(path) -> dict:
    values = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return values


def _cmd_pretrain(args) -> int:
    defaults = pretrain.PretrainConfig()
    cfg_fields = [f.name for f in fields(pretrain.PretrainConfig)]
    values = {}
    if args.config:
        for key, raw in _parse_config_file(args.config).items():
            if key not in cfg_fields:
                _usage_fail(f"unknown config key {key!r} in {args.config}")
            values[key] = raw
    for name in cfg_fields:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    coerced = {}
    for key, value in values.items():
        kind = type(getattr(defaults, key))
        coerced[key] = kind(value)
    cfg = pretrain.PretrainConfig(**coerced)
    out = Path(args.out)

    def body():
        summary = pretrain.pretrain(cfg, out)
        r = summary["final_val_pearson_r"]
        print(f"pretrained: best_val_dice={summary['best_val_dice']:.4f} "
              f"val_iou_r={'undefined' if r is None else f'{r:.4f}'} -> {out}")
        return {k: v for k, v in summary.items() if k != "rows"}

    return _execute("pretrain", out.with_suffix(out.suffix + ".run.json"), asdict(cfg),
                    {"config_file": args.config}, {"checkpoint": str(out)}, body)


def _usage_fail(message: str):
    print(f"ttaseg: error: {message}", file=sys.stderr)
    raise SystemExit(1)


def _cmd_adapt(args) -> int:
    out = Path(args.out)
    cfg = adapt.AdaptConfig(
        strategy=args.strategy,
        seed=args.seed,
        steps_per_image=args.steps_per_image,
        reset_optimizer=args.reset_optimizer,
    )

    def body():
        model = load_checkpoint(args.checkpoint)
        samples = adapt.load_stream(args.manifest, cfg.prompt_pad)
        result = adapt.adapt_stream(model, samples, cfg, out, dump_sbct_dir=args.dump_sbct,
                                    extra_run_info={"checkpoint": str(args.checkpoint),
                                                    "manifest": str(args.manifest)})
        print(metrics.format_summary(result["summary"]))
        return {"summary": result["summary"]}

    return _execute("adapt", out / "run.json", asdict(cfg),
                    {"checkpoint": str(args.checkpoint), "manifest": str(args.manifest)},
                    {"out": str(out), "dump_sbct": args.dump_sbct and str(args.dump_sbct)},
                    body, merge=True)


def _cmd_eval(args) -> int:
    out = Path(args.out)

    def body():
        pairs = synthdata.load_manifest(args.manifest)
        pred_dir = Path(args.pred)
        carried = {}
        source_csv = pred_dir / "metrics.csv"
        if source_csv.exists():
            carried = {r.index: r for r in metrics.read_metrics_csv(source_csv)}
        rows = []
        shape = None
        for i, (_, mask_path) in enumerate(pairs):
            gt = netpbm.read_pnm(mask_path) > 0.5
            shape = gt.shape
            pred_path = pred_dir / f"pred_{i:05d}.pgm"
            pred = netpbm.read_pnm(pred_path) > 0.5
            prev = carried.get(i)
            rows.append(metrics.MetricsRow(
                index=i,
                dice=metrics.dice(pred, gt),
                hd95=metrics.hd95(pred, gt),
                pred_iou=prev.pred_iou if prev else float("nan"),
                true_iou=metrics.binary_iou(pred, gt),
                l_icm=prev.l_icm if prev else float("nan"),
                l_dpc=prev.l_dpc if prev else float("nan"),
                l_ifc=prev.l_ifc if prev else float("nan"),
                lambda_dpc=prev.lambda_dpc if prev else float("nan"),
            ))
        metrics.write_metrics_csv(rows, out)
        summary = metrics.summarize(rows, metrics.hd95_sentinel(shape))
        print(metrics.format_summary(summary))
        return {"summary": summary}

    return _execute("eval", out.with_suffix(out.suffix + ".run.json"),
                    {"pred": str(args.pred), "manifest": str(args.manifest), "seed": None},
                    {"pred": str(args.pred), "manifest": str(args.manifest)},
                    {"metrics": str(out)}, body)


def _cmd_calibrate(args) -> int:
    out = Path(args.out)
    modes = ("off", "sbct-only") if args.mode == "both" else (args.mode,)

    def body():
        model = load_checkpoint(args.checkpoint)
        samples = adapt.load_stream(args.manifest)
        report = adapt.run_calibration(model, samples, args.seed, modes=modes)
        out.mkdir(parents=True, exist_ok=True)
        payload = {"seed": args.seed, "n": report["n"], "modes": {}}
        for mode, entry in report["modes"].items():
            tag = mode.replace("-", "_")
            metrics.write_metrics_csv(entry["rows"], out / f"metrics_{tag}.csv")
            payload["modes"][mode] = {"pearson_r": entry["pearson_r"]}
            print(f"mode={mode}: pearson_r={entry['pearson_r']:.4f}")
        if "delta" in report:
            payload["delta"] = report["delta"]
            print(f"delta={report['delta']:.4f}")
        (out / "calibration.json").write_text(json.dumps(payload, indent=2) + "\n")
        return payload

    return _execute("calibrate", out / "run.json",
                    {"mode": args.mode, "seed": args.seed},
                    {"checkpoint": str(args.checkpoint), "manifest": str(args.manifest)},
                    {"out": str(out)}, body)


# -- parser -------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="ttaseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("--profile", required=True, choices=sorted(synthdata.PROFILES))
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("pretrain", help="train the source checkpoint")
    p.add_argument("--config", default=None, help="key=value file; flags override")
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-train", dest="n_train", type=int)
    p.add_argument("--n-val", dest="n_val", type=int)
    p.add_argument("--dice-weight", dest="dice_weight", type=float)
    p.add_argument("--bce-weight", dest="bce_weight", type=float)
    p.add_argument("--iou-weight", dest="iou_weight", type=float)

    p = sub.add_parser("adapt", help="run a test-time adaptation stream")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--strategy", required=True, choices=adapt.STRATEGIES)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--steps-per-image", dest="steps_per_image", type=int, default=1)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-sbct", dest="dump_sbct", default=None)
    p.add_argument("--reset-optimizer", dest="reset_optimizer", action="store_true")

    p = sub.add_parser("eval", help="score saved predictions against a manifest")
    p.add_argument("--pred", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("calibrate", help="IoU-estimate calibration, frozen vs curve-adapted input")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--mode", default="both", choices=("off", "sbct-only", "both"))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if argv and not argv[0].startswith("-") and argv[0] not in COMMANDS:
        guess = difflib.get_close_matches(argv[0], COMMANDS, n=1)
        hint = f" (did you mean {guess[0]!r}?)" if guess else ""
        print(f"ttaseg: error: unknown subcommand {argv[0]!r}{hint}", file=sys.stderr)
        return 1
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help()
        return 0
    handler = {
        "gen": _cmd_gen,
        "pretrain": _cmd_pretrain,
        "adapt": _cmd_adapt,
        "eval": _cmd_eval,
        "calibrate": _cmd_calibrate,
    }[args.command]
    try:
        return handler(args)
    except SystemExit as exc:
        return int(exc.code or 0)


if __name__ == "__main__":
    sys.exit(main())
