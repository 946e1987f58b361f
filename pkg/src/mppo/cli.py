"""Command-line front end: ``mppo {gen-data,train,gradcheck,eval,compare,plot}``.

Exit codes: 0 success, 1 usage error, 2 runtime or validation failure.
Every command writes ``<command>.manifest.json`` into ``--out-dir``; passing
that manifest back through ``--config`` repeats the run.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from pathlib import Path

from . import autodiff as ad
from . import losses as L
from .data import DataError, corpus_manifest, generate_synthetic, load_records, rng_stream, write_corpus
from .model import ARCHS, load_checkpoint, save_checkpoint
from .plot import MetricsFormatError, plot_metrics
from .train import TrainConfig, TrainingError, compare_variants, eval_ranking, train

EXIT_OK, EXIT_USAGE, EXIT_FAILURE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out_dir: Path, command: str, config: dict, inputs: dict, outputs: dict,
                   started: float) -> Path:
    manifest = {
        "command": command,
        "config": config,
        "seed": config.get("seed"),
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: {"path": str(p), "sha256": _sha256(Path(p))} for k, p in outputs.items()},
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    path = out_dir / f"{command}.manifest.json"
    fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=".manifest-", suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    os.replace(tmp, path)
    return path


def _add_training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", help="JSONL corpus")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--lr", type=float, default=None, help="learning rate (default depends on --arch)")
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--arch", choices=ARCHS, default="bigram")
    p.add_argument("--embed-dim", type=int, default=16)
    p.add_argument("--hidden-dim", type=int, default=64)
    p.add_argument("--window", type=int, default=8)
    p.add_argument("--context-length", type=int, default=256)
    p.add_argument("--beta", type=float, default=None, help="DPO temperature (dpo variant only)")


def build_parser() -> tuple[_Parser, dict[str, argparse.ArgumentParser]]:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", default=".")
    common.add_argument("--config", help="JSON file of flag values (or a run manifest); flags win")

    parser = _Parser(prog="mppo", description="Multi-response preference optimization lab")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    subs = {}

    p = subs["gen-data"] = sub.add_parser("gen-data", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--prompts", type=int, default=200)
    p.add_argument("--responses", type=int, default=4)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--max-rate", type=float, default=0.5)
    p.add_argument("--name", default="corpus")

    p = subs["train"] = sub.add_parser("train", parents=[common], help="train one objective")
    p.add_argument("--variant", choices=L.VARIANTS, default="pair-mnm")
    _add_training_flags(p)

    p = subs["gradcheck"] = sub.add_parser("gradcheck", parents=[common],
                                           help="finite-difference check of every loss")
    p.add_argument("--variant", choices=L.VARIANTS, action="append")
    p.add_argument("--points", type=int, default=100)
    p.add_argument("--items", type=int, default=4)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--tol", type=float, default=1e-4)

    p = subs["eval"] = sub.add_parser("eval", parents=[common], help="ranking accuracy of a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--data")

    p = subs["compare"] = sub.add_parser("compare", parents=[common], help="train and compare variants")
    p.add_argument("--variants", nargs="+", choices=L.VARIANTS, default=list(L.MPPO_VARIANTS))
    _add_training_flags(p)

    p = subs["plot"] = sub.add_parser("plot", parents=[common], help="SVG plots of a metrics CSV")
    p.add_argument("--metrics")
    return parser, subs


def parse_args(argv) -> argparse.Namespace:
    parser, subs = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read --config {args.config}: {exc}")
        if isinstance(cfg.get("config"), dict):
            cfg = cfg["config"]
        cfg = {k.replace("-", "_"): v for k, v in cfg.items() if k not in ("command", "config")}
        known = set(vars(args))
        unknown = sorted(set(cfg) - known)
        if unknown:
            parser.error(f"unknown keys in --config: {', '.join(unknown)}")
        subs[args.command].set_defaults(**cfg)
        args = parser.parse_args(argv)
    return args


def _require(args, *names):
    for n in names:
        if getattr(args, n) is None:
            raise UsageError(f"{args.command}: --{n.replace('_', '-')} is required")


def _train_config(args, variant: str) -> TrainConfig:
    if variant == "dpo" and args.beta is None:
        raise UsageError("--variant dpo requires --beta")
    return TrainConfig(variant=variant, learning_rate=args.lr, steps=args.steps,
                       batch_size=args.batch_size, seed=args.seed, optimizer=args.optimizer,
                       arch=args.arch, embed_dim=args.embed_dim, hidden_dim=args.hidden_dim,
                       window=args.window, context_length=args.context_length,
                       dpo_beta=args.beta if variant == "dpo" else None)


def cmd_gen_data(args, out: Path) -> tuple[dict, dict]:
    records, _ = generate_synthetic(args.prompts, args.responses, args.noise, args.seed, args.max_rate)
    path = out / f"{args.name}.jsonl"
    meta = corpus_manifest(args.prompts, args.responses, args.noise, args.seed)
    sidecar = write_corpus(path, records, meta)
    print(f"wrote {len(records)} records to {path}")
    return {}, {"corpus": path, "corpus_manifest": sidecar}


def cmd_train(args, out: Path) -> tuple[dict, dict]:
    _require(args, "data")
    cfg = _train_config(args, args.variant)
    records = load_records(args.data)
    metrics = out / "metrics.csv"
    model, mlog = train(cfg, records, csv_path=metrics)
    ckpt = out / "model.ckpt"
    save_checkpoint(ckpt, model)
    if mlog.final is not None:
        print(f"{cfg.variant}: final loss {mlog.smoothed_loss():.6f}, "
              f"p_chosen {mlog.final.p_chosen_mean:.6f}, margin {mlog.final.margin:.6f}")
    return {"data": args.data}, {"checkpoint": ckpt, "metrics": metrics}


def cmd_gradcheck(args, out: Path) -> tuple[dict, dict]:
    variants = args.variant or list(L.VARIANTS)
    rng = rng_stream(args.seed, "gradcheck")
    report, failed = {}, []
    for v in variants:
        worst, where = 0.0, None
        for k in range(args.points):
            fn, x = L.gradcheck_case(v, rng, args.items)
            r = ad.grad_check(fn, x, eps=args.eps, tol=args.tol)
            if r.max_error >= worst:
                worst, where = r.max_error, (k, r.worst_coordinate)
        ok = worst <= args.tol
        report[v] = {"max_error": worst, "passed": ok, "point": where[0], "coordinate": where[1]}
        line = f"{v:12s} max error {worst:.3e}  {'PASS' if ok else 'FAIL'}"
        if not ok:
            failed.append(v)
            line += f" (point {where[0]}, coordinate {where[1]})"
        print(line)
    print(f"{len(variants) - len(failed)}/{len(variants)} variants pass at tol {args.tol:g}")
    path = out / "gradcheck.json"
    path.write_text(json.dumps(report, indent=2) + "\n")
    if failed:
        raise _Failed(f"gradient check failed for: {', '.join(failed)}", {}, {"report": path})
    return {}, {"report": path}


def cmd_eval(args, out: Path) -> tuple[dict, dict]:
    _require(args, "checkpoint", "data")
    model = load_checkpoint(args.checkpoint)
    report = eval_ranking(model, load_records(args.data))
    result = report.to_dict()
    result["chance_interval_99"] = list(report.chance_interval(0.99))
    path = out / "eval.json"
    path.write_text(json.dumps(result, indent=2) + "\n")
    print(json.dumps(result, indent=2))
    return {"checkpoint": args.checkpoint, "data": args.data}, {"report": path}


def cmd_compare(args, out: Path) -> tuple[dict, dict]:
    _require(args, "data")
    if "dpo" in args.variants and args.beta is None:
        raise UsageError("comparing dpo requires --beta")
    records = load_records(args.data)
    configs = [_train_config(args, v) for v in args.variants]
    path = out / "comparison.csv"
    rows = compare_variants(configs, records, path)
    for r in rows:
        print(f"{r['variant']:12s} loss {r['final_loss']:.4f}  margin {r['final_margin']:.4f}  "
              f"top1 {r['top1_acc']:.3f}  concordance {r['concordance']:.3f}")
    return {"data": args.data}, {"comparison": path}


def cmd_plot(args, out: Path) -> tuple[dict, dict]:
    _require(args, "metrics")
    target = out if args.out_dir != "." else None
    lik, loss = plot_metrics(args.metrics, target)
    print(f"wrote {lik} and {loss}")
    return {"metrics": args.metrics}, {"likelihood_svg": lik, "loss_svg": loss}


class _Failed(Exception):
    def __init__(self, message, inputs, outputs):
        super().__init__(message)
        self.inputs, self.outputs = inputs, outputs


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "gradcheck": cmd_gradcheck,
            "eval": cmd_eval, "compare": cmd_compare, "plot": cmd_plot}


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    args = parse_args(argv)
    started = time.time()
    out = Path(args.out_dir)
    config = {k: v for k, v in vars(args).items() if k not in ("command", "config")}
    try:
        out.mkdir(parents=True, exist_ok=True)
        inputs, outputs = COMMANDS[args.command](args, out)
    except UsageError as exc:
        print(f"mppo: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except _Failed as exc:
        write_manifest(out, args.command, config, exc.inputs, exc.outputs, started)
        print(f"mppo: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except (DataError, MetricsFormatError, TrainingError, ValueError, OSError) as exc:
        print(f"mppo: error: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    write_manifest(out, args.command, config, inputs, outputs, started)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
