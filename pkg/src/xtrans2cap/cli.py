"""Command-line entry point: ``xtrans2cap <command> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .config import ConfigError, apply_overrides, load_config, parse_override, parse_text

log = logging.getLogger("xtrans2cap")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _overrides(items) -> dict:
    return dict(parse_override(s) for s in items or [])


def _workers(value) -> int:
    if value is not None:
        return value
    env = os.environ.get("XT2C_THREADS")
    if env is None:
        return 1
    try:
        n = int(env)
    except ValueError:
        raise UsageError(f"XT2C_THREADS must be an integer, got {env!r}") from None
    if n < 1:
        raise UsageError("XT2C_THREADS must be >= 1")
    return n


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    from .synthdata import GenConfig, write_dataset

    cfg = GenConfig()
    if args.config:
        cfg = apply_overrides(cfg, parse_text(Path(args.config).read_text()))
    cfg = apply_overrides(cfg, _overrides(args.set))
    if args.seed is not None:
        cfg = apply_overrides(cfg, {"seed": args.seed})
    paths = write_dataset(cfg, args.out)
    for split, p in paths.items():
        print(f"{split}: {p}")
    return 0


def _load_split(data: str, split: str):
    from .synthdata import read_split

    p = Path(data)
    return read_split(p / f"{split}.jsonl" if p.is_dir() else p)


def cmd_train(args) -> int:
    from .synthdata import VOCAB
    from .training import save_checkpoint, train, train_offline, variant_config, write_logs
    from .vocab import Vocab

    cfg = load_config(args.config, _overrides(args.set))
    if args.variant:
        cfg = variant_config(cfg, args.variant)
    if args.seed is not None:
        cfg = apply_overrides(cfg, {"seed": args.seed})
    tr, val = _load_split(args.data, "train"), _load_split(args.data, "val")
    vocab_path = Path(args.data) / "vocab.json"
    vocab = Vocab.load(vocab_path) if vocab_path.exists() else VOCAB
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.offline_teacher:
        res = train_offline(cfg, tr, val)
    else:
        res = train(cfg, tr, val, vocab=vocab, max_steps=args.max_steps)
    save_checkpoint(res.checkpoint, out / "model.ckpt")
    write_logs(res.logs, out / "log.jsonl")
    (out / "config.txt").write_text(res.checkpoint.config.to_text())
    print(f"checkpoint: {out / 'model.ckpt'} (best epoch {res.checkpoint.epoch}, "
          f"val CIDEr-D {res.checkpoint.best_val_cider:.4f}, {res.seconds:.1f}s)")
    return 0


def cmd_eval(args) -> int:
    from .training import evaluate, load_checkpoint

    ckpt = load_checkpoint(args.ckpt)
    split = _load_split(args.data, args.split)
    mode = args.mode.replace("-", "_")
    rep = evaluate(ckpt, split, mode, iou_noise=args.iou_noise, seed=args.seed or 0,
                   include_captions=args.captions)
    text = rep.to_json() + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_ablate(args) -> int:
    from .synthdata import GenConfig, generate_all
    from .training import ablate, rows_to_csv

    cfg = load_config(args.config, _overrides(args.set))
    if args.data:
        data = {s: _load_split(args.data, s) for s in ("train", "val", "test")}
    else:
        data = generate_all(GenConfig(seed=args.seed or 0))
    rows = ablate(cfg, args.variants, args.seeds, data, workers=_workers(args.workers))
    text = rows_to_csv(rows)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_grad_check(args) -> int:
    from .gradsuite import run_suite

    reports = run_suite(seeds=range(args.seed or 0, (args.seed or 0) + args.n_seeds), tol=args.tol)
    bad = [r for r in reports if not r.passed]
    for r in reports:
        if args.all or not r.passed or r.message:
            status = "ok  " if r.passed else "FAIL"
            print(f"{status} {r.op_name:40s} rel={r.max_rel_error:.2e} abs={r.max_abs_error:.2e} {r.message}")
    print(f"{len(reports) - len(bad)}/{len(reports)} gradient checks passed")
    return 2 if bad else 0


def render_report(rep: dict) -> str:
    rows = [("CIDEr-D", rep["cider"]), ("CIDEr-D (x100)", rep.get("cider_x100", rep["cider"] * 10)),
            ("BLEU-4", rep["bleu4"]), ("ROUGE-L", rep["rouge_l"])]
    rows += sorted(rep.get("m_at_iou", {}).items())
    rows += [(f"extra.{k}", v) for k, v in sorted(rep.get("extra", {}).items()) if not isinstance(v, (list, dict))]
    rows += [("METEOR", rep.get("meteor", "unavailable")), ("entries", rep.get("n_entries", ""))]
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{width}}  {v:.4f}" if isinstance(v, float) else f"{k:<{width}}  {v}"
                     for k, v in rows) + "\n"


def render_curves(log_lines: list[dict]) -> str:
    keys = [k for k in ("epoch", "lr", "total", "ce_student", "ce_teacher", "align", "val_cider", "val_color_acc")
            if any(k in r for r in log_lines)]
    out = ["  ".join(f"{k:>12}" for k in keys)]
    for r in log_lines:
        out.append("  ".join(f"{r[k]:>12.4g}" if isinstance(r.get(k), float) else f"{r.get(k, ''):>12}"
                             for k in keys))
    return "\n".join(out) + "\n"


def cmd_report(args) -> int:
    rep = json.loads(Path(args.metrics).read_text())
    sys.stdout.write(render_report(rep))
    if args.logs:
        rows = [json.loads(l) for l in Path(args.logs).read_text().splitlines() if l.strip()]
        sys.stdout.write("\n" + render_curves(rows))
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="xtrans2cap", description="Teacher-student 3D captioning experiments.")
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p, config=True):
        p.add_argument("--seed", type=int, default=None, help="seed overriding the config's seed")
        if config:
            p.add_argument("--config", default=None, help="key = value config file")
            p.add_argument("--set", action="append", metavar="KEY=VALUE",
                           help="override one config key (repeatable; wins over --config)")

    p = sub.add_parser("gen-data", help="write synthetic train/val/test splits and vocab.json")
    common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write model.ckpt + log.jsonl")
    common(p)
    p.add_argument("--data", required=True, help="directory with train.jsonl/val.jsonl")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--variant", default=None, help="named ablation variant applied on top of the config")
    p.add_argument("--max-steps", type=int, default=None, help="stop after this many optimizer steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint and print a MetricReport as JSON")
    common(p, config=False)
    p.add_argument("--ckpt", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="split file, or a directory holding <split>.jsonl")
    p.add_argument("--split", default="test", help="split name when --data is a directory")
    p.add_argument("--mode", choices=["student-3d", "teacher-multi"], default="student-3d",
                   help="inference path")
    p.add_argument("--iou-noise", type=float, default=None, metavar="SIGMA",
                   help="jitter ground-truth boxes to exercise m@kIoU")
    p.add_argument("--captions", action="store_true", help="include generated captions in the report")
    p.add_argument("--out", default=None, help="also write the JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare variants over seeds; writes CSV")
    common(p)
    p.add_argument("--variants", nargs="+", required=True, help="variant names, e.g. full transcap no_align")
    p.add_argument("--seeds", nargs="+", type=int, required=True, help="training seeds")
    p.add_argument("--data", default=None, help="dataset directory (default: generate with --seed)")
    p.add_argument("--workers", type=int, default=None, help="parallel processes (default: $XT2C_THREADS or 1)")
    p.add_argument("--out", default=None, help="CSV output path")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("grad-check", help="finite-difference check of every differentiable operation")
    common(p, config=False)
    p.add_argument("--n-seeds", type=int, default=10, help="random instances per operation")
    p.add_argument("--tol", type=float, default=1e-3, help="relative tolerance")
    p.add_argument("--all", action="store_true", help="print every check, not only failures")
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("report", help="render a metrics JSON (and optional log) as text tables")
    p.add_argument("metrics", help="MetricReport JSON written by eval")
    p.add_argument("--logs", default=None, help="log.jsonl with per-epoch curves")
    p.set_defaults(func=cmd_report)
    return ap


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - every runtime failure maps to exit 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
