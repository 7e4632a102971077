"""Command-line entry point: ``unitrec {generate,train,evaluate,rank}``.

Exit codes: 0 success, 1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from unitrec.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from unitrec.config import ConfigError, RunConfig, resolve_config
from unitrec.data import (
    DataFormatError,
    SamplingError,
    Vocabulary,
    dataset_stats,
    encode_example,
    format_stats,
    generate_synthetic,
    read_dataset,
    save_synthetic,
)
from unitrec.metrics import format_report, random_baseline
from unitrec.model import MASK_MODES, UniTRec
from unitrec.objectives import OBJECTIVE_MODES
from unitrec.ranking import ScoreFileError, aggregate_rank, format_ranking_table, parse_score_table
from unitrec.training import SCORE_MODES, TrainingDiverged, evaluate, split_validation, train

log = logging.getLogger("unitrec")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="INI config file with [model]/[train]/[data]/[paths] sections")
    p.add_argument("--seed", type=int, help="seed for data generation, initialisation and training")
    p.add_argument(
        "--set",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override one config value (repeatable)",
    )
    p.add_argument("--out", help="output directory (generate: data dir; others: run dir or file)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="unitrec", description="Text recommendation with local/global history attention.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = _common()

    g = sub.add_parser("generate", parents=[common], help="write the synthetic train/test/vocab files")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[common], help="train a model and write checkpoint + metric log")
    t.add_argument("--data", help="dataset directory (train.jsonl, test.jsonl, vocab.txt)")
    t.add_argument("--objective", choices=OBJECTIVE_MODES, help="training objective (ablation switch)")
    t.add_argument("--mask", choices=MASK_MODES, help="encoder masking (ablation switch)")
    t.add_argument("--epochs", type=int, help="number of epochs")
    t.add_argument("--resume", help="checkpoint to resume from (continues its step counter)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", parents=[common], help="rank test candidates and report metrics")
    e.add_argument("--checkpoint", required=True, help="checkpoint file")
    e.add_argument("--data", help="dataset directory (test.jsonl, vocab.txt)")
    e.add_argument("--split", default="test", help="dataset split file stem (default: test)")
    e.add_argument("--score", choices=SCORE_MODES, default="fused", help="score that drives ranking")
    e.add_argument("--mask", choices=MASK_MODES, help="encoder masking used at inference")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("rank", parents=[common], help="fuse a table of (S^d, S^p) scores into a ranking")
    r.add_argument("score_file", help="text file with lines '<id> <s_d> <s_p>' ('-' for stdin)")
    r.add_argument("--pre-normalized", action="store_true", help="scores are already softmax-normalised")
    r.add_argument("--json", action="store_true", help="print JSON instead of a table")
    r.set_defaults(func=cmd_rank)
    return parser


def _parse_sets(items: list[str]) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise UsageError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_run_config(args: argparse.Namespace) -> RunConfig:
    overrides = _parse_sets(args.set)
    if args.seed is not None:
        overrides.setdefault("train.seed", str(args.seed))
        overrides.setdefault("data.seed", str(args.seed))
    for flag, key in (("objective", "train.objective"), ("mask", "train.mask_mode"), ("epochs", "train.epochs")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides[key] = str(value)
    if getattr(args, "data", None):
        overrides["paths.data_dir"] = args.data
    if args.out and args.command in ("train", "evaluate"):
        overrides["paths.out_dir"] = args.out
    return resolve_config(args.config, overrides)


# ---------------------------------------------------------------- commands


def cmd_generate(args, cfg: RunConfig) -> int:
    out_dir = Path(args.out or cfg.paths.data_dir)
    ds = generate_synthetic(cfg.data)
    paths = save_synthetic(ds, out_dir)
    stats = {"train": dataset_stats(ds.train), "test": dataset_stats(ds.test)}
    (out_dir / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    print(format_stats(stats))
    for name, path in paths.items():
        print(f"wrote {name}: {path}")
    return EXIT_OK


def _load_split(data_dir: Path, split: str, vocab: Vocabulary, max_len: int):
    return [encode_example(ex, vocab, max_len) for ex in read_dataset(data_dir / f"{split}.jsonl")]


def cmd_train(args, cfg: RunConfig) -> int:
    data_dir = Path(cfg.paths.data_dir)
    out_dir = Path(cfg.paths.out_dir)
    vocab = Vocabulary.load(data_dir / "vocab.txt")
    resume = load_checkpoint(args.resume) if args.resume else None
    if resume is not None:
        model_cfg = resume.config
        model = resume.to_model()
    else:
        model_cfg = dataclasses.replace(cfg.model, vocab_size=len(vocab))
        model = UniTRec(model_cfg, seed=cfg.train.seed)
    if len(vocab) > model_cfg.vocab_size:
        raise ValueError(f"vocabulary of {len(vocab)} exceeds model vocab_size={model_cfg.vocab_size}")
    cfg = dataclasses.replace(cfg, model=model_cfg)
    examples = _load_split(data_dir, "train", vocab, model_cfg.max_len)
    train_part, val_part = split_validation(examples, cfg.train.val_size, cfg.train.seed)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.ini").write_text(cfg.to_ini())
    ckpt_path = out_dir / "checkpoint.ckpt"
    log_path = out_dir / "train.log"
    try:
        result = train(
            train_part, val_part, model, cfg.train,
            log_path=log_path, checkpoint_path=ckpt_path, resume=resume,
        )
    except TrainingDiverged as exc:
        where = exc.last_good or "none (no epoch completed)"
        print(f"error: training diverged: {exc}; last good checkpoint: {where}", file=sys.stderr)
        return EXIT_RUNTIME
    save_checkpoint(result.checkpoint, ckpt_path)
    print(f"best validation MRR {result.best_val_mrr:.4f} at step {result.checkpoint.step}")
    print(f"wrote checkpoint: {ckpt_path}")
    print(f"wrote metric log: {log_path}")
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.to_model()
    data_dir = Path(cfg.paths.data_dir)
    vocab = Vocabulary.load(data_dir / "vocab.txt")
    if len(vocab) > ckpt.config.vocab_size:
        raise ValueError(f"vocabulary of {len(vocab)} exceeds checkpoint vocab_size={ckpt.config.vocab_size}")
    examples = _load_split(data_dir, args.split, vocab, ckpt.config.max_len)
    mask_mode = args.mask or ckpt.meta.get("train_config", {}).get("mask_mode", "standard")
    summary, _ = evaluate(model, examples, args.score, mask_mode)
    n_cands = round(sum(len(ex.candidates) for ex in examples) / len(examples))
    report = {
        "checkpoint": str(args.checkpoint),
        "split": args.split,
        "score": args.score,
        "mask_mode": mask_mode,
        "instances": len(examples),
        "metrics": summary["fraction"],
        "metrics_percent": summary["percent"],
        "random_baseline": random_baseline(n_cands),
    }
    text = format_report(summary)
    print(text)
    out_dir = Path(cfg.paths.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = f"eval_{args.split}_{args.score}"
    (out_dir / f"{stem}.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    (out_dir / f"{stem}.txt").write_text(text + "\n")
    return EXIT_OK


def cmd_rank(args, cfg: RunConfig) -> int:
    text = sys.stdin.read() if args.score_file == "-" else Path(args.score_file).read_text(encoding="utf-8")
    ids, s_d, s_p = parse_score_table(text)
    result = aggregate_rank(s_d, s_p, pre_normalized=args.pre_normalized)
    if args.json:
        rows = [
            {"id": i, "s_d_norm": a, "s_p_norm": b, "fused": f, "rank": r}
            for i, a, b, f, r in zip(ids, result.s_d_norm, result.s_p_norm, result.fused, result.ranks)
        ]
        rendered = json.dumps(rows, indent=2)
    else:
        rendered = format_ranking_table(ids, result)
    print(rendered)
    if args.out:
        Path(args.out).write_text(rendered + "\n", encoding="utf-8")
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(name)s %(message)s",
    )
    try:
        cfg = load_run_config(args)
    except (UsageError, ConfigError) as exc:
        print(f"unitrec: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args, cfg)
    except (ScoreFileError, DataFormatError, SamplingError, CheckpointError) as exc:
        print(f"unitrec: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, ValueError) as exc:
        print(f"unitrec: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
