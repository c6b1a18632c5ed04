"""Command-line entry point: ingest, synth, train, eval, export, bench.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

from threadpoolctl import threadpool_limits

from .config import ConfigError, RunConfig
from .data import (
    DataError, SyntheticSpec, FollowRule, build_eval_instances, dataset_stats, ingest, read_processed,
    sequences_from_interactions, synthetic_interactions, write_interactions, write_processed,
)
from .evaluation import (
    attention_pattern_summary, behavior_relationship, benchmark_attention, evaluate, session_attention_maps,
    user_incidence, write_bench_csv, write_matrix_csv,
)
from .model import MGPT
from .training import CheckpointError, TrainingError, load_checkpoint, save_checkpoint, train

logger = logging.getLogger("mgpt")

EXIT_USAGE = 2
EXIT_RUNTIME = 3


class UsageError(Exception):
    pass


def _csv_ints(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v]


def _scales(text: str) -> list[list[int]]:
    out = []
    for part in text.split(","):
        t, g = part.split(":")
        out.append([int(t), int(g)])
    return out


def _seed(args, fallback: int) -> int:
    if getattr(args, "seed", None) is not None:
        return args.seed
    env = os.environ.get("MGPT_SEED")
    if env:
        try:
            return int(env)
        except ValueError:
            raise UsageError(f"MGPT_SEED must be an integer, got {env!r}") from None
    return fallback


def _require(path: str | Path, what: str = "path") -> Path:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def _load_dataset(path: Path, cfg: RunConfig):
    """A processed dataset directory, or a raw TSV log ingested on the fly."""
    if path.is_dir():
        vocab, seqs, target = read_processed(path)
        return vocab, seqs, target
    vocab, seqs = ingest(path, cfg.data.schema, cfg.data.target_behavior, cfg.model.max_len,
                         cfg.data.behaviors, cfg.data.header)
    return vocab, seqs, cfg.data.target_behavior


def _print_stats(stats: dict) -> None:
    print("users\titems\tinteractions\tbehavior_types")
    print(f"{stats['users']}\t{stats['items']}\t{stats['interactions']}\t{{{','.join(stats['behavior_types'])}}}")


# ---------------------------------------------------------------------------
# subcommands


def cmd_ingest(args) -> int:
    src = _require(args.input, "input file")
    behaviors = args.behaviors.split(",") if args.behaviors else None
    vocab, seqs = ingest(src, args.schema.split(","), args.target, args.max_len, behaviors, args.header)
    write_processed(args.out, vocab, seqs, args.target)
    _print_stats(dataset_stats(vocab, seqs))
    return 0


def cmd_synth(args) -> int:
    if args.spec:
        spec = SyntheticSpec.from_dict(json.loads(_require(args.spec, "spec file").read_text()))
    else:
        rules = []
        for text in args.rule or ["cart:buy:1.0"]:
            trigger, follower, prob = text.split(":")
            rules.append(FollowRule(trigger, follower, float(prob)))
        spec = SyntheticSpec(
            n_users=args.users, n_items=args.items, behaviors=tuple(args.behaviors.split(",")),
            target=args.target, rules=rules, n_blocks=args.blocks, min_len=args.min_len,
            max_len=args.max_len, planted_tail=args.planted_tail,
        )
        if args.weights:
            spec.behavior_weights = {k: float(v) for k, v in (w.split(":") for w in args.weights.split(","))}
    seed = _seed(args, 0)
    rows = synthetic_interactions(spec, seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_interactions(out / "interactions.tsv", rows)
    vocab, seqs = sequences_from_interactions(rows, None, spec.behaviors)
    write_processed(out, vocab, seqs, spec.target)
    _print_stats(dataset_stats(vocab, seqs))
    return 0


def _build_config(args) -> RunConfig:
    cfg = RunConfig.load(_require(args.config, "config file")) if args.config else RunConfig()
    cfg.override("model", d=args.d, max_len=args.max_len, orders=args.orders, gcn_w_mode=args.gcn_w_mode,
                  heads=args.heads, ffn_width=args.ffn_width, n_layers=args.layers,
                  scales=_scales(args.scales) if args.scales else None, lp_exponent=args.lp)
    cfg.override("train", lr=args.lr, batch_size=args.batch_size, rho=args.rho, theta1=args.theta1,
                 theta2=args.theta2, epochs=args.epochs, loss_orders=args.loss_orders)
    cfg.override("eval", cutoffs=_csv_ints(args.cutoffs) if args.cutoffs else None,
                 num_negatives=args.num_negatives, sampling=args.sampling)
    cfg.train.seed = _seed(args, cfg.train.seed)
    return cfg.validate()


def _run_dir(args, seed: int) -> Path:
    if args.run_dir:
        path = Path(args.run_dir)
    else:
        path = Path(args.out) / f"{time.strftime('%Y%m%d-%H%M%S')}_seed{seed}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_train(args) -> int:
    cfg = _build_config(args)
    data_path = _require(args.data, "data path")
    cfg.data.path = str(data_path)
    vocab, seqs, target_label = _load_dataset(data_path, cfg)
    target = vocab.behavior_index(target_label)
    run = _run_dir(args, cfg.train.seed)
    (run / "config.json").write_text(cfg.dumps() + "\n")

    model = MGPT(cfg.model, vocab.n_items, vocab.n_behaviors, seed=cfg.train.seed)
    probe_negatives = min(cfg.eval.num_negatives, vocab.n_items - 1)
    probe_set = build_eval_instances(seqs, vocab, cfg.model.max_len, target, probe_negatives,
                                     cfg.eval.sampling, cfg.train.seed, cfg.eval.exclude_history)

    def probe(m: MGPT) -> float:
        return evaluate(m, probe_set, [cfg.train.probe_cutoff]).hr[cfg.train.probe_cutoff]

    order_cols = [f"order_{l}" for l in (range(1, cfg.model.orders + 1) if cfg.train.loss_orders == "from_1"
                                         else range(cfg.model.orders + 1))]
    with open(run / "trace.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "total", *order_cols, "l1", "l2", f"probe_hr@{cfg.train.probe_cutoff}"])

        def on_epoch(rec) -> None:
            writer.writerow([rec.epoch, repr(rec.total), *map(repr, rec.per_order), repr(rec.l1), repr(rec.l2),
                             repr(rec.probe_hr)])
            fh.flush()
            print(f"epoch {rec.epoch}: loss {rec.total:.6f} probe hr@{cfg.train.probe_cutoff} {rec.probe_hr:.4f}")

        if cfg.train.epochs > 0:
            train(seqs, model, cfg.train, target, probe=probe if probe_set else None, on_epoch=on_epoch)
    save_checkpoint(run / "checkpoint.mgpt", model, vocab, cfg, cfg.train.seed, target_label)
    print(run)
    return 0


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    cfg = ckpt.config
    cfg.override("eval", cutoffs=_csv_ints(args.cutoffs) if args.cutoffs else None,
                 num_negatives=args.num_negatives, sampling=args.sampling)
    cfg.eval.validate()
    seed = _seed(args, ckpt.seed)
    vocab_check, seqs, _ = _load_dataset(_require(args.data, "data path"), cfg)
    if vocab_check.item_to_index != ckpt.vocab.item_to_index:
        raise UsageError("dataset vocabulary does not match the checkpoint")
    instances = build_eval_instances(seqs, ckpt.vocab, cfg.model.max_len, ckpt.target_index,
                                     cfg.eval.num_negatives, cfg.eval.sampling, seed, cfg.eval.exclude_history)
    if not instances:
        raise UsageError("no user has a target-behavior event to evaluate")
    report = evaluate(ckpt.model, instances, cfg.eval.cutoffs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {**report.to_dict(), "seed": seed, "config": cfg.to_dict()}
    (out / "metrics.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


def _pick_user(seqs, user: str | None):
    if user is None:
        return seqs[0]
    for s in seqs:
        if s.user_id == user:
            return s
    raise UsageError(f"user {user!r} not found in dataset")


def cmd_export(args) -> int:
    ckpt = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    out = Path(args.out)
    model = ckpt.model
    if args.what == "behavior-gram":
        out.mkdir(parents=True, exist_ok=True)
        write_matrix_csv(out / "behavior_gram.csv", behavior_relationship(model.tables.behavior_table))
        return 0
    if not args.data:
        raise UsageError(f"export {args.what} needs --data")
    _, seqs, _ = _load_dataset(_require(args.data, "data path"), ckpt.config)
    seq = _pick_user(seqs, args.user)
    if not 0 <= args.order <= model.cfg.orders:
        raise UsageError(f"order must lie in [0, {model.cfg.orders}]")
    if args.what == "incidence":
        (out / "incidence").mkdir(parents=True, exist_ok=True)
        write_matrix_csv(out / "incidence" / f"user_{seq.user_id}.csv", user_incidence(model, seq))
    else:
        target = out / "attention"
        target.mkdir(parents=True, exist_ok=True)
        for (s, i, h), alpha in session_attention_maps(model, seq, args.order).items():
            write_matrix_csv(target / f"user_{seq.user_id}_order{args.order}_scale{s}_session{i}_head{h}.csv", alpha)
        write_matrix_csv(target / f"global_pattern_order{args.order}.csv",
                         attention_pattern_summary(model, seqs, args.order))
    return 0


def cmd_bench(args) -> int:
    lengths = _csv_ints(args.lengths)
    if not lengths:
        raise UsageError("--lengths needs at least one value")
    rows = benchmark_attention(args.d, lengths, args.repeats, _seed(args, 0))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_bench_csv(out, rows)
    for r in rows:
        print(f"N={r.N}\t{r.impl}\t{r.median_seconds:.6f}s")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mgpt", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1 for reproducibility)")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", help="TSV log -> vocab and sequence files")
    p.add_argument("input")
    p.add_argument("--out", required=True)
    p.add_argument("--header", action="store_true", help="skip one header line")
    p.add_argument("--schema", default="user,item,behavior,timestamp")
    p.add_argument("--behaviors", help="declared behavior set, comma separated, in vocab order")
    p.add_argument("--target", default="buy")
    p.add_argument("--max-len", type=int, default=None)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", help="generate a planted-rule synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--spec", help="JSON synthetic spec (overrides the flags below)")
    p.add_argument("--users", type=int, default=200)
    p.add_argument("--items", type=int, default=50)
    p.add_argument("--behaviors", default="pv,cart,buy")
    p.add_argument("--target", default="buy")
    p.add_argument("--rule", action="append", help="trigger:follower:prob, repeatable")
    p.add_argument("--weights", help="behavior:weight pairs for unruled events")
    p.add_argument("--blocks", type=int, default=1)
    p.add_argument("--min-len", type=int, default=8)
    p.add_argument("--max-len", type=int, default=20)
    p.add_argument("--planted-tail", action="store_true")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="Cloze training run")
    p.add_argument("--data", required=True, help="processed dataset directory or raw TSV")
    p.add_argument("--config")
    p.add_argument("--out", default="runs")
    p.add_argument("--run-dir", help="exact output directory instead of a timestamped one")
    p.add_argument("--seed", type=int)
    for flag, typ in (("--d", int), ("--max-len", int), ("--orders", int), ("--heads", int),
                      ("--ffn-width", int), ("--layers", int), ("--lp", float), ("--lr", float),
                      ("--batch-size", int), ("--rho", float), ("--theta1", float), ("--theta2", float),
                      ("--epochs", int), ("--num-negatives", int)):
        p.add_argument(flag, type=typ)
    p.add_argument("--gcn-w-mode", choices=["identity", "orthogonal", "trainable"])
    p.add_argument("--scales", help="two session_len:granularity pairs, e.g. 50:10,10:2")
    p.add_argument("--loss-orders", choices=["all", "from_1"])
    p.add_argument("--cutoffs")
    p.add_argument("--sampling", choices=["uniform", "popularity"])
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="leave-one-out evaluation -> metrics.json")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cutoffs")
    p.add_argument("--num-negatives", type=int)
    p.add_argument("--sampling", choices=["uniform", "popularity"])
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("export", help="interpretability matrices as CSV")
    p.add_argument("what", choices=["attention", "incidence", "behavior-gram"])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--user")
    p.add_argument("--order", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("bench", help="linear vs quadratic attention timing")
    p.add_argument("--d", type=int, default=32)
    p.add_argument("--lengths", default="256,512,1024,2048")
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="bench.csv")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=args.threads):
            return args.func(args)
    except (UsageError, ConfigError, DataError, CheckpointError, FileNotFoundError) as exc:
        print(f"mgpt {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, FloatingPointError, RuntimeError, ValueError) as exc:
        print(f"mgpt {args.command}: runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
