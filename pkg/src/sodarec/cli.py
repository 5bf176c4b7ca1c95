"""Command-line entry point: ``sodarec {synth,tokenize,train,eval,report}``.

A data directory holds ``interactions.tsv``, ``embeddings.txt`` and
``item_map.tsv`` (the layout written by ``synth``).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .config import ABLATIONS, TrainConfig
from .corpus import load_embeddings, load_interactions, save_embeddings, synth_corpus, write_interactions
from .decoding import MetricsReport, evaluate
from .pipeline import (
    artifact_tensors,
    load_artifact_tensors,
    prepare_corpus,
    pretrain_tokenizer,
    set_determinism,
    train_alternating,
)
from .quantizer import RQVAE, semantic_ids_for
from .serialization import (
    load_checkpoint,
    load_semantic_ids,
    save_checkpoint,
    save_codebooks,
    save_semantic_ids,
)

logger = logging.getLogger("sodarec")

INTERACTIONS = "interactions.tsv"
EMBEDDINGS = "embeddings.txt"
ITEM_MAP = "item_map.tsv"


def _load_data(data_dir: Path):
    return (load_interactions(data_dir / INTERACTIONS),
            load_embeddings(data_dir / EMBEDDINGS, data_dir / ITEM_MAP))


def _apply_override(tree: dict, assignment: str) -> None:
    key, sep, raw = assignment.partition("=")
    if not sep:
        raise SystemExit(f"--set expects key=value, got {assignment!r}")
    *parents, leaf = key.split(".")
    node = tree
    for part in parents:
        node = node.setdefault(part, {})
    node[leaf] = yaml.safe_load(raw)


def resolve_config(args) -> TrainConfig:
    """Config file values, then ``--set`` overrides, then dedicated flags."""
    data = {}
    if getattr(args, "config", None):
        data = yaml.safe_load(Path(args.config).read_text()) or {}
    for assignment in getattr(args, "set", None) or []:
        _apply_override(data, assignment)
    config = TrainConfig.from_dict(data)
    if getattr(args, "seed", None) is not None:
        config = config.with_seed(args.seed)
    return config


class _JsonLog:
    def __init__(self, path: Path):
        self.fh = open(path, "w")

    def __call__(self, record: dict) -> None:
        self.fh.write(json.dumps(record, sort_keys=True) + "\n")

    def close(self):
        self.fh.close()


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log, table = synth_corpus(args.users, args.items, args.clusters, seed=args.seed, dim=args.dim,
                              affinity=args.affinity)
    write_interactions(log, out / INTERACTIONS)
    save_embeddings(table, out / EMBEDDINGS, out / ITEM_MAP)
    logger.info("wrote %d interactions over %d users and %d items to %s",
                len(log), log["user_id"].nunique(), len(table), out)
    return 0


def cmd_tokenize(args) -> int:
    config = resolve_config(args)
    set_determinism(config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log, table = _load_data(Path(args.data))
    corpus = prepare_corpus(log, table, config.k_core, config.max_len)
    train_log = _JsonLog(out / "train_log.jsonl")
    try:
        quantizer, _ = pretrain_tokenizer(corpus.table, config, on_epoch=train_log)
    finally:
        train_log.close()
    id_map = semantic_ids_for(quantizer, corpus.table.item_ids, corpus.table.vectors)
    config.dump(out / "config.yaml")
    save_checkpoint({f"tokenizer.{k}": v for k, v in quantizer.state_dict().items()}, out / "tokenizer.ckpt")
    save_codebooks(quantizer.codebooks, out / "codebooks.bin")
    save_semantic_ids(id_map, out / "semantic_ids.tsv")
    logger.info("tokenized %d items; max disambiguation suffix %d", len(id_map),
                max(s.disambiguation for s in id_map.values()))
    return 0


def _load_tokenizer(path: Path, config: TrainConfig) -> RQVAE:
    tensors = load_checkpoint(path)
    quantizer = RQVAE(config.tokenizer)
    quantizer.load_state_dict({k[len("tokenizer."):]: v for k, v in tensors.items() if k.startswith("tokenizer.")})
    return quantizer


def cmd_train(args) -> int:
    config = resolve_config(args)
    set_determinism(config)
    ablation = args.ablation.replace("-", "_")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    log, table = _load_data(Path(args.data))
    corpus = prepare_corpus(log, table, config.k_core, config.max_len)
    train_log = _JsonLog(out / "train_log.jsonl")
    try:
        if args.tokenizer:
            quantizer, pretrain_curve = _load_tokenizer(Path(args.tokenizer), config), []
        else:
            quantizer, pretrain_curve = pretrain_tokenizer(corpus.table, config, on_epoch=train_log)
        result = train_alternating(quantizer, corpus, config, ablation, on_step=train_log, on_epoch=train_log)
    finally:
        train_log.close()
    result.report.curves = pretrain_curve + result.report.curves
    config.dump(out / "config.yaml")
    save_checkpoint(artifact_tensors(result), out / "checkpoint.bin")
    save_codebooks(result.quantizer.codebooks, out / "codebooks.bin")
    save_semantic_ids(result.id_map, out / "semantic_ids.tsv")
    (out / "metrics.jsonl").write_text(result.report.validation.to_jsonl() + result.report.test.to_jsonl())
    (out / "run_report.json").write_text(result.report.to_json())
    print(result.report.test.table())
    return 0


def cmd_eval(args) -> int:
    run = Path(args.run)
    config = TrainConfig.load(run / "config.yaml")
    if args.beam_size is not None:
        config.beam_size = args.beam_size
    set_determinism(config)
    _, model = load_artifact_tensors(load_checkpoint(run / "checkpoint.bin"), config)
    id_map = load_semantic_ids(run / "semantic_ids.tsv")
    log, table = _load_data(Path(args.data))
    corpus = prepare_corpus(log, table, config.k_core, config.max_len)
    examples = getattr(corpus.split, args.split)
    report = evaluate(model, id_map, examples, config.max_len, ks=config.ks, beam_size=config.beam_size,
                      batch_size=config.eval_batch_size, split=args.split, seed=config.seed,
                      config_digest=config.digest())
    if args.out:
        Path(args.out).write_text(report.to_jsonl())
    print(report.table())
    return 0


def render_report(report: dict) -> str:
    lines = [f"run {report['ablation']} seed={report['seed']} config={report['config_digest']}"]
    curves = report.get("curves") or []
    for phase in ("pretrain", "rec", "tokenizer"):
        rows = [c for c in curves if c["phase"] == phase]
        if not rows:
            continue
        keys = [k for k in ("l_token", "recon", "l_rec", "l_soda", "combined") if k in rows[0]]
        lines.append(f"  {phase} ({len(rows)} epochs)")
        lines.append("    " + " ".join(f"{k:>10}" for k in ["cycle", "epoch", *keys]))
        for c in rows:
            vals = [c.get("cycle", "-"), c["epoch"], *[f"{c[k]:.4f}" for k in keys]]
            lines.append("    " + " ".join(f"{v!s:>10}" for v in vals))
    for split in ("validation", "test"):
        if report.get(split):
            lines.append(f"  {split}")
            lines.extend("    " + row for row in MetricsReport(report[split]).table().splitlines())
    return "\n".join(lines)


def cmd_report(args) -> int:
    for path in args.reports:
        print(render_report(json.loads(Path(path).read_text())))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sodarec", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a planted-cluster corpus")
    p.add_argument("--users", type=int, default=500)
    p.add_argument("--items", type=int, default=200)
    p.add_argument("--clusters", type=int, default=4)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--affinity", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    def config_flags(p):
        p.add_argument("--config", help="YAML file with TrainConfig fields")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config field, e.g. soda.lam=0.01 (repeatable)")
        p.add_argument("--seed", type=int)
        p.add_argument("--data", required=True, help="data directory")
        p.add_argument("--out", required=True)

    p = sub.add_parser("tokenize", help="pretrain the tokenizer and export semantic ids")
    config_flags(p)
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("train", help="alternating training followed by evaluation")
    config_flags(p)
    p.add_argument("--ablation", default="full", choices=[a.replace("_", "-") for a in ABLATIONS])
    p.add_argument("--tokenizer", help="tokenizer.ckpt from a previous tokenize run")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="full-ranking evaluation of a trained run")
    p.add_argument("--run", required=True, help="output directory of a train run")
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["validation", "test"], default="test")
    p.add_argument("--beam-size", type=int)
    p.add_argument("--out", help="write metrics JSONL here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="render loss curves and metric tables")
    p.add_argument("reports", nargs="+", help="run_report.json files")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
