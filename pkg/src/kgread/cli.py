"""Command-line entry point: ``kgread {prepare,retrieve,train,eval,ablate,synth}``.

Settings resolve as: command-line flag > ``--config`` file > built-in default.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from dataclasses import fields
from pathlib import Path

from . import io
from .kg import Dataset, Query, VocabularyError, load_dataset
from .retriever import (
    EmbeddingScorer,
    RelationPathScorer,
    Retriever,
    coverage_stats,
    read_contexts,
    read_path_file,
    retrieve_all,
    train_translational_embeddings,
    write_contexts,
)
from .synth import SynthConfig, desk_kg, generate_compositional, write_dataset
from .training import ablation_suite, evaluate, make_instances, train

log = logging.getLogger("kgread")

SUPPRESS = argparse.SUPPRESS


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_run_options(parser: argparse.ArgumentParser, groups: tuple[str, ...]) -> None:
    """Expose RunConfig fields as flags; absent flags stay out of the namespace."""
    sections = {
        "data": ("data",),
        "retrieval": ("strategy", "budget", "seed", "traverse_inverse", "beam_width", "max_hops",
                      "paths", "scorer", "scorer_dim", "scorer_epochs", "split"),
        "model": io.RunConfig.MODEL_KEYS,
        "optim": ("lr", "epochs", "batch_size"),
    }
    helps = {
        "data": "dataset directory holding train.txt, valid.txt, test.txt",
        "strategy": "retrieval strategy: bfs | onehop | paths | beam | none",
        "budget": "maximum number of context edges per query",
        "seed": "random seed (one-hop sampling, initialization)",
        "traverse_inverse": "let retrievers follow inverse relations",
        "beam_width": "beams kept per hop (strategy beam)",
        "max_hops": "maximum path length (strategy beam)",
        "paths": "JSON Lines file of precomputed paths (strategy paths)",
        "scorer": "beam-search heuristic: relpath | transe",
        "scorer_dim": "embedding width for the transe scorer",
        "scorer_epochs": "training epochs for the transe scorer",
        "split": "split to retrieve or evaluate: train | valid | test",
        "layers": "Transformer layers per stack",
        "heads": "attention heads",
        "dim": "hidden size",
        "ffn_dim": "feed-forward inner size",
        "dropout": "dropout on sublayer outputs during training",
        "init_std": "standard deviation of embedding-table initialization",
        "no_cross_attention": "ablation: skip the cross-attention stack",
        "full_attention": "ablation: replace the graph mask with full attention",
        "no_subgraph_repr": "ablation: score from the query-tower [CLS] only",
        "no_query_repr": "ablation: attach (source, r, <MASK>) and score from <MASK>",
        "lr": "peak learning rate",
        "epochs": "training epochs",
        "batch_size": "instances per batch",
    }
    types = {f.name: f.type for f in fields(io.RunConfig)}
    defaults = io.run_defaults()
    for group in groups:
        for name in sections[group]:
            kind = types[name]
            text = f"{helps[name]} (default: {defaults[name]})"
            if kind in ("bool", bool):
                parser.add_argument(_flag(name), dest=name, action=argparse.BooleanOptionalAction,
                                    default=SUPPRESS, help=text)
            else:
                conv = {"int": int, "float": float}.get(kind, str)
                parser.add_argument(_flag(name), dest=name, type=conv, default=SUPPRESS, help=text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kgread", description="Subgraph retrieval and Transformer reading for KG link prediction."
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to standard error")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, help_text, groups):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="key = value config file")
        _add_run_options(p, groups)
        return p

    p = command("prepare", "write vocabulary files and graph statistics", ("data",))
    p.add_argument("--out", required=True, help="output directory")

    p = command("retrieve", "write per-query contexts as JSON Lines", ("data", "retrieval"))
    p.add_argument("--out", required=True, help="output .jsonl file")
    p.add_argument("--query", nargs=2, metavar=("SOURCE", "RELATION"),
                   help="retrieve for one query (entity and relation names) instead of a split")

    p = command("train", "train a reader; writes config, loss.csv and checkpoints", ("data", "retrieval", "model", "optim"))
    p.add_argument("--out", help="output directory (a run-<id> folder is created inside)")

    p = command("eval", "filtered ranking evaluation of a checkpoint", ("data", "retrieval"))
    p.add_argument("--checkpoint", required=True, help="checkpoint file written by train")
    p.add_argument("--out", required=True, help="metrics .json file")
    p.add_argument("--cache", help="directory for cached contexts")
    p.add_argument("--per-query", action="store_true", help="include per-query ranks in the metrics")

    p = command("ablate", "reader variants x retrievers table", ("data", "retrieval", "model", "optim"))
    p.add_argument("--out", required=True, help="metrics .json file")

    p = sub.add_parser("synth", help="write a synthetic dataset", description="write a synthetic dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--desk", action="store_true", help="write the 8-triple desk fixture instead")
    p.add_argument("--entities", type=int, default=SynthConfig.entities, help="number of entities (default: %(default)s)")
    p.add_argument("--seed", type=int, default=SynthConfig.seed, help="generator seed (default: %(default)s)")
    p.add_argument("--rules", type=int, default=SynthConfig.rules,
                   help="independent composition rules (default: %(default)s)")
    p.add_argument("--noise-relations", type=int, default=SynthConfig.noise_relations,
                   help="distractor relation count (default: %(default)s)")
    p.add_argument("--noise-edges", type=float, default=SynthConfig.noise_edges_per_entity,
                   help="distractor edges per entity (default: %(default)s)")
    p.add_argument("--goal-train-fraction", type=float, default=SynthConfig.goal_train_fraction,
                   help="share of composed facts kept in train (default: %(default)s)")
    p.add_argument("--goal-valid-fraction", type=float, default=SynthConfig.goal_valid_fraction,
                   help="share of composed facts put in valid (default: %(default)s)")
    return parser


def resolve_config(args: argparse.Namespace) -> io.RunConfig:
    rc = io.RunConfig()
    if getattr(args, "config", None):
        rc = io.load_run_config(args.config)
    overrides = {f.name: getattr(args, f.name) for f in fields(io.RunConfig) if hasattr(args, f.name)}
    return rc.updated(overrides)


def build_retriever(rc: io.RunConfig, data: Dataset) -> Retriever:
    scorer = None
    table = None
    if rc.strategy == "beam":
        if rc.scorer == "relpath":
            scorer = RelationPathScorer.fit(data.graph, rc.max_hops)
        elif rc.scorer == "transe":
            scorer = EmbeddingScorer(
                train_translational_embeddings(data.graph, rc.scorer_dim, rc.scorer_epochs, seed=rc.seed)
            )
        else:
            raise io.ConfigError(f"unknown scorer {rc.scorer!r}")
    if rc.strategy == "paths":
        if not rc.paths:
            raise io.ConfigError("strategy 'paths' needs --paths FILE")
        table = read_path_file(rc.paths)
    return Retriever(
        strategy=rc.strategy,
        budget=rc.budget,
        seed=rc.seed,
        traverse_inverse=rc.traverse_inverse,
        beam_width=rc.beam_width,
        max_hops=rc.max_hops,
        scorer=scorer,
        path_table=table,
    )


def _load(rc: io.RunConfig) -> Dataset:
    if not rc.data:
        raise io.ConfigError("no dataset given (--data DIR)")
    return load_dataset(rc.data)


def run_id(rc: io.RunConfig) -> str:
    """Content hash of the config snapshot, ignoring where outputs go."""
    text = rc.updated({"out": ""}).to_text()
    return hashlib.sha1(text.encode("utf-8")).hexdigest()[:12]


def cmd_prepare(args, rc: io.RunConfig) -> None:
    data = _load(rc)
    out = Path(args.out)
    data.vocab.save(out)
    io.write_json(out / "stats.json", {
        "entities": data.vocab.num_entities,
        "relations": data.vocab.num_original_relations,
        "augmented_relations": data.vocab.num_relations,
        "train": len(data.train),
        "valid": len(data.valid),
        "test": len(data.test),
        "augmented_train_edges": len(data.graph.triples),
    })
    print(out)


def cmd_retrieve(args, rc: io.RunConfig) -> None:
    data = _load(rc)
    retriever = build_retriever(rc, data)
    if args.query:
        source, relation = args.query
        queries = [Query(data.vocab.entity(source), data.vocab.relation(relation))]
        strip = False
    else:
        queries = data.queries(rc.split)
        strip = rc.split == "train"
    contexts = retrieve_all(data.graph, queries, retriever, strip=strip)
    write_contexts(args.out, contexts)
    if all(q.gold_target is not None for q in queries) and queries:
        log.info("coverage %.4f over %d queries", coverage_stats(contexts, queries), len(queries))
    print(args.out)


def cmd_train(args, rc: io.RunConfig) -> None:
    if args.out:
        rc = rc.updated({"out": args.out})
    data = _load(rc)
    retriever = build_retriever(rc, data)
    cfg = rc.model_config(data.vocab.num_entities, data.vocab.num_relations)
    run_dir = Path(rc.out) / f"run-{run_id(rc)}"
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(rc.to_text(), encoding="utf-8")
    instances = make_instances(data.graph, data.queries("train"), retriever)

    def on_epoch(epoch, params):
        io.save_checkpoint(run_dir / f"checkpoint-epoch{epoch + 1:03d}.bin", params, cfg)

    result = train(cfg, instances, rc.epochs, rc.batch_size, rc.lr, rc.seed, on_epoch=on_epoch)
    (run_dir / "loss.csv").write_text(result.loss_csv(), encoding="utf-8")
    io.save_checkpoint(run_dir / "checkpoint.bin", result.params, cfg)
    print(run_dir)


RETRIEVAL_KEYS = ("strategy", "budget", "seed", "traverse_inverse", "beam_width", "max_hops",
                  "paths", "scorer", "scorer_dim", "scorer_epochs", "split")


def _retrieval_hash(rc: io.RunConfig, data: Dataset) -> str:
    """Identifies a cached retrieval: every retrieval setting plus the train and split triples."""
    h = hashlib.sha1()
    for key in RETRIEVAL_KEYS:
        h.update(f"{key}={getattr(rc, key)};".encode())
    for split in ("train", rc.split):
        for tr in data.split(split):
            h.update(f"{tr.head},{tr.relation},{tr.tail};".encode())
    return h.hexdigest()[:12]


def cmd_eval(args, rc: io.RunConfig) -> None:
    data = _load(rc)
    params, cfg = io.load_checkpoint(args.checkpoint)
    if cfg is None:
        raise io.ConfigError("checkpoint has no model config")
    retriever = build_retriever(rc, data)
    contexts = None
    if args.cache:
        key = f"{rc.strategy}-b{rc.budget}-s{rc.seed}-{rc.split}-{_retrieval_hash(rc, data)}.jsonl"
        path = Path(args.cache) / key
        if path.exists():
            contexts = read_contexts(path)
        else:
            queries = data.queries(rc.split)
            contexts = retrieve_all(data.graph, queries, retriever, strip=(rc.split == "train"))
            path.parent.mkdir(parents=True, exist_ok=True)
            write_contexts(path, contexts)
    report = evaluate(params, cfg, data, retriever, rc.split, contexts)
    io.write_json(args.out, report.to_record(per_query=args.per_query))
    m = report.overall
    print(f"MRR {m.mrr:.4f}  H@1 {m.hits1:.4f}  H@3 {m.hits3:.4f}  H@10 {m.hits10:.4f}  coverage {report.coverage:.4f}")


def cmd_ablate(args, rc: io.RunConfig) -> None:
    data = _load(rc)
    base = rc.model_config(data.vocab.num_entities, data.vocab.num_relations)
    retrievers = {name: build_retriever(rc.updated({"strategy": name}), data) for name in ("beam", "bfs", "onehop")}
    rows = ablation_suite(data, retrievers, base, rc.epochs, rc.batch_size, rc.lr, rc.seed, split=rc.split)
    io.write_json(args.out, [row.to_record() for row in rows])
    for row in rows:
        print(f"{row.retriever:7s} {row.variant:17s} MRR {row.report.overall.mrr:.4f}")


def cmd_synth(args) -> None:
    if args.desk:
        data = desk_kg()
    else:
        data = generate_compositional(SynthConfig(
            entities=args.entities,
            seed=args.seed,
            rules=args.rules,
            noise_relations=args.noise_relations,
            noise_edges_per_entity=args.noise_edges,
            goal_train_fraction=args.goal_train_fraction,
            goal_valid_fraction=args.goal_valid_fraction,
        ))
    write_dataset(data, args.out)
    print(args.out)


COMMANDS = {
    "prepare": cmd_prepare,
    "retrieve": cmd_retrieve,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def cli(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            cmd_synth(args)
        else:
            COMMANDS[args.command](args, resolve_config(args))
    except (OSError, ValueError, KeyError, IndexError, VocabularyError) as exc:
        print(f"kgread {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
