"""Training loop, filtered ranking evaluation and the ablation suite."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .kg import Dataset, KnowledgeGraph, Query
from .model import ModelConfig, ModelParams, batch_loss, init_params, make_batch, predict_logits
from .optim import AdamaxState, adamax_step, lr_schedule
from .retriever import Retriever, SubgraphContext, coverage_stats, retrieve_all

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainInstance:
    query: Query
    context: SubgraphContext

    @property
    def gold(self) -> int:
        return self.query.gold_target


def make_instances(kg: KnowledgeGraph, queries: Sequence[Query], retriever: Retriever) -> list[TrainInstance]:
    """Retrieve and strip each query's own gold edge (both directions) from its context."""
    contexts = retrieve_all(kg, queries, retriever, strip=True)
    return [TrainInstance(q, c) for q, c in zip(queries, contexts)]


def make_batches(
    instances: Sequence[TrainInstance],
    batch_size: int,
    shuffle_within_size: bool = False,
    rng: np.random.Generator | None = None,
) -> list[list[TrainInstance]]:
    """Sort ascending by context size (ties by input index) and slice contiguously."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    keys = [(inst.context.size, i) for i, inst in enumerate(instances)]
    if shuffle_within_size:
        rng = rng or np.random.default_rng(0)
        jitter = rng.permutation(len(instances))
        keys = [(size, int(jitter[i])) for size, i in keys]
    order = [i for _, i in sorted(zip(keys, range(len(instances))))]
    ordered = [instances[i] for i in order]
    return [ordered[i:i + batch_size] for i in range(0, len(ordered), batch_size)]


@dataclass
class TrainResult:
    params: ModelParams
    losses: list[tuple[int, float, float]] = field(default_factory=list)  # (step, lr, loss)
    epoch_means: list[float] = field(default_factory=list)

    def loss_csv(self) -> str:
        lines = ["step,lr,loss"]
        lines += [f"{step},{lr:.10g},{loss:.10g}" for step, lr, loss in self.losses]
        return "\n".join(lines) + "\n"


def train(
    cfg: ModelConfig,
    instances: Sequence[TrainInstance],
    epochs: int,
    batch_size: int = 512,
    peak_lr: float = 2e-3,
    seed: int = 0,
    params: ModelParams | None = None,
    dtype=np.float32,
    on_epoch: Callable[[int, ModelParams], None] | None = None,
) -> TrainResult:
    """Adamax under the warmup/decay schedule over size-sorted batches.

    The schedule is evaluated at steps 1..total, so the final update has lr 0.
    """
    if params is None:
        params = init_params(cfg, seed=seed, dtype=dtype)
    params.check(cfg)
    batches = [make_batch([i.query for i in b], [i.context for i in b], cfg)
               for b in make_batches(instances, batch_size)]
    total = epochs * len(batches)
    state = AdamaxState(lr=peak_lr)
    rng = np.random.default_rng([seed, 1]) if cfg.dropout > 0 else None
    result = TrainResult(params)
    step = 0
    for epoch in range(epochs):
        epoch_losses = []
        for batch in batches:
            step += 1
            lr = lr_schedule(step, total, peak_lr)
            P = params.tensors()
            loss = batch_loss(batch, P, cfg, rng)
            value = float(loss.data)
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at step {step} (epoch {epoch}, lr {lr:.3g})")
            loss.backward()
            grads = {k: t.grad for k, t in P.items() if t.grad is not None}
            adamax_step(params.arrays, grads, state, lr=lr)
            result.losses.append((step, lr, value))
            epoch_losses.append(value)
        result.epoch_means.append(float(np.mean(epoch_losses)) if epoch_losses else float("nan"))
        log.debug("epoch %d mean loss %.4f", epoch, result.epoch_means[-1])
        if on_epoch is not None:
            on_epoch(epoch, params)
    return result


# ---------------------------------------------------------------------------
# evaluation


def filtered_rank(logits: np.ndarray, gold: int, known_positives=()) -> float:
    """1 + #(unfiltered rivals scoring higher) + 0.5 * #(unfiltered rivals tied with gold)."""
    logits = np.asarray(logits)
    if not 0 <= gold < len(logits):
        raise IndexError(f"gold {gold} out of range for {len(logits)} entities")
    keep = np.ones(len(logits), dtype=bool)
    filt = [e for e in known_positives if e != gold]
    keep[filt] = False
    keep[gold] = False
    rivals = logits[keep]
    g = logits[gold]
    return 1.0 + float(np.count_nonzero(rivals > g)) + 0.5 * float(np.count_nonzero(rivals == g))


@dataclass
class Metrics:
    count: int
    mrr: float
    hits1: float
    hits3: float
    hits10: float

    @classmethod
    def from_ranks(cls, ranks: Sequence[float]) -> "Metrics":
        r = np.asarray(ranks, dtype=np.float64)
        if not len(r):
            return cls(0, 0.0, 0.0, 0.0, 0.0)
        return cls(len(r), float(np.mean(1.0 / r)), *(float(np.mean(r <= k)) for k in (1, 3, 10)))

    def as_dict(self) -> dict:
        return {"count": self.count, "mrr": self.mrr, "hits1": self.hits1, "hits3": self.hits3, "hits10": self.hits10}


@dataclass
class RankingReport:
    split: str
    strategy: str
    ranks: list[float]
    present: list[bool]
    queries: list[Query] = field(default_factory=list)

    @property
    def overall(self) -> Metrics:
        return Metrics.from_ranks(self.ranks)

    @property
    def coverage(self) -> float:
        return float(np.mean(self.present)) if self.present else 0.0

    def slice(self, present: bool) -> Metrics:
        return Metrics.from_ranks([r for r, p in zip(self.ranks, self.present) if p == present])

    def to_record(self, per_query: bool = False) -> dict:
        m = self.overall
        rec = {
            "split": self.split,
            "strategy": self.strategy,
            "mrr": m.mrr,
            "hits1": m.hits1,
            "hits3": m.hits3,
            "hits10": m.hits10,
            "coverage": self.coverage,
            "slices": {"present": self.slice(True).as_dict(), "absent": self.slice(False).as_dict()},
        }
        if per_query:
            rec["per_query"] = [
                {"query": [q.source, q.relation], "target": q.gold_target, "rank": r, "present": p}
                for q, r, p in zip(self.queries, self.ranks, self.present)
            ]
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "RankingReport":
        rows = rec.get("per_query", [])
        return cls(
            split=rec["split"],
            strategy=rec["strategy"],
            ranks=[row["rank"] for row in rows],
            present=[row["present"] for row in rows],
            queries=[Query(row["query"][0], row["query"][1], row["target"]) for row in rows],
        )


def evaluate_contexts(
    kg: KnowledgeGraph,
    queries: Sequence[Query],
    contexts: Sequence[SubgraphContext],
    params: ModelParams,
    cfg: ModelConfig,
    split: str = "test",
    strategy: str = "",
    batch_size: int = 256,
) -> RankingReport:
    logits = predict_logits(queries, contexts, params, cfg, batch_size)
    ranks = [
        filtered_rank(row, q.gold_target, kg.known_answers(q.source, q.relation))
        for row, q in zip(logits, queries)
    ]
    present = [c.contains(q.gold_target) for c, q in zip(contexts, queries)]
    return RankingReport(split, strategy, ranks, present, list(queries))


def evaluate(
    params: ModelParams,
    cfg: ModelConfig,
    data: Dataset,
    retriever: Retriever,
    split: str = "test",
    contexts: Sequence[SubgraphContext] | None = None,
) -> RankingReport:
    """Filtered ranking over both query directions of ``split``.

    Known positives come from train, valid and test facts (inverses included).
    Pass ``contexts`` to reuse a cached retrieval.
    """
    queries = data.queries(split)
    if contexts is None:
        contexts = retrieve_all(data.graph, queries, retriever, strip=(split == "train"))
    return evaluate_contexts(data.graph, queries, contexts, params, cfg, split, retriever.strategy)


# ---------------------------------------------------------------------------
# ablations

READER_VARIANTS = {
    "full": {},
    "-cross_attention": {"no_cross_attention": True},
    "-graph_mask": {"full_attention": True},
    "-subgraph_embed": {"no_subgraph_repr": True},
    "-query_embed": {"no_query_repr": True},
}


@dataclass
class AblationRow:
    retriever: str
    variant: str
    report: RankingReport
    coverage: float

    def to_record(self) -> dict:
        rec = self.report.to_record()
        rec.update({"retriever": self.retriever, "variant": self.variant, "coverage": self.coverage})
        return rec


def run_experiment(
    data: Dataset,
    retriever: Retriever,
    cfg: ModelConfig,
    epochs: int,
    batch_size: int,
    peak_lr: float,
    seed: int,
    split: str = "test",
) -> tuple[RankingReport, TrainResult]:
    instances = make_instances(data.graph, data.queries("train"), retriever)
    result = train(cfg, instances, epochs, batch_size, peak_lr, seed)
    report = evaluate(result.params, cfg, data, retriever, split)
    return report, result


def ablation_suite(
    data: Dataset,
    retrievers: dict[str, Retriever],
    base: ModelConfig,
    epochs: int,
    batch_size: int,
    peak_lr: float,
    seed: int = 0,
    variants: dict[str, dict] | None = None,
    split: str = "test",
) -> list[AblationRow]:
    """Every reader variant crossed with every retriever, one shared seed and dataset."""
    variants = READER_VARIANTS if variants is None else variants
    rows = []
    for rname, retriever in retrievers.items():
        eval_queries = data.queries(split)
        coverage = coverage_stats(retrieve_all(data.graph, eval_queries, retriever), eval_queries)
        for vname, flags in variants.items():
            cfg = replace(base, **{**{k: False for k in ModelConfig.ABLATIONS}, **flags})
            report, _ = run_experiment(data, retriever, cfg, epochs, batch_size, peak_lr, seed, split)
            log.info("%s / %s: MRR %.3f", rname, vname, report.overall.mrr)
            rows.append(AblationRow(rname, vname, report, coverage))
    return rows
