"""Subgraph retrieval: BFS, one-hop sampling, path union and a heuristic beam search.

Every strategy returns a :class:`SubgraphContext` whose node list starts with
the query source, even when no edges were retrieved.
"""

from __future__ import annotations

import json
import math
from collections import Counter, defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .kg import KnowledgeGraph, Query, Triple

Path_ = tuple[Triple, ...]
Scorer = Callable[[Query, Path_, Triple], float]


class ChainError(ValueError):
    pass


@dataclass(frozen=True)
class SubgraphContext:
    query: Query
    edges: tuple[Triple, ...]
    nodes: tuple[int, ...]
    terminal_flags: tuple[bool, ...]
    strategy: str = ""
    paths: tuple[Path_, ...] | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.nodes or self.nodes[0] != self.query.source:
            raise ValueError("nodes[0] must be the query source")
        if len(self.terminal_flags) != len(self.nodes):
            raise ValueError("terminal_flags must have one entry per node")

    @property
    def size(self) -> int:
        """Token count m + n."""
        return len(self.nodes) + len(self.edges)

    @property
    def terminals(self) -> list[int]:
        return [v for v, flag in zip(self.nodes, self.terminal_flags) if flag]

    def contains(self, entity: int) -> bool:
        return entity in self.nodes


def node_order(source: int, edges: Iterable[Triple]) -> list[int]:
    nodes = [source]
    seen = {source}
    for h, _, t in edges:
        for v in (h, t):
            if v not in seen:
                seen.add(v)
                nodes.append(v)
    return nodes


def make_context(
    query: Query,
    edges: Sequence[Triple],
    terminals: Iterable[int],
    strategy: str,
    paths: Sequence[Path_] | None = None,
) -> SubgraphContext:
    edges = tuple(Triple(*e) for e in edges)
    nodes = node_order(query.source, edges)
    terminal_set = set(terminals)
    return SubgraphContext(
        query=query,
        edges=edges,
        nodes=tuple(nodes),
        terminal_flags=tuple(v in terminal_set for v in nodes),
        strategy=strategy,
        paths=None if paths is None else tuple(tuple(Triple(*e) for e in p) for p in paths),
    )


def _neighbours(kg: KnowledgeGraph, entity: int, traverse_inverse: bool):
    for r, t in kg.out_adjacency(entity):
        if traverse_inverse or not kg.is_inverse(r):
            yield r, t


def retrieve_bfs(kg: KnowledgeGraph, query: Query, budget: int, traverse_inverse: bool = True) -> SubgraphContext:
    """First ``budget`` edges met by a FIFO breadth-first walk from the source.

    An edge whose inverse is already collected describes the same fact and is
    skipped without using budget. Terminals are the non-source nodes in the
    deepest discovered layer plus any non-source node with no out-edge in the
    context.
    """
    if budget < 0:
        raise ValueError("budget must be >= 0")
    src = query.source
    edges: list[Triple] = []
    collected: set[Triple] = set()
    depth = {src: 0}
    frontier = deque([src])
    while frontier and len(edges) < budget:
        node = frontier.popleft()
        for r, t in _neighbours(kg, node, traverse_inverse):
            tr = Triple(node, r, t)
            if tr in collected or kg.inverse(tr) in collected:
                continue
            if len(edges) >= budget:
                break
            edges.append(tr)
            collected.add(tr)
            if t not in depth:
                depth[t] = depth[node] + 1
                frontier.append(t)
    heads = {h for h, _, _ in edges}
    deepest = max(depth[t] for _, _, t in edges) if edges else 0
    terminals = [
        v for v in node_order(src, edges)
        if v != src and (depth[v] == deepest or v not in heads)
    ]
    return make_context(query, edges, terminals, "bfs")


def retrieve_one_hop(
    kg: KnowledgeGraph,
    query: Query,
    budget: int,
    seed: int = 0,
    traverse_inverse: bool = True,
) -> SubgraphContext:
    """Uniform sample (without replacement) of ``min(budget, degree)`` source edges.

    The sample is returned in adjacency order. The generator is keyed on
    ``(seed, source, relation)`` so each query draws independently but
    reproducibly.
    """
    if budget < 0:
        raise ValueError("budget must be >= 0")
    src = query.source
    candidates = [Triple(src, r, t) for r, t in _neighbours(kg, src, traverse_inverse)]
    k = min(budget, len(candidates))
    rng = np.random.default_rng([seed, src, query.relation])
    picked = sorted(rng.choice(len(candidates), size=k, replace=False).tolist()) if k else []
    edges = [candidates[i] for i in picked]
    return make_context(query, edges, (t for _, _, t in edges if t != src), "onehop")


def validate_path(path: Sequence[Triple], source: int, label: str = "path") -> None:
    expected = source
    for step, (h, _, t) in enumerate(path):
        if h != expected:
            raise ChainError(f"{label} step {step}: head {h} does not continue from {expected}")
        expected = t


def retrieve_path_union(query: Query, paths: Sequence[Sequence[Triple]], budget: int) -> SubgraphContext:
    """Deduplicated union of path edges in first-occurrence order, cut to ``budget``.

    A path's last entity is a terminal only if all of its edges survived the cut.
    """
    if budget < 0:
        raise ValueError("budget must be >= 0")
    paths = [tuple(Triple(*e) for e in p) for p in paths]
    for i, p in enumerate(paths):
        validate_path(p, query.source, label=f"path {i}")
    edges: list[Triple] = []
    seen: set[Triple] = set()
    for p in paths:
        for tr in p:
            if tr not in seen:
                seen.add(tr)
                edges.append(tr)
    kept = set(edges[:budget])
    edges = edges[:budget]
    terminals = [p[-1].tail for p in paths if p and all(tr in kept for tr in p)]
    return make_context(query, edges, terminals, "paths", paths=paths)


def uniform_scorer(query: Query, path: Path_, edge: Triple) -> float:
    return 0.0


def beam_search_paths(
    kg: KnowledgeGraph,
    query: Query,
    beam_width: int,
    max_hops: int,
    scorer: Scorer | None = None,
    traverse_inverse: bool = True,
    no_backtrack: bool = True,
) -> list[Path_]:
    """Keep the ``beam_width`` best partial paths by cumulative per-hop score.

    Ties go to the lower new entity index, then the lower relation index, then
    the better-ranked parent beam. Beams with no admissible extension are
    dropped. With ``no_backtrack`` a step may not undo the previous one.
    """
    if beam_width < 1:
        raise ValueError("beam_width must be >= 1")
    if max_hops < 1:
        raise ValueError("max_hops must be >= 1")
    scorer = scorer or uniform_scorer
    beams: list[tuple[Path_, float]] = [((), 0.0)]
    for _ in range(max_hops):
        candidates = []
        for rank, (path, score) in enumerate(beams):
            here = path[-1].tail if path else query.source
            for r, t in _neighbours(kg, here, traverse_inverse):
                tr = Triple(here, r, t)
                if no_backtrack and path and tr == kg.inverse(path[-1]):
                    continue
                total = score + float(scorer(query, path, tr))
                candidates.append((-total, t, r, rank, path + (tr,)))
        if not candidates:
            return []
        candidates.sort(key=lambda c: c[:4])
        beams = [(c[4], -c[0]) for c in candidates[:beam_width]]
    return [p for p, _ in beams]


def strip_query_edge(ctx: SubgraphContext, query_triple: Triple, num_original_relations: int) -> SubgraphContext:
    """Drop the gold edge ``(source, r, target)`` and its inverse form from the context."""
    h, r, t = query_triple
    r_inv = r + num_original_relations if r < num_original_relations else r - num_original_relations
    banned = {Triple(h, r, t), Triple(t, r_inv, h)}
    if not any(e in banned for e in ctx.edges):
        return ctx
    edges = [e for e in ctx.edges if e not in banned]
    paths = ctx.paths
    if paths is not None:
        paths = tuple(p for p in paths if not any(e in banned for e in p))
    return make_context(ctx.query, edges, ctx.terminals, ctx.strategy, paths)


def coverage_stats(contexts: Sequence[SubgraphContext], queries: Sequence[Query] | None = None) -> float:
    """Fraction of contexts whose node set contains the query's gold target."""
    if queries is None:
        queries = [c.query for c in contexts]
    if len(queries) != len(contexts):
        raise ValueError("one query per context required")
    if not contexts:
        return 0.0
    hits = 0
    for ctx, q in zip(contexts, queries):
        if q.gold_target is None:
            raise ValueError(f"query {tuple(q)} has no gold target")
        hits += ctx.contains(q.gold_target)
    return hits / len(contexts)


# ---------------------------------------------------------------------------
# embedding heuristic for the built-in beam search


@dataclass
class TranslationalEmbeddings:
    entity: np.ndarray
    relation: np.ndarray


def train_translational_embeddings(
    kg: KnowledgeGraph,
    dim: int = 32,
    epochs: int = 50,
    lr: float = 0.05,
    margin: float = 1.0,
    seed: int = 0,
    batch_size: int = 128,
) -> TranslationalEmbeddings:
    """Fit ``entity[h] + relation[r] ~ entity[t]`` on the augmented train edges.

    Margin ranking on squared distances against one tail-corrupted negative per
    edge; entity vectors are projected back onto the unit sphere after every
    batch so a dot product ranks like a distance.
    """
    rng = np.random.default_rng(seed)
    scale = 6.0 / np.sqrt(dim)
    ent = rng.uniform(-scale, scale, (kg.num_entities, dim))
    ent /= np.linalg.norm(ent, axis=1, keepdims=True)
    rel = rng.uniform(-scale, scale, (kg.num_relations, dim))
    rel /= np.linalg.norm(rel, axis=1, keepdims=True)
    triples = np.asarray(kg.triples, dtype=np.int64).reshape(-1, 3)
    if not len(triples):
        return TranslationalEmbeddings(ent, rel)
    for _ in range(epochs):
        order = rng.permutation(len(triples))
        for start in range(0, len(order), batch_size):
            batch = triples[order[start:start + batch_size]]
            h, r, t = batch[:, 0], batch[:, 1], batch[:, 2]
            t_neg = rng.integers(0, kg.num_entities, len(batch))
            pos = ent[h] + rel[r] - ent[t]
            neg = ent[h] + rel[r] - ent[t_neg]
            active = (margin + (pos**2).sum(1) - (neg**2).sum(1)) > 0
            if not active.any():
                continue
            pos, neg = 2 * pos[active], 2 * neg[active]
            h, r, t, t_neg = h[active], r[active], t[active], t_neg[active]
            g_ent = np.zeros_like(ent)
            g_rel = np.zeros_like(rel)
            np.add.at(g_ent, h, pos - neg)
            np.add.at(g_ent, t, -pos)
            np.add.at(g_ent, t_neg, neg)
            np.add.at(g_rel, r, pos - neg)
            ent -= lr * g_ent / len(batch)
            rel -= lr * g_rel / len(batch)
            ent /= np.linalg.norm(ent, axis=1, keepdims=True)
    return TranslationalEmbeddings(ent, rel)


class EmbeddingScorer:
    """Per-hop score: dot product of the step's new entity with ``entity[s] + relation[r]``."""

    def __init__(self, embeddings: TranslationalEmbeddings):
        self.embeddings = embeddings

    def __call__(self, query: Query, path: Path_, edge: Triple) -> float:
        e = self.embeddings
        target = e.entity[query.source] + e.relation[query.relation]
        return float(target @ e.entity[edge.tail])


class RelationPathScorer:
    """Per-hop log-probability of the next relation given the query relation and the path so far.

    Fitted by enumerating, for every augmented train edge ``(s, r, t)``, the
    relation sequences of up to ``max_hops`` steps that lead from ``s`` to
    ``t`` without using that edge or its inverse. The beam score of a path is
    then ``log P(relation sequence | r)`` with additive smoothing ``alpha``.
    """

    def __init__(self, counts: dict[int, Counter], num_relations: int, alpha: float = 0.5):
        self.counts = counts
        self.num_relations = num_relations
        self.alpha = alpha

    @classmethod
    def fit(cls, kg: KnowledgeGraph, max_hops: int = 2, alpha: float = 0.5) -> "RelationPathScorer":
        counts: dict[int, Counter] = defaultdict(Counter)
        for tr in kg.triples:
            h, r, t = tr
            banned = {tr, kg.inverse(tr)}
            table = counts[r]
            stack: list[tuple[int, tuple[int, ...]]] = [(h, ())]
            while stack:
                node, rels = stack.pop()
                if len(rels) == max_hops:
                    continue
                for r2, t2 in kg.out_adjacency(node):
                    if Triple(node, r2, t2) in banned:
                        continue
                    seq = rels + (r2,)
                    if t2 == t:
                        table[()] += 1
                        for k in range(1, len(seq) + 1):
                            table[seq[:k]] += 1
                    stack.append((t2, seq))
        return cls(dict(counts), kg.num_relations, alpha)

    def __call__(self, query: Query, path: Path_, edge: Triple) -> float:
        table = self.counts.get(query.relation, Counter())
        prefix = tuple(e.relation for e in path)
        num = table[prefix + (edge.relation,)] + self.alpha
        den = table[prefix] + self.alpha * self.num_relations
        return math.log(num / den)


# ---------------------------------------------------------------------------
# JSON Lines context / path files


def context_record(ctx: SubgraphContext) -> dict:
    rec = {
        "query": [ctx.query.source, ctx.query.relation],
        "edges": [list(e) for e in ctx.edges],
        "terminals": ctx.terminals,
        "strategy": ctx.strategy,
    }
    if ctx.query.gold_target is not None:
        rec["target"] = ctx.query.gold_target
    if ctx.paths is not None:
        rec["paths"] = [[list(e) for e in p] for p in ctx.paths]
    return rec


def context_from_record(rec: dict) -> SubgraphContext:
    source, relation = rec["query"]
    query = Query(source, relation, rec.get("target"))
    paths = rec.get("paths")
    return make_context(query, [tuple(e) for e in rec["edges"]], rec.get("terminals", []), rec.get("strategy", ""), paths)


def write_contexts(path: str | Path, contexts: Iterable[SubgraphContext]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ctx in contexts:
            fh.write(json.dumps(context_record(ctx), separators=(",", ":")) + "\n")


def read_contexts(path: str | Path) -> list[SubgraphContext]:
    with open(path, encoding="utf-8") as fh:
        return [context_from_record(json.loads(line)) for line in fh if line.strip()]


def read_path_file(path: str | Path) -> dict[tuple[int, int], list[Path_]]:
    """Precomputed paths keyed by ``(source, relation)``; later records extend earlier ones."""
    table: dict[tuple[int, int], list[Path_]] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            rec = json.loads(line)
            key = tuple(rec["query"])
            paths = [tuple(Triple(*e) for e in p) for p in rec.get("paths", [])]
            for i, p in enumerate(paths):
                validate_path(p, key[0], label=f"line {lineno} path {i}")
            table.setdefault(key, []).extend(paths)
    return table


# ---------------------------------------------------------------------------
# configured retriever


@dataclass
class Retriever:
    """A retrieval strategy bound to its settings; callable on ``(kg, query)``."""

    strategy: str = "bfs"
    budget: int = 30
    seed: int = 0
    traverse_inverse: bool = True
    beam_width: int = 8
    max_hops: int = 2
    scorer: Scorer | None = None
    path_table: dict[tuple[int, int], list[Path_]] | None = None

    STRATEGIES = ("bfs", "onehop", "paths", "beam", "none")

    def __post_init__(self):
        if self.strategy not in self.STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; choose from {self.STRATEGIES}")

    def paths_for(self, kg: KnowledgeGraph, query: Query) -> list[Path_]:
        if self.strategy == "paths":
            if self.path_table is None:
                raise ValueError("strategy 'paths' needs a path file")
            return self.path_table.get((query.source, query.relation), [])
        return beam_search_paths(
            kg, query, self.beam_width, self.max_hops, self.scorer, self.traverse_inverse
        )

    def __call__(self, kg: KnowledgeGraph, query: Query) -> SubgraphContext:
        if self.strategy == "bfs":
            return retrieve_bfs(kg, query, self.budget, self.traverse_inverse)
        if self.strategy == "onehop":
            return retrieve_one_hop(kg, query, self.budget, self.seed, self.traverse_inverse)
        if self.strategy == "none":
            return make_context(query, [], [], "none")
        ctx = retrieve_path_union(query, self.paths_for(kg, query), self.budget)
        return ctx if self.strategy == "paths" else _retag(ctx, "beam")


def _retag(ctx: SubgraphContext, strategy: str) -> SubgraphContext:
    return SubgraphContext(ctx.query, ctx.edges, ctx.nodes, ctx.terminal_flags, strategy, ctx.paths)


def retrieve_all(
    kg: KnowledgeGraph,
    queries: Sequence[Query],
    retriever: Retriever,
    strip: bool = False,
) -> list[SubgraphContext]:
    """Contexts for each query; ``strip`` removes each query's own gold edge (training)."""
    out = []
    for q in queries:
        ctx = retriever(kg, q)
        if strip and q.gold_target is not None:
            ctx = strip_query_edge(ctx, q.triple, kg.num_original_relations)
        out.append(ctx)
    return out
