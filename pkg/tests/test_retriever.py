import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kgread.kg import Query, Triple
from kgread.retriever import (
    ChainError,
    RelationPathScorer,
    Retriever,
    beam_search_paths,
    context_record,
    context_from_record,
    coverage_stats,
    make_context,
    read_contexts,
    read_path_file,
    retrieve_all,
    retrieve_bfs,
    retrieve_one_hop,
    retrieve_path_union,
    strip_query_edge,
    write_contexts,
)
from kgread.synth import SynthConfig, generate_compositional

from conftest import A, B, C, D, E, F, R1, R2, R3


def test_bfs_desk_budget_3(desk):
    ctx = retrieve_bfs(desk.graph, Query(A, R1), 3, traverse_inverse=False)
    assert ctx.edges == ((A, R1, B), (A, R1, D), (A, R3, F))
    assert ctx.nodes == (A, B, D, F)
    assert ctx.terminals == [B, D, F]


def test_bfs_budget_zero_keeps_source(desk):
    ctx = retrieve_bfs(desk.graph, Query(A, R1), 0)
    assert ctx.edges == ()
    assert ctx.nodes == (A,)
    assert ctx.terminal_flags == (False,)


def test_bfs_second_layer_order(desk):
    # layer 1 from a, then b's edges (r2 c, r3 e), then d's (r2 e)
    ctx = retrieve_bfs(desk.graph, Query(A, R1), 6, traverse_inverse=False)
    assert ctx.edges[3:] == ((B, R2, C), (B, R3, E), (D, R2, E))
    assert set(ctx.terminals) == {C, E, F}


def test_bfs_skips_inverse_of_collected_edge(desk):
    ctx = retrieve_bfs(desk.graph, Query(B, R2), 20)
    facts = {tuple(sorted([(h, r % 3, t), (t, r % 3, h)]))[0] for h, r, t in ctx.edges}
    assert len(facts) == len(ctx.edges)


def test_one_hop_full_neighbourhood(desk):
    ctx = retrieve_one_hop(desk.graph, Query(C, R1), 10, seed=3)
    assert ctx.edges == tuple(Triple(C, r, t) for r, t in desk.graph.out_adjacency(C))
    assert all(ctx.terminal_flags[1:])


def test_one_hop_seeded_sample_is_reproducible(desk):
    q = Query(C, R1)
    first = retrieve_one_hop(desk.graph, q, 2, seed=11)
    again = retrieve_one_hop(desk.graph, q, 2, seed=11)
    assert len(first.edges) == 2
    assert first == again
    assert set(first.edges) <= set(desk.graph.triples)


def test_path_union_two_disjoint_paths():
    q = Query(A, R1)
    paths = [[(A, R1, B), (B, R2, C)], [(A, R1, D)]]
    ctx = retrieve_path_union(q, paths, 10)
    assert len(ctx.edges) == 3
    assert set(ctx.terminals) == {C, D}


def test_path_union_is_idempotent():
    q = Query(A, R1)
    p = [(A, R1, B), (B, R2, C)]
    once = retrieve_path_union(q, [p], 10)
    twice = retrieve_path_union(q, [p, p], 10)
    assert once.edges == twice.edges
    assert once.terminal_flags == twice.terminal_flags


def test_path_union_truncation_drops_incomplete_terminals():
    q = Query(A, R1)
    ctx = retrieve_path_union(q, [[(A, R1, B), (B, R2, C)], [(A, R1, D)]], 2)
    assert ctx.edges == ((A, R1, B), (B, R2, C))
    assert ctx.terminals == [C]


def test_path_union_rejects_broken_chain():
    with pytest.raises(ChainError, match="path 1 step 1"):
        retrieve_path_union(Query(A, R1), [[(A, R1, B)], [(A, R1, B), (D, R2, E)]], 5)


def test_beam_search_uniform_index_tiebreak(desk):
    paths = beam_search_paths(desk.graph, Query(A, R1), beam_width=2, max_hops=1)
    assert paths == [((A, R1, B),), ((A, R1, D),)]


def test_beam_search_follows_scorer(desk):
    def prefer_r3(query, path, edge):
        return 1.0 if edge.relation == R3 else 0.0

    paths = beam_search_paths(desk.graph, Query(A, R1), beam_width=1, max_hops=1, scorer=prefer_r3)
    assert paths == [((A, R3, F),)]
    paths = beam_search_paths(desk.graph, Query(A, R1), beam_width=1, max_hops=2, scorer=prefer_r3)
    assert paths[0][0] == (A, R3, F)


def test_beam_search_preconditions(desk):
    with pytest.raises(ValueError):
        beam_search_paths(desk.graph, Query(A, R1), beam_width=2, max_hops=0)
    with pytest.raises(ValueError):
        beam_search_paths(desk.graph, Query(A, R1), beam_width=0, max_hops=1)


def test_beam_paths_chain_from_source(desk):
    for src in range(6):
        for path in beam_search_paths(desk.graph, Query(src, R1), beam_width=4, max_hops=3):
            assert path[0].head == src
            for a, b in zip(path, path[1:]):
                assert a.tail == b.head


def test_strip_query_edge(desk):
    ctx = retrieve_bfs(desk.graph, Query(A, R1, B), 3)
    stripped = strip_query_edge(ctx, Triple(A, R1, B), 3)
    assert len(stripped.edges) == len(ctx.edges) - 1
    assert (A, R1, B) not in stripped.edges
    assert B not in stripped.nodes


def test_strip_is_identity_without_query_edge(desk):
    ctx = retrieve_bfs(desk.graph, Query(A, R1, C), 3)
    assert strip_query_edge(ctx, Triple(A, R1, C), 3) is ctx


def test_strip_removes_inverse_form():
    q = Query(A, R1, B)
    ctx = make_context(q, [(A, R2, C), (C, R3, B)], [B], "x")
    inv_only = make_context(q, [(A, R2, C), (B, R1 + 3, A)], [], "x")
    assert strip_query_edge(ctx, q.triple, 3) is ctx
    out = strip_query_edge(inv_only, q.triple, 3)
    assert out.edges == ((A, R2, C),)


def test_coverage_stats():
    qs = [Query(A, R1, B), Query(A, R1, C), Query(B, R2, C), Query(D, R2, E)]
    ctxs = [
        make_context(qs[0], [(A, R1, B)], [], "x"),
        make_context(qs[1], [(A, R1, B)], [], "x"),
        make_context(qs[2], [(B, R2, C)], [], "x"),
        make_context(qs[3], [], [], "x"),
    ]
    assert coverage_stats(ctxs, qs) == 0.5
    with pytest.raises(ValueError):
        coverage_stats([ctxs[0]], [Query(A, R1)])


def _all_retrievers(kg, seed):
    scorer = RelationPathScorer.fit(kg)
    return [
        Retriever("bfs", budget=5),
        Retriever("bfs", budget=5, traverse_inverse=False),
        Retriever("onehop", budget=3, seed=seed),
        Retriever("beam", budget=4, beam_width=3, max_hops=2, scorer=scorer),
        Retriever("beam", budget=7, beam_width=5, max_hops=3),
    ]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**16))
def test_retrieval_laws(seed):
    data = generate_compositional(SynthConfig(entities=20, seed=seed % 7))
    kg = data.graph
    rng = np.random.default_rng(seed)
    q = Query(int(rng.integers(kg.num_entities)), int(rng.integers(kg.num_relations)))
    for retriever in _all_retrievers(kg, seed):
        ctx = retriever(kg, q)
        assert len(ctx.edges) <= retriever.budget
        assert ctx.nodes[0] == q.source
        assert all(kg.has_edge(e) for e in ctx.edges)
        assert {v for e in ctx.edges for v in (e.head, e.tail)} <= set(ctx.nodes)
        assert ctx == retriever(kg, q)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**16))
def test_strip_never_removes_other_edges(seed):
    data = generate_compositional(SynthConfig(entities=20, seed=seed % 5))
    kg = data.graph
    rng = np.random.default_rng(seed)
    tr = kg.triples[int(rng.integers(len(kg.triples)))]
    ctx = retrieve_bfs(kg, Query(tr.head, tr.relation, tr.tail), 15)
    out = strip_query_edge(ctx, tr, kg.num_original_relations)
    removed = set(ctx.edges) - set(out.edges)
    assert removed <= {tr, kg.inverse(tr)}
    assert [e for e in ctx.edges if e not in removed] == list(out.edges)


def test_relation_path_scorer_prefers_composition():
    data = generate_compositional(SynthConfig(entities=60, seed=0))
    kg = data.graph
    scorer = RelationPathScorer.fit(kg)
    goal = data.vocab.relation("goal")
    r1, r2 = data.vocab.relation("r1"), data.vocab.relation("r2")
    q = Query(0, goal)
    step1 = Triple(0, r1, 1)
    assert scorer(q, (), step1) > scorer(q, (), Triple(0, data.vocab.relation("n1"), 1))
    assert scorer(q, (step1,), Triple(1, r2, 2)) > scorer(q, (step1,), Triple(1, r1, 2))


def test_context_file_round_trip(tmp_path, desk):
    qs = desk.queries("train")
    ctxs = retrieve_all(desk.graph, qs, Retriever("beam", budget=4, beam_width=2), strip=True)
    path = tmp_path / "ctx.jsonl"
    write_contexts(path, ctxs)
    again = read_contexts(path)
    assert again == ctxs
    assert [c.paths for c in again] == [c.paths for c in ctxs]
    assert context_from_record(context_record(ctxs[0])) == ctxs[0]


def test_path_file_strategy(tmp_path, desk):
    path = tmp_path / "paths.jsonl"
    path.write_text(
        '{"query": [0, 0], "paths": [[[0, 0, 1], [1, 1, 2]], [[0, 2, 5]]], "edges": [], "terminals": [], "strategy": "x"}\n'
    )
    table = read_path_file(path)
    ctx = Retriever("paths", budget=10, path_table=table)(desk.graph, Query(A, R1))
    assert ctx.edges == ((A, R1, B), (B, R2, C), (A, R3, F))
    assert set(ctx.terminals) == {C, F}
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"query": [0, 0], "paths": [[[0, 0, 1], [3, 1, 2]]]}\n')
    with pytest.raises(ChainError):
        read_path_file(bad)
