import numpy as np
import pytest

from kgread.kg import Query, Triple
from kgread.model import ModelConfig, init_params
from kgread.retriever import make_context
from kgread.synth import desk_kg

# desk fixture indices: entities a..f -> 0..5, relations r1, r2, r3 -> 0, 1, 2 (inverses 3, 4, 5)
A, B, C, D, E, F = range(6)
R1, R2, R3 = range(3)


@pytest.fixture
def desk():
    return desk_kg()


@pytest.fixture
def tiny_cfg():
    return ModelConfig(num_entities=6, num_relations=6, layers=1, heads=2, dim=8, ffn_dim=16)


def random_context(rng, kg, max_edges=12, query=None):
    """A random context of augmented desk edges, source first."""
    if query is None:
        query = Query(int(rng.integers(kg.num_entities)), int(rng.integers(kg.num_relations)),
                      int(rng.integers(kg.num_entities)))
    k = int(rng.integers(0, max_edges + 1))
    pool = list(kg.triples)
    edges = [pool[i] for i in rng.choice(len(pool), size=min(k, len(pool)), replace=False)]
    nodes = {query.source} | {h for h, _, _ in edges} | {t for _, _, t in edges}
    terminals = [v for v in nodes if rng.random() < 0.4]
    return make_context(query, edges, terminals, "random")


def random_params(cfg, seed, dtype=np.float64, scale=0.5):
    """Params with non-trivial tables and norm parameters (gains/biases away from 1/0)."""
    params = init_params(cfg, seed=seed, dtype=dtype)
    rng = np.random.default_rng(seed + 1000)
    for name, arr in params.items():
        if name.endswith((".gain",)):
            arr[...] = 1.0 + 0.3 * rng.standard_normal(arr.shape)
        elif name.endswith((".bias", ".b1", ".b2")) or "table" in name or name.endswith("vector"):
            arr[...] = scale * rng.standard_normal(arr.shape)
    return params


def pytest_terminal_summary(terminalreporter):
    """Print the acceptance report (one line per criterion) when that suite ran."""
    import sys

    module = sys.modules.get("test_acceptance")
    if module is None or not module.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in module.RESULTS:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
