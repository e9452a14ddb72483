"""The desk fixture KG and a seeded generator of compositional synthetic KGs."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .kg import Triple, Vocabulary, augment_inverses, build_graph, Dataset, write_triples

DESK_TRIPLES = [
    ("a", "r1", "b"),
    ("b", "r2", "c"),
    ("a", "r1", "d"),
    ("d", "r2", "e"),
    ("e", "r3", "c"),
    ("a", "r3", "f"),
    ("f", "r1", "c"),
    ("b", "r3", "e"),
]


def _dataset(vocab: Vocabulary, train, valid, test) -> Dataset:
    n = vocab.num_relations
    vocab.add_inverses()
    graph = build_graph(augment_inverses(train, n), train + valid + test, vocab.num_entities, vocab.num_relations, vocab)
    return Dataset(vocab, train, valid, test, graph)


def desk_kg() -> Dataset:
    """The 6-entity, 3-relation, 8-triple fixture (all triples in train)."""
    vocab = Vocabulary()
    train = [Triple(vocab.entity(h), vocab.relation(r), vocab.entity(t)) for h, r, t in DESK_TRIPLES]
    return _dataset(vocab, train, [], [])


@dataclass
class SynthConfig:
    entities: int = 60
    seed: int = 0
    noise_relations: int = 3
    noise_edges_per_entity: float = 1.5
    goal_train_fraction: float = 0.6
    goal_valid_fraction: float = 0.0
    rules: int = 1  # independent composition rules over the same entities


def rule_relations(k: int) -> tuple[str, str, str]:
    """Relation names of rule ``k``: ``(r1, r2, goal)``, then ``(r3, r4, goal2)``, ..."""
    if k == 0:
        return "r1", "r2", "goal"
    return f"r{2 * k + 1}", f"r{2 * k + 2}", f"goal{k + 1}"


def generate_compositional(cfg: SynthConfig) -> Dataset:
    """A KG governed by ``r1(x, y) and r2(y, z) => goal(x, z)``.

    ``r1`` and ``r2`` are functional, so each goal fact follows from exactly one
    ``r1``-then-``r2`` chain. With ``rules > 1`` further independent rules
    (``r3, r4 => goal2`` and so on) are layered over the same entities. A
    fraction of goal facts is kept in train; the rest forms valid/test. Noise
    relations add random distractor edges. Train lines are shuffled so file
    (and adjacency) order carries no signal.
    """
    rng = np.random.default_rng(cfg.seed)
    n = cfg.entities
    if n < 4:
        raise ValueError("need at least 4 entities")
    if cfg.rules < 1:
        raise ValueError("need at least one rule")
    names = [f"e{i:0{len(str(n - 1))}d}" for i in range(n)]
    base, goal = [], []
    for k in range(cfg.rules):
        n1, n2, ng = rule_relations(k)
        r1 = np.array([rng.choice([j for j in range(n) if j != i]) for i in range(n)])
        r2 = np.array([rng.choice([j for j in range(n) if j != i]) for i in range(n)])
        base += [(i, n1, int(r1[i])) for i in range(n)] + [(i, n2, int(r2[i])) for i in range(n)]
        goal += [(i, ng, int(r2[r1[i]])) for i in range(n) if r2[r1[i]] != i]
    seen = {(h, t) for h, _, t in base}
    noise = []
    for _ in range(int(round(cfg.noise_edges_per_entity * n))):
        h, t = rng.choice(n, size=2, replace=False)
        if (h, t) in seen:
            continue
        seen.add((int(h), int(t)))
        noise.append((int(h), f"n{rng.integers(cfg.noise_relations) + 1}", int(t)))
    order = rng.permutation(len(goal))
    n_train = int(round(cfg.goal_train_fraction * len(goal)))
    n_valid = int(round(cfg.goal_valid_fraction * len(goal)))
    goal_train = [goal[i] for i in order[:n_train]]
    goal_valid = [goal[i] for i in order[n_train:n_train + n_valid]]
    goal_test = [goal[i] for i in order[n_train + n_valid:]]
    train = base + noise + goal_train
    train = [train[i] for i in rng.permutation(len(train))]

    relations = [name for k in range(cfg.rules) for name in rule_relations(k)]
    vocab = Vocabulary(list(names), relations + [f"n{k + 1}" for k in range(cfg.noise_relations)])

    def index(rows):
        return [Triple(h, vocab.relation(r), t) for h, r, t in rows]

    return _dataset(vocab, index(train), index(goal_valid), index(goal_test))


def write_dataset(data: Dataset, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for split in ("train", "valid", "test"):
        write_triples(directory / f"{split}.txt", data.split(split), data.vocab)
