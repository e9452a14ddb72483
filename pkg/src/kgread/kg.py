"""Triple files, vocabularies, inverse-relation augmentation and the indexed graph."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, NamedTuple

INVERSE_SUFFIX = "_inv"


class ParseError(ValueError):
    pass


class VocabularyError(KeyError):
    def __str__(self) -> str:  # KeyError quotes its message otherwise
        return str(self.args[0]) if self.args else ""


class GraphError(ValueError):
    pass


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


class Query(NamedTuple):
    """A tail-side link-prediction query ``(source, relation, ?)``.

    Head-side queries ``(?, r, t)`` are stored as ``(t, r_inv, ?)``.
    """

    source: int
    relation: int
    gold_target: int | None = None

    @property
    def triple(self) -> Triple:
        if self.gold_target is None:
            raise ValueError("query has no gold target")
        return Triple(self.source, self.relation, self.gold_target)


@dataclass
class Vocabulary:
    entity_names: list[str] = field(default_factory=list)
    relation_names: list[str] = field(default_factory=list)
    frozen: bool = False
    num_original_relations: int | None = None

    def __post_init__(self):
        self._entity_index = {n: i for i, n in enumerate(self.entity_names)}
        self._relation_index = {n: i for i, n in enumerate(self.relation_names)}

    @property
    def num_entities(self) -> int:
        return len(self.entity_names)

    @property
    def num_relations(self) -> int:
        return len(self.relation_names)

    @property
    def augmented(self) -> bool:
        return self.num_original_relations is not None

    def entity(self, name: str) -> int:
        idx = self._entity_index.get(name)
        if idx is None:
            if self.frozen:
                raise VocabularyError(f"unknown entity {name!r} (vocabulary is frozen)")
            idx = len(self.entity_names)
            self.entity_names.append(name)
            self._entity_index[name] = idx
        return idx

    def relation(self, name: str) -> int:
        idx = self._relation_index.get(name)
        if idx is None:
            if self.frozen or self.augmented:
                raise VocabularyError(f"unknown relation {name!r} (vocabulary is frozen)")
            idx = len(self.relation_names)
            self.relation_names.append(name)
            self._relation_index[name] = idx
        return idx

    def inverse(self, relation: int) -> int:
        n = self.num_original_relations
        if n is None:
            raise GraphError("vocabulary has no inverse relations yet")
        return relation + n if relation < n else relation - n

    def add_inverses(self) -> None:
        """Append ``r_inv`` for every original relation and freeze the vocabulary."""
        if self.augmented:
            raise GraphError("inverse relations already added")
        originals = list(self.relation_names)
        self.num_original_relations = len(originals)
        for name in originals:
            inv = name + INVERSE_SUFFIX
            self._relation_index[inv] = len(self.relation_names)
            self.relation_names.append(inv)
        self.frozen = True

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "entities.txt").write_text("".join(n + "\n" for n in self.entity_names), encoding="utf-8")
        originals = self.relation_names[: self.num_original_relations]
        (directory / "relations.txt").write_text("".join(n + "\n" for n in originals), encoding="utf-8")

    @classmethod
    def load(cls, directory: str | Path) -> "Vocabulary":
        """Reload a saved vocabulary; relations come back augmented and frozen."""
        directory = Path(directory)
        entities = _read_names(directory / "entities.txt")
        relations = _read_names(directory / "relations.txt")
        vocab = cls(entities, relations)
        vocab.add_inverses()
        return vocab


def _read_names(path: Path) -> list[str]:
    text = path.read_text(encoding="utf-8")
    return text.split("\n")[:-1] if text else []


def load_triples(path: str | Path, vocab: Vocabulary | None = None) -> tuple[list[Triple], Vocabulary]:
    """Parse a tab-separated triple file, extending ``vocab`` in first-seen order.

    With a frozen vocabulary, names it does not know raise ``VocabularyError``.
    """
    vocab = Vocabulary() if vocab is None else vocab
    triples: list[Triple] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            fields = line.split("\t")
            if len(fields) != 3:
                raise ParseError(f"{path}:{lineno}: expected 3 tab-separated fields, got {len(fields)}")
            h, r, t = fields
            try:
                triples.append(Triple(vocab.entity(h), vocab.relation(r), vocab.entity(t)))
            except VocabularyError as exc:
                raise VocabularyError(f"{path}:{lineno}: {exc}") from None
    return triples, vocab


def write_triples(path: str | Path, triples: Iterable[Triple], vocab: Vocabulary) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for h, r, t in triples:
            fh.write(f"{vocab.entity_names[h]}\t{vocab.relation_names[r]}\t{vocab.entity_names[t]}\n")


def augment_inverses(triples: list[Triple], num_relations: int) -> list[Triple]:
    """Originals followed by ``(t, r + num_relations, h)`` for each ``(h, r, t)``."""
    return list(triples) + [Triple(t, r + num_relations, h) for h, r, t in triples]


def invert(triple: Triple, num_relations: int) -> Triple:
    """Inverse form of an augmented triple (``num_relations`` counts originals only)."""
    h, r, t = triple
    return Triple(t, r + num_relations if r < num_relations else r - num_relations, h)


class KnowledgeGraph:
    """Read-only triple store with per-entity outgoing adjacency over augmented relations."""

    def __init__(
        self,
        triples: list[Triple],
        facts: Iterable[Triple],
        num_entities: int,
        num_relations: int,
        vocab: Vocabulary | None = None,
    ):
        # num_relations counts the augmented set (originals + inverses)
        if num_relations % 2:
            raise GraphError("augmented relation count must be even")
        self.num_entities = num_entities
        self.num_relations = num_relations
        self.num_original_relations = num_relations // 2
        self.vocab = vocab
        for tr in triples:
            self._check(tr)
        self.triples: tuple[Triple, ...] = tuple(triples)
        adjacency: list[list[tuple[int, int]]] = [[] for _ in range(num_entities)]
        for h, r, t in self.triples:
            adjacency[h].append((r, t))
        self._adjacency = tuple(tuple(a) for a in adjacency)
        self._triple_set = frozenset(self.triples)
        answers: dict[tuple[int, int], set[int]] = defaultdict(set)
        for tr in facts:
            self._check(tr)
            for h, r, t in (tr, self.inverse(tr)):
                answers[(h, r)].add(t)
        for h, r, t in self.triples:
            answers[(h, r)].add(t)
        self._answers = {k: frozenset(v) for k, v in answers.items()}

    def _check(self, tr: Triple) -> None:
        h, r, t = tr
        if not (0 <= h < self.num_entities and 0 <= t < self.num_entities):
            raise GraphError(f"entity index out of range in {tuple(tr)}")
        if not 0 <= r < self.num_relations:
            raise GraphError(f"relation index out of range in {tuple(tr)}")

    def out_adjacency(self, entity: int) -> tuple[tuple[int, int], ...]:
        return self._adjacency[entity]

    def degree(self, entity: int) -> int:
        return len(self._adjacency[entity])

    def inverse_relation(self, relation: int) -> int:
        n = self.num_original_relations
        return relation + n if relation < n else relation - n

    def is_inverse(self, relation: int) -> bool:
        return relation >= self.num_original_relations

    def inverse(self, tr: Triple) -> Triple:
        return invert(tr, self.num_original_relations)

    def has_edge(self, tr: Triple) -> bool:
        return tuple(tr) in self._triple_set

    def is_fact(self, tr: Triple) -> bool:
        h, r, t = tr
        return t in self._answers.get((h, r), ())

    def known_answers(self, source: int, relation: int) -> frozenset[int]:
        """All tails ``t`` with ``(source, relation, t)`` in any split (inverses included)."""
        return self._answers.get((source, relation), frozenset())


def build_graph(
    augmented: list[Triple],
    all_facts: Iterable[Triple],
    num_entities: int,
    num_relations: int,
    vocab: Vocabulary | None = None,
) -> KnowledgeGraph:
    return KnowledgeGraph(augmented, all_facts, num_entities, num_relations, vocab)


@dataclass
class Dataset:
    """Train/valid/test triples over one frozen, inverse-augmented vocabulary."""

    vocab: Vocabulary
    train: list[Triple]
    valid: list[Triple]
    test: list[Triple]
    graph: KnowledgeGraph

    def split(self, name: str) -> list[Triple]:
        try:
            return {"train": self.train, "valid": self.valid, "test": self.test}[name]
        except KeyError:
            raise ValueError(f"unknown split {name!r}") from None

    def queries(self, split: str) -> list[Query]:
        """Both query directions for every triple of ``split``: tails first, then heads."""
        triples = self.split(split)
        n = self.vocab.num_original_relations
        return [Query(h, r, t) for h, r, t in triples] + [Query(t, r + n, h) for h, r, t in triples]


def load_dataset(directory: str | Path) -> Dataset:
    """Load ``train.txt`` / ``valid.txt`` / ``test.txt``; the vocabulary freezes after train."""
    directory = Path(directory)
    train, vocab = load_triples(directory / "train.txt")
    vocab.frozen = True
    splits = {}
    for name in ("valid", "test"):
        path = directory / f"{name}.txt"
        splits[name] = load_triples(path, vocab)[0] if path.exists() else []
    n = vocab.num_relations
    vocab.add_inverses()
    graph = build_graph(
        augment_inverses(train, n),
        train + splits["valid"] + splits["test"],
        vocab.num_entities,
        vocab.num_relations,
        vocab,
    )
    return Dataset(vocab, train, splits["valid"], splits["test"], graph)
