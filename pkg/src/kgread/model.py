"""Two-tower Transformer reader over a query and its retrieved subgraph.

The subgraph tower self-attends under a graph-induced mask: node tokens see
each other, edge tokens see each other, each edge token sees its head and tail
node, and every token sees itself. The query tower encodes ``[CLS] source
relation`` with full attention. Cross-attention layers let the query states
read the final subgraph states; the fused ``[CLS]`` row is concatenated with
the source node's subgraph state, projected to ``d`` and scored against the
entity table.

Sublayers are post-norm: ``x = LN(x + Attn(x)); x = LN(x + FFN(x))``.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, fields
from typing import Iterator, Mapping, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .kg import Query, Triple
from .retriever import SubgraphContext

ENTITY, RELATION = 0, 1
OTHER, TERMINAL = 0, 1
MASK_ID = -1


@dataclass
class ModelConfig:
    num_entities: int = 0
    num_relations: int = 0  # augmented count: originals + inverses
    layers: int = 3
    heads: int = 8
    dim: int = 320
    ffn_dim: int = 1280
    dropout: float = 0.0
    init_std: float = 0.02
    no_cross_attention: bool = False
    full_attention: bool = False
    no_subgraph_repr: bool = False
    no_query_repr: bool = False

    ABLATIONS = ("no_cross_attention", "full_attention", "no_subgraph_repr", "no_query_repr")

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} is not divisible by heads {self.heads}")
        if self.no_subgraph_repr and self.no_query_repr:
            raise ValueError("no_subgraph_repr and no_query_repr cannot both be set")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise KeyError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**values)


# ---------------------------------------------------------------------------
# tokens and mask


@dataclass(frozen=True)
class TokenSequence:
    """Node tokens (``ids`` are entity indices, ``MASK_ID`` for ``<MASK>``) then edge tokens."""

    ids: np.ndarray
    kind: np.ndarray
    segment: np.ndarray
    m: int
    n: int
    edge_heads: np.ndarray  # node position of each edge's head
    edge_tails: np.ndarray

    def __len__(self) -> int:
        return self.m + self.n


def build_tokens(ctx: SubgraphContext, attach_query_edge: bool = False) -> TokenSequence:
    """Tokenize a context; ``attach_query_edge`` adds ``(source, r, <MASK>)``."""
    nodes = list(ctx.nodes)
    flags = list(ctx.terminal_flags)
    edges = list(ctx.edges)
    pos = {v: i for i, v in enumerate(nodes)}
    heads = [pos[h] for h, _, _ in edges]
    tails = [pos[t] for _, _, t in edges]
    rels = [r for _, r, _ in edges]
    if attach_query_edge:
        nodes.append(MASK_ID)
        flags.append(False)
        heads.append(0)
        tails.append(len(nodes) - 1)
        rels.append(ctx.query.relation)
    m, n = len(nodes), len(rels)
    return TokenSequence(
        ids=np.asarray(nodes + rels, dtype=np.int64),
        kind=np.asarray([ENTITY] * m + [RELATION] * n, dtype=np.int64),
        segment=np.asarray([TERMINAL if f else OTHER for f in flags] + [OTHER] * n, dtype=np.int64),
        m=m,
        n=n,
        edge_heads=np.asarray(heads, dtype=np.int64),
        edge_tails=np.asarray(tails, dtype=np.int64),
    )


def build_attention_mask(seq: TokenSequence, full_attention: bool = False) -> np.ndarray:
    size = len(seq)
    if full_attention:
        return np.ones((size, size), dtype=bool)
    allow = np.zeros((size, size), dtype=bool)
    m = seq.m
    allow[:m, :m] = True
    allow[m:, m:] = True
    edge_pos = np.arange(m, size)
    for endpoints in (seq.edge_heads, seq.edge_tails):
        allow[endpoints, edge_pos] = True
        allow[edge_pos, endpoints] = True
    return allow


# ---------------------------------------------------------------------------
# parameters


def _stack_names(prefix: str, cross: bool = False) -> list[str]:
    names = [f"{prefix}.attn.{p}" for p in ("q", "k", "v", "o")]
    names += [f"{prefix}.ln1.gain", f"{prefix}.ln1.bias"]
    names += [f"{prefix}.ffn.w1", f"{prefix}.ffn.b1", f"{prefix}.ffn.w2", f"{prefix}.ffn.b2"]
    names += [f"{prefix}.ln2.gain", f"{prefix}.ln2.bias"]
    return names


class ModelParams:
    """All learned arrays, keyed by dotted names that mirror the architecture.

    Attention projections are stored per head as ``(heads, head_dim, dim)``;
    every other matrix is ``(out, in)`` and applied as ``x @ W.T``.
    """

    TOWERS = ("query", "subgraph", "cross")

    def __init__(self, arrays: Mapping[str, np.ndarray]):
        self.arrays: OrderedDict[str, np.ndarray] = OrderedDict(arrays)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    def __len__(self) -> int:
        return len(self.arrays)

    def items(self):
        return self.arrays.items()

    @property
    def dtype(self):
        return self.arrays["entity_table"].dtype

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.arrays.items()})

    def astype(self, dtype) -> "ModelParams":
        return ModelParams({k: v.astype(dtype) for k, v in self.arrays.items()})

    def tensors(self, requires_grad: bool = True) -> dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.arrays.items()}

    def count(self) -> int:
        return int(sum(v.size for v in self.arrays.values()))

    @staticmethod
    def expected_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
        d, a, dk, f = cfg.dim, cfg.heads, cfg.head_dim, cfg.ffn_dim
        shapes: dict[str, tuple[int, ...]] = {
            "entity_table": (cfg.num_entities, d),
            "relation_table": (cfg.num_relations, d),
            "type_table": (2, d),
            "segment_table": (2, d),
            "cls_vector": (d,),
            "mask_token_vector": (d,),
        }
        for tower in ModelParams.TOWERS:
            for layer in range(cfg.layers):
                prefix = f"{tower}.{layer}"
                for name in _stack_names(prefix):
                    leaf = name[len(prefix) + 1:]
                    shapes[name] = {
                        "attn.q": (a, dk, d), "attn.k": (a, dk, d), "attn.v": (a, dk, d),
                        "attn.o": (d, d),
                        "ln1.gain": (d,), "ln1.bias": (d,), "ln2.gain": (d,), "ln2.bias": (d,),
                        "ffn.w1": (f, d), "ffn.b1": (f,), "ffn.w2": (d, f), "ffn.b2": (d,),
                    }[leaf]
        shapes["head"] = (d, 2 * d)
        return shapes

    def check(self, cfg: ModelConfig) -> None:
        expected = self.expected_shapes(cfg)
        if set(expected) != set(self.arrays):
            missing = sorted(set(expected) - set(self.arrays))
            extra = sorted(set(self.arrays) - set(expected))
            raise ValueError(f"parameter names differ from config: missing={missing} extra={extra}")
        for name, shape in expected.items():
            if self.arrays[name].shape != shape:
                raise ValueError(f"{name}: shape {self.arrays[name].shape}, expected {shape}")
            if not np.isfinite(self.arrays[name]).all():
                raise FloatingPointError(f"{name} holds non-finite values")


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Gaussian init: tables at ``init_std``, matrices scaled by ``1/sqrt(fan_in)``."""
    rng = np.random.default_rng(seed)
    arrays: dict[str, np.ndarray] = {}
    for name, shape in ModelParams.expected_shapes(cfg).items():
        if name.endswith(".gain"):
            arr = np.ones(shape)
        elif name.endswith((".bias", ".b1", ".b2")):
            arr = np.zeros(shape)
        elif name in ("entity_table", "relation_table", "type_table", "segment_table",
                      "cls_vector", "mask_token_vector"):
            arr = rng.normal(0.0, cfg.init_std, shape)
        else:
            arr = rng.normal(0.0, 1.0 / math.sqrt(shape[-1]), shape)
        arrays[name] = arr.astype(dtype)
    return ModelParams(arrays)


# ---------------------------------------------------------------------------
# batching


@dataclass
class Batch:
    """Padded reader inputs for B examples; pads attend only to themselves."""

    source: np.ndarray
    relation: np.ndarray
    token_ids: np.ndarray  # rows of the stacked token table
    kind: np.ndarray
    segment: np.ndarray
    valid: np.ndarray
    allow: np.ndarray
    readout: np.ndarray  # subgraph position used as the context representation
    mask_pos: np.ndarray  # <MASK> node position (ablation), else 0
    gold: np.ndarray | None

    @property
    def size(self) -> int:
        return len(self.source)


def token_table_rows(cfg: ModelConfig) -> dict[str, int]:
    ne, nr = cfg.num_entities, cfg.num_relations
    return {"relation_offset": ne, "cls": ne + nr, "mask": ne + nr + 1, "pad": ne + nr + 2}


def make_batch(
    queries: Sequence[Query],
    contexts: Sequence[SubgraphContext],
    cfg: ModelConfig,
) -> Batch:
    rows = token_table_rows(cfg)
    seqs = [build_tokens(c, attach_query_edge=cfg.no_query_repr) for c in contexts]
    for q in queries:
        _check_query(q, cfg)
    b = len(seqs)
    t = max(len(s) for s in seqs) if seqs else 1
    token_ids = np.full((b, t), rows["pad"], dtype=np.int64)
    kind = np.zeros((b, t), dtype=np.int64)
    segment = np.zeros((b, t), dtype=np.int64)
    valid = np.zeros((b, t), dtype=bool)
    allow = np.zeros((b, t, t), dtype=bool)
    allow[:, np.arange(t), np.arange(t)] = True
    mask_pos = np.zeros(b, dtype=np.int64)
    for i, s in enumerate(seqs):
        size = len(s)
        ids = s.ids.copy()
        ent = s.kind == ENTITY
        if (ids[ent & (ids != MASK_ID)] >= cfg.num_entities).any() or (ids[~ent] >= cfg.num_relations).any():
            raise IndexError("token index out of range for the model vocabulary")
        ids[~ent] += rows["relation_offset"]
        ids[ids == MASK_ID] = rows["mask"]
        token_ids[i, :size] = ids
        kind[i, :size] = s.kind
        segment[i, :size] = s.segment
        valid[i, :size] = True
        allow[i, :size, :size] = build_attention_mask(s, cfg.full_attention)
        if cfg.no_query_repr:
            mask_pos[i] = s.m - 1
    gold = None
    if queries and all(q.gold_target is not None for q in queries):
        gold = np.asarray([q.gold_target for q in queries], dtype=np.int64)
    return Batch(
        source=np.asarray([q.source for q in queries], dtype=np.int64),
        relation=np.asarray([q.relation for q in queries], dtype=np.int64),
        token_ids=token_ids,
        kind=kind,
        segment=segment,
        valid=valid,
        allow=allow,
        readout=np.zeros(b, dtype=np.int64),
        mask_pos=mask_pos,
        gold=gold,
    )


def _check_query(q: Query, cfg: ModelConfig) -> None:
    if not 0 <= q.source < cfg.num_entities:
        raise IndexError(f"source {q.source} out of range")
    if not 0 <= q.relation < cfg.num_relations:
        raise IndexError(f"relation {q.relation} out of range")


# ---------------------------------------------------------------------------
# layers


def layer_params(P: Mapping[str, Tensor], prefix: str) -> dict[str, Tensor]:
    """The tensors of one layer, keyed by their name below ``prefix``."""
    cut = len(prefix) + 1
    return {k[cut:]: v for k, v in P.items() if k.startswith(prefix + ".")}


def _project(x: Tensor, w: Tensor) -> Tensor:
    """Apply per-head projections ``(A, dk, d)`` and split heads: ``(..., T, d) -> (..., A, T, dk)``."""
    a, dk, d = w.shape
    flat = ag.reshape(w, (a * dk, d))
    y = x @ flat.T
    lead = x.shape[:-2]
    y = ag.reshape(y, lead + (x.shape[-2], a, dk))
    nd = len(lead)
    return ag.transpose(y, tuple(range(nd)) + (nd + 1, nd, nd + 2))


def multi_head_attention(
    x_q: Tensor,
    x_kv: Tensor,
    allow: np.ndarray | None,
    lp: Mapping[str, Tensor],
) -> tuple[Tensor, Tensor]:
    """Returns ``(O · concat_k(sum_j w_ij^k V^k x_j), w)`` with ``w`` of shape ``(..., A, Tq, Tk)``."""
    a, dk, d = lp["attn.q"].shape
    q = _project(x_q, lp["attn.q"])
    k = _project(x_kv, lp["attn.k"])
    v = _project(x_kv, lp["attn.v"])
    scores = (q @ k.T) * (1.0 / math.sqrt(dk))
    if allow is None:
        allow = np.ones(scores.shape, dtype=bool)
    else:
        allow = np.expand_dims(allow, -3)
    w = ag.masked_softmax(scores, allow)
    h = w @ v
    nd = h.data.ndim - 3
    h = ag.transpose(h, tuple(range(nd)) + (nd + 1, nd, nd + 2))
    h = ag.reshape(h, h.shape[:-2] + (a * dk,))
    return h @ lp["attn.o"].T, w


def _sublayers(x: Tensor, attn: Tensor, lp: Mapping[str, Tensor], dropout: float, rng) -> Tensor:
    x = ag.layer_norm(x + ag.dropout(attn, dropout, rng), lp["ln1.gain"], lp["ln1.bias"])
    f = ag.gelu(x @ lp["ffn.w1"].T + lp["ffn.b1"]) @ lp["ffn.w2"].T + lp["ffn.b2"]
    return ag.layer_norm(x + ag.dropout(f, dropout, rng), lp["ln2.gain"], lp["ln2.bias"])


def masked_self_attention_layer(
    h: Tensor,
    mask: np.ndarray,
    lp: Mapping[str, Tensor],
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """One encoder layer whose token ``i`` attends only to ``j`` with ``mask[i, j]``."""
    mask = np.asarray(mask, dtype=bool)
    if mask.shape[-1] != mask.shape[-2] or mask.shape[-1] != h.shape[-2]:
        raise ag.ShapeError(f"mask {mask.shape} does not match sequence length {h.shape[-2]}")
    if not np.isfinite(h.data).all():
        raise FloatingPointError("non-finite hidden states")
    attn, _ = multi_head_attention(h, h, mask, lp)
    return _sublayers(h, attn, lp, dropout, rng)


def cross_attention_layer(
    query_states: Tensor,
    subgraph_states: Tensor,
    lp: Mapping[str, Tensor],
    key_mask: np.ndarray | None = None,
    dropout: float = 0.0,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Query rows attend over every subgraph row; ``key_mask`` only hides padding."""
    if query_states.shape[-1] != subgraph_states.shape[-1]:
        raise ag.ShapeError("query and subgraph widths differ")
    allow = None
    if key_mask is not None:
        key_mask = np.asarray(key_mask, dtype=bool)
        allow = np.broadcast_to(
            key_mask[..., None, :], key_mask.shape[:-1] + (query_states.shape[-2], key_mask.shape[-1])
        )
    attn, _ = multi_head_attention(query_states, subgraph_states, allow, lp)
    return _sublayers(query_states, attn, lp, dropout, rng)


# ---------------------------------------------------------------------------
# embeddings and head


def _token_table(P: Mapping[str, Tensor]) -> Tensor:
    d = P["cls_vector"].shape[0]
    zero = Tensor(np.zeros((1, d), dtype=P["cls_vector"].dtype))
    return ag.concat(
        [
            P["entity_table"],
            P["relation_table"],
            ag.reshape(P["cls_vector"], (1, d)),
            ag.reshape(P["mask_token_vector"], (1, d)),
            zero,
        ],
        axis=0,
    )


def embed_tokens(table: Tensor, ids, kind, segment, P: Mapping[str, Tensor]) -> Tensor:
    """Lookup + token-type + segment embedding; no positional term."""
    return ag.gather(table, ids) + ag.gather(P["type_table"], kind) + ag.gather(P["segment_table"], segment)


def embed_subgraph(seq: TokenSequence, P: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    """``(m + n, d)`` input rows for one token sequence."""
    rows = token_table_rows(cfg)
    ids = seq.ids.copy()
    ent = seq.kind == ENTITY
    ids[~ent] += rows["relation_offset"]
    ids[ids == MASK_ID] = rows["mask"]
    return embed_tokens(_token_table(P), ids, seq.kind, seq.segment, P)


def _query_inputs(source: np.ndarray, relation: np.ndarray, cfg: ModelConfig):
    rows = token_table_rows(cfg)
    b = len(source)
    ids = np.stack([np.full(b, rows["cls"]), source, relation + rows["relation_offset"]], axis=1)
    kind = np.tile(np.array([ENTITY, ENTITY, RELATION]), (b, 1))
    return ids, kind, np.zeros_like(kind)


def embed_query(query: Query, P: Mapping[str, Tensor], cfg: ModelConfig) -> Tensor:
    """``(3, d)`` rows for ``[CLS]``, the source entity and the query relation."""
    _check_query(query, cfg)
    ids, kind, seg = _query_inputs(np.array([query.source]), np.array([query.relation]), cfg)
    return embed_tokens(_token_table(P), ids[0], kind[0], seg[0], P)


def score_entities(fused_query_repr: Tensor, source_ctx_repr: Tensor, P: Mapping[str, Tensor]) -> Tensor:
    """``entity_table · (W_head · [fused ; source_ctx])`` for each row."""
    if fused_query_repr.shape != source_ctx_repr.shape:
        raise ag.ShapeError("representations must have the same shape")
    if fused_query_repr.shape[-1] * 2 != P["head"].shape[1]:
        raise ag.ShapeError("representation width does not match the head projection")
    if fused_query_repr.data.ndim == 1:
        d = fused_query_repr.shape[0]
        single = score_entities(ag.reshape(fused_query_repr, (1, d)), ag.reshape(source_ctx_repr, (1, d)), P)
        return ag.reshape(single, (single.shape[-1],))
    feature = ag.concat([fused_query_repr, source_ctx_repr], axis=-1) @ P["head"].T
    return feature @ P["entity_table"].T


# ---------------------------------------------------------------------------
# forward


@dataclass
class ReaderOutput:
    logits: np.ndarray
    fused_query_repr: np.ndarray
    source_ctx_repr: np.ndarray


@dataclass
class BatchOutput:
    logits: Tensor
    fused_query_repr: Tensor
    source_ctx_repr: Tensor


def forward_batch(
    batch: Batch,
    P: Mapping[str, Tensor],
    cfg: ModelConfig,
    rng: np.random.Generator | None = None,
) -> BatchOutput:
    table = _token_table(P)
    b = batch.size
    rows = np.arange(b)
    drop = cfg.dropout if rng is not None else 0.0

    q_states = None
    if not cfg.no_query_repr:
        ids, kind, seg = _query_inputs(batch.source, batch.relation, cfg)
        q_states = embed_tokens(table, ids, kind, seg, P)
        for layer in range(cfg.layers):
            q_states = masked_self_attention_layer(
                q_states, np.ones((3, 3), dtype=bool), layer_params(P, f"query.{layer}"), drop, rng
            )

    if cfg.no_subgraph_repr:
        cls = q_states[:, 0, :]
        zero = Tensor(np.zeros(cls.shape, dtype=cls.dtype))
        return BatchOutput(score_entities(cls, zero, P), cls, zero)

    s_states = embed_tokens(table, batch.token_ids, batch.kind, batch.segment, P)
    for layer in range(cfg.layers):
        s_states = masked_self_attention_layer(
            s_states, batch.allow, layer_params(P, f"subgraph.{layer}"), drop, rng
        )
    source_ctx = s_states[rows, batch.readout, :]

    if cfg.no_query_repr:
        fused = s_states[rows, batch.mask_pos, :]
    else:
        if not cfg.no_cross_attention:
            for layer in range(cfg.layers):
                q_states = cross_attention_layer(
                    q_states, s_states, layer_params(P, f"cross.{layer}"), batch.valid, drop, rng
                )
        fused = q_states[:, 0, :]
    return BatchOutput(score_entities(fused, source_ctx, P), fused, source_ctx)


def forward(query: Query, ctx: SubgraphContext, params: ModelParams, cfg: ModelConfig) -> ReaderOutput:
    """Score every entity as the tail of ``query`` given ``ctx`` (single example, no tape)."""
    with ag.no_grad():
        out = forward_batch(make_batch([query], [ctx], cfg), params.tensors(False), cfg)
    return ReaderOutput(out.logits.data[0], out.fused_query_repr.data[0], out.source_ctx_repr.data[0])


def cross_entropy_loss(logits, gold) -> Tensor:
    """``-log softmax(logits)[gold]``; batched logits give the mean over rows."""
    logits = ag.as_tensor(logits)
    if logits.data.ndim == 1:
        logits = ag.reshape(logits, (1, -1))
        gold = [gold]
    return ag.cross_entropy(logits, np.asarray(gold, dtype=np.int64))


def batch_loss(
    batch: Batch,
    P: Mapping[str, Tensor],
    cfg: ModelConfig,
    rng: np.random.Generator | None = None,
) -> Tensor:
    if batch.gold is None:
        raise ValueError("batch has no gold targets")
    return cross_entropy_loss(forward_batch(batch, P, cfg, rng).logits, batch.gold)


def predict_logits(
    queries: Sequence[Query],
    contexts: Sequence[SubgraphContext],
    params: ModelParams,
    cfg: ModelConfig,
    batch_size: int = 256,
) -> np.ndarray:
    """Logits for many queries, batched by ascending context size (no tape)."""
    out = np.empty((len(queries), cfg.num_entities), dtype=params.dtype)
    order = sorted(range(len(queries)), key=lambda i: (contexts[i].size, i))
    P = params.tensors(False)
    with ag.no_grad():
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            batch = make_batch([queries[i] for i in idx], [contexts[i] for i in idx], cfg)
            out[idx] = forward_batch(batch, P, cfg).logits.data
    return out
