"""The retrieve-and-read network.

A shared trunk encodes question and passage (fixed word vectors, a shared
two-layer highway network, a shared contextual bi-LSTM), mixes them with
bidirectional attention and a fusion bi-LSTM, then splits into two heads:

  - span head: start/end distributions over passage positions
  - relevance head: probability that the passage answers the question,
    helped by a binary exact-match input channel

All sequence tensors are (batch, features, time).  Masks are plain float
arrays (batch, time); every softmax over positions receives one.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Iterator

import numpy as np

from . import autodiff as ad
from .autodiff import MASK_OFFSET, Node
from .layers import (HighwayLayerParams, HighwayParams, LinearParams, LstmParams,
                     bilstm_encode, highway_forward, init_highway, init_linear,
                     init_lstm, linear_seq)
from .text import TokenSeq, VectorTable, embed


@dataclass
class Hyperparams:
    """Model sizes and training settings; defaults follow the reference setup."""

    hidden: int = 100          # per-direction LSTM width
    attn_dim: int = 100        # relevance self-attention projection width
    dropout: float = 0.2
    ir_weight: float = 1.0     # weight of the relevance loss in the joint loss
    vote_temperature: float = 0.05
    learning_rate: float = 1.0
    momentum: float = 0.9
    lr_decay: float = 0.9      # learning-rate factor applied each epoch
    epochs: int = 15
    ema_decay: float = 0.99
    batch_positives: int = 30
    batch_negatives: int = 30
    seed: int = 13

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @classmethod
    def from_dict(cls, raw: dict) -> "Hyperparams":
        unknown = set(raw) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown hyperparameter fields: {sorted(unknown)}")
        return cls(**raw)


@dataclass
class ModelWeights:
    """All trainable arrays (or their graph nodes during a forward pass)."""

    embed_dim: int
    hidden: int
    attn_dim: int
    highway: HighwayParams
    ctx_fwd: LstmParams
    ctx_bwd: LstmParams
    sim_weight: Any            # (6*hidden,) similarity scorer
    fusion_fwd: LstmParams
    fusion_bwd: LstmParams
    start_fwd: LstmParams
    start_bwd: LstmParams
    start_weight: Any          # (10*hidden,)
    end_fwd: LstmParams
    end_bwd: LstmParams
    end_weight: Any            # (10*hidden,)
    rel_fwd: LstmParams
    rel_bwd: LstmParams
    attn_proj: LinearParams    # (attn_dim, 2*hidden) + bias
    attn_context: Any          # (attn_dim,)
    rel_weight: Any            # (2*hidden,)


_LSTM_FIELDS = ("ctx_fwd", "ctx_bwd", "fusion_fwd", "fusion_bwd",
                "start_fwd", "start_bwd", "end_fwd", "end_bwd",
                "rel_fwd", "rel_bwd")


def _fields(weights: ModelWeights) -> list[tuple[str, Any, str]]:
    """Deterministic (name, owner, attribute) rows over every weight array."""
    rows: list[tuple[str, Any, str]] = []
    for i, layer in enumerate(weights.highway.layers):
        rows.append((f"highway.{i}.transform.weight", layer.transform, "weight"))
        rows.append((f"highway.{i}.transform.bias", layer.transform, "bias"))
        rows.append((f"highway.{i}.gate.weight", layer.gate, "weight"))
        rows.append((f"highway.{i}.gate.bias", layer.gate, "bias"))
    for name in _LSTM_FIELDS:
        lstm: LstmParams = getattr(weights, name)
        rows.append((f"{name}.w_in", lstm, "w_in"))
        rows.append((f"{name}.w_rec", lstm, "w_rec"))
        rows.append((f"{name}.bias", lstm, "bias"))
    rows.append(("sim_weight", weights, "sim_weight"))
    rows.append(("start_weight", weights, "start_weight"))
    rows.append(("end_weight", weights, "end_weight"))
    rows.append(("attn_proj.weight", weights.attn_proj, "weight"))
    rows.append(("attn_proj.bias", weights.attn_proj, "bias"))
    rows.append(("attn_context", weights, "attn_context"))
    rows.append(("rel_weight", weights, "rel_weight"))
    return rows


def iter_named(weights: ModelWeights) -> Iterator[tuple[str, Any]]:
    for name, owner, attr in _fields(weights):
        yield name, getattr(owner, attr)


def named_arrays(weights: ModelWeights) -> dict[str, np.ndarray]:
    return dict(iter_named(weights))


def map_weights(weights: ModelWeights, fn) -> ModelWeights:
    """Structurally identical copy with every array passed through fn."""

    def lin(p: LinearParams) -> LinearParams:
        return LinearParams(fn(p.weight), fn(p.bias))

    def lstm(p: LstmParams) -> LstmParams:
        return LstmParams(fn(p.w_in), fn(p.w_rec), fn(p.bias))

    return ModelWeights(
        embed_dim=weights.embed_dim,
        hidden=weights.hidden,
        attn_dim=weights.attn_dim,
        highway=HighwayParams(tuple(
            HighwayLayerParams(lin(layer.transform), lin(layer.gate))
            for layer in weights.highway.layers)),
        ctx_fwd=lstm(weights.ctx_fwd), ctx_bwd=lstm(weights.ctx_bwd),
        sim_weight=fn(weights.sim_weight),
        fusion_fwd=lstm(weights.fusion_fwd), fusion_bwd=lstm(weights.fusion_bwd),
        start_fwd=lstm(weights.start_fwd), start_bwd=lstm(weights.start_bwd),
        start_weight=fn(weights.start_weight),
        end_fwd=lstm(weights.end_fwd), end_bwd=lstm(weights.end_bwd),
        end_weight=fn(weights.end_weight),
        rel_fwd=lstm(weights.rel_fwd), rel_bwd=lstm(weights.rel_bwd),
        attn_proj=lin(weights.attn_proj),
        attn_context=fn(weights.attn_context),
        rel_weight=fn(weights.rel_weight),
    )


def init_weights(rng: np.random.Generator, embed_dim: int, hidden: int,
                 attn_dim: int, dtype=np.float32) -> ModelWeights:
    """Xavier-uniform matrices, zero biases, in a fixed draw order."""

    def vec(n: int) -> np.ndarray:
        from .layers import xavier_uniform
        return xavier_uniform(rng, (n,), n, 1, dtype)

    return ModelWeights(
        embed_dim=embed_dim, hidden=hidden, attn_dim=attn_dim,
        highway=init_highway(rng, embed_dim, 2, dtype),
        ctx_fwd=init_lstm(rng, embed_dim, hidden, dtype),
        ctx_bwd=init_lstm(rng, embed_dim, hidden, dtype),
        sim_weight=vec(6 * hidden),
        fusion_fwd=init_lstm(rng, 8 * hidden, hidden, dtype),
        fusion_bwd=init_lstm(rng, 8 * hidden, hidden, dtype),
        start_fwd=init_lstm(rng, 2 * hidden, hidden, dtype),
        start_bwd=init_lstm(rng, 2 * hidden, hidden, dtype),
        start_weight=vec(10 * hidden),
        end_fwd=init_lstm(rng, 14 * hidden, hidden, dtype),
        end_bwd=init_lstm(rng, 14 * hidden, hidden, dtype),
        end_weight=vec(10 * hidden),
        rel_fwd=init_lstm(rng, 2 * hidden + 1, hidden, dtype),
        rel_bwd=init_lstm(rng, 2 * hidden + 1, hidden, dtype),
        attn_proj=init_linear(rng, 2 * hidden, attn_dim, dtype),
        attn_context=vec(attn_dim),
        rel_weight=vec(2 * hidden),
    )


def weights_from_named(embed_dim: int, hidden: int, attn_dim: int,
                       named: dict[str, np.ndarray]) -> ModelWeights:
    """Rebuild a weight structure from a flat name -> array map."""
    skeleton = init_weights(np.random.default_rng(0), embed_dim, hidden, attn_dim)
    expected = {name for name, _, _ in _fields(skeleton)}
    missing = expected - set(named)
    extra = set(named) - expected
    if missing or extra:
        raise ValueError(f"weight name mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for name, owner, attr in _fields(skeleton):
        arr = named[name]
        want = getattr(owner, attr).shape
        if arr.shape != want:
            raise ValueError(f"{name}: expected shape {want}, got {arr.shape}")
        setattr(owner, attr, arr)
    return skeleton


def as_param_nodes(weights: ModelWeights, requires_grad: bool = True
                   ) -> tuple[ModelWeights, dict[str, Node]]:
    """Wrap every weight array as a graph leaf, keeping the structure."""
    named = named_arrays(weights)
    nodes = {name: ad.leaf(arr, requires_grad) for name, arr in named.items()}
    by_id = {id(arr): nodes[name] for name, arr in named.items()}
    return map_weights(weights, lambda arr: by_id[id(arr)]), nodes


# ---------------------------------------------------------------------------
# batch preparation


@dataclass
class EncodedBatch:
    """Padded embeddings, masks, and the exact-match channel for a batch."""

    passage_emb: np.ndarray    # (B, embed_dim, T)
    question_emb: np.ndarray   # (B, embed_dim, J)
    passage_mask: np.ndarray   # (B, T)
    question_mask: np.ndarray  # (B, J)
    match_channel: np.ndarray  # (B, 1, T)
    passage_lengths: list[int] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.passage_emb.shape[0]


def exact_match_channel(question: TokenSeq, passage: TokenSeq,
                        dtype=np.float32) -> np.ndarray:
    """(1, T) indicator: passage token appears verbatim among question tokens.

    Case-sensitive surface comparison, the max-pool over question words of the
    full binary match matrix.
    """
    vocab = set(question.tokens)
    row = np.fromiter((1.0 if tok in vocab else 0.0 for tok in passage.tokens),
                      dtype=dtype, count=len(passage))
    return row.reshape(1, -1)


def encode_batch(questions: list[TokenSeq], passages: list[TokenSeq],
                 table: VectorTable, dtype=np.float32) -> EncodedBatch:
    """Embed and right-pad a batch of (question, passage) pairs."""
    if len(questions) != len(passages):
        raise ValueError("questions and passages must pair up")
    if not questions:
        raise ValueError("empty batch")
    for q, p in zip(questions, passages):
        if len(q) == 0:
            raise ValueError(f"empty question: {q.text!r}")
        if len(p) == 0:
            raise ValueError(f"empty passage: {p.text!r}")
    n = len(questions)
    t_max = max(len(p) for p in passages)
    j_max = max(len(q) for q in questions)
    dim = table.dim
    passage_emb = np.zeros((n, dim, t_max), dtype=dtype)
    question_emb = np.zeros((n, dim, j_max), dtype=dtype)
    passage_mask = np.zeros((n, t_max), dtype=dtype)
    question_mask = np.zeros((n, j_max), dtype=dtype)
    match = np.zeros((n, 1, t_max), dtype=dtype)
    lengths = []
    for i, (q, p) in enumerate(zip(questions, passages)):
        passage_emb[i, :, :len(p)] = embed(p, table)
        question_emb[i, :, :len(q)] = embed(q, table)
        passage_mask[i, :len(p)] = 1.0
        question_mask[i, :len(q)] = 1.0
        match[i, :, :len(p)] = exact_match_channel(q, p, dtype)
        lengths.append(len(p))
    return EncodedBatch(passage_emb, question_emb, passage_mask, question_mask,
                        match, lengths)


# ---------------------------------------------------------------------------
# forward pass


@dataclass
class ForwardState:
    """Nodes produced by one forward pass; head fields are None if skipped."""

    ctx_passage: Node          # (B, 2d, T)
    ctx_question: Node         # (B, 2d, J)
    similarity: Node           # (B, T, J)
    attended: Node             # (B, 8d, T)
    fused: Node                # (B, 2d, T)
    passage_mask: np.ndarray
    question_mask: np.ndarray
    start_logits: Node | None = None
    start_probs: Node | None = None
    end_logits: Node | None = None
    end_probs: Node | None = None
    rel_attention: Node | None = None
    relevance_logit: Node | None = None
    relevance: Node | None = None


def attention_flow(ctx_passage: Node, ctx_question: Node, sim_weight: Node,
                   passage_mask: np.ndarray, question_mask: np.ndarray
                   ) -> tuple[Node, Node]:
    """Bidirectional attention between passage and question encodings.

    Returns the (B, T, J) similarity matrix and the (B, 8d, T) output that
    stacks passage encodings with question-aware and passage-aware blends.
    """
    n, two_d, t_len = ctx_passage.value.shape
    j_len = ctx_question.value.shape[2]
    dtype = ctx_passage.value.dtype

    w_passage = ad.reshape(ad.slice_axis(sim_weight, 0, 0, two_d), (1, two_d, 1))
    w_question = ad.reshape(ad.slice_axis(sim_weight, 0, two_d, 2 * two_d), (1, two_d, 1))
    w_product = ad.reshape(ad.slice_axis(sim_weight, 0, 2 * two_d, 3 * two_d), (1, two_d, 1))

    lin_passage = ad.reduce_sum(ad.mul(ctx_passage, w_passage), axis=1)    # (B, T)
    lin_question = ad.reduce_sum(ad.mul(ctx_question, w_question), axis=1)  # (B, J)
    cross = ad.matmul(ad.transpose(ad.mul(ctx_passage, w_product), (0, 2, 1)),
                      ctx_question)                                        # (B, T, J)
    similarity = ad.add(cross, ad.add(ad.reshape(lin_passage, (n, t_len, 1)),
                                      ad.reshape(lin_question, (n, 1, j_len))))

    # passage -> question attention
    att_over_question = ad.masked_softmax(similarity, question_mask[:, None, :])
    question_blend = ad.matmul(ctx_question, ad.transpose(att_over_question, (0, 2, 1)))

    # question -> passage attention: strongest question link per position
    q_offset = ((question_mask[:, None, :] - 1.0) * MASK_OFFSET).astype(dtype)
    strongest = ad.reduce_max(ad.add(similarity, ad.constant(q_offset)), axis=2)
    att_over_passage = ad.masked_softmax(strongest, passage_mask)          # (B, T)
    passage_blend = ad.matmul(ctx_passage,
                              ad.reshape(att_over_passage, (n, t_len, 1)))  # (B, 2d, 1)

    attended = ad.concat([
        ctx_passage,
        question_blend,
        ad.mul(ctx_passage, question_blend),
        ad.mul(ctx_passage, passage_blend),
    ], axis=1)
    return similarity, attended


def forward_batch(weights: ModelWeights, hp: Hyperparams, batch: EncodedBatch,
                  train: bool = False, rng: np.random.Generator | None = None,
                  heads: tuple[str, ...] = ("span", "relevance")) -> ForwardState:
    """Run the network on an encoded batch.

    `weights` may hold arrays (inference) or graph leaves (training).  With
    train=True, inverted dropout is applied to highway layers, LSTM inputs,
    and the inputs of the three output transforms, consuming `rng`.
    """
    if not isinstance(weights.sim_weight, Node):
        weights, _ = as_param_nodes(weights, requires_grad=False)
    unknown = set(heads) - {"span", "relevance"}
    if unknown:
        raise ValueError(f"unknown heads: {sorted(unknown)}")
    d = weights.hidden
    n = batch.size
    t_len = batch.passage_emb.shape[2]
    pmask, qmask = batch.passage_mask, batch.question_mask

    def drop(node: Node) -> Node:
        return ad.dropout(node, hp.dropout, rng, train)

    passage_in = highway_forward(weights.highway, ad.constant(batch.passage_emb),
                                 hp.dropout, rng, train)
    question_in = highway_forward(weights.highway, ad.constant(batch.question_emb),
                                  hp.dropout, rng, train)
    ctx_passage = bilstm_encode(weights.ctx_fwd, weights.ctx_bwd,
                                drop(passage_in), pmask, d)
    ctx_question = bilstm_encode(weights.ctx_fwd, weights.ctx_bwd,
                                 drop(question_in), qmask, d)
    similarity, attended = attention_flow(ctx_passage, ctx_question,
                                          weights.sim_weight, pmask, qmask)
    fused = bilstm_encode(weights.fusion_fwd, weights.fusion_bwd,
                          drop(attended), pmask, d)
    state = ForwardState(ctx_passage, ctx_question, similarity, attended, fused,
                         pmask, qmask)

    if "span" in heads:
        start_states = bilstm_encode(weights.start_fwd, weights.start_bwd,
                                     drop(fused), pmask, d)
        start_in = ad.concat([attended, start_states], axis=1)      # (B, 10d, T)
        w_start = ad.reshape(weights.start_weight, (1, 10 * d, 1))
        state.start_logits = ad.reduce_sum(ad.mul(drop(start_in), w_start), axis=1)
        state.start_probs = ad.masked_softmax(state.start_logits, pmask)

        pooled = ad.matmul(start_states,
                           ad.reshape(state.start_probs, (n, t_len, 1)))  # (B, 2d, 1)
        tiled = ad.broadcast_to(pooled, (n, 2 * d, t_len))
        end_seq_in = ad.concat([attended, start_states, tiled,
                                ad.mul(start_states, tiled)], axis=1)     # (B, 14d, T)
        end_states = bilstm_encode(weights.end_fwd, weights.end_bwd,
                                   drop(end_seq_in), pmask, d)
        end_in = ad.concat([attended, end_states], axis=1)
        w_end = ad.reshape(weights.end_weight, (1, 10 * d, 1))
        state.end_logits = ad.reduce_sum(ad.mul(drop(end_in), w_end), axis=1)
        state.end_probs = ad.masked_softmax(state.end_logits, pmask)

    if "relevance" in heads:
        rel_in = ad.concat([fused, ad.constant(batch.match_channel)], axis=1)
        rel_states = bilstm_encode(weights.rel_fwd, weights.rel_bwd,
                                   drop(rel_in), pmask, d)
        proj = linear_seq(weights.attn_proj, rel_states)            # (B, c, T)
        w_ctx = ad.reshape(weights.attn_context, (1, weights.attn_dim, 1))
        att_logits = ad.reduce_sum(ad.mul(proj, w_ctx), axis=1)     # (B, T)
        state.rel_attention = ad.masked_softmax(att_logits, pmask)
        summary = ad.reshape(
            ad.matmul(rel_states, ad.reshape(state.rel_attention, (n, t_len, 1))),
            (n, 2 * d))
        w_rel = ad.reshape(weights.rel_weight, (1, 2 * d))
        state.relevance_logit = ad.reduce_sum(ad.mul(drop(summary), w_rel), axis=1)
        state.relevance = ad.sigmoid(state.relevance_logit)

    return state


def encode_shared(question: TokenSeq, passage: TokenSeq, weights: ModelWeights,
                  hp: Hyperparams, table: VectorTable) -> ForwardState:
    """Shared trunk only (no heads) for a single question/passage pair."""
    batch = encode_batch([question], [passage], table)
    return forward_batch(weights, hp, batch, train=False, heads=())


# ---------------------------------------------------------------------------
# span selection


def select_span(start_probs: np.ndarray, end_probs: np.ndarray
                ) -> tuple[int, int, float]:
    """Best (start, end) with start <= end maximizing start_p * end_p.

    Single linear scan keeping a running best start probability.  Ties go to
    the smallest start, then the smallest end.
    """
    start_probs = np.asarray(start_probs)
    end_probs = np.asarray(end_probs)
    if start_probs.ndim != 1 or start_probs.shape != end_probs.shape:
        raise ValueError(
            f"need matching 1-d arrays, got {start_probs.shape} and {end_probs.shape}")
    if start_probs.size == 0:
        raise ValueError("cannot select a span over zero positions")
    best: tuple[int, int, float] | None = None
    run_p = -1.0
    run_at = 0
    for pos in range(start_probs.size):
        if start_probs[pos] > run_p:
            run_p = float(start_probs[pos])
            run_at = pos
        score = run_p * float(end_probs[pos])
        if best is None or score > best[2]:
            best = (run_at, pos, score)
    return best


def extract_answer(passage: TokenSeq, span: tuple[int, int]) -> str:
    """Original passage text covered by a token span (inclusive)."""
    return passage.span_text(span[0], span[1])
