"""Telescoped retrieval, answer voting, and evaluation metrics.

A ranker chain like "tfidf:200,neural:5" narrows the corpus in stages: each
stage re-ranks the survivors of the previous one and keeps its cut.  The
final survivors are read by the span head, and their answers vote with
weight exp(relevance / temperature); votes for the same raw answer string
pool together.  Vote weights are kept in log space so tiny temperatures
cannot overflow.
"""
from __future__ import annotations

import math
import re
import string
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .model import (Hyperparams, ModelWeights, encode_batch, extract_answer,
                    forward_batch, select_span)
from .retriever import Corpus, PassageRecord, RankedList, TfIdfIndex, top_k
from .text import TokenSeq, VectorTable
from .training import QuestionExample

VALID_STAGE_KINDS = ("tfidf", "neural")


class ChainSpecError(ValueError):
    """Raised for malformed or non-telescoping ranker chains."""


@dataclass(frozen=True)
class ChainStage:
    kind: str
    cut: int


@dataclass(frozen=True)
class RankerChain:
    """Ordered stages with strictly decreasing cuts, plus the final k."""

    stages: tuple[ChainStage, ...]
    final_k: int

    def __post_init__(self):
        if not self.stages:
            raise ChainSpecError("a chain needs at least one stage")
        for stage in self.stages:
            if stage.kind not in VALID_STAGE_KINDS:
                raise ChainSpecError(f"unknown stage kind {stage.kind!r}")
            if stage.cut < 1:
                raise ChainSpecError(f"stage cut must be >= 1, got {stage.cut}")
        cuts = [s.cut for s in self.stages]
        for prev, nxt in zip(cuts, cuts[1:]):
            if nxt >= prev:
                raise ChainSpecError(
                    f"stage cuts must strictly decrease, got {cuts}")
        if not 1 <= self.final_k <= cuts[-1]:
            raise ChainSpecError(
                f"final k ({self.final_k}) must be in [1, last cut {cuts[-1]}]")


def parse_chain(spec: str, final_k: int | None = None) -> RankerChain:
    """Parse "kind:cut,kind:cut,..." into a validated RankerChain."""
    stages = []
    for part in spec.split(","):
        part = part.strip()
        if not part:
            raise ChainSpecError(f"empty stage in chain spec {spec!r}")
        kind, sep, cut_text = part.partition(":")
        if not sep:
            raise ChainSpecError(f"stage {part!r} is not of the form kind:cut")
        try:
            cut = int(cut_text)
        except ValueError:
            raise ChainSpecError(f"stage {part!r} has a non-integer cut") from None
        stages.append(ChainStage(kind.strip(), cut))
    k = final_k if final_k is not None else stages[-1].cut
    return RankerChain(tuple(stages), k)


# ---------------------------------------------------------------------------
# neural scoring


@dataclass
class AnswerCandidate:
    passage_id: int
    answer: str
    span: tuple[int, int]
    span_score: float
    relevance: float


class NeuralScorer:
    """Runs the trained network in eval mode for ranking and reading.

    Use the EMA weights here; raw weights are for resuming training.
    """

    def __init__(self, weights: ModelWeights, hp: Hyperparams, table: VectorTable,
                 batch_size: int = 32):
        self.weights = weights
        self.hp = hp
        self.table = table
        self.batch_size = batch_size

    def _chunks(self, records: list[PassageRecord]):
        for i in range(0, len(records), self.batch_size):
            yield records[i:i + self.batch_size]

    def relevance_scores(self, question: TokenSeq,
                         records: list[PassageRecord]) -> list[float]:
        scores: list[float] = []
        with ad.no_grad():
            for chunk in self._chunks(records):
                batch = encode_batch([question] * len(chunk),
                                     [rec.tokens for rec in chunk], self.table)
                state = forward_batch(self.weights, self.hp, batch,
                                      heads=("relevance",))
                scores.extend(float(x) for x in state.relevance.value)
        return scores

    def read_candidates(self, question: TokenSeq,
                        records: list[PassageRecord]) -> list[AnswerCandidate]:
        """Span + relevance for each passage; spans respect passage length."""
        out: list[AnswerCandidate] = []
        with ad.no_grad():
            for chunk in self._chunks(records):
                batch = encode_batch([question] * len(chunk),
                                     [rec.tokens for rec in chunk], self.table)
                state = forward_batch(self.weights, self.hp, batch)
                starts = state.start_probs.value
                ends = state.end_probs.value
                rels = state.relevance.value
                for i, rec in enumerate(chunk):
                    n = batch.passage_lengths[i]
                    t1, t2, score = select_span(starts[i, :n], ends[i, :n])
                    out.append(AnswerCandidate(
                        passage_id=rec.passage_id,
                        answer=extract_answer(rec.tokens, (t1, t2)),
                        span=(t1, t2), span_score=score,
                        relevance=float(rels[i])))
        return out


# ---------------------------------------------------------------------------
# telescoping


def telescope(question: TokenSeq, chain: RankerChain, index: TfIdfIndex,
              corpus: Corpus, scorer: NeuralScorer | None) -> RankedList:
    """Run the chain; the result is a reordered subset of stage-1 survivors."""
    survivors: RankedList | None = None
    for stage in chain.stages:
        if stage.kind == "neural":
            if scorer is None:
                raise ValueError("chain has a neural stage but no scorer was given")
            if survivors is None:
                records = list(corpus)
            else:
                records = [corpus[pid] for pid in survivors.ids()]
            if not records:
                survivors = RankedList([], warning="nothing to re-rank")
                continue
            scores = scorer.relevance_scores(question, records)
            pairs = sorted(zip((r.passage_id for r in records), scores),
                           key=lambda item: (-item[1], item[0]))
            survivors = RankedList(pairs[:stage.cut],
                                   survivors.warning if survivors else None)
        else:
            if survivors is None:
                ranked = top_k(index, question.tokens, stage.cut)
            else:
                # Re-rank the current survivors only: score the full corpus,
                # then keep survivors in TF-IDF order up to the cut.
                full = top_k(index, question.tokens, max(len(corpus), 1))
                allowed = set(survivors.ids())
                entries = [(pid, sc) for pid, sc in full.entries if pid in allowed]
                ranked = RankedList(entries[:stage.cut], full.warning)
            survivors = ranked
    return survivors if survivors is not None else RankedList([])


# ---------------------------------------------------------------------------
# voting


@dataclass
class VoteEntry:
    answer: str
    log_weight: float
    best_relevance: float
    n_votes: int

    def weight(self) -> float:
        """exp of the pooled log weight; inf when not representable."""
        try:
            return math.exp(self.log_weight)
        except OverflowError:
            return math.inf


@dataclass
class VoteResult:
    answer: str | None
    table: list[VoteEntry] = field(default_factory=list)
    candidates: list[AnswerCandidate] = field(default_factory=list)
    warning: str | None = None


def vote_answers(candidates: list[AnswerCandidate], temperature: float) -> VoteResult:
    """Pool candidate answers by raw string; weight each vote exp(rel/temp).

    The span score plays no part in the vote.  Ties on pooled weight go to
    the answer holding the highest single relevance, then to the
    lexicographically smallest answer string.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    if not candidates:
        return VoteResult(None, warning="no candidates to vote on")
    pooled: dict[str, list[float]] = {}
    best_rel: dict[str, float] = {}
    for cand in candidates:
        pooled.setdefault(cand.answer, []).append(cand.relevance / temperature)
        best_rel[cand.answer] = max(best_rel.get(cand.answer, -math.inf),
                                    cand.relevance)
    table = [VoteEntry(answer=ans,
                       log_weight=float(np.logaddexp.reduce(logs)),
                       best_relevance=best_rel[ans],
                       n_votes=len(logs))
             for ans, logs in pooled.items()]
    table.sort(key=lambda e: (-e.log_weight, -e.best_relevance, e.answer))
    return VoteResult(table[0].answer, table, candidates)


def answer_question(question: TokenSeq, chain: RankerChain, index: TfIdfIndex,
                    corpus: Corpus, scorer: NeuralScorer,
                    k: int | None = None,
                    temperature: float | None = None) -> tuple[VoteResult, RankedList]:
    """Retrieve with the chain, read the top k survivors, vote on answers."""
    ranked = telescope(question, chain, index, corpus, scorer)
    keep = ranked.top(k if k is not None else chain.final_k)
    if not keep.entries:
        return (VoteResult(None, warning=keep.warning or "retrieval came back empty"),
                keep)
    records = [corpus[pid] for pid in keep.ids()]
    candidates = scorer.read_candidates(question, records)
    temp = temperature if temperature is not None else scorer.hp.vote_temperature
    return vote_answers(candidates, temp), keep


# ---------------------------------------------------------------------------
# answer metrics (standard SQuAD-style normalization)


_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = set(string.punctuation)


def normalize_answer(text: str) -> str:
    """Lowercase, drop punctuation, drop articles, collapse whitespace."""
    text = text.lower()
    text = "".join(ch for ch in text if ch not in _PUNCT)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def exact_match(prediction: str | None, truths) -> float:
    """1.0 if the normalized prediction equals any normalized reference."""
    pred = normalize_answer(prediction or "")
    return float(any(pred == normalize_answer(t) for t in truths))


def _f1_single(prediction: str, truth: str) -> float:
    pred_toks = normalize_answer(prediction).split()
    truth_toks = normalize_answer(truth).split()
    if not pred_toks or not truth_toks:
        return float(pred_toks == truth_toks)
    overlap = Counter(pred_toks) & Counter(truth_toks)
    n_same = sum(overlap.values())
    if n_same == 0:
        return 0.0
    precision = n_same / len(pred_toks)
    recall = n_same / len(truth_toks)
    return 2 * precision * recall / (precision + recall)


def f1_score(prediction: str | None, truths) -> float:
    """Best token-overlap F1 over the reference answers."""
    truths = list(truths)
    if not truths:
        raise ValueError("f1_score needs at least one reference answer")
    return max(_f1_single(prediction or "", t) for t in truths)


# ---------------------------------------------------------------------------
# retrieval metrics


def success_at_k(rankings: list[list[int]], relevant: list[set[int]], k: int) -> float:
    """Fraction of queries with a relevant passage in the top k."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(rankings) != len(relevant):
        raise ValueError("one relevant set per ranking required")
    if not rankings:
        raise ValueError("no queries to aggregate")
    hits = sum(1 for ranked, rel in zip(rankings, relevant)
               if any(pid in rel for pid in ranked[:k]))
    return hits / len(rankings)


def mrr_at_k(rankings: list[list[int]], relevant: list[set[int]], k: int) -> float:
    """Mean reciprocal rank of the first relevant passage within the top k."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if len(rankings) != len(relevant):
        raise ValueError("one relevant set per ranking required")
    if not rankings:
        raise ValueError("no queries to aggregate")
    total = 0.0
    for ranked, rel in zip(rankings, relevant):
        for pos, pid in enumerate(ranked[:k], start=1):
            if pid in rel:
                total += 1.0 / pos
                break
    return total / len(rankings)


# ---------------------------------------------------------------------------
# evaluation drivers


@dataclass
class QueryCase:
    qid: str
    question: TokenSeq
    relevant: set[int]
    answers: tuple[str, ...]


def group_questions(examples: list[QuestionExample]) -> list[QueryCase]:
    """Collapse positives that share a qid into one query case."""
    cases: dict[str, QueryCase] = {}
    for ex in examples:
        if ex.relevance != 1:
            continue
        case = cases.get(ex.qid)
        if case is None:
            cases[ex.qid] = QueryCase(ex.qid, ex.question, {ex.passage_id},
                                      ex.answer_texts)
        else:
            case.relevant.add(ex.passage_id)
    return list(cases.values())


def _aggregate_ir(rankings, relevant) -> dict:
    return {
        "success_at_1": success_at_k(rankings, relevant, 1),
        "success_at_5": success_at_k(rankings, relevant, 5),
        "mrr_at_5": mrr_at_k(rankings, relevant, 5),
    }


def evaluate_ir(examples: list[QuestionExample], chain: RankerChain,
                index: TfIdfIndex, corpus: Corpus,
                scorer: NeuralScorer | None) -> dict:
    """Retrieval-only report: per-query rankings plus S@1/S@5/MRR@5."""
    cases = group_questions(examples)
    queries = []
    rankings, relevant = [], []
    for case in cases:
        ranked = telescope(case.question, chain, index, corpus, scorer)
        ids = ranked.ids()
        rankings.append(ids)
        relevant.append(case.relevant)
        queries.append({"qid": case.qid, "question": case.question.text,
                        "retrieved": ids, "answer": None, "em": None, "f1": None})
    aggregate = dict(_aggregate_ir(rankings, relevant), em=None, f1=None,
                     n_queries=len(cases))
    return {"queries": queries, "aggregate": aggregate}


def evaluate_rc(examples: list[QuestionExample], corpus: Corpus,
                scorer: NeuralScorer) -> dict:
    """Reading-only report: answers extracted from the gold passage."""
    queries = []
    ems, f1s = [], []
    for ex in examples:
        if ex.relevance != 1:
            continue
        [cand] = scorer.read_candidates(ex.question, [corpus[ex.passage_id]])
        em = exact_match(cand.answer, ex.answer_texts)
        f1 = f1_score(cand.answer, ex.answer_texts)
        ems.append(em)
        f1s.append(f1)
        queries.append({"qid": ex.qid, "question": ex.question.text,
                        "retrieved": [ex.passage_id], "answer": cand.answer,
                        "em": em, "f1": f1})
    if not queries:
        raise ValueError("no positive examples to evaluate")
    aggregate = {"success_at_1": None, "success_at_5": None, "mrr_at_5": None,
                 "em": float(np.mean(ems)), "f1": float(np.mean(f1s)),
                 "n_queries": len(queries)}
    return {"queries": queries, "aggregate": aggregate}


def evaluate_mrs(examples: list[QuestionExample], chain: RankerChain,
                 index: TfIdfIndex, corpus: Corpus, scorer: NeuralScorer,
                 k: int | None = None, temperature: float | None = None) -> dict:
    """End-to-end report: retrieve, read, vote; IR and answer metrics."""
    cases = group_questions(examples)
    queries = []
    rankings, relevant, ems, f1s = [], [], [], []
    for case in cases:
        vote, ranked = answer_question(case.question, chain, index, corpus,
                                       scorer, k=k, temperature=temperature)
        ids = ranked.ids()
        em = exact_match(vote.answer, case.answers)
        f1 = f1_score(vote.answer, case.answers)
        rankings.append(ids)
        relevant.append(case.relevant)
        ems.append(em)
        f1s.append(f1)
        queries.append({"qid": case.qid, "question": case.question.text,
                        "retrieved": ids, "answer": vote.answer,
                        "em": em, "f1": f1})
    if not cases:
        raise ValueError("no questions to evaluate")
    aggregate = dict(_aggregate_ir(rankings, relevant),
                     em=float(np.mean(ems)), f1=float(np.mean(f1s)),
                     n_queries=len(cases))
    return {"queries": queries, "aggregate": aggregate}
