"""Top-N ranking metrics and the candidate-ranking evaluation loop."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .corpus import Corpus, TestInstance
from .model import ModelConfig, Trace, encode_all, score_rows


@dataclass(frozen=True)
class RankingResult:
    instance: int
    candidates: tuple[int, ...]
    scores: tuple[float, ...]
    relevant: frozenset
    N: int

    def __post_init__(self):
        if len(set(self.candidates)) != len(self.candidates):
            raise ValueError("candidate ids must be unique")
        if not self.relevant <= set(self.candidates):
            raise ValueError("relevant items must be candidates")
        if not all(math.isfinite(s) for s in self.scores):
            raise ValueError("scores must be finite")

    def ranked(self) -> list[int]:
        return rank(self.candidates, self.scores)


@dataclass(frozen=True)
class MetricReport:
    precision: float
    recall: float
    ndcg: float
    hr: float
    instances: int

    def as_dict(self) -> dict:
        return {"instances": self.instances, "precision": self.precision,
                "recall": self.recall, "ndcg": self.ndcg, "hr": self.hr}


def rank(candidates: Sequence[int], scores: Sequence[float], tie_seed=None) -> list[int]:
    """Candidates by descending score; ties by ascending id, or shuffled with
    ``tie_seed`` for an unbiased order."""
    ids = np.asarray(candidates, dtype=np.int64)
    s = np.asarray(scores, dtype=np.float64)
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    if tie_seed is None:
        secondary = ids
    else:
        secondary = np.random.default_rng(tie_seed).permutation(len(ids))
    order = np.lexsort((secondary, -s))
    return ids[order].tolist()


def _hits(ranked: Sequence[int], relevant, N: int) -> int:
    if N < 1:
        raise ValueError("N must be >= 1")
    if not relevant:
        raise ValueError("relevant set is empty")
    rel = set(relevant)
    return sum(1 for i in ranked[:N] if i in rel)


def precision_recall_at(ranked: Sequence[int], relevant, N: int) -> tuple[float, float]:
    hits = _hits(ranked, relevant, N)
    return hits / N, hits / len(set(relevant))


def ndcg_at(ranked: Sequence[int], relevant, N: int) -> float:
    _hits(ranked, relevant, N)
    rel = set(relevant)
    dcg = sum(1.0 / math.log2(p + 2) for p, i in enumerate(ranked[:N]) if i in rel)
    idcg = sum(1.0 / math.log2(p + 2) for p in range(min(len(rel), N)))
    return dcg / idcg


def hr_at(ranked: Sequence[int], relevant, N: int) -> int:
    return int(_hits(ranked, relevant, N) > 0)


def instance_metrics(ranked: Sequence[int], relevant, N: int) -> dict:
    p, r = precision_recall_at(ranked, relevant, N)
    return {"precision": p, "recall": r, "ndcg": ndcg_at(ranked, relevant, N), "hr": hr_at(ranked, relevant, N)}


def summarize(rows: list[dict]) -> MetricReport:
    if not rows:
        raise ValueError("no instances to summarize")
    mean = {k: float(np.mean([r[k] for r in rows])) for k in ("precision", "recall", "ndcg", "hr")}
    return MetricReport(instances=len(rows), **mean)


# ---------------------------------------------------------------------------
# model scoring
# ---------------------------------------------------------------------------


def score_instances(params, config: ModelConfig, corpus: Corpus, instances: list[TestInstance],
                    batch_rows: int = 4096, traces: list | None = None) -> list[np.ndarray]:
    """Score every candidate of every instance with cached representations."""
    enc = encode_all(corpus, params, config)
    out: list[np.ndarray] = []
    # group by candidate count so each call gets a rectangular batch
    i = 0
    while i < len(instances):
        C = len(instances[i].candidates)
        cap = max(1, batch_rows // C)
        j = i
        while j < len(instances) and j - i < cap and len(instances[j].candidates) == C:
            j += 1
        chunk = instances[i:j]
        users = np.array([t.user for t in chunk])
        hist = np.array([t.history for t in chunk])
        cands = np.array([t.candidates for t in chunk])
        trace = Trace() if traces is not None else None
        s = score_rows(enc, users, hist, cands, params, config, trace).data
        out.extend(s[k].copy() for k in range(len(chunk)))
        if traces is not None:
            traces.append((i, C, trace))
        i = j
    return out


def evaluate(params, config: ModelConfig, corpus: Corpus, instances: list[TestInstance], N: int = 5,
             tie_seed=None, per_instance: list | None = None) -> MetricReport:
    """Mean Precision/Recall/NDCG/HR@N over the test instances.

    When ``per_instance`` is a list it receives one metrics dict per instance.
    """
    if not instances:
        raise ValueError("no test instances")
    scores = score_instances(params, config, corpus, instances)
    rows = []
    for k, (inst, s) in enumerate(zip(instances, scores)):
        seed = None if tie_seed is None else [tie_seed, k]
        ranked = rank(inst.candidates, s, seed)
        m = instance_metrics(ranked, inst.relevant, N)
        rows.append(m)
        if per_instance is not None:
            per_instance.append({"instance": k, "user": corpus.user_ids[inst.user], **m})
    return summarize(rows)
