"""Sentence-level generation metrics: BLEU-4, ROUGE-L, METEOR-lite, exact match.

METEOR here is the exact-match-only variant (no stemming or synonym stage),
so its absolute values are not comparable with toolkit METEOR scores; all
comparisons using it are internal to this artifact.  Corpus aggregation is
the arithmetic mean of sentence scores.
"""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

_PUNCT = re.compile(r"([.,!?;:()\[\]\"'])")

ROUGE_BETA = 1.2
METEOR_NODE_BUDGET = 50_000


def eval_tokenize(text: str) -> list[str]:
    """Lowercase, detach punctuation, split on whitespace."""
    return _PUNCT.sub(r" \1 ", text.lower()).split()


@dataclass
class EvalPair:
    prediction: list[str]
    references: list[list[str]]

    def __post_init__(self):
        if not self.references:
            raise ValueError("EvalPair needs at least one reference")

    @classmethod
    def from_strings(cls, prediction: str, references: Iterable[str]) -> "EvalPair":
        return cls(eval_tokenize(prediction), [eval_tokenize(r) for r in references])


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu4(pair: EvalPair) -> float:
    """Geometric mean of modified 1..4-gram precisions times the brevity
    penalty (closest reference length, ties to the shorter).  No smoothing:
    any zero n-gram precision zeroes the score."""
    pred = pair.prediction
    if not pred:
        return 0.0
    log_sum = 0.0
    for n in range(1, 5):
        pred_counts = _ngram_counts(pred, n)
        total = sum(pred_counts.values())
        if total == 0:
            return 0.0
        best = Counter()
        for ref in pair.references:
            for gram, c in _ngram_counts(ref, n).items():
                best[gram] = max(best[gram], c)
        clipped = sum(min(c, best[gram]) for gram, c in pred_counts.items())
        if clipped == 0:
            return 0.0
        log_sum += math.log(clipped / total)
    ref_len = min(
        (abs(len(r) - len(pred)), len(r)) for r in pair.references
    )[1]
    bp = 1.0 if len(pred) >= ref_len else math.exp(1.0 - ref_len / len(pred))
    return bp * math.exp(log_sum / 4.0)


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[-1]))
        prev = cur
    return prev[-1]


def rouge_l(pair: EvalPair) -> float:
    """LCS F-score with recall bias beta=1.2; max over references."""
    pred = pair.prediction
    if not pred:
        return 0.0
    best = 0.0
    b2 = ROUGE_BETA * ROUGE_BETA
    for ref in pair.references:
        if not ref:
            continue
        lcs = _lcs_length(pred, ref)
        if lcs == 0:
            continue
        r = lcs / len(ref)
        p = lcs / len(pred)
        best = max(best, (1 + b2) * r * p / (r + b2 * p))
    return best


def _chunks_of(alignment: list[tuple[int, int]]) -> int:
    """Number of maximal runs that are contiguous in both sequences."""
    alignment = sorted(alignment)
    chunks = 0
    prev = None
    for i, j in alignment:
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


def _best_alignment_chunks(pred: Sequence[str], ref: Sequence[str]) -> tuple[int, int]:
    """Maximum exact-match unigram alignment, then fewest chunks.

    Exhaustive over the assignment choices of duplicated tokens with a node
    budget; beyond the budget the leftmost-first assignment is kept, which
    is still a maximum matching.
    """
    ref_positions: dict[str, list[int]] = {}
    for j, tok in enumerate(ref):
        ref_positions.setdefault(tok, []).append(j)
    slots = [(i, ref_positions[tok]) for i, tok in enumerate(pred) if tok in ref_positions]
    if not slots:
        return 0, 0

    budget = [METEOR_NODE_BUDGET]
    best = {"chunks": 0, "matches": -1}

    def search(idx: int, used: set[int], alignment: list[tuple[int, int]]):
        if budget[0] <= 0:
            return
        budget[0] -= 1
        if idx == len(slots):
            matches = len(alignment)
            if matches < best["matches"]:
                return
            chunks = _chunks_of(alignment)
            if matches > best["matches"] or chunks < best["chunks"]:
                best["matches"] = matches
                best["chunks"] = chunks
            return
        # even aligning every remaining token cannot beat the best
        if len(alignment) + (len(slots) - idx) < best["matches"]:
            return
        i, candidates = slots[idx]
        for j in candidates:
            if j in used:
                continue
            used.add(j)
            alignment.append((i, j))
            search(idx + 1, used, alignment)
            alignment.pop()
            used.remove(j)
        # leaving this occurrence unaligned can reduce fragmentation when a
        # duplicate appears later; the first dfs path above already reaches
        # the maximum match count, so the bound prunes most skip branches
        search(idx + 1, used, alignment)

    search(0, set(), [])
    return max(best["matches"], 0), best["chunks"]


def meteor_lite(pair: EvalPair) -> float:
    """Unigram F-mean (recall-weighted 9:1) with a fragmentation penalty of
    0.5 * (chunks / matches)^3; exact matching only; max over references."""
    pred = pair.prediction
    if not pred:
        return 0.0
    best = 0.0
    for ref in pair.references:
        if not ref:
            continue
        matches, chunks = _best_alignment_chunks(pred, ref)
        if matches == 0:
            continue
        p = matches / len(pred)
        r = matches / len(ref)
        f_mean = 10.0 * p * r / (r + 9.0 * p)
        penalty = 0.5 * (chunks / matches) ** 3
        best = max(best, f_mean * (1.0 - penalty))
    return best


def exact_match(pair: EvalPair) -> float:
    return 1.0 if any(pair.prediction == r for r in pair.references) else 0.0


METRICS = {
    "bleu4": bleu4,
    "rouge_l": rouge_l,
    "meteor_lite": meteor_lite,
    "exact_match": exact_match,
}


def corpus_eval(
    pairs: Sequence[tuple[str, EvalPair]],
    metric_names: Sequence[str] = ("bleu4", "rouge_l", "meteor_lite", "exact_match"),
) -> tuple[dict[str, float], list[dict]]:
    """Mean sentence-level scores plus one record per example, in input order."""
    if not pairs:
        raise ValueError("corpus_eval needs at least one pair")
    records = []
    for example_id, pair in pairs:
        rec = {"id": example_id}
        for name in metric_names:
            rec[name] = METRICS[name](pair)
        records.append(rec)
    summary = {
        name: sum(r[name] for r in records) / len(records) for name in metric_names
    }
    summary["count"] = len(records)
    return summary, records
