"""Corpus-level caption quality metrics over token-id sequences.

These operate directly on discrete unit or text tokens (no transcription
step): BLEU-4 with the closest-reference brevity penalty and no smoothing,
ROUGE-L as an LCS F-measure with beta_sq = 1.2 recall weighting, and a
tf-idf n-gram cosine consensus score scaled by 10 with
idf = log(corpus_size / max(1, document_frequency)).
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

__all__ = ["EvalPair", "bleu4", "rouge_l", "cider", "MetricReport", "format_metric_report"]

MAX_N = 4
ROUGE_BETA_SQ = 1.2
CIDER_SCALE = 10.0


@dataclass(frozen=True)
class EvalPair:
    """One hypothesis token sequence and its reference sequences."""

    hypothesis: tuple[int, ...]
    references: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "hypothesis", tuple(self.hypothesis))
        object.__setattr__(self, "references", tuple(tuple(r) for r in self.references))
        if not self.references:
            raise ValueError("EvalPair needs at least one reference")


def _ngrams(tokens: Sequence[int], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _check_corpus(corpus: Sequence[EvalPair]) -> None:
    if not corpus:
        raise ValueError("metric needs a nonempty corpus")


def bleu4(corpus: Sequence[EvalPair]) -> float:
    """Corpus-level BLEU with n = 1..4 clipped precisions.

    The effective reference length per pair is the reference length closest
    to the hypothesis length (ties to the shorter). No smoothing: a zero
    numerator at any order zeroes the score.
    """
    _check_corpus(corpus)
    clipped = [0] * MAX_N
    totals = [0] * MAX_N
    hyp_len = 0
    ref_len = 0
    for pair in corpus:
        hyp = pair.hypothesis
        c = len(hyp)
        hyp_len += c
        ref_len += min((abs(len(r) - c), len(r)) for r in pair.references)[1]
        for n in range(1, MAX_N + 1):
            counts = _ngrams(hyp, n)
            if not counts:
                continue
            max_ref: Counter = Counter()
            for ref in pair.references:
                for gram, cnt in _ngrams(ref, n).items():
                    if cnt > max_ref[gram]:
                        max_ref[gram] = cnt
            totals[n - 1] += sum(counts.values())
            clipped[n - 1] += sum(min(cnt, max_ref[gram]) for gram, cnt in counts.items())
    if hyp_len == 0 or any(c == 0 for c in clipped):
        return 0.0
    log_precision = sum(math.log(clipped[i] / totals[i]) for i in range(MAX_N)) / MAX_N
    brevity = math.exp(1.0 - ref_len / hyp_len) if hyp_len <= ref_len else 1.0
    return brevity * math.exp(log_precision)


def _lcs_len(a: Sequence[int], b: Sequence[int]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0] * (len(b) + 1)
        for j, y in enumerate(b, start=1):
            cur[j] = prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1])
        prev = cur
    return prev[-1]


def rouge_l(corpus: Sequence[EvalPair], beta_sq: float = ROUGE_BETA_SQ) -> float:
    """Mean over the corpus of the best per-reference LCS F-measure."""
    _check_corpus(corpus)
    total = 0.0
    for pair in corpus:
        best = 0.0
        for ref in pair.references:
            if not pair.hypothesis or not ref:
                continue
            lcs = _lcs_len(pair.hypothesis, ref)
            if lcs == 0:
                continue
            precision = lcs / len(pair.hypothesis)
            recall = lcs / len(ref)
            f_score = (1.0 + beta_sq) * precision * recall / (recall + beta_sq * precision)
            best = max(best, f_score)
        total += best
    return total / len(corpus)


def _tfidf_vectors(tokens: Sequence[int], idf: list[dict]) -> tuple[list[dict], list[float]]:
    vecs: list[dict] = []
    norms: list[float] = []
    for n in range(1, MAX_N + 1):
        vec = {
            gram: cnt * idf[n - 1].get(gram, idf[n - 1]["__unseen__"])
            for gram, cnt in _ngrams(tokens, n).items()
        }
        vecs.append(vec)
        norms.append(math.sqrt(sum(v * v for v in vec.values())))
    return vecs, norms


def cider(corpus: Sequence[EvalPair]) -> float:
    """Consensus score: tf-idf n-gram cosine against each reference, x10.

    Document frequency counts, per n-gram, the number of corpus items whose
    reference set contains it; similarities are averaged over references and
    over n = 1..4, then over the corpus.
    """
    _check_corpus(corpus)
    m = len(corpus)
    df: list[Counter] = [Counter() for _ in range(MAX_N)]
    for pair in corpus:
        for n in range(1, MAX_N + 1):
            seen = set()
            for ref in pair.references:
                seen.update(_ngrams(ref, n).keys())
            for gram in seen:
                df[n - 1][gram] += 1
    idf = []
    for n in range(MAX_N):
        table = {gram: math.log(m / max(1, d)) for gram, d in df[n].items()}
        table["__unseen__"] = math.log(m)  # df = 0 for n-grams absent from all references
        idf.append(table)

    total = 0.0
    for pair in corpus:
        hyp_vecs, hyp_norms = _tfidf_vectors(pair.hypothesis, idf)
        pair_score = 0.0
        for ref in pair.references:
            ref_vecs, ref_norms = _tfidf_vectors(ref, idf)
            for n in range(MAX_N):
                if hyp_norms[n] == 0.0 or ref_norms[n] == 0.0:
                    continue
                dot = sum(
                    w * ref_vecs[n][gram]
                    for gram, w in hyp_vecs[n].items()
                    if gram in ref_vecs[n]
                )
                pair_score += dot / (hyp_norms[n] * ref_norms[n])
        total += CIDER_SCALE * pair_score / (MAX_N * len(pair.references))
    return total / m


@dataclass(frozen=True)
class MetricReport:
    n_pairs: int
    bleu4: float
    rouge_l: float
    cider: float


def score_corpus(corpus: Sequence[EvalPair]) -> MetricReport:
    return MetricReport(
        n_pairs=len(corpus),
        bleu4=bleu4(corpus),
        rouge_l=rouge_l(corpus),
        cider=cider(corpus),
    )


def format_metric_report(rep: MetricReport) -> str:
    lines = [
        f"{'metric':<12}{'value':>12}",
        f"{'pairs':<12}{rep.n_pairs:>12}",
        f"{'bleu4':<12}{rep.bleu4:>12.6f}",
        f"{'rouge_l':<12}{rep.rouge_l:>12.6f}",
        f"{'cider':<12}{rep.cider:>12.6f}",
        "",
        f"n_pairs={rep.n_pairs}",
        f"bleu4={rep.bleu4:.10f}",
        f"rouge_l={rep.rouge_l:.10f}",
        f"cider={rep.cider:.10f}",
    ]
    return "\n".join(lines)
