"""Caption quality metrics computed from scratch.

BLEU-1..4 (corpus-level, clipped modified precision, closest-reference
brevity penalty), ROUGE-L (LCS F-measure, beta=1.2, max over references)
and CIDEr-D (clipped TF-IDF cosine over 1..4-grams with a Gaussian length
penalty, x10). CIDEr-D doubles as the reward for self-critical training.

All functions take pre-tokenized captions (lists of tokens); ``tokenize``
is the shared normalizer for raw text.
"""

from __future__ import annotations

import math
import string
from collections import Counter, defaultdict

from capsight.errors import DataError

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)

CIDER_SIGMA = 6.0
CIDER_SCALE = 10.0
ROUGE_BETA = 1.2
MAX_N = 4


def tokenize(caption: str) -> list[str]:
    """Lowercase, strip ASCII punctuation, split on whitespace."""
    return caption.lower().translate(_PUNCT_TABLE).split()


def ngram_counts(tokens: list[str], max_n: int = MAX_N) -> Counter:
    """Counts of all 1..max_n-grams, keyed by token tuple."""
    counts: Counter = Counter()
    for n in range(1, max_n + 1):
        for i in range(len(tokens) - n + 1):
            counts[tuple(tokens[i:i + n])] += 1
    return counts


# -- BLEU ---------------------------------------------------------------------------


def bleu(candidates: list[list[str]], references: list[list[list[str]]],
         max_n: int = MAX_N) -> list[float]:
    """Corpus BLEU-1..max_n.

    ``references[i]`` is the reference set for ``candidates[i]``. Uses the
    closest-reference-length convention for the brevity penalty; exact 0.0
    and 1.0 at the degenerate ends (no epsilon smoothing).
    """
    if not candidates:
        raise DataError("BLEU needs at least one candidate")
    if len(candidates) != len(references):
        raise DataError(f"{len(candidates)} candidates vs {len(references)} reference sets")
    clipped = [0] * max_n
    total = [0] * max_n
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, references):
        if not refs:
            raise DataError("every candidate needs at least one reference")
        cand_len += len(cand)
        ref_len += min((abs(len(r) - len(cand)), len(r)) for r in refs)[1]
        cand_counts = ngram_counts(cand, max_n)
        max_ref: dict[tuple, int] = {}
        for ref in refs:
            for gram, count in ngram_counts(ref, max_n).items():
                if count > max_ref.get(gram, 0):
                    max_ref[gram] = count
        for gram, count in cand_counts.items():
            order = len(gram) - 1
            clipped[order] += min(count, max_ref.get(gram, 0))
        for n in range(1, max_n + 1):
            total[n - 1] += max(0, len(cand) - n + 1)

    if cand_len == 0:
        return [0.0] * max_n
    brevity = 1.0 if cand_len >= ref_len else math.exp(1.0 - ref_len / cand_len)
    scores = []
    log_sum = 0.0
    dead = False
    for n in range(max_n):
        if clipped[n] == 0 or total[n] == 0:
            dead = True
        if dead:
            scores.append(0.0)
            continue
        log_sum += math.log(clipped[n] / total[n])
        scores.append(brevity * math.exp(log_sum / (n + 1)))
    return scores


# -- ROUGE-L ------------------------------------------------------------------------


def _lcs_length(a: list[str], b: list[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for tok_a in a:
        current = [0]
        for j, tok_b in enumerate(b):
            if tok_a == tok_b:
                current.append(prev[j] + 1)
            else:
                current.append(max(prev[j + 1], current[j]))
        prev = current
    return prev[-1]


def rouge_l(candidate: list[str], references: list[list[str]],
            beta: float = ROUGE_BETA) -> float:
    """LCS-based F-measure, maximum over the reference set."""
    if not references:
        raise DataError("ROUGE-L needs at least one reference")
    best = 0.0
    for ref in references:
        lcs = _lcs_length(candidate, ref)
        if lcs == 0 or not candidate or not ref:
            continue
        precision = lcs / len(candidate)
        recall = lcs / len(ref)
        score = (1 + beta**2) * precision * recall / (recall + beta**2 * precision)
        best = max(best, score)
    return best


# -- CIDEr-D ------------------------------------------------------------------------


class CorpusIdf:
    """Inverse document frequencies of n-grams over a reference corpus.

    An n-gram's document frequency counts the images whose reference set
    contains it; idf = log(corpus size / max(1, df)).
    """

    def __init__(self, df: dict[tuple, int], n_images: int):
        self.df = dict(df)
        self.n_images = n_images

    def idf(self, gram: tuple) -> float:
        return math.log(self.n_images / max(1, self.df.get(gram, 0)))

    def to_json(self) -> dict:
        return {
            "n_images": self.n_images,
            "df": {" ".join(gram): count for gram, count in sorted(self.df.items())},
        }

    @classmethod
    def from_json(cls, doc: dict) -> "CorpusIdf":
        df = {tuple(key.split(" ")): int(count) for key, count in doc["df"].items()}
        return cls(df, int(doc["n_images"]))


def build_idf(references: list[list[list[str]]]) -> CorpusIdf:
    """Document frequencies from per-image reference sets."""
    if not references:
        raise DataError("cannot build idf statistics from an empty corpus")
    df: dict[tuple, int] = defaultdict(int)
    for refs in references:
        grams = set()
        for ref in refs:
            grams.update(ngram_counts(ref))
        for gram in grams:
            df[gram] += 1
    return CorpusIdf(df, len(references))


def _tfidf_vectors(counts: Counter, idf: CorpusIdf,
                   max_n: int) -> tuple[list[dict], list[float]]:
    vecs: list[dict] = [{} for _ in range(max_n)]
    norms = [0.0] * max_n
    for gram, count in counts.items():
        order = len(gram) - 1
        weight = count * idf.idf(gram)
        vecs[order][gram] = weight
        norms[order] += weight * weight
    return vecs, [math.sqrt(v) for v in norms]


def cider_d_single(candidate: list[str], references: list[list[str]], idf: CorpusIdf,
                   sigma: float = CIDER_SIGMA, scale: float = CIDER_SCALE,
                   max_n: int = MAX_N) -> float:
    """CIDEr-D for one candidate against its reference set."""
    if not references:
        raise DataError("CIDEr-D needs at least one reference")
    cand_vecs, cand_norms = _tfidf_vectors(ngram_counts(candidate, max_n), idf, max_n)
    score = 0.0
    for ref in references:
        ref_vecs, ref_norms = _tfidf_vectors(ngram_counts(ref, max_n), idf, max_n)
        penalty = math.exp(-((len(candidate) - len(ref)) ** 2) / (2.0 * sigma**2))
        sim_sum = 0.0
        for n in range(max_n):
            dot = 0.0
            for gram, weight in cand_vecs[n].items():
                ref_weight = ref_vecs[n].get(gram, 0.0)
                dot += min(weight, ref_weight) * ref_weight
            if cand_norms[n] > 0.0 and ref_norms[n] > 0.0:
                sim_sum += penalty * dot / (cand_norms[n] * ref_norms[n])
        score += sim_sum / max_n
    return scale * score / len(references)


def cider_d(candidates: list[list[str]], references: list[list[list[str]]],
            idf: CorpusIdf | None = None, sigma: float = CIDER_SIGMA,
            scale: float = CIDER_SCALE) -> tuple[float, list[float]]:
    """Corpus CIDEr-D: mean of per-image scores.

    The idf statistics default to the evaluation corpus's own references.
    """
    if not candidates:
        raise DataError("CIDEr-D needs at least one candidate")
    if len(candidates) != len(references):
        raise DataError(f"{len(candidates)} candidates vs {len(references)} reference sets")
    if idf is None:
        idf = build_idf(references)
    per_image = [cider_d_single(cand, refs, idf, sigma, scale)
                 for cand, refs in zip(candidates, references)]
    return sum(per_image) / len(per_image), per_image


def score_report(candidates: list[list[str]], references: list[list[list[str]]]) -> dict:
    """All metrics in one dict with Table-style column names (METEOR omitted)."""
    b = bleu(candidates, references)
    rouge = sum(rouge_l(c, r) for c, r in zip(candidates, references)) / len(candidates)
    cider, _ = cider_d(candidates, references)
    return {
        "B@1": b[0], "B@2": b[1], "B@3": b[2], "B@4": b[3],
        "R": rouge, "C": cider,
    }
