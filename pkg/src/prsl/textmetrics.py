"""Caption scoring: BLEU, ROUGE-L, METEOR (exact match), CIDEr and greedy
embedding alignment (the BERTScore matching rule over a pluggable table).

Every scorer takes pre-tokenized input (see ``tokenize``) and returns a
``MetricScore``.
"""

from __future__ import annotations

import math
import string
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import InvalidInputError

__all__ = [
    "CorpusStats",
    "EmbeddingTable",
    "MetricScore",
    "best_reference",
    "bleu",
    "cider",
    "greedy_align_score",
    "lcs_length",
    "load_embedding_table",
    "meteor_exact",
    "ngram_counts",
    "random_embedding_table",
    "rouge_l",
    "save_embedding_table",
    "tfidf_vector",
    "threshold_proportion",
    "tokenize",
]


@dataclass(frozen=True)
class MetricScore:
    value: float
    metric: str
    components: dict = field(default_factory=dict)
    degenerate: bool = False


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip leading/trailing punctuation."""
    tokens = (tok.strip(string.punctuation) for tok in text.lower().split())
    return [tok for tok in tokens if tok]


def ngram_counts(tokens, n: int) -> Counter:
    if n < 1:
        raise ValueError(f"n-gram order must be >= 1, got {n}")
    tokens = tuple(tokens)
    return Counter(tokens[i:i + n] for i in range(len(tokens) - n + 1))


# -- BLEU ---------------------------------------------------------------------

def bleu(candidate, references, max_n: int = 4, weights=None, smoothing: float = 0.0) -> MetricScore:
    """Corpus-free sentence BLEU with clipped counts and closest-length brevity penalty.

    With ``smoothing > 0`` a zero match count at order n is replaced by
    ``smoothing`` (add-epsilon on the numerator only).
    """
    references = [list(r) for r in references]
    if not references or not any(references):
        raise InvalidInputError("BLEU needs at least one non-empty reference")
    weights = [1.0 / max_n] * max_n if weights is None else list(weights)
    if len(weights) != max_n:
        raise ValueError("need one weight per n-gram order")
    cand = list(candidate)
    c = len(cand)
    if c == 0:
        return MetricScore(0.0, "bleu", {"precisions": [0.0] * max_n}, degenerate=True)

    precisions, matched, totals = [], [], []
    for n in range(1, max_n + 1):
        cand_counts = ngram_counts(cand, n)
        max_ref = Counter()
        for ref in references:
            for gram, count in ngram_counts(ref, n).items():
                max_ref[gram] = max(max_ref[gram], count)
        clipped = sum(min(count, max_ref[gram]) for gram, count in cand_counts.items())
        total = max(0, c - n + 1)
        matched.append(clipped)
        totals.append(total)
        if total == 0:
            precisions.append(0.0)
        elif clipped == 0 and smoothing > 0:
            precisions.append(smoothing / total)
        else:
            precisions.append(clipped / total)

    # closest reference length, shorter one on ties
    r = min((abs(len(ref) - c), len(ref)) for ref in references)[1]
    bp = math.exp(min(0.0, 1.0 - r / c))
    if any(p == 0.0 for p, w in zip(precisions, weights) if w > 0):
        value = 0.0
    else:
        value = bp * math.exp(sum(w * math.log(p) for p, w in zip(precisions, weights) if w > 0))
    comps = {"precisions": precisions, "matches": matched, "totals": totals,
             "brevity_penalty": bp, "ref_length": r, "cand_length": c}
    return MetricScore(min(1.0, value), "bleu", comps)


# -- ROUGE-L ------------------------------------------------------------------

def lcs_length(a, b) -> int:
    a, b = list(a), list(b)
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b, start=1):
            cur.append(prev[j - 1] + 1 if x == y else max(prev[j], cur[j - 1]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference, beta: float = 1.0) -> MetricScore:
    cand, ref = list(candidate), list(reference)
    if not ref:
        raise InvalidInputError("ROUGE-L needs a non-empty reference")
    if not cand:
        return MetricScore(0.0, "rougeL", {"precision": 0.0, "recall": 0.0, "lcs": 0}, True)
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return MetricScore(0.0, "rougeL", {"precision": 0.0, "recall": 0.0, "lcs": 0})
    p, r = lcs / len(cand), lcs / len(ref)
    f = (1 + beta**2) * p * r / (r + beta**2 * p)
    return MetricScore(f, "rougeL", {"precision": p, "recall": r, "lcs": lcs})


# -- METEOR (exact-match stage) ---------------------------------------------

def _meteor_alignment(cand: tuple, ref: tuple) -> tuple[int, int]:
    """(matches, chunks) of an exact-match alignment maximizing matches, then
    minimizing chunks.  Exhaustive DP over candidate positions."""
    positions = {}
    for j, tok in enumerate(ref):
        positions.setdefault(tok, []).append(j)

    @lru_cache(maxsize=None)
    def best(i: int, prev: int, used: int) -> tuple[int, int]:
        # returns (matches, -chunks) for cand[i:], given the previous
        # candidate token's reference position (-1 if unmatched)
        if i == len(cand):
            return (0, 0)
        options = [best(i + 1, -1, used)]
        for j in positions.get(cand[i], ()):
            if used >> j & 1:
                continue
            m, neg_chunks = best(i + 1, j, used | 1 << j)
            new_chunk = 0 if (prev >= 0 and j == prev + 1) else 1
            options.append((m + 1, neg_chunks - new_chunk))
        return max(options)

    m, neg_chunks = best(0, -1, 0)
    return m, -neg_chunks


def meteor_exact(candidate, reference, alpha: float = 0.9, beta: float = 3.0,
                 gamma: float = 0.5) -> MetricScore:
    """Exact-match METEOR: ``Fmean * (1 - gamma * (chunks / m) ** beta)``.

    ``Fmean = P R / (alpha P + (1 - alpha) R)``, i.e. ``10PR / (R + 9P)``
    for the default ``alpha = 0.9``.
    """
    cand, ref = tuple(candidate), tuple(reference)
    if not ref:
        raise InvalidInputError("METEOR needs a non-empty reference")
    if not cand:
        return MetricScore(0.0, "meteor", {"matches": 0, "chunks": 0}, True)
    m, chunks = _meteor_alignment(cand, ref)
    if m == 0:
        return MetricScore(0.0, "meteor", {"matches": 0, "chunks": 0})
    p, r = m / len(cand), m / len(ref)
    f_mean = p * r / (alpha * p + (1 - alpha) * r)
    penalty = gamma * (chunks / m) ** beta
    return MetricScore(
        f_mean * (1 - penalty),
        "meteor",
        {"matches": m, "chunks": chunks, "precision": p, "recall": r,
         "f_mean": f_mean, "penalty": penalty},
    )


# -- CIDEr --------------------------------------------------------------------

@dataclass(frozen=True)
class CorpusStats:
    """Document frequencies of 1..max_n-grams over reference sets (one per image)."""

    num_docs: int
    doc_freq: dict
    max_n: int = 4

    @classmethod
    def build(cls, reference_sets, max_n: int = 4) -> "CorpusStats":
        doc_freq = Counter()
        count = 0
        for refs in reference_sets:
            count += 1
            grams = set()
            for ref in refs:
                for n in range(1, max_n + 1):
                    grams.update(ngram_counts(ref, n))
            doc_freq.update(grams)
        if count == 0:
            raise InvalidInputError("corpus statistics need at least one document")
        return cls(count, dict(doc_freq), max_n)

    def idf(self, gram: tuple) -> float:
        # unseen n-grams take df = 1, the largest IDF
        return math.log(self.num_docs / max(1, self.doc_freq.get(gram, 0)))


def tfidf_vector(tokens, n: int, stats: CorpusStats) -> dict:
    if not 1 <= n <= stats.max_n:
        raise ValueError(f"n must lie in 1..{stats.max_n}")
    counts = ngram_counts(tokens, n)
    total = sum(counts.values())
    if total == 0:
        return {}
    return {g: (c / total) * stats.idf(g) for g, c in counts.items()}


def _cosine(u: dict, v: dict) -> float:
    nu = math.sqrt(sum(x * x for x in u.values()))
    nv = math.sqrt(sum(x * x for x in v.values()))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    dot = sum(x * v.get(g, 0.0) for g, x in u.items())
    return dot / (nu * nv)


def cider(candidate, references, stats: CorpusStats) -> MetricScore:
    """Plain CIDEr (no length penalty), uniform over n = 1..max_n, times 10."""
    references = [list(r) for r in references]
    if not references:
        raise InvalidInputError("CIDEr needs at least one reference")
    per_n = []
    for n in range(1, stats.max_n + 1):
        vc = tfidf_vector(candidate, n, stats)
        per_n.append(sum(_cosine(vc, tfidf_vector(r, n, stats)) for r in references) / len(references))
    value = 10.0 * sum(per_n) / len(per_n)
    return MetricScore(min(10.0, value), "cider", {"per_n": per_n}, degenerate=not list(candidate))


# -- greedy embedding alignment ----------------------------------------------

@dataclass
class EmbeddingTable:
    vectors: dict
    dim: int
    oov: str = "error"  # or "zero"

    def __post_init__(self):
        if self.oov not in ("error", "zero"):
            raise ValueError("oov policy must be 'error' or 'zero'")
        for tok, vec in self.vectors.items():
            vec = np.asarray(vec, dtype=np.float64)
            if vec.shape != (self.dim,):
                raise InvalidInputError(f"embedding for {tok!r} has shape {vec.shape}")
            self.vectors[tok] = vec

    def lookup(self, tokens) -> np.ndarray:
        rows = []
        for tok in tokens:
            if tok in self.vectors:
                rows.append(self.vectors[tok])
            elif self.oov == "zero":
                rows.append(np.zeros(self.dim))
            else:
                raise InvalidInputError(f"token {tok!r} not in embedding table")
        return np.array(rows).reshape(len(rows), self.dim)


def random_embedding_table(vocabulary, dim: int = 16, seed: int = 0, oov: str = "zero") -> EmbeddingTable:
    """Deterministic Gaussian embeddings; order of ``vocabulary`` does not matter."""
    vectors = {}
    for tok in sorted(set(vocabulary)):
        # per-token stream keyed by the token bytes, so tables agree across vocabularies
        key = [seed, *tok.encode()]
        vectors[tok] = np.random.default_rng(key).normal(size=dim)
    return EmbeddingTable(vectors, dim, oov)


def load_embedding_table(path, oov: str = "error") -> EmbeddingTable:
    """Read ``dim D`` then ``token v1 ... vD`` lines."""
    with open(path) as fh:
        lines = [ln.split() for ln in fh if ln.strip()]
    if not lines or len(lines[0]) != 2 or lines[0][0] != "dim":
        raise InvalidInputError("embedding file must start with 'dim D'")
    dim = int(lines[0][1])
    vectors = {}
    for parts in lines[1:]:
        if len(parts) != dim + 1:
            raise InvalidInputError(f"expected {dim} values for token {parts[0]!r}")
        vectors[parts[0]] = np.array([float(v) for v in parts[1:]])
    return EmbeddingTable(vectors, dim, oov)


def save_embedding_table(table: EmbeddingTable, path) -> None:
    with open(path, "w") as fh:
        fh.write(f"dim {table.dim}\n")
        for tok in sorted(table.vectors):
            fh.write(tok + " " + " ".join(repr(float(v)) for v in table.vectors[tok]) + "\n")


def greedy_align_score(candidate, reference, table: EmbeddingTable) -> MetricScore:
    """Each token matched to its most cosine-similar counterpart; F1 of the means."""
    cand, ref = list(candidate), list(reference)
    if not cand or not ref:
        return MetricScore(0.0, "align", {"precision": 0.0, "recall": 0.0}, True)
    c, r = table.lookup(cand), table.lookup(ref)
    c = c / np.maximum(np.linalg.norm(c, axis=1, keepdims=True), 1e-12)
    r = r / np.maximum(np.linalg.norm(r, axis=1, keepdims=True), 1e-12)
    sim = c @ r.T
    precision = float(sim.max(axis=1).mean())
    recall = float(sim.max(axis=0).mean())
    f1 = 0.0 if precision + recall <= 0 else 2 * precision * recall / (precision + recall)
    return MetricScore(float(np.clip(f1, 0.0, 1.0)), "align",
                       {"precision": precision, "recall": recall})


# -- aggregation ---------------------------------------------------------------

def best_reference(scorer, candidate, references, **kwargs) -> MetricScore:
    """Apply a single-reference scorer to each reference and keep the best."""
    scores = [scorer(candidate, ref, **kwargs) for ref in references if list(ref)]
    if not scores:
        raise InvalidInputError("no non-empty references")
    return max(scores, key=lambda s: s.value)


def threshold_proportion(scores, threshold: float) -> float:
    """Fraction of ``scores`` strictly below ``threshold``."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise InvalidInputError("threshold_proportion needs at least one score")
    return float(np.count_nonzero(scores < threshold) / scores.size)
