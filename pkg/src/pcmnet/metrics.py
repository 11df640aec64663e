"""Corpus BLEU-4 and CIDEr-D.

Both scorers take :class:`EvalPair` records of pre-tokenised text.  CIDEr-D
document frequencies come from the evaluation references themselves, so
scores are self-consistent within a corpus but not comparable with numbers
produced by external toolkits on other corpora.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from pcmnet.errors import FormatError, InvalidArgumentError
from pcmnet.text import tokenize


@dataclass(frozen=True)
class EvalPair:
    image_id: str
    hypothesis: tuple[str, ...]
    references: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        if not any(self.references):
            raise InvalidArgumentError(f"{self.image_id}: needs at least one nonempty reference")

    @classmethod
    def from_text(cls, image_id: str, hypothesis: str, references: Sequence[str]) -> "EvalPair":
        return cls(image_id, tuple(tokenize(hypothesis)), tuple(tuple(tokenize(r)) for r in references))


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu4(pairs: Sequence[EvalPair], max_n: int = 4) -> float:
    """Corpus BLEU with clipped counts and closest-reference brevity penalty.

    An order with no matches contributes (0+1)/(total+1); a corpus with no
    unigram match at all scores exactly 0.
    """
    if not pairs:
        raise InvalidArgumentError("BLEU needs at least one hypothesis")
    matches = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for p in pairs:
        hyp = p.hypothesis
        hyp_len += len(hyp)
        # closest reference length, shorter one on ties
        ref_len += min((abs(len(r) - len(hyp)), len(r)) for r in p.references)[1]
        for n in range(1, max_n + 1):
            h = ngrams(hyp, n)
            best: Counter = Counter()
            for r in p.references:
                best |= ngrams(r, n)
            matches[n - 1] += sum(min(c, best[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    if matches[0] == 0:
        return 0.0
    log_p = 0.0
    for m, t in zip(matches, totals):
        log_p += math.log(m / t) if m > 0 else math.log(1.0 / (t + 1))
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return bp * math.exp(log_p / max_n)


def _tfidf(counts: Counter, df: Counter, log_n: float, max_n: int):
    vec = [dict() for _ in range(max_n)]
    norm = [0.0] * max_n
    for g, tf in counts.items():
        k = len(g) - 1
        w = tf * (log_n - math.log(max(1.0, df[g])))
        vec[k][g] = w
        norm[k] += w * w
    return vec, [math.sqrt(x) for x in norm]


def cider_d(pairs: Sequence[EvalPair], max_n: int = 4, sigma: float = 6.0) -> float:
    """Mean over images of the length-penalised, clipped tf-idf cosine, times 10."""
    if not pairs:
        raise InvalidArgumentError("CIDEr needs at least one image")
    if not any(any(p.references) for p in pairs):
        raise InvalidArgumentError("CIDEr needs a nonempty reference corpus")

    def counts(tokens):
        c: Counter = Counter()
        for n in range(1, max_n + 1):
            c.update(ngrams(tokens, n))
        return c

    ref_counts = [[counts(r) for r in p.references] for p in pairs]
    df: Counter = Counter()
    for refs in ref_counts:
        df.update(set().union(*refs))
    log_n = math.log(float(len(pairs)))

    scores = []
    for p, refs in zip(pairs, ref_counts):
        hv, hn = _tfidf(counts(p.hypothesis), df, log_n, max_n)
        h_len = max(len(p.hypothesis) - 1, 0)
        total = np.zeros(max_n)
        for r_tokens, rc in zip(p.references, refs):
            rv, rn = _tfidf(rc, df, log_n, max_n)
            delta = h_len - max(len(r_tokens) - 1, 0)
            for k in range(max_n):
                val = sum(min(w, rv[k].get(g, 0.0)) * rv[k].get(g, 0.0) for g, w in hv[k].items())
                if hn[k] != 0 and rn[k] != 0:
                    val /= hn[k] * rn[k]
                total[k] += val * math.exp(-(delta ** 2) / (2 * sigma ** 2))
        scores.append(total.mean() / len(refs) * 10.0)
    return float(np.mean(scores))


def read_eval_file(path) -> list[EvalPair]:
    """Lines of ``image_id<TAB>hypothesis<TAB>ref1|ref2|...``; ``#`` lines are comments."""
    pairs = []
    offset = 0
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if line.strip() and not line.startswith("#"):
            fields = line.split("\t")
            if len(fields) != 3:
                raise FormatError(f"{path}: line {lineno} needs 3 tab-separated fields", offset=offset)
            pairs.append(EvalPair.from_text(fields[0], fields[1], fields[2].split("|")))
        offset += len(line.encode()) + 1
    return pairs


def write_eval_file(path, rows, header: str = "") -> None:
    Path(path).write_text(header + "".join(f"{i}\t{h}\t{'|'.join(refs)}\n" for i, h, refs in rows))
