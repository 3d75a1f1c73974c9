"""Corpus-level caption metrics: BLEU-1..4, ROUGE-L and CIDEr.

All corpus aggregates use exactly rounded sums (``math.fsum``) so scores do
not depend on pair order.
"""

import logging
import math
from collections import Counter
from dataclasses import dataclass

from .errors import DataError

log = logging.getLogger(__name__)

METRIC_NAMES = ("BLEU-1", "BLEU-2", "BLEU-3", "BLEU-4", "ROUGE-L", "CIDEr")


@dataclass(frozen=True)
class EvalPair:
    image_id: str
    candidate: tuple
    references: tuple  # tuple of token tuples

    @classmethod
    def make(cls, image_id, candidate, references):
        refs = tuple(tuple(r) for r in references)
        if not refs or not all(refs):
            raise DataError(f"{image_id}: need at least one nonempty reference")
        return cls(image_id, tuple(candidate), refs)


def ngrams(tokens, n):
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_len(cand_len, refs):
    return min((abs(len(r) - cand_len), len(r)) for r in refs)[1]


def bleu(pairs, max_n=4):
    """Unsmoothed corpus BLEU-1..max_n with the standard brevity penalty."""
    if not pairs:
        raise DataError("no pairs to score")
    matches = [0] * max_n
    totals = [0] * max_n
    cand_len = ref_len = 0
    for p in pairs:
        cand_len += len(p.candidate)
        ref_len += _closest_ref_len(len(p.candidate), p.references)
        for k in range(1, max_n + 1):
            cand = ngrams(p.candidate, k)
            best = Counter()
            for ref in p.references:
                best |= ngrams(ref, k)
            matches[k - 1] += sum(min(c, best[g]) for g, c in cand.items())
            totals[k - 1] += max(0, len(p.candidate) - k + 1)
    if cand_len == 0:
        return [0.0] * max_n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    scores = []
    log_sum = 0.0
    for k in range(max_n):
        if matches[k] == 0 or totals[k] == 0:
            scores.extend([0.0] * (max_n - k))
            break
        log_sum += math.log(matches[k] / totals[k])
        scores.append(bp * math.exp(log_sum / (k + 1)))
    return scores


def lcs_length(a, b):
    if len(a) < len(b):
        a, b = b, a
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_pair(candidate, references, beta=1.2):
    best = 0.0
    for ref in references:
        lcs = lcs_length(candidate, ref)
        if lcs == 0:
            continue
        prec = lcs / len(candidate)
        rec = lcs / len(ref)
        f = (1 + beta**2) * prec * rec / (rec + beta**2 * prec)
        best = max(best, f)
    return best


def rouge_l(pairs, beta=1.2):
    if not pairs:
        raise DataError("no pairs to score")
    return math.fsum(rouge_l_pair(p.candidate, p.references, beta) for p in pairs) / len(pairs)


class CiderScorer:
    """CIDEr with document frequencies taken from the evaluation references.

    ``length_penalty`` enables the Gaussian length term (sigma 6) of the
    CIDEr-D variant; off by default.
    """

    def __init__(self, pairs, max_n=4, length_penalty=False, sigma=6.0):
        if not pairs:
            raise DataError("no pairs to score")
        self.max_n = max_n
        self.length_penalty = length_penalty
        self.sigma = sigma
        self.n_docs = len(pairs)
        self.df = Counter()
        for p in pairs:
            seen = set()
            for ref in p.references:
                for k in range(1, max_n + 1):
                    seen.update(ngrams(ref, k))
            self.df.update(seen)
        self.log_n = math.log(self.n_docs)
        if self.n_docs < 2:
            log.warning("CIDEr over a single pair is degenerate: every idf weight is zero")

    def _vector(self, tokens, k):
        return {g: c * (self.log_n - math.log(max(1.0, self.df[g]))) for g, c in ngrams(tokens, k).items()}

    @staticmethod
    def _cosine(u, v):
        nu = math.fsum(x * x for x in u.values())
        nv = math.fsum(x * x for x in v.values())
        if nu == 0 or nv == 0:
            return 0.0
        # one sqrt of the product keeps identical vectors at exactly 1
        return math.fsum(x * v.get(g, 0.0) for g, x in u.items()) / math.sqrt(nu * nv)

    def score_pair(self, pair):
        per_n = []
        for k in range(1, self.max_n + 1):
            cv = self._vector(pair.candidate, k)
            sims = []
            for ref in pair.references:
                s = self._cosine(cv, self._vector(ref, k))
                if self.length_penalty:
                    s *= math.exp(-((len(pair.candidate) - len(ref)) ** 2) / (2 * self.sigma**2))
                sims.append(s)
            per_n.append(math.fsum(sims) / len(sims))
        return 10.0 * math.fsum(per_n) / self.max_n


def cider(pairs, max_n=4, length_penalty=False):
    scorer = CiderScorer(pairs, max_n, length_penalty)
    if scorer.n_docs < 2:
        return 0.0
    return math.fsum(scorer.score_pair(p) for p in pairs) / len(pairs)


@dataclass
class MetricReport:
    bleu: tuple
    rouge_l: float
    cider: float
    n_pairs: int
    n_missing: int = 0

    def as_dict(self):
        d = {f"BLEU-{k + 1}": v for k, v in enumerate(self.bleu)}
        d["ROUGE-L"] = self.rouge_l
        d["CIDEr"] = self.cider
        return d

    def to_tsv(self):
        lines = [f"{name}\t{value:.6f}" for name, value in self.as_dict().items()]
        lines += [f"pairs\t{self.n_pairs}", f"missing\t{self.n_missing}"]
        return "\n".join(lines) + "\n"


def score_corpus(pairs, n_missing=0, length_penalty=False):
    return MetricReport(tuple(bleu(pairs)), rouge_l(pairs), cider(pairs, length_penalty=length_penalty),
                        len(pairs), n_missing)


def per_pair_scores(pairs, length_penalty=False):
    """Per-image BLEU-1..4, ROUGE-L and CIDEr (corpus idf) rows."""
    scorer = CiderScorer(pairs, length_penalty=length_penalty)
    rows = []
    for p in pairs:
        c = scorer.score_pair(p) if scorer.n_docs >= 2 else 0.0
        rows.append((p, bleu([p]), rouge_l_pair(p.candidate, p.references), c))
    return rows


def write_breakdown(rows, path, detok=" ".join):
    """One line per image: id, candidate, BLEU-1..4, ROUGE-L, CIDEr (tab-separated)."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for pair, b, r, c in rows:
            vals = "\t".join(f"{v:.6f}" for v in (*b, r, c))
            f.write(f"{pair.image_id}\t{detok(pair.candidate)}\t{vals}\n")
