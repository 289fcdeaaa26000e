"""CIDEr-D, BLEU-4, ROUGE-L, 3D IoU and the IoU-gated m@kIoU."""
from __future__ import annotations

import csv
import io
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .objrep import Box3D

CIDER_SIGMA = 6.0
ROUGE_BETA = 1.2
IOU_THRESHOLDS = (0.25, 0.5)


@dataclass
class Entry:
    candidate: list[str]
    references: list[list[str]]
    pred_box: Box3D | None = None
    gt_box: Box3D | None = None

    def __post_init__(self):
        if not self.references:
            raise ValueError("an entry needs at least one reference")
        if (self.pred_box is None) != (self.gt_box is None):
            raise ValueError("pred_box and gt_box must be both present or both absent")


Corpus = Sequence[Entry]


def _norm(tokens) -> list[str]:
    return [str(t).lower() for t in tokens]


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# ------------------------------------------------------------------ CIDEr-D

def cider_d_scores(corpus: Corpus, sigma: float = CIDER_SIGMA, n_max: int = 4) -> list[float]:
    """Per-entry CIDEr-D (x10 scale, as in the reference implementation).

    Document frequencies come from the references of ``corpus`` itself.
    """
    if not corpus:
        raise ValueError("empty corpus")
    cands = [_norm(e.candidate) for e in corpus]
    refs = [[_norm(r) for r in e.references] for e in corpus]
    df: Counter = Counter()
    for rs in refs:
        seen = set()
        for r in rs:
            for n in range(1, n_max + 1):
                seen.update(ngrams(r, n))
        df.update(seen)
    log_n = math.log(float(len(corpus)))

    def vec(tokens):
        vs, norms = [], []
        for n in range(1, n_max + 1):
            v = {g: c * (log_n - math.log(max(1.0, df[g]))) for g, c in ngrams(tokens, n).items()}
            vs.append(v)
            norms.append(math.sqrt(sum(x * x for x in v.values())))
        return vs, norms

    scores = []
    for cand, rs in zip(cands, refs):
        if not cand:
            scores.append(0.0)
            continue
        cv, cn = vec(cand)
        total = 0.0
        for r in rs:
            rv, rn = vec(r)
            penalty = math.exp(-((len(cand) - len(r)) ** 2) / (2 * sigma ** 2))
            for n in range(n_max):
                val = sum(min(w, rv[n].get(g, 0.0)) * rv[n].get(g, 0.0) for g, w in cv[n].items())
                if cn[n] != 0 and rn[n] != 0:
                    val /= cn[n] * rn[n]
                total += val * penalty
        scores.append(total / n_max / len(rs) * 10.0)
    return scores


def cider_d(corpus: Corpus, sigma: float = CIDER_SIGMA) -> float:
    return float(np.mean(cider_d_scores(corpus, sigma)))


# ------------------------------------------------------------------- BLEU-4

def _closest_ref_len(c: int, refs: list[list[str]]) -> int:
    return min((abs(len(r) - c), len(r)) for r in refs)[1]


def bleu4(corpus: Corpus, n_max: int = 4) -> float:
    """Corpus BLEU: clipped n-gram precisions, geometric mean, brevity penalty."""
    if not corpus:
        raise ValueError("empty corpus")
    match = [0] * n_max
    total = [0] * n_max
    c_len = r_len = 0
    for e in corpus:
        cand = _norm(e.candidate)
        refs = [_norm(r) for r in e.references]
        c_len += len(cand)
        r_len += _closest_ref_len(len(cand), refs)
        for n in range(1, n_max + 1):
            cc = ngrams(cand, n)
            max_ref: Counter = Counter()
            for r in refs:
                max_ref |= ngrams(r, n)
            match[n - 1] += sum(min(c, max_ref[g]) for g, c in cc.items())
            total[n - 1] += sum(cc.values())
    if c_len == 0 or min(match) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(match, total)) / n_max
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return float(bp * math.exp(log_p))


# ------------------------------------------------------------------ ROUGE-L

def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_f(cand: Sequence[str], ref: Sequence[str], beta: float = ROUGE_BETA) -> float:
    lcs = lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(cand), lcs / len(ref)
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


def rouge_l_scores(corpus: Corpus, beta: float = ROUGE_BETA) -> list[float]:
    return [max(rouge_l_f(_norm(e.candidate), _norm(r), beta) for r in e.references) for e in corpus]


def rouge_l(corpus: Corpus, beta: float = ROUGE_BETA) -> float:
    if not corpus:
        raise ValueError("empty corpus")
    return float(np.mean(rouge_l_scores(corpus, beta)))


def bleu4_scores(corpus: Corpus) -> list[float]:
    """Sentence-level BLEU-4 (the corpus formula applied per entry); used for m@kIoU."""
    return [bleu4([e]) for e in corpus]


# --------------------------------------------------------------------- IoU

def iou_3d(a: Box3D, b: Box3D) -> float:
    """Axis-aligned intersection over union of two boxes."""
    ca, sa = np.asarray(a.center, float), np.asarray(a.size, float)
    cb, sb = np.asarray(b.center, float), np.asarray(b.size, float)
    lo = np.maximum(ca - sa / 2, cb - sb / 2)
    hi = np.minimum(ca + sa / 2, cb + sb / 2)
    inter = float(np.prod(np.clip(hi - lo, 0.0, None)))
    union = float(np.prod(sa) + np.prod(sb) - inter)
    if union <= 0:
        return 0.0
    return min(1.0, inter / union)  # rounding in hi - lo can overshoot for identical boxes


def m_at_k_iou(values: Sequence[float], ious: Sequence[float], k: float) -> float:
    """Mean of m_i * [iou_i > k]."""
    if len(values) != len(ious):
        raise ValueError(f"length mismatch: {len(values)} metric values vs {len(ious)} IoUs")
    if not values:
        raise ValueError("need at least one entry")
    m = np.asarray(values, float)
    u = (np.asarray(ious, float) > k).astype(float)
    return float(np.mean(m * u))


# ------------------------------------------------------------------ report

@dataclass
class MetricReport:
    cider: float
    bleu4: float
    rouge_l: float
    n_entries: int
    m_at_iou: dict[str, float] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    meteor: str = "unavailable"

    @property
    def cider_x100(self) -> float:
        """CIDEr-D on the x100 scale papers usually print (raw x10 score times 10)."""
        return self.cider * 10.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cider_x100"] = self.cider_x100
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self) -> str:
        flat = {k: v for k, v in self.to_dict().items() if not isinstance(v, dict)}
        flat.update({f"{k}": v for k, v in self.m_at_iou.items()})
        flat.update({f"extra.{k}": v for k, v in self.extra.items() if not isinstance(v, (dict, list))})
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(flat))
        w.writeheader()
        w.writerow(flat)
        return buf.getvalue()


def evaluate_corpus(corpus: Corpus, thresholds=IOU_THRESHOLDS) -> MetricReport:
    """All captioning metrics; m@kIoU only when every entry carries boxes."""
    cider_scores = cider_d_scores(corpus)
    rouge_scores = rouge_l_scores(corpus)
    report = MetricReport(cider=float(np.mean(cider_scores)), bleu4=bleu4(corpus),
                          rouge_l=float(np.mean(rouge_scores)), n_entries=len(corpus))
    if corpus and all(e.pred_box is not None for e in corpus):
        ious = [iou_3d(e.pred_box, e.gt_box) for e in corpus]
        bleu_scores = bleu4_scores(corpus)
        for k in thresholds:
            report.m_at_iou[f"cider@{k}"] = m_at_k_iou(cider_scores, ious, k)
            report.m_at_iou[f"bleu4@{k}"] = m_at_k_iou(bleu_scores, ious, k)
            report.m_at_iou[f"rouge_l@{k}"] = m_at_k_iou(rouge_scores, ious, k)
    return report
