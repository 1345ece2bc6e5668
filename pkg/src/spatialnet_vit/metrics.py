"""Caption metrics (BLEU, METEOR-lite, ROUGE-L, CIDEr) and VQA accuracy.

All functions are pure. Text is normalised by :func:`tokenize`: lowercase,
drop every character outside ``[a-z0-9]`` and whitespace, split on
whitespace.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError

BLEU_SMOOTHING = "add-one on zero n-gram precisions"
ROUGE_BETA2 = 1.44
CIDER_SCALE = 10.0
STEM_PREFIX_MIN = 4
CATEGORIES = ("count", "presence", "comparison", "urban-rural")
_CATEGORY_ALIASES = {
    "comparisons": "comparison",
    "urban/rural": "urban-rural",
    "rural/urban": "urban-rural",
    "urban_rural": "urban-rural",
    "rural-urban": "urban-rural",
}
_STRIP = re.compile(r"[^a-z0-9\s]")


def tokenize(text) -> list[str]:
    if not isinstance(text, str):
        text = " ".join(text)
    return _STRIP.sub("", text.lower()).split()


def _tokens(x) -> list[str]:
    return tokenize(x)


def ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


# -- BLEU --------------------------------------------------------------------

def closest_ref_length(cand_len: int, ref_lens: Iterable[int]) -> int:
    return min(ref_lens, key=lambda r: (abs(r - cand_len), r))


def bleu(candidate, references, max_n: int = 4, smoothing: bool = True) -> float:
    """Sentence BLEU-``max_n`` in percent.

    Clipped n-gram precisions are combined by a uniform geometric mean and
    scaled by the brevity penalty against the closest reference length.
    A zero precision becomes (0 + 1) / (total + 1) when ``smoothing`` is on.
    """
    if not 1 <= max_n <= 4:
        raise ContractError(f"max_n must be in 1..4, got {max_n}")
    cand = _tokens(candidate)
    refs = [_tokens(r) for r in references]
    if not refs:
        raise ContractError("bleu needs at least one reference")
    if not cand:
        return 0.0
    log_p = 0.0
    for n in range(1, max_n + 1):
        counts = ngrams(cand, n)
        ceiling: Counter = Counter()
        for ref in refs:
            ceiling |= ngrams(ref, n)
        clipped = sum(min(c, ceiling[g]) for g, c in counts.items())
        total = sum(counts.values())
        if clipped == 0:
            if not smoothing:
                return 0.0
            clipped, total = clipped + 1, total + 1
        log_p += math.log(clipped / total)
    c = len(cand)
    r = closest_ref_length(c, (len(ref) for ref in refs))
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return 100.0 * bp * math.exp(log_p / max_n)


# -- ROUGE-L -----------------------------------------------------------------

def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, references, beta2: float = ROUGE_BETA2) -> float:
    """Best LCS F-measure over the references, in percent (recall-weighted)."""
    cand = _tokens(candidate)
    if not cand:
        return 0.0
    best = 0.0
    for ref in map(_tokens, references):
        lcs = lcs_length(cand, ref)
        if lcs == 0:
            continue
        p, r = lcs / len(cand), lcs / len(ref)
        best = max(best, (1 + beta2) * p * r / (r + beta2 * p))
    return 100.0 * best


# -- CIDEr -------------------------------------------------------------------

@dataclass(frozen=True)
class CaptionExample:
    id: str
    candidate: list[str]
    references: list[list[str]]

    @classmethod
    def make(cls, id, candidate, references) -> CaptionExample:
        refs = [_tokens(r) for r in references]
        if not refs:
            raise ContractError(f"caption {id!r} has no references")
        return cls(str(id), _tokens(candidate), refs)


def _as_examples(corpus) -> list[CaptionExample]:
    out = []
    for i, item in enumerate(corpus):
        if isinstance(item, CaptionExample):
            out.append(item)
        elif isinstance(item, Mapping):
            out.append(CaptionExample.make(item.get("id", i), item["candidate"], item["references"]))
        else:
            cand, refs = item
            out.append(CaptionExample.make(i, cand, refs))
    return out


def document_frequencies(examples: Sequence[CaptionExample], n: int) -> Counter:
    df: Counter = Counter()
    for ex in examples:
        seen = set()
        for ref in ex.references:
            seen.update(ngrams(ref, n))
        df.update(seen)
    return df


def _tfidf(tokens, n, df, log_m) -> dict:
    return {g: tf * (log_m - math.log(max(1, df[g]))) for g, tf in ngrams(tokens, n).items()}


def _cosine(a: dict, b: dict) -> float:
    na = math.sqrt(sum(v * v for v in a.values()))
    nb = math.sqrt(sum(v * v for v in b.values()))
    if na == 0 or nb == 0:
        return 0.0
    return sum(v * b.get(g, 0.0) for g, v in a.items()) / (na * nb)


def cider_scores(corpus, max_n: int = 4) -> list[float]:
    """Per-image CIDEr; IDF is computed over the reference sets of ``corpus``."""
    examples = _as_examples(corpus)
    if not examples:
        raise ContractError("cider needs at least one image")
    log_m = math.log(len(examples))
    dfs = [document_frequencies(examples, n) for n in range(1, max_n + 1)]
    scores = []
    for ex in examples:
        per_n = []
        for n, df in zip(range(1, max_n + 1), dfs):
            cand = _tfidf(ex.candidate, n, df, log_m)
            sims = [_cosine(cand, _tfidf(ref, n, df, log_m)) for ref in ex.references]
            per_n.append(sum(sims) / len(sims))
        scores.append(CIDER_SCALE * sum(per_n) / max_n)
    return scores


def cider(corpus, max_n: int = 4) -> float:
    """Corpus CIDEr: mean per-image score, scaled by 10."""
    scores = cider_scores(corpus, max_n)
    return sum(scores) / len(scores)


# -- METEOR-lite ---------------------------------------------------------------

def stem(token: str) -> str:
    """Crude suffix stripper: ing/ed/es/s/ly endings, undoubling a final
    consonant left behind (running -> run)."""
    for suffix in ("ingly", "edly", "ings", "ing", "ed", "ly"):
        if token.endswith(suffix) and len(token) - len(suffix) >= 3:
            base = token[: -len(suffix)]
            if len(base) >= 4 and base[-1] == base[-2] and base[-1] not in "aeioulsz":
                base = base[:-1]
            return base
    if token.endswith("ies") and len(token) > 4:
        return token[:-3] + "y"
    if token.endswith("es") and token[:-2].endswith(("s", "x", "z", "ch", "sh")) and len(token) > 4:
        return token[:-2]
    if token.endswith("s") and not token.endswith("ss") and len(token) > 3:
        return token[:-1]
    return token


def stem_match(a: str, b: str) -> bool:
    if stem(a) == stem(b):
        return True
    short, long_ = sorted((a, b), key=len)
    return len(short) >= STEM_PREFIX_MIN and long_.startswith(short)


def align(cand: Sequence[str], ref: Sequence[str]) -> list[tuple[int, int]]:
    """Exact matches first, then stem matches. Among equal options a
    reference position that continues the previous token's match wins."""
    to_ref: dict[int, int] = {}
    used: set[int] = set()
    for stage in (lambda a, b: a == b, stem_match):
        for ci, tok in enumerate(cand):
            if ci in to_ref:
                continue
            options = [ri for ri, rt in enumerate(ref) if ri not in used and stage(tok, rt)]
            if not options:
                continue
            follow = to_ref.get(ci - 1, -2) + 1
            ri = follow if follow in options else options[0]
            to_ref[ci] = ri
            used.add(ri)
    return sorted(to_ref.items())


def count_chunks(pairs: Sequence[tuple[int, int]]) -> int:
    if not pairs:
        return 0
    chunks = 1
    for (c0, r0), (c1, r1) in zip(pairs, pairs[1:]):
        if not (c1 == c0 + 1 and r1 == r0 + 1):
            chunks += 1
    return chunks


def meteor_lite(candidate, references) -> float:
    """Unigram F-mean (recall-weighted 9:1) with a fragmentation penalty, in
    percent. Matching is exact or stem based; no synonym lexicon."""
    cand = _tokens(candidate)
    if not cand:
        return 0.0
    best = 0.0
    for ref in map(_tokens, references):
        pairs = align(cand, ref)
        m = len(pairs)
        if m == 0:
            continue
        p, r = m / len(cand), m / len(ref)
        fmean = 10 * p * r / (r + 9 * p)
        penalty = 0.5 * (count_chunks(pairs) / m) ** 3
        best = max(best, fmean * (1 - penalty))
    return 100.0 * best


# -- VQA accuracy ------------------------------------------------------------

def normalize_category(category: str) -> str:
    c = category.strip().lower()
    c = _CATEGORY_ALIASES.get(c, c)
    if c not in CATEGORIES:
        raise ContractError(f"unknown question category {category!r}; expected one of {CATEGORIES}")
    return c


@dataclass(frozen=True)
class VqaRecord:
    id: str
    category: str
    predicted: str
    truth: str

    def __post_init__(self):
        object.__setattr__(self, "category", normalize_category(self.category))
        if str(self.predicted).strip() == "" or str(self.truth).strip() == "":
            raise ContractError(f"record {self.id!r}: answers must be nonempty")

    @property
    def correct(self) -> bool:
        if self.category == "count":
            try:
                pred = max(0, int(np.rint(float(self.predicted))))
                return pred == int(np.rint(float(self.truth)))
            except ValueError:
                return False
        return tokenize(str(self.predicted)) == tokenize(str(self.truth))


def round_half_up(x: float, places: int = 2) -> float:
    """Round the shortest decimal form of ``x``, ties away from zero."""
    q = Decimal(1).scaleb(-places)
    return float(Decimal(repr(float(x))).quantize(q, rounding=ROUND_HALF_UP))


def average_accuracy(accuracies: Iterable[float]) -> float:
    """Unweighted mean computed exactly on the decimal forms of the inputs."""
    values = [Decimal(repr(float(a))) for a in accuracies]
    if not values:
        raise ContractError("cannot average zero categories")
    return float(sum(values) / len(values))


@dataclass
class MetricReport:
    bleu: dict[int, float] = field(default_factory=dict)
    meteor: float | None = None
    rouge_l: float | None = None
    cider: float | None = None
    categories: dict[str, float] = field(default_factory=dict)
    category_counts: dict[str, int] = field(default_factory=dict)
    average: float | None = None
    overall: float | None = None
    missing_categories: list[str] = field(default_factory=list)
    notes: dict[str, str] = field(default_factory=dict)

    def values(self) -> dict[str, float]:
        """Flat name -> number view used by the JSON and table writers."""
        out = {f"BLEU{n}": v for n, v in sorted(self.bleu.items())}
        for name, v in (("METEOR-lite", self.meteor), ("ROUGE-L", self.rouge_l), ("CIDEr", self.cider)):
            if v is not None:
                out[name] = v
        for c in CATEGORIES:
            if c in self.categories:
                out[c] = self.categories[c]
        if self.average is not None:
            out["Average"] = self.average
        if self.overall is not None:
            out["Overall"] = self.overall
        return out

    def to_dict(self) -> dict:
        d = {"metrics": self.values()}
        if self.category_counts:
            d["category_counts"] = dict(self.category_counts)
        if self.missing_categories:
            d["missing_categories"] = list(self.missing_categories)
            d["average_over_present_only"] = True
        if self.notes:
            d["notes"] = dict(self.notes)
        return d

    def table(self) -> str:
        rows = list(self.values().items())
        width = max((len(k) for k, _ in rows), default=6)
        lines = [f"{'metric':<{width}}  value"]
        lines += [f"{k:<{width}}  {v:.6g}" for k, v in rows]
        if self.missing_categories:
            lines.append(f"(Average over present categories; missing: {', '.join(self.missing_categories)})")
        return "\n".join(lines)


def vqa_accuracy(records: Iterable[VqaRecord]) -> MetricReport:
    """Per-category accuracy, their unweighted Average, and pooled Overall."""
    records = list(records)
    if not records:
        raise ContractError("vqa_accuracy needs at least one record")
    hits: Counter = Counter()
    totals: Counter = Counter()
    for rec in records:
        totals[rec.category] += 1
        hits[rec.category] += rec.correct
    present = [c for c in CATEGORIES if totals[c]]
    per_cat = {c: 100.0 * hits[c] / totals[c] for c in present}
    return MetricReport(
        categories=per_cat,
        category_counts={c: totals[c] for c in present},
        average=average_accuracy(per_cat[c] for c in present),
        overall=100.0 * sum(hits.values()) / len(records),
        missing_categories=[c for c in CATEGORIES if not totals[c]],
    )


def caption_report(corpus) -> MetricReport:
    """BLEU1-4, METEOR-lite and ROUGE-L averaged over images; corpus CIDEr."""
    examples = _as_examples(corpus)
    if not examples:
        raise ContractError("caption_report needs at least one image")

    def avg(fn):
        return sum(fn(ex) for ex in examples) / len(examples)

    return MetricReport(
        bleu={n: avg(lambda ex, n=n: bleu(ex.candidate, ex.references, n)) for n in range(1, 5)},
        meteor=avg(lambda ex: meteor_lite(ex.candidate, ex.references)),
        rouge_l=avg(lambda ex: rouge_l(ex.candidate, ex.references)),
        cider=cider(examples),
        notes={"bleu_smoothing": BLEU_SMOOTHING,
               "meteor": "exact + stem matching, no synonym lexicon",
               "cider_scale": "x10"},
    )


# -- files -------------------------------------------------------------------

def read_jsonl(path) -> list[dict]:
    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            out.append(json.loads(line))
        except json.JSONDecodeError as exc:
            raise ContractError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
    return out


def caption_examples(rows: Iterable[Mapping]) -> list[CaptionExample]:
    return [CaptionExample.make(r["id"], r["candidate"], r["references"]) for r in rows]


def vqa_records(rows: Iterable[Mapping]) -> list[VqaRecord]:
    return [VqaRecord(str(r["id"]), r["category"], str(r["predicted"]), str(r["truth"]))
            for r in rows]
