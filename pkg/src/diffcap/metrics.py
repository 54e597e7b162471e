"""Corpus-level BLEU@4, ROUGE-L and CIDEr-D.

A corpus maps an id to ``(hypothesis, [references...])`` where each caption
is a string (tokenized with :func:`diffcap.textcodec.tokenize`) or an
already tokenized list of words.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from pathlib import Path
from typing import Mapping, Sequence, Union

from .errors import EvalError
from .textcodec import tokenize

Caption = Union[str, Sequence[str]]
Corpus = Mapping[str, tuple]


def _words(c: Caption) -> list:
    return tokenize(c) if isinstance(c, str) else list(c)


def _prepare(corpus: Corpus):
    if not corpus:
        raise EvalError("empty evaluation corpus")
    out = {}
    for key, (hyp, refs) in corpus.items():
        if isinstance(refs, str) or not refs:
            raise EvalError(f"id {key!r} needs a non-empty list of references")
        out[key] = (_words(hyp), [_words(r) for r in refs])
    return out


def ngrams(words: Sequence[str], n: int) -> Counter:
    return Counter(tuple(words[i:i + n]) for i in range(len(words) - n + 1))


def bleu4(corpus: Corpus, smooth: bool = False) -> float:
    """Corpus BLEU with clipped 1-4-gram precisions and brevity penalty.

    Reference length is the closest reference length per hypothesis (shorter
    wins ties). ``smooth`` adds one to numerator and denominator for n > 1.
    """
    data = _prepare(corpus)
    matches = [0] * 4
    totals = [0] * 4
    hyp_len = ref_len = 0
    for hyp, refs in data.values():
        hyp_len += len(hyp)
        ref_len += min((abs(len(r) - len(hyp)), len(r)) for r in refs)[1]
        for n in range(1, 5):
            h = ngrams(hyp, n)
            best = Counter()
            for r in refs:
                best |= ngrams(r, n)
            matches[n - 1] += sum(min(c, best[g]) for g, c in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    if hyp_len == 0:
        return 0.0
    log_p = 0.0
    for n in range(4):
        m, t = matches[n], totals[n]
        if smooth and n > 0:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        log_p += math.log(m / t) / 4
    bp = 1.0 if hyp_len > ref_len else math.exp(1 - ref_len / hyp_len)
    return bp * math.exp(log_p)


def lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l_sentence(hyp: Sequence[str], ref: Sequence[str], beta: float = 1.2) -> float:
    if not hyp or not ref:
        return 0.0
    lcs = lcs_length(hyp, ref)
    if lcs == 0:
        return 0.0
    p, r = lcs / len(hyp), lcs / len(ref)
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


def rouge_l(corpus: Corpus, beta: float = 1.2) -> float:
    """Mean over ids of the best LCS F-measure among that id's references."""
    data = _prepare(corpus)
    scores = [max(rouge_l_sentence(h, r, beta) for r in refs) for h, refs in data.values()]
    return sum(scores) / len(scores)


def _cider_vec(counts: Counter, df: Counter, log_n: float):
    vec = [dict() for _ in range(4)]
    norm = [0.0] * 4
    for g, tf in counts.items():
        n = len(g) - 1
        w = tf * (log_n - math.log(max(1.0, df[g])))
        vec[n][g] = w
        norm[n] += w * w
    return vec, [math.sqrt(x) for x in norm]


def _all_ngrams(words):
    c = Counter()
    for n in range(1, 5):
        c.update(ngrams(words, n))
    return c


def cider_scores(corpus: Corpus, sigma: float = 6.0) -> dict:
    """Per-id CIDEr-D (already scaled by 10).

    Document frequencies come from the references: one count per id for
    every n-gram appearing in any of its references.
    """
    data = _prepare(corpus)
    if len(data) < 2:
        raise EvalError("CIDEr needs at least two ids for document frequencies")
    df = Counter()
    for _, refs in data.values():
        seen = set()
        for r in refs:
            seen.update(_all_ngrams(r))
        df.update(seen)
    log_n = math.log(len(data))
    out = {}
    for key, (hyp, refs) in data.items():
        hv, hn = _cider_vec(_all_ngrams(hyp), df, log_n)
        total = [0.0] * 4
        for r in refs:
            rv, rn = _cider_vec(_all_ngrams(r), df, log_n)
            delta = len(hyp) - len(r)
            for n in range(4):
                val = sum(min(w, rv[n].get(g, 0.0)) * rv[n].get(g, 0.0) for g, w in hv[n].items())
                if hn[n] and rn[n]:
                    val /= hn[n] * rn[n]
                else:
                    val = 0.0
                total[n] += val * math.exp(-(delta ** 2) / (2 * sigma ** 2))
        out[key] = 10.0 * sum(total) / 4 / len(refs)
    return out


def cider(corpus: Corpus, sigma: float = 6.0) -> float:
    scores = cider_scores(corpus, sigma)
    return sum(scores.values()) / len(scores)


def evaluate(corpus: Corpus) -> dict:
    out = {"bleu4": bleu4(corpus), "rouge_l": rouge_l(corpus)}
    out["cider"] = cider(corpus) if len(corpus) >= 2 else None
    out["n_ids"] = len(corpus)
    return out


def read_jsonl_captions(path) -> dict:
    """video_id -> list of captions, preserving file order."""
    out: dict = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            out.setdefault(str(obj["video_id"]), []).append(str(obj["caption"]))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise EvalError(f"{path}:{lineno}: malformed line ({exc})") from exc
    return out


def corpus_from_files(hyp_path, ref_path) -> dict:
    hyps = read_jsonl_captions(hyp_path)
    refs = read_jsonl_captions(ref_path)
    if not hyps:
        raise EvalError(f"no hypotheses in {hyp_path}")
    missing = sorted(set(hyps) - set(refs))
    if missing:
        raise EvalError(f"hypothesis ids without references: {', '.join(missing)}")
    for key, h in hyps.items():
        if len(h) != 1:
            raise EvalError(f"id {key!r} has {len(h)} hypotheses, expected 1")
    return {key: (h[0], refs[key]) for key, h in hyps.items()}
