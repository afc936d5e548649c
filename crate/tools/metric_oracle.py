#!/usr/bin/env python3
"""Independent reference values for the evaluation metrics.

Reads `hypothesis<TAB>reference[<TAB>reference...]` lines and prints
`key=value` records. BLEU, ROUGE-L and Distinct use exact rational
arithmetic; CIDEr-D expands the tf-idf vectors term by term.

When the optional packages are importable the script also cross-checks:
  nltk            corpus_bleu
  pycocoevalcap   CiderScorer (CIDEr-D)
  lexical_diversity  mtld

Usage: metric_oracle.py CORPUS.tsv [--check]
"""

import math
import sys
from collections import Counter
from fractions import Fraction


def tokens(s):
    s = "".join(c for c in s if c.isalnum() or c.isspace()).lower()
    return s.split()


def load(path):
    items = []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            cols = line.rstrip("\n").split("\t")
            items.append((tokens(cols[0]), [tokens(c) for c in cols[1:]]))
    return items


def grams(toks, n):
    return Counter(tuple(toks[i : i + n]) for i in range(len(toks) - n + 1))


def bleu(items, n_max):
    matched = [0] * n_max
    total = [0] * n_max
    c_len = r_len = 0
    for hyp, refs in items:
        c_len += len(hyp)
        # Closest reference length; ties go to the shorter reference.
        r_len += min((abs(len(r) - len(hyp)), len(r)) for r in refs)[1]
        for n in range(1, n_max + 1):
            h = grams(hyp, n)
            best = Counter()
            for r in refs:
                for g, c in grams(r, n).items():
                    best[g] = max(best[g], c)
            matched[n - 1] += sum(min(c, best[g]) for g, c in h.items())
            total[n - 1] += max(len(hyp) - n + 1, 0)
    if c_len == 0 or any(m == 0 for m in matched):
        return 0.0
    log_p = sum(math.log(Fraction(m, t)) for m, t in zip(matched, total)) / n_max
    bp = 1.0 if c_len > r_len else math.exp(1 - r_len / c_len)
    return bp * math.exp(log_p)


def lcs(a, b):
    t = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i, x in enumerate(a):
        for j, y in enumerate(b):
            t[i + 1][j + 1] = t[i][j] + 1 if x == y else max(t[i][j + 1], t[i + 1][j])
    return t[-1][-1]


def rouge_pair(hyp, ref, beta=Fraction(6, 5)):
    l = lcs(hyp, ref)
    if l == 0:
        return Fraction(0)
    p, r = Fraction(l, len(hyp)), Fraction(l, len(ref))
    return (1 + beta**2) * p * r / (r + beta**2 * p)


def rouge_l(items):
    return float(sum(max(rouge_pair(h, r) for r in refs) for h, refs in items) / len(items))


def cider_d(items, sigma=6.0):
    n_items = len(items)
    df = Counter()
    for _, refs in items:
        seen = set()
        for r in refs:
            for n in range(1, 5):
                seen.update(grams(r, n))
        df.update(seen)
    log_n = math.log(n_items)

    def vec(toks, n):
        return {g: c * (log_n - math.log(max(1, df[g]))) for g, c in grams(toks, n).items()}

    scores = []
    for hyp, refs in items:
        per_ref = []
        for ref in refs:
            s = 0.0
            for n in range(1, 5):
                vh, vr = vec(hyp, n), vec(ref, n)
                nh = math.sqrt(sum(v * v for v in vh.values()))
                nr = math.sqrt(sum(v * v for v in vr.values()))
                dot = sum(min(vh[g], vr[g]) * vr[g] for g in vh if g in vr)
                cos = dot / (nh * nr) if nh > 0 and nr > 0 else 0.0
                s += cos * math.exp(-((len(hyp) - len(ref)) ** 2) / (2 * sigma**2))
            per_ref.append(s / 4)
        scores.append(10 * sum(per_ref) / len(per_ref))
    return sum(scores) / n_items


def distinct(caps, n):
    all_grams = [g for c in caps for g in (tuple(c[i : i + n]) for i in range(len(c) - n + 1))]
    return float(Fraction(len(set(all_grams)), len(all_grams)))


def mtld_pass(toks, threshold):
    factors = 0.0
    types = set()
    count = 0
    for t in toks:
        count += 1
        types.add(t)
        if len(types) / count < threshold:
            factors += 1
            types, count = set(), 0
    if count:
        factors += (1 - len(types) / count) / (1 - threshold)
    return len(toks) / factors if factors else float(len(toks))


def mtld(toks, threshold=0.72):
    return (mtld_pass(toks, threshold) + mtld_pass(toks[::-1], threshold)) / 2


def compute(items):
    out = {f"bleu{n}": bleu(items, n) for n in range(1, 5)}
    out["rouge_l"] = rouge_l(items)
    out["cider"] = cider_d(items)
    hyps = [h for h, _ in items]
    out["distinct1"] = distinct(hyps, 1)
    out["distinct2"] = distinct(hyps, 2)
    out["mtld"] = mtld([t for h in hyps for t in h])
    return out


def cross_check(items, out):
    notes = []
    try:
        from nltk.translate.bleu_score import corpus_bleu

        for n in range(1, 5):
            v = corpus_bleu([r for _, r in items], [h for h, _ in items], weights=(1.0 / n,) * n)
            assert abs(v - out[f"bleu{n}"]) < 1e-12, (n, v, out[f"bleu{n}"])
        notes.append("nltk corpus_bleu agrees")
    except ImportError:
        notes.append("nltk unavailable")
    try:
        from pycocoevalcap.cider.cider_scorer import CiderScorer

        # That scorer's length penalty uses bigram counts, equal to token
        # differences whenever every caption has at least two tokens.
        assert all(len(h) >= 2 and all(len(r) >= 2 for r in rs) for h, rs in items)
        sc = CiderScorer(n=4, sigma=6.0)
        for h, rs in items:
            sc += (" ".join(h), [" ".join(r) for r in rs])
        v, _ = sc.compute_score()
        assert abs(v - out["cider"]) < 1e-9, (v, out["cider"])
        notes.append("pycocoevalcap CIDEr-D agrees")
    except ImportError:
        notes.append("pycocoevalcap unavailable")
    try:
        from lexical_diversity import lex_div

        v = lex_div.mtld([t for h, _ in items for t in h])
        assert abs(v - out["mtld"]) < 1e-9, (v, out["mtld"])
        notes.append("lexical_diversity mtld agrees")
    except ImportError:
        notes.append("lexical_diversity unavailable")
    return notes


def main():
    items = load(sys.argv[1])
    out = compute(items)
    for k, v in out.items():
        print(f"{k}={v:.12f}")
    if "--check" in sys.argv:
        for note in cross_check(items, out):
            print(f"# {note}", file=sys.stderr)


if __name__ == "__main__":
    main()
