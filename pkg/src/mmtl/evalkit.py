"""Corpus BLEU, an exact-match METEOR surrogate and approximate randomization.

All scorers take already tokenised, un-BPE'd token lists (one reference per
sentence). Each metric is split into per-sentence sufficient statistics and
a corpus aggregation so that the randomization test can recombine shuffled
systems without re-scoring text.
"""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np

from .numerics import make_rng

METEOR_LABEL = "METEOR-x (exact-match surrogate)"


def _check_aligned(hyps, refs):
    if len(hyps) != len(refs):
        raise ValueError(f"hypothesis/reference count mismatch: {len(hyps)} vs {len(refs)}")


def _tok(x):
    return x.split() if isinstance(x, str) else list(x)


# --------------------------------------------------------------------------
# BLEU


def bleu_stats(hyp, ref, max_n=4) -> np.ndarray:
    """[hyp_len, ref_len, match_1, total_1, ..., match_n, total_n]."""
    hyp, ref = _tok(hyp), _tok(ref)
    row = [len(hyp), len(ref)]
    for n in range(1, max_n + 1):
        h = Counter(tuple(hyp[i:i + n]) for i in range(len(hyp) - n + 1))
        r = Counter(tuple(ref[i:i + n]) for i in range(len(ref) - n + 1))
        row.append(sum(min(c, r[g]) for g, c in h.items()))
        row.append(max(len(hyp) - n + 1, 0))
    return np.array(row, dtype=np.float64)


def bleu_from_stats(totals, max_n=4) -> float:
    c, r = totals[0], totals[1]
    if c == 0:
        return 0.0
    log_p = 0.0
    for n in range(max_n):
        m, t = totals[2 + 2 * n], totals[3 + 2 * n]
        if m == 0 or t == 0:
            return 0.0
        log_p += math.log(m / t) / max_n
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return 100.0 * bp * math.exp(log_p)


def bleu(hyps, refs, max_n=4) -> float:
    """Unsmoothed corpus BLEU-4 in [0, 100]."""
    _check_aligned(hyps, refs)
    if not refs:
        raise ValueError("empty reference set")
    totals = sum((bleu_stats(h, r, max_n) for h, r in zip(hyps, refs)),
                 np.zeros(2 + 2 * max_n))
    return bleu_from_stats(totals, max_n)


# --------------------------------------------------------------------------
# METEOR surrogate


_SEARCH_BUDGET = 200_000


def min_chunk_alignment(hyp, ref):
    """Maximum exact unigram alignment with the fewest chunks.

    Returns ``(matches, chunks)``. A chunk is a run of matches adjacent in
    both sentences. Exhaustive branch-and-bound over the choices left open by
    repeated words; beyond a node budget the best alignment found is kept.
    """
    hyp, ref = _tok(hyp), _tok(ref)
    hc, rc = Counter(hyp), Counter(ref)
    quota = {w: min(hc[w], rc[w]) for w in hc if w in rc}
    m = sum(quota.values())
    if m == 0:
        return 0, 0
    ref_pos = {}
    for j, w in enumerate(ref):
        ref_pos.setdefault(w, []).append(j)
    remaining_h = Counter(w for w in hyp if w in quota)

    best = [m + 1]
    nodes = [0]
    used = set()
    left = dict(quota)

    def search(i, prev_j, chunks):
        nodes[0] += 1
        if chunks >= best[0]:
            return
        if i == len(hyp):
            best[0] = chunks
            return
        if nodes[0] > _SEARCH_BUDGET and best[0] <= m:
            return
        w = hyp[i]
        if w not in quota:
            search(i + 1, None, chunks)
            return
        remaining_h[w] -= 1
        options = []
        if left[w] > 0:
            cands = [j for j in ref_pos[w] if j not in used]
            # continuing the current chunk first finds good bounds early
            cands.sort(key=lambda j: (prev_j is None or j != prev_j + 1, j))
            options.extend(cands)
        can_skip = remaining_h[w] >= left[w]
        for j in options:
            used.add(j)
            left[w] -= 1
            extend = prev_j is not None and j == prev_j + 1
            search(i + 1, j, chunks + (0 if extend else 1))
            left[w] += 1
            used.discard(j)
        if can_skip:
            search(i + 1, None, chunks)
        remaining_h[w] += 1

    search(0, None, 0)
    return m, best[0]


def meteor_stats(hyp, ref) -> float:
    """Sentence-level surrogate score."""
    hyp, ref = _tok(hyp), _tok(ref)
    if not hyp or not ref:
        return 0.0
    m, chunks = min_chunk_alignment(hyp, ref)
    if m == 0:
        return 0.0
    P, R = m / len(hyp), m / len(ref)
    fmean = 10.0 * P * R / (R + 9.0 * P)
    penalty = 0.5 * (chunks / m) ** 3
    return fmean * (1.0 - penalty)


def meteor_surrogate(hyps, refs) -> float:
    """Mean sentence score in [0, 1]: exact-match unigram METEOR, no stemming."""
    _check_aligned(hyps, refs)
    if not hyps:
        return 0.0
    return float(np.mean([meteor_stats(h, r) for h, r in zip(hyps, refs)]))


# --------------------------------------------------------------------------
# metric registry for the randomization test


@dataclass(frozen=True)
class Metric:
    name: str
    sentence_stats: object   # (hyp, ref) -> np.ndarray
    corpus_score: object     # (stats (n, k)) -> float, also vectorised over leading axes


def _bleu_corpus(stats):
    stats = np.asarray(stats)
    tot = stats.sum(axis=-2)
    if tot.ndim == 1:
        return bleu_from_stats(tot)
    return np.array([bleu_from_stats(t) for t in tot.reshape(-1, tot.shape[-1])]
                    ).reshape(tot.shape[:-1])


def _meteor_corpus(stats):
    return np.asarray(stats)[..., 0].mean(axis=-1)


METRICS = {
    "bleu": Metric("bleu", lambda h, r: bleu_stats(h, r), _bleu_corpus),
    "meteor": Metric("meteor", lambda h, r: np.array([meteor_stats(h, r)]), _meteor_corpus),
}


def get_metric(metric) -> Metric:
    if isinstance(metric, Metric):
        return metric
    try:
        return METRICS[metric]
    except KeyError:
        raise ValueError(f"unknown metric {metric!r}; choose from {sorted(METRICS)}") from None


def ar_test(metric, hyps_a, hyps_b, refs, n_shuffles=10000, rng=0, chunk=1000) -> float:
    """Two-sided approximate randomization p-value for |metric(A) - metric(B)|.

    Each shuffle swaps the two systems' outputs sentence-wise with
    probability 1/2. ``p = (#{delta' >= delta} + 1) / (n_shuffles + 1)``.
    """
    _check_aligned(hyps_a, refs)
    _check_aligned(hyps_b, refs)
    if n_shuffles < 1:
        raise ValueError("n_shuffles must be >= 1")
    met = get_metric(metric)
    sa = np.stack([met.sentence_stats(h, r) for h, r in zip(hyps_a, refs)])
    sb = np.stack([met.sentence_stats(h, r) for h, r in zip(hyps_b, refs)])
    observed = abs(float(met.corpus_score(sa)) - float(met.corpus_score(sb)))
    gen = rng if isinstance(rng, np.random.Generator) else make_rng(rng)
    n = len(refs)
    hits = 0
    done = 0
    while done < n_shuffles:
        k = min(chunk, n_shuffles - done)
        swap = gen.random((k, n)) < 0.5
        xa = np.where(swap[..., None], sb[None], sa[None])
        xb = np.where(swap[..., None], sa[None], sb[None])
        delta = np.abs(met.corpus_score(xa) - met.corpus_score(xb))
        # tolerance absorbs summation-order rounding in recombined statistics
        hits += int(np.count_nonzero(delta >= observed - 1e-12))
        done += k
    return (hits + 1) / (n_shuffles + 1)


# --------------------------------------------------------------------------
# multi-run aggregation


def mean_std(values):
    """Mean and sample (n-1) standard deviation; std is None for a single run."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("no values")
    std = float(v.std(ddof=1)) if v.size >= 2 else None
    return float(v.mean()), std


@dataclass
class MetricSummary:
    per_seed: list
    mean: float
    std: float | None
    ensemble: float | None = None

    def render(self, scale=1.0):
        s = f"{self.mean * scale:.1f}"
        if self.std is not None:
            s += f" ± {self.std * scale:.1f}"
        if self.ensemble is not None:
            s += f" / {self.ensemble * scale:.1f}"
        return s


@dataclass
class EvalReport:
    systems: dict = field(default_factory=dict)      # name -> {"bleu": MetricSummary, ...}
    p_values: dict = field(default_factory=dict)     # "A vs B" -> {metric: p}

    def to_json(self):
        def enc(ms):
            return {"per_seed": ms.per_seed, "mean": ms.mean, "std": ms.std,
                    "ensemble": ms.ensemble}
        return json.dumps({
            "meteor_label": METEOR_LABEL,
            "systems": {name: {k: enc(v) for k, v in mets.items()}
                        for name, mets in self.systems.items()},
            "p_values": self.p_values,
        }, indent=2, sort_keys=True)

    def render(self):
        head = f"{'system':24s} {'BLEU':>22s} {METEOR_LABEL:>34s}"
        lines = [head, "-" * len(head)]
        for name, mets in self.systems.items():
            lines.append(f"{name:24s} {mets['bleu'].render():>22s} "
                         f"{mets['meteor'].render(100.0):>34s}")
        for pair, ps in self.p_values.items():
            lines.append(f"p-value {pair}: " + ", ".join(f"{k}={v:.4f}" for k, v in ps.items()))
        return "\n".join(lines)


def aggregate_runs(per_seed_hyps, ensemble_hyps, refs, name="system",
                   report: EvalReport | None = None) -> EvalReport:
    """Score each seed's output and the ensemble output: ``mean ± std / ensemble``."""
    if not per_seed_hyps:
        raise ValueError("need at least one run")
    report = report or EvalReport()
    mets = {}
    for key, fn in (("bleu", bleu), ("meteor", meteor_surrogate)):
        vals = [fn(h, refs) for h in per_seed_hyps]
        mu, sd = mean_std(vals)
        ens = fn(ensemble_hyps, refs) if ensemble_hyps is not None else None
        mets[key] = MetricSummary(vals, mu, sd, ens)
    report.systems[name] = mets
    return report


def compare_systems(report: EvalReport, name_a, hyps_a, name_b, hyps_b, refs,
                    n_shuffles=10000, seed=0):
    report.p_values[f"{name_a} vs {name_b}"] = {
        m: ar_test(m, hyps_a, hyps_b, refs, n_shuffles, seed) for m in ("bleu", "meteor")}
    return report


def ambiguous_accuracy(hyps, correct, competitors):
    """Share of sentences whose output has the correct sense token and no rival sense.

    ``correct[i]`` is the reference sense token and ``competitors[i]`` the set
    of other senses of the same source word.
    """
    if not (len(hyps) == len(correct) == len(competitors)):
        raise ValueError("hyps, correct and competitors must align")
    if not hyps:
        raise ValueError("empty evaluation set")
    hits = 0
    for h, c, rivals in zip(hyps, correct, competitors):
        toks = set(_tok(h))
        hits += c in toks and not toks & set(rivals)
    return hits / len(hyps)


def synth_accuracy(hyps, split, senses_per_word=2):
    """Ambiguous-token accuracy on a synthetic split (see ``datastore.synth_generate``)."""
    from .datastore import sense_token
    n_senses = senses_per_word
    correct = [split.correct_token(i) for i in range(len(split))]
    rivals = [[sense_token(w, j) for j in range(n_senses) if j != s]
              for w, s in zip(split.words, split.senses)]
    return ambiguous_accuracy(hyps, correct, rivals)
