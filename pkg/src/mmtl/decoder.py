"""Beam search over one or more frozen models."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from .model import FrozenModel
from .textpipe import BOS, EOS, PAD

ENSEMBLE_MODES = ("arith", "geo")


@dataclass
class Hypothesis:
    trg_ids: list
    logprob: float
    state: object = None
    finished: bool = False


@dataclass
class BeamResult:
    ids: list                 # generated ids, <eos>-terminated when finished
    logprob: float
    finished: bool = True
    n_live: list = field(default_factory=list)     # live hypotheses entering each step
    n_retired: list = field(default_factory=list)  # hypotheses finished at each step

    @property
    def tokens(self):
        """Ids without the trailing <eos>."""
        return self.ids[:-1] if self.ids and self.ids[-1] == EOS else list(self.ids)


def ensemble_step(distributions, mode="arith") -> np.ndarray:
    """Combine k per-model distributions over the same vocabulary.

    ``arith`` averages probabilities; ``geo`` takes the renormalised geometric
    mean. Works row-wise on stacked (k, ..., V) input as well.
    """
    dists = [np.asarray(d) for d in distributions]
    if not dists:
        raise ValueError("need at least one distribution")
    shape = dists[0].shape
    if any(d.shape != shape for d in dists):
        raise ValueError(f"distribution shapes differ: {[d.shape for d in dists]}")
    if len(dists) == 1:
        return dists[0]
    stacked = np.stack(dists)
    if mode == "arith":
        return stacked.mean(axis=0)
    if mode == "geo":
        with np.errstate(divide="ignore"):
            logp = np.log(stacked).mean(axis=0)
        p = np.exp(logp - logp.max(axis=-1, keepdims=True))
        return p / p.sum(axis=-1, keepdims=True)
    raise ValueError(f"unknown ensemble mode {mode!r}; choose from {ENSEMBLE_MODES}")


def default_max_len(src_len):
    return 3 * int(src_len) + 5


def beam_search(models, sample, beam_size=12, max_len=None, length_norm=False,
                mode="arith", banned=(PAD, BOS)) -> BeamResult:
    """Translate one sample.

    At each step the top ``beam_size`` expansions of the live hypotheses are
    kept; those ending in <eos> retire with their final score, the rest stay
    live. Scores are summed token log-probabilities (optionally divided by
    length when ranking finished hypotheses). Without length normalisation
    search stops as soon as no live hypothesis can beat the best finished one.
    """
    if beam_size < 1:
        raise ValueError("beam_size must be >= 1")
    if isinstance(models, FrozenModel):
        models = [models]
    if not models:
        raise ValueError("need at least one model")
    V = models[0].cfg.trg_vocab_size
    if any(m.cfg.trg_vocab_size != V for m in models):
        raise ValueError("ensembled models must share the target vocabulary")
    if max_len is None:
        max_len = default_max_len(len(sample.src_ids))

    starts = [m.start(sample) for m in models]
    ctxs = [c for c, _ in starts]
    states = [h for _, h in starts]
    prefixes = [[]]
    scores = np.zeros(1)
    prev = np.array([BOS])
    finished = []   # (rank_score, logprob, ids)
    n_live, n_retired = [], []
    banned = list(banned)

    for step in range(max_len):
        n_live.append(len(prefixes))
        outs = [m.step(c, prev, h) for m, c, h in zip(models, ctxs, states)]
        probs = ensemble_step([p for p, _ in outs], mode)
        with np.errstate(divide="ignore"):
            logp = np.log(probs)
        logp[:, banned] = -np.inf
        cand = (scores[:, None] + logp).ravel()
        order = np.argsort(-cand, kind="stable")[:beam_size]
        order = order[np.isfinite(cand[order])]

        keep_rows, keep_tok = [], []
        for flat in order:
            row, tok = divmod(int(flat), V)
            if tok == EOS:
                ids = prefixes[row] + [EOS]
                s = float(cand[flat])
                finished.append((s / len(ids) if length_norm else s, s, ids))
            else:
                keep_rows.append(row)
                keep_tok.append(tok)
        n_retired.append(len(order) - len(keep_rows))
        if not keep_rows:
            break
        rows = np.asarray(keep_rows)
        prefixes = [prefixes[r] + [t] for r, t in zip(keep_rows, keep_tok)]
        scores = cand[rows * V + np.asarray(keep_tok)]
        prev = np.asarray(keep_tok)
        states = [h for _, h in outs]
        states = [h[rows] for h in states]
        if finished and not length_norm and scores.max() <= max(f[0] for f in finished):
            break

    if finished:
        best = max(finished, key=lambda f: f[0])
        return BeamResult(best[2], best[1], True, n_live, n_retired)
    warnings.warn(f"no hypothesis finished within max_len={max_len}", stacklevel=2)
    i = int(np.argmax(scores))
    return BeamResult(prefixes[i], float(scores[i]), False, n_live, n_retired)


def greedy_search(model: FrozenModel, sample, max_len=None) -> BeamResult:
    """Argmax decoding; kept separate from beam_search as a reference path."""
    if max_len is None:
        max_len = default_max_len(len(sample.src_ids))
    ctx, h = model.start(sample)
    prev = np.array([BOS])
    ids, total = [], 0.0
    for _ in range(max_len):
        p, h = model.step(ctx, prev, h)
        p = p[0].copy()
        p[[PAD, BOS]] = 0.0
        tok = int(np.argmax(p))
        total += float(np.log(p[tok]))
        ids.append(tok)
        if tok == EOS:
            return BeamResult(ids, total, True)
        prev = np.array([tok])
    return BeamResult(ids, total, False)


def translate_corpus(models, samples, beam_size=12, mode="arith", length_norm=False):
    """Beam-decode every sample; returns a list of BeamResult."""
    if isinstance(models, FrozenModel):
        models = [models]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return [beam_search(models, s, beam_size, length_norm=length_norm, mode=mode)
                for s in samples]
