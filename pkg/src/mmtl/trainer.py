"""ADAM training loop with clipping, L2, dropout and METEOR-based early stopping."""
from __future__ import annotations

import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .datastore import make_batches
from .decoder import translate_corpus
from .evalkit import meteor_surrogate
from .model import FrozenModel, ModelConfig, batch_nll, build_params, check_sample
from .numerics import ParamStore, make_rng
from .textpipe import Vocabulary, bpe_undo

log = logging.getLogger(__name__)

DROPOUT_PRESETS = {"ende": (0.3, 0.5, 0.5), "enfr": (0.2, 0.4, 0.4)}


class TrainingDiverged(RuntimeError):
    """Loss or gradient became NaN/inf; the run is aborted."""


@dataclass
class TrainConfig:
    lr: float = 4e-4
    batch_size: int = 32
    clip: float = 5.0
    l2: float = 1e-5
    eval_every: int = 1000
    patience: int = 10
    max_updates: int = 100_000
    beam_for_validation: int = 12
    seeds: tuple = (1, 2, 3, 4, 5)

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        if self.lr <= 0 or self.clip <= 0 or self.l2 < 0:
            raise ValueError("lr and clip must be positive, l2 non-negative")
        for k in ("batch_size", "eval_every", "patience", "max_updates", "beam_for_validation"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be >= 1")

    def to_dict(self):
        d = asdict(self)
        d["seeds"] = list(self.seeds)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class Datasets:
    train: list
    valid: list = field(default_factory=list)
    valid_refs: list = field(default_factory=list)   # token lists, un-BPE'd
    trg_vocab: Vocabulary | None = None


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads, state: AdamState, lr, t, beta1=0.9, beta2=0.999,
              eps=1e-8, l2=0.0):
    """Bias-corrected ADAM update in place; ``l2 * theta`` is added to each gradient."""
    if t < 1:
        raise ValueError("ADAM step counter starts at 1")
    items = params.items() if hasattr(params, "items") else params
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in items:
        theta = p.data if isinstance(p, nx.Tensor) else p
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(theta)
        elif g.shape != theta.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {theta.shape} for {name}")
        if l2:
            g = g + l2 * theta
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(theta)
            state.v[name] = np.zeros_like(theta)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        theta -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    state.t = t


def apply_dropout(x, p, train_mode, rng):
    """Inverted dropout on a Tensor or array (see :func:`numerics.dropout`)."""
    wrapped = not isinstance(x, nx.Tensor)
    out = nx.dropout(nx.as_tensor(x), p, train_mode, rng)
    return out.data if wrapped else out


@dataclass
class RunLog:
    seed: int
    losses: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    validations: list = field(default_factory=list)   # [update, metric]
    stop_reason: str = ""
    best_update: int | None = None
    best_metric: float | None = None
    best_checkpoint: str | None = None

    def records(self):
        vals = {u: m for u, m in self.validations}
        for k, (loss, gn) in enumerate(zip(self.losses, self.grad_norms), start=1):
            yield {"event": "update", "update": k, "loss": loss, "grad_norm": gn}
            if k in vals:
                yield {"event": "validation", "update": k, "metric": vals[k]}
        yield {"event": "stop", "reason": self.stop_reason, "seed": self.seed,
               "best_update": self.best_update, "best_metric": self.best_metric,
               "best_checkpoint": self.best_checkpoint}

    def write_jsonl(self, path):
        with open(path, "w", encoding="utf-8") as f:
            for rec in self.records():
                f.write(json.dumps(rec, sort_keys=True) + "\n")


@dataclass
class TrainResult:
    log: RunLog
    params: ParamStore


def _run_seeds(seed):
    """Independent integer seeds for initialisation, shuffling and dropout."""
    kids = np.random.SeedSequence(seed).spawn(3)
    return [int(k.generate_state(1)[0]) for k in kids]


def decode_tokens(results, trg_vocab: Vocabulary):
    return [bpe_undo(trg_vocab.decode(r.tokens)) for r in results]


def validate(model_cfg, params, data: Datasets, beam_size):
    hyps = translate_corpus(FrozenModel(model_cfg, params), data.valid, beam_size)
    return meteor_surrogate(decode_tokens(hyps, data.trg_vocab), data.valid_refs)


def checkpoint_meta(model_cfg, data: Datasets | None = None, src_vocab=None, extra=None):
    meta = {"model": model_cfg.to_dict()}
    if src_vocab is not None:
        meta["src_vocab"] = src_vocab.tokens
    if data is not None and data.trg_vocab is not None:
        meta["trg_vocab"] = data.trg_vocab.tokens
    if extra:
        meta.update(extra)
    return meta


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, data: Datasets, seed: int,
          out_dir=None, src_vocab=None, validate_fn=None) -> TrainResult:
    """Train one seed; returns the log and the best-validation parameters.

    ``validate_fn(params) -> float`` overrides the default beam-search +
    METEOR-surrogate validation.
    """
    if not data.train:
        raise ValueError("empty training set")
    for s in data.train[:1] + data.valid[:1]:
        check_sample(model_cfg, s)
    init_seed, shuffle_seed, drop_seed = _run_seeds(seed)
    params = build_params(model_cfg, init_seed)
    shuffle_rng = make_rng(shuffle_seed)
    drop_rng = make_rng(drop_seed)
    state = AdamState()
    runlog = RunLog(seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if validate_fn is None and data.valid:
        def validate_fn(p):
            return validate(model_cfg, p, data, train_cfg.beam_for_validation)

    best_state = None
    best = -math.inf
    bad = 0
    update = 0
    epoch = 0
    while not runlog.stop_reason:
        epoch += 1
        batches = make_batches(data.train, train_cfg.batch_size, shuffle_rng, shuffle=True)
        for bi, batch in enumerate(batches):
            update += 1
            params.zero_grad()
            try:
                loss_sum, _ = batch_nll(model_cfg, params, batch, True, drop_rng)
            except nx.NonFiniteError as e:
                raise TrainingDiverged(f"{e} at update {update} (epoch {epoch}, batch {bi})") from e
            loss = nx.mul(loss_sum, 1.0 / batch.size)
            lv = float(loss.data)
            if not math.isfinite(lv):
                raise TrainingDiverged(f"non-finite loss at update {update} "
                                       f"(epoch {epoch}, batch {bi})")
            nx.backward(loss)
            grads = {k: t.grad for k, t in params.items() if t.grad is not None}
            _, norm = nx.clip_global_norm(list(grads.values()), train_cfg.clip)
            if not math.isfinite(norm):
                raise TrainingDiverged(f"non-finite gradient norm at update {update} "
                                       f"(epoch {epoch}, batch {bi})")
            adam_step(params, grads, state, train_cfg.lr, update, l2=train_cfg.l2)
            runlog.losses.append(lv)
            runlog.grad_norms.append(norm)

            if validate_fn is not None and update % train_cfg.eval_every == 0:
                metric = float(validate_fn(params))
                runlog.validations.append([update, metric])
                log.info("seed %d update %d valid %.4f", seed, update, metric)
                if metric > best:
                    best, bad = metric, 0
                    best_state = params.state_dict()
                    runlog.best_update, runlog.best_metric = update, metric
                else:
                    bad += 1
                    if bad >= train_cfg.patience:
                        runlog.stop_reason = "early-stop"
                        break
            if update >= train_cfg.max_updates:
                runlog.stop_reason = "max-updates"
                break

    if best_state is not None:
        params.load_state_dict(best_state)
    else:
        runlog.best_update = update
    if out is not None:
        ckpt = out / "best.ckpt"
        params.save(ckpt, checkpoint_meta(model_cfg, data, src_vocab, {"seed": seed}))
        runlog.best_checkpoint = ckpt.name
        runlog.write_jsonl(out / "log.jsonl")
    return TrainResult(runlog, params)


def max_workers(requested=1):
    cap = os.environ.get("MMTL_THREADS")
    if cap:
        requested = min(requested, max(1, int(cap)))
    return max(1, requested)


def _train_job(args):
    model_cfg, train_cfg, data, seed, out_dir, src_vocab = args
    return train(model_cfg, train_cfg, data, seed, out_dir, src_vocab)


def train_multi(model_cfg: ModelConfig, train_cfg: TrainConfig, data: Datasets, seeds,
                workers=1, out_dir=None, src_vocab=None) -> list[TrainResult]:
    """Independent runs, one per seed, returned in ascending seed order."""
    seeds = [int(s) for s in seeds]
    if len(set(seeds)) != len(seeds):
        raise ValueError(f"duplicate seeds in {seeds}")
    jobs = [(model_cfg, train_cfg, data, s,
             None if out_dir is None else Path(out_dir) / f"seed{s}", src_vocab)
            for s in sorted(seeds)]
    n = max_workers(workers)
    if n == 1:
        return [_train_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(_train_job, jobs))


def corpus_nll(model_cfg, params, samples, batch_size=64):
    """Mean per-token NLL in eval mode (no dropout)."""
    total, count = 0.0, 0
    with nx.no_grad():
        for b in make_batches(samples, batch_size):
            loss, n = batch_nll(model_cfg, params, b)
            total += float(loss.data)
            count += n
    return total / count
