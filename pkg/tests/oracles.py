"""Independent reference computations shared by several test modules."""
import math

import numpy as np

from mmtl.model import FrozenModel, build_params, toy_config
from mmtl.numerics import make_rng
from mmtl.datastore import make_sample
from mmtl.textpipe import BOS, EOS, PAD


def exhaustive_best(model, sample, max_len, banned=(PAD, BOS)):
    """Highest-scoring <eos>-terminated sequence of length <= max_len, by full enumeration."""
    ctx, h0 = model.start(sample)
    V = model.cfg.trg_vocab_size
    best = [-math.inf, None]

    def visit(prefix, prev, h, score):
        p, h_next = model.step(ctx, np.array([prev]), h)
        with np.errstate(divide="ignore"):
            logp = np.log(p[0])
        for tok in range(V):
            if tok in banned:
                continue
            s = score + logp[tok]
            if tok == EOS:
                if s > best[0]:
                    best[0], best[1] = s, prefix + [EOS]
            elif len(prefix) + 1 < max_len:
                visit(prefix + [tok], tok, h_next, s)

    visit([], BOS, h0, 0.0)
    return best[1], best[0]


def random_toy(seed, variant="baseline", content=5, sharpen=3.0, eos_bias=0.0):
    """Random frozen model with ``content`` non-reserved target tokens, plus a sample."""
    cfg = toy_config(variant, trg_vocab_size=4 + content)
    params = build_params(cfg, seed)
    params["out.W_o"].data *= sharpen
    params["out.b_o"].data[EOS] += eos_bias
    rng = make_rng(seed + 10**6)
    sample = make_sample(rng.integers(4, cfg.src_vocab_size, size=int(rng.integers(1, 6))), [],
                         rng.standard_normal(cfg.global_dim).astype(np.float32),
                         rng.standard_normal((cfg.n_regions, cfg.region_dim)).astype(np.float32))
    return FrozenModel(cfg, params), sample
