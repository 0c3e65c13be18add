"""Attentive GRU encoder/CGRU decoder and its visual-fusion variants.

Weights are stored math-style as (out, in) and applied with ``linear``.
All seven configurations share one code path; the variant only decides
which image transforms exist and where their output is injected.
"""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .datastore import Batch, collate
from .numerics import ParamStore, Tensor
from .textpipe import PAD

VARIANTS = ("baseline", "fusion-conv", "dec-init", "encdec-init",
            "ctx-mul", "trg-mul", "dec-init-ctx-trg-mul")

_H0_FROM_ANNOTATIONS = {"baseline", "fusion-conv"}
_H0_FROM_IMAGE = {"dec-init", "encdec-init", "dec-init-ctx-trg-mul"}
_CTX_MUL = {"ctx-mul", "dec-init-ctx-trg-mul"}
_TRG_MUL = {"trg-mul", "dec-init-ctx-trg-mul"}


@dataclass
class ModelConfig:
    variant: str = "baseline"
    src_vocab_size: int = 5234
    trg_vocab_size: int = 7052
    emb_dim: int = 128        # E
    rnn_dim: int = 256        # R
    global_dim: int = 2048    # D_g
    n_regions: int = 196      # P
    region_dim: int = 1024    # D_s
    dropout: tuple = (0.3, 0.5, 0.5)   # source embeddings, annotations, o_t
    layer_norm_eps: float = nx.LAYER_NORM_EPS

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        self.dropout = tuple(float(p) for p in self.dropout)
        if len(self.dropout) != 3 or not all(0.0 <= p < 1.0 for p in self.dropout):
            raise ValueError(f"dropout must be three probabilities in [0, 1), got {self.dropout}")
        for k in ("src_vocab_size", "trg_vocab_size", "emb_dim", "rnn_dim",
                  "global_dim", "n_regions", "region_dim"):
            if getattr(self, k) < 1:
                raise ValueError(f"{k} must be positive")

    @property
    def ctx_dim(self):
        return 2 * self.rnn_dim

    @property
    def uses_global(self):
        return self.variant not in ("baseline", "fusion-conv")

    @property
    def uses_spatial(self):
        return self.variant == "fusion-conv"

    def to_dict(self):
        d = asdict(self)
        d["dropout"] = list(self.dropout)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def param_layout(cfg: ModelConfig) -> "OrderedDict[str, tuple]":
    """name -> (shape, init, row_blocks) for every trainable tensor of ``cfg``."""
    E, R, C = cfg.emb_dim, cfg.rnn_dim, cfg.ctx_dim
    Dg, Ds = cfg.global_dim, cfg.region_dim
    v = cfg.variant
    L = OrderedDict()
    L["emb.src"] = ((cfg.src_vocab_size, E), "xavier", 1)
    L["emb.trg"] = ((cfg.trg_vocab_size, E), "xavier", 1)
    for d in ("enc.fw", "enc.bw"):
        L[f"{d}.W"] = ((3 * R, E), "xavier", 3)
        L[f"{d}.U"] = ((3 * R, R), "xavier", 3)
        L[f"{d}.ln_gain"] = ((3, R), "ones", 1)
        L[f"{d}.ln_bias"] = ((3, R), "zeros", 1)
    if v in _H0_FROM_ANNOTATIONS:
        L["init.W"] = ((R, C), "xavier", 1)
    if v in _H0_FROM_IMAGE:
        L["img.W"] = ((R, Dg), "xavier", 1)
    if v in _CTX_MUL:
        L["img_ctx.W"] = ((C, Dg), "xavier", 1)
    if v in _TRG_MUL:
        L["img_trg.W"] = ((E, Dg), "xavier", 1)
    L["dec.gru1.W"] = ((3 * R, E), "xavier", 3)
    L["dec.gru1.U"] = ((3 * R, R), "xavier", 3)
    L["dec.gru1.b"] = ((3 * R,), "zeros", 1)
    L["att.W_s"] = ((C, C), "xavier", 1)
    L["att.b_s"] = ((C,), "zeros", 1)
    L["att.W_h"] = ((C, R), "xavier", 1)
    L["att.W_a"] = ((C,), "xavier", 1)
    L["att.b_a"] = ((1,), "zeros", 1)
    if v == "fusion-conv":
        L["vatt.W_s"] = ((Ds, Ds), "xavier", 1)
        L["vatt.b_s"] = ((Ds,), "zeros", 1)
        L["vatt.W_h"] = ((Ds, R), "xavier", 1)
        L["vatt.W_a"] = ((Ds,), "xavier", 1)
        L["vatt.b_a"] = ((1,), "zeros", 1)
    L["dec.gru2.W"] = ((3 * R, C), "xavier", 3)
    L["dec.gru2.U"] = ((3 * R, R), "xavier", 3)
    L["dec.gru2.b"] = ((3 * R,), "zeros", 1)
    L["out.W_dec"] = ((E, R), "xavier", 1)
    L["out.W_ctx"] = ((E, C + Ds if v == "fusion-conv" else C), "xavier", 1)
    L["out.W_o"] = ((cfg.trg_vocab_size, E), "xavier", 1)
    L["out.b_o"] = ((cfg.trg_vocab_size,), "zeros", 1)
    return L


def param_breakdown(cfg: ModelConfig) -> "OrderedDict[str, int]":
    """Scalar count per block (the name prefix before the last dot)."""
    out = OrderedDict()
    for name, (shape, _, _) in param_layout(cfg).items():
        block = name.rsplit(".", 1)[0]
        out[block] = out.get(block, 0) + int(np.prod(shape))
    return out


def count_params(cfg: ModelConfig) -> int:
    return sum(param_breakdown(cfg).values())


def build_params(cfg: ModelConfig, seed=0, dtype=np.float32) -> ParamStore:
    store = ParamStore(seed, dtype)
    for name, (shape, init, blocks) in param_layout(cfg).items():
        store.add(name, shape, init, blocks)
    return store


# --------------------------------------------------------------------------
# building blocks


def _ln_gru_step(xw_zr, xw_n, h, U_zr, U_n, gain_zr, bias_zr, gain_n, bias_n, eps):
    """Layer-normalised GRU: LN on each gate's input+recurrent pre-activation."""
    B, R = h.shape
    zr = nx.add(xw_zr, nx.linear(h, U_zr)).reshape(B, 2, R)
    zr = nx.sigmoid(nx.layer_norm(zr, gain_zr, bias_zr, eps))
    z, r = zr[:, 0], zr[:, 1]
    n = nx.tanh(nx.layer_norm(nx.add(xw_n, nx.mul(r, nx.linear(h, U_n))), gain_n, bias_n, eps))
    return nx.add(n, nx.mul(z, nx.sub(h, n)))


def _gru_step(xw_zr, xw_n, h, U_zr, U_n):
    R = h.shape[-1]
    zr = nx.sigmoid(nx.add(xw_zr, nx.linear(h, U_zr)))
    z, r = zr[:, :R], zr[:, R:]
    n = nx.tanh(nx.add(xw_n, nx.mul(r, nx.linear(h, U_n))))
    return nx.add(n, nx.mul(z, nx.sub(h, n)))


def _split_gates(params, prefix, R):
    U = params[f"{prefix}.U"]
    return U[:2 * R], U[2 * R:]


def _zeros(shape, dtype):
    return Tensor(np.zeros(shape, dtype=dtype))


def _image_transform(params, name, V: Tensor) -> Tensor:
    return nx.tanh(nx.linear(V, params[name]))


def _as_feature(x, dtype):
    if x is None:
        return None
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


@dataclass
class EncoderOutput:
    S: Tensor                 # (B, M, C) or (M, C) for single-sentence calls
    e0: Tensor                # (B, R)
    mask: np.ndarray | None = None   # (B, M) bool


def _encode(cfg, params, src, src_len, V, train, rng) -> EncoderOutput:
    dtype = params.dtype
    B, M = src.shape
    R = cfg.rnn_dim
    eps = cfg.layer_norm_eps
    X = nx.embedding(params["emb.src"], src)
    X = nx.dropout(X, cfg.dropout[0], train, rng)

    if cfg.variant == "encdec-init":
        if V is None:
            raise ValueError("encdec-init needs the global feature V")
        e0 = _image_transform(params, "img.W", V)
    else:
        e0 = _zeros((B, R), dtype)

    full = bool((src_len == M).all())
    masks = None if full else (np.arange(M)[None, :] < src_len[:, None]).astype(dtype)

    states = {}
    for d, steps in (("enc.fw", range(M)), ("enc.bw", range(M - 1, -1, -1))):
        XW = nx.linear(X, params[f"{d}.W"])
        XW_zr, XW_n = XW[:, :, :2 * R], XW[:, :, 2 * R:]
        U_zr, U_n = _split_gates(params, d, R)
        g, b = params[f"{d}.ln_gain"], params[f"{d}.ln_bias"]
        g_zr, b_zr, g_n, b_n = g[:2], b[:2], g[2], b[2]
        h = e0
        out = [None] * M
        for t in steps:
            h_new = _ln_gru_step(XW_zr[:, t], XW_n[:, t], h, U_zr, U_n,
                                 g_zr, b_zr, g_n, b_n, eps)
            if masks is not None:
                # padded positions carry the state through unchanged
                h_new = nx.add(h, nx.mul(masks[:, t:t + 1], nx.sub(h_new, h)))
            h = h_new
            out[t] = h
        states[d] = nx.stack(out, axis=1)
    S = nx.concat([states["enc.fw"], states["enc.bw"]], axis=-1)
    return EncoderOutput(S, e0, None if full else masks.astype(bool))


def encode(cfg: ModelConfig, params: ParamStore, src_ids, V=None, *,
           src_len=None, train=False, rng=None) -> EncoderOutput:
    """Bidirectional layer-normalised GRU encoder.

    A 1-D ``src_ids`` returns ``S`` of shape (M, C); a padded (B, M) matrix
    (with ``src_len``) returns (B, M, C).
    """
    ids = np.asarray(src_ids, dtype=np.int64)
    single = ids.ndim == 1
    if ids.size == 0:
        raise ValueError("cannot encode an empty source sequence")
    if single:
        ids = ids[None, :]
    if src_len is None:
        src_len = np.full(len(ids), ids.shape[1], dtype=np.int64)
    V = _as_feature(V, params.dtype)
    if V is not None and single and V.data.ndim == 1:
        V = V.reshape(1, -1)
    out = _encode(cfg, params, ids, np.asarray(src_len), V, train, rng)
    if single:
        out.S = out.S[0]
    return out


def _masked_mean(S: Tensor, mask):
    if mask is None:
        return nx.mean(S, axis=-2)
    m = mask.astype(S.dtype)
    w = m / m.sum(axis=1, keepdims=True)
    return nx.tsum(nx.mul(S, w[:, :, None]), axis=1)


def init_decoder(cfg: ModelConfig, params: ParamStore, S, V=None, mask=None) -> Tensor:
    """Initial decoder state h0 for the configured variant."""
    S = nx.as_tensor(S)
    if S.shape[-2] == 0:
        raise ValueError("empty annotation set")
    v = cfg.variant
    if v in _H0_FROM_ANNOTATIONS:
        return nx.tanh(nx.linear(_masked_mean(S, mask), params["init.W"]))
    if v in _H0_FROM_IMAGE:
        if V is None:
            raise ValueError(f"{v} needs the global feature V")
        return _image_transform(params, "img.W", _as_feature(V, params.dtype))
    lead = S.shape[:-2]
    return _zeros(lead + (cfg.rnn_dim,), params.dtype)


def _attend(h, S, pre, W_h, W_a, b_a, mask):
    """Additive attention over rows of S given precomputed ``pre = W_s S + b_s``."""
    B = h.shape[0]
    q = nx.linear(h, W_h).reshape(B, 1, -1)
    scores = nx.add(nx.matmul(nx.tanh(nx.add(pre, q)), W_a), b_a)
    weights = nx.softmax(scores, axis=-1, mask=mask)
    ctx = nx.matmul(weights.reshape(B, 1, -1), S).reshape(B, -1)
    return weights, ctx


def _attention_api(params, prefix, h_t, S, mask):
    h = nx.as_tensor(h_t)
    S = nx.as_tensor(S)
    single = h.data.ndim == 1
    if single:
        h = h.reshape(1, -1)
    if S.data.ndim == 2:
        S = S.reshape(1, *S.shape)
    if S.shape[-2] == 0:
        raise ValueError("attention over an empty set")
    pre = nx.linear(S, params[f"{prefix}.W_s"], params[f"{prefix}.b_s"])
    w, ctx = _attend(h, S, pre, params[f"{prefix}.W_h"], params[f"{prefix}.W_a"],
                     params[f"{prefix}.b_a"], mask)
    if single:
        return w[0], ctx[0]
    return w, ctx


def text_attention(params: ParamStore, h_t, S, mask=None):
    """Returns ``(alpha, c_t)``: weights over source annotations and their mix."""
    return _attention_api(params, "att", h_t, S, mask)


def visual_attention(params: ParamStore, h_t, S_spatial):
    """Returns ``(beta, v_t)`` over spatial annotations (fusion-conv only)."""
    if "vatt.W_s" not in params:
        raise ValueError("visual attention is only defined for the fusion-conv variant")
    return _attention_api(params, "vatt", h_t, S_spatial, None)


# --------------------------------------------------------------------------
# decoder


@dataclass
class DecoderContext:
    """Per-sentence tensors reused at every decoding step."""
    S: Tensor
    mask: np.ndarray | None
    pre_txt: Tensor
    h0: Tensor
    spatial: Tensor | None = None
    pre_img: Tensor | None = None
    trg_mod: Tensor | None = None


@dataclass
class DecoderState:
    h: Tensor                 # first GRU output at this step
    h_tilde: Tensor           # second GRU output, carried to the next step
    c: Tensor | None = None
    v: Tensor | None = None
    alpha: Tensor | None = None
    beta: Tensor | None = None
    extra: dict = field(default_factory=dict)


def prepare_context(cfg: ModelConfig, params: ParamStore, src, src_len, V=None,
                    spatial=None, train=False, rng=None) -> DecoderContext:
    dtype = params.dtype
    V = _as_feature(V, dtype)
    spatial = _as_feature(spatial, dtype)
    if cfg.uses_global and V is None:
        raise ValueError(f"variant {cfg.variant} needs the global feature V")
    if cfg.uses_spatial and spatial is None:
        raise ValueError("fusion-conv needs the spatial feature map")
    enc = _encode(cfg, params, src, src_len, V, train, rng)
    S = nx.dropout(enc.S, cfg.dropout[1], train, rng)
    h0 = init_decoder(cfg, params, S, V, enc.mask)
    if cfg.variant in _CTX_MUL:
        B = S.shape[0]
        S = nx.mul(S, _image_transform(params, "img_ctx.W", V).reshape(B, 1, -1))
    ctx = DecoderContext(S, enc.mask, nx.linear(S, params["att.W_s"], params["att.b_s"]), h0)
    if cfg.uses_spatial:
        ctx.spatial = spatial
        ctx.pre_img = nx.linear(spatial, params["vatt.W_s"], params["vatt.b_s"])
    if cfg.variant in _TRG_MUL:
        ctx.trg_mod = _image_transform(params, "img_trg.W", V)
    return ctx


def _embed_target(params, ctx: DecoderContext, ids) -> Tensor:
    y = nx.embedding(params["emb.trg"], ids)
    if ctx.trg_mod is not None:
        mod = ctx.trg_mod
        if y.data.ndim == 3:
            mod = mod.reshape(mod.shape[0], 1, -1)
        y = nx.mul(y, mod)
    return y


def _cgru_step(cfg, params, y, yw, h_prev, ctx: DecoderContext) -> DecoderState:
    R = cfg.rnn_dim
    U_zr, U_n = _split_gates(params, "dec.gru1", R)
    h1 = _gru_step(yw[:, :2 * R], yw[:, 2 * R:], h_prev, U_zr, U_n)
    alpha, c = _attend(h1, ctx.S, ctx.pre_txt, params["att.W_h"], params["att.W_a"],
                       params["att.b_a"], ctx.mask)
    beta = v = None
    if ctx.spatial is not None:
        beta, v = _attend(h1, ctx.spatial, ctx.pre_img, params["vatt.W_h"],
                          params["vatt.W_a"], params["vatt.b_a"], None)
    cw = nx.linear(c, params["dec.gru2.W"], params["dec.gru2.b"])
    U_zr, U_n = _split_gates(params, "dec.gru2", R)
    h2 = _gru_step(cw[:, :2 * R], cw[:, 2 * R:], h1, U_zr, U_n)
    return DecoderState(h1, h2, c, v, alpha, beta)


def _readout(params, y, state: DecoderState) -> Tensor:
    mm = state.c if state.v is None else nx.concat([state.c, state.v], axis=-1)
    return nx.tanh(nx.add(nx.add(y, nx.linear(state.h_tilde, params["out.W_dec"])),
                          nx.linear(mm, params["out.W_ctx"])))


def decode_step(cfg: ModelConfig, params: ParamStore, y_prev, state: DecoderState | Tensor,
                ctx: DecoderContext):
    """One CGRU step for a batch of previous target ids.

    ``state`` is the previous DecoderState (or the initial h0 tensor).
    Returns ``(distribution (B, V), next_state)``.
    """
    ids = np.asarray(y_prev, dtype=np.int64).reshape(-1)
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.trg_vocab_size):
        raise IndexError(f"target id out of range [0, {cfg.trg_vocab_size})")
    h_prev = state.h_tilde if isinstance(state, DecoderState) else state
    y = _embed_target(params, ctx, ids)
    yw = nx.linear(y, params["dec.gru1.W"], params["dec.gru1.b"])
    new = _cgru_step(cfg, params, y, yw, h_prev, ctx)
    o = _readout(params, y, new)
    probs = nx.softmax(nx.linear(o, params["out.W_o"], params["out.b_o"]), axis=-1)
    return probs, new


def batch_nll(cfg: ModelConfig, params: ParamStore, batch: Batch, train=False, rng=None):
    """Teacher-forced summed NLL over a padded batch. Returns ``(loss, n_tokens)``."""
    ctx = prepare_context(cfg, params, batch.src, batch.src_len, batch.global_feat,
                          batch.spatial_feat, train, rng)
    inp, tgt = batch.trg[:, :-1], batch.trg[:, 1:]
    tmask = tgt != PAD
    Y = _embed_target(params, ctx, inp)
    YW = nx.linear(Y, params["dec.gru1.W"], params["dec.gru1.b"])
    h = ctx.h0
    outs = []
    for t in range(inp.shape[1]):
        st = _cgru_step(cfg, params, Y[:, t], YW[:, t], h, ctx)
        outs.append(_readout(params, Y[:, t], st))
        h = st.h_tilde
    O = nx.dropout(nx.stack(outs, axis=1), cfg.dropout[2], train, rng)
    logits = nx.linear(O, params["out.W_o"], params["out.b_o"])
    return nx.softmax_xent(logits, tgt, tmask), int(tmask.sum())


def sentence_nll(cfg: ModelConfig, params: ParamStore, sample, train_mode=False, rng=None):
    """Summed token NLL of one sample (scalar Tensor)."""
    loss, _ = batch_nll(cfg, params, collate([sample]), train_mode, rng)
    return loss


def check_sample(cfg: ModelConfig, sample):
    if cfg.uses_global and sample.global_feat is None:
        raise ValueError(f"variant {cfg.variant} needs global features")
    if cfg.uses_spatial and sample.spatial_feat is None:
        raise ValueError("fusion-conv needs spatial features")
    if cfg.uses_global and sample.global_feat.shape[-1] != cfg.global_dim:
        raise ValueError(f"global feature dim {sample.global_feat.shape[-1]} != {cfg.global_dim}")
    if cfg.uses_spatial and tuple(sample.spatial_feat.shape) != (cfg.n_regions, cfg.region_dim):
        raise ValueError(f"spatial feature shape {sample.spatial_feat.shape} != "
                         f"{(cfg.n_regions, cfg.region_dim)}")


class FrozenModel:
    """Inference wrapper: no graph recording, arrays in and out."""

    def __init__(self, cfg: ModelConfig, params: ParamStore):
        self.cfg = cfg
        self.params = params

    def start(self, sample):
        check_sample(self.cfg, sample)
        with nx.no_grad():
            src = np.asarray(sample.src_ids, dtype=np.int64)[None, :]
            g = None if sample.global_feat is None else sample.global_feat[None]
            sp = None if sample.spatial_feat is None else sample.spatial_feat[None]
            ctx = prepare_context(self.cfg, self.params, src, np.array([src.shape[1]]), g, sp)
        return ctx, ctx.h0.data

    def step(self, ctx, prev_ids, h):
        """Advance ``k`` hypotheses; returns ``(probs (k, V), new_h (k, R))``."""
        with nx.no_grad():
            probs, st = decode_step(self.cfg, self.params, prev_ids, Tensor(h), ctx)
        return probs.data, st.h_tilde.data


def toy_config(variant: str, **overrides) -> ModelConfig:
    """Tiny dimensions for finite-difference checks; dropout off."""
    kw = dict(variant=variant, src_vocab_size=20, trg_vocab_size=20, emb_dim=8, rnn_dim=8,
              global_dim=12, n_regions=4, region_dim=6, dropout=(0.0, 0.0, 0.0))
    kw.update(overrides)
    return ModelConfig(**kw)


def toy_batch(cfg: ModelConfig, seed=0, lengths=((2, 2), (1, 1))) -> Batch:
    """Random padded batch whose rows have different source/target lengths."""
    from .datastore import make_sample
    rng = nx.make_rng(seed)
    samples = []
    for m, n in lengths:
        samples.append(make_sample(
            rng.integers(4, cfg.src_vocab_size, size=m), rng.integers(4, cfg.trg_vocab_size, size=n),
            rng.standard_normal(cfg.global_dim), rng.standard_normal((cfg.n_regions, cfg.region_dim))))
    return collate(samples)


def check_gradients(cfg: ModelConfig, seed=0, eps=1e-5, tol=1e-4, batch=None):
    """Float64 finite-difference check of ``batch_nll`` for ``cfg``."""
    if any(cfg.dropout):
        raise ValueError("gradient checks need dropout (0, 0, 0)")
    params = build_params(cfg, seed).astype(np.float64)
    batch = batch if batch is not None else toy_batch(cfg, seed)
    return nx.grad_check(lambda: batch_nll(cfg, params, batch)[0], params, eps=eps, tol=tol)
