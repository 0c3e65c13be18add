"""Parallel corpora, visual feature files, batching and the synthetic corpus."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numerics import make_rng
from .textpipe import BOS, EOS, PAD, Vocabulary


class DataError(ValueError):
    """Malformed or misaligned input data."""


@dataclass
class Sample:
    src_ids: np.ndarray
    trg_ids: np.ndarray
    global_feat: np.ndarray | None = None
    spatial_feat: np.ndarray | None = None


@dataclass
class Batch:
    src: np.ndarray          # (B, M) int, 0-padded
    src_len: np.ndarray      # (B,)
    trg: np.ndarray          # (B, T) int, <bos> ... <eos>, 0-padded
    trg_len: np.ndarray
    global_feat: np.ndarray | None = None   # (B, D_g)
    spatial_feat: np.ndarray | None = None  # (B, P, D_s)
    index: np.ndarray | None = None         # positions in the source sample list

    @property
    def size(self):
        return len(self.src)

    @property
    def src_mask(self):
        return (np.arange(self.src.shape[1])[None, :] < self.src_len[:, None])


def make_sample(src_ids, trg_ids=None, global_feat=None, spatial_feat=None) -> Sample:
    """Wrap raw id lists, adding <eos> / <bos> framing where missing."""
    src = list(src_ids)
    if not src or src[-1] != EOS:
        src.append(EOS)
    trg = list(trg_ids) if trg_ids is not None else []
    if not trg or trg[0] != BOS:
        trg.insert(0, BOS)
    if trg[-1] != EOS or len(trg) == 1:
        trg.append(EOS)
    return Sample(np.asarray(src, dtype=np.int64), np.asarray(trg, dtype=np.int64),
                  global_feat, spatial_feat)


def read_lines(path) -> list[str]:
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def load_parallel(src_path, trg_path, src_vocab: Vocabulary, trg_vocab: Vocabulary):
    src_lines = read_lines(src_path)
    trg_lines = read_lines(trg_path)
    if len(src_lines) != len(trg_lines):
        raise DataError(f"line-count mismatch: {src_path} has {len(src_lines)} lines, "
                        f"{trg_path} has {len(trg_lines)}")
    samples = []
    for n, (s, t) in enumerate(zip(src_lines, trg_lines), start=1):
        if not s.split():
            raise DataError(f"{src_path}:{n}: empty line")
        if not t.split():
            raise DataError(f"{trg_path}:{n}: empty line")
        samples.append(make_sample(src_vocab.encode(s.split()), trg_vocab.encode(t.split())))
    return samples


def load_source(src_path, src_vocab: Vocabulary):
    samples = []
    for n, s in enumerate(read_lines(src_path), start=1):
        if not s.split():
            raise DataError(f"{src_path}:{n}: empty line")
        samples.append(make_sample(src_vocab.encode(s.split())))
    return samples


# --------------------------------------------------------------------------
# feature files

FEAT_MAGIC = b"MMTF"
FEAT_VERSION = 1


@dataclass
class FeatureStore:
    """``n`` rows of rank-1 (global) or rank-2 (spatial) float32 records."""
    data: np.ndarray

    @property
    def rank(self):
        return self.data.ndim - 1

    @property
    def record_shape(self):
        return self.data.shape[1:]

    def __len__(self):
        return len(self.data)

    def __getitem__(self, i):
        return self.data[i]


def write_features(path, data):
    data = np.ascontiguousarray(data, dtype="<f4")
    if data.ndim not in (2, 3):
        raise DataError(f"features must be (n, D) or (n, P, D), got {data.shape}")
    rank = data.ndim - 1
    header = FEAT_MAGIC + struct.pack(f"<II{rank}II", FEAT_VERSION, rank,
                                      *data.shape[1:], data.shape[0])
    Path(path).write_bytes(header + data.tobytes())


def load_features(path, expect_rank: int | None = None) -> FeatureStore:
    buf = Path(path).read_bytes()
    if buf[:4] != FEAT_MAGIC:
        raise DataError(f"{path}: bad magic {buf[:4]!r}, expected {FEAT_MAGIC!r}")
    if len(buf) < 12:
        raise DataError(f"{path}: truncated header at byte {len(buf)}")
    version, rank = struct.unpack_from("<II", buf, 4)
    if version != FEAT_VERSION:
        raise DataError(f"{path}: unsupported feature format version {version}")
    if rank not in (1, 2):
        raise DataError(f"{path}: record rank must be 1 or 2, got {rank}")
    hdr = 12 + 4 * rank + 4
    if len(buf) < hdr:
        raise DataError(f"{path}: truncated header at byte {len(buf)}")
    *dims, count = struct.unpack_from(f"<{rank}II", buf, 12)
    if expect_rank is not None and rank != expect_rank:
        kind = {1: "global", 2: "spatial"}
        raise DataError(f"{path}: rank mismatch, file holds {kind[rank]} (rank {rank}) "
                        f"records but {kind[expect_rank]} (rank {expect_rank}) expected")
    need = 4 * count * int(np.prod(dims))
    have = len(buf) - hdr
    if have < need:
        raise DataError(f"{path}: truncated payload, expected {need} bytes after offset "
                        f"{hdr} but file ends at byte offset {len(buf)}")
    if have > need:
        raise DataError(f"{path}: {have - need} trailing bytes after payload at offset "
                        f"{hdr + need}; header dims disagree with payload")
    arr = np.frombuffer(buf, dtype="<f4", offset=hdr).reshape(count, *dims)
    return FeatureStore(arr.astype(np.float32))


def attach_features(samples, global_feats=None, spatial_feats=None, normalize=False):
    """Attach aligned feature rows in place; counts must match exactly."""
    for store, attr in ((global_feats, "global_feat"), (spatial_feats, "spatial_feat")):
        if store is None:
            continue
        data = store.data if isinstance(store, FeatureStore) else np.asarray(store)
        if len(data) != len(samples):
            raise DataError(f"{attr}: {len(data)} feature rows for {len(samples)} samples")
        if normalize:
            norms = np.linalg.norm(data, axis=-1, keepdims=True)
            data = data / np.maximum(norms, 1e-12)
        for s, row in zip(samples, data):
            setattr(s, attr, row)
    return samples


# --------------------------------------------------------------------------
# batching


def collate(samples, index=None) -> Batch:
    B = len(samples)
    src_len = np.array([len(s.src_ids) for s in samples], dtype=np.int64)
    trg_len = np.array([len(s.trg_ids) for s in samples], dtype=np.int64)
    src = np.full((B, src_len.max()), PAD, dtype=np.int64)
    trg = np.full((B, trg_len.max()), PAD, dtype=np.int64)
    for i, s in enumerate(samples):
        src[i, :len(s.src_ids)] = s.src_ids
        trg[i, :len(s.trg_ids)] = s.trg_ids
    g = sp = None
    if samples[0].global_feat is not None:
        g = np.stack([s.global_feat for s in samples])
    if samples[0].spatial_feat is not None:
        sp = np.stack([s.spatial_feat for s in samples])
    return Batch(src, src_len, trg, trg_len, g, sp,
                 np.arange(B) if index is None else np.asarray(index))


def make_batches(samples, batch_size=32, rng=None, shuffle=False) -> list[Batch]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.arange(len(samples))
    if shuffle:
        if rng is None:
            raise ValueError("shuffling needs an rng")
        order = rng.permutation(len(samples))
    return [collate([samples[i] for i in order[k:k + batch_size]], order[k:k + batch_size])
            for k in range(0, len(samples), batch_size)]


# --------------------------------------------------------------------------
# synthetic grounded-disambiguation corpus


@dataclass
class SynthConfig:
    n_train: int = 1000
    n_valid: int = 100
    n_test: int = 200
    n_ambiguous_words: int = 5
    senses_per_word: int = 2
    n_filler: int = 20
    min_len: int = 3
    max_len: int = 6
    D_g: int = 32
    P: int = 16
    D_s: int = 16
    noise_sigma: float = 0.1
    signal: float = 1.0

    def validate(self):
        if self.senses_per_word < 2:
            raise DataError("senses_per_word must be >= 2")
        if self.D_g < self.senses_per_word or self.D_s < self.senses_per_word:
            raise DataError(f"feature dims (D_g={self.D_g}, D_s={self.D_s}) must be >= "
                            f"senses_per_word={self.senses_per_word}")
        if self.P < 1 or self.n_ambiguous_words < 1 or self.n_filler < 1:
            raise DataError("P, n_ambiguous_words and n_filler must be positive")
        if not 1 <= self.min_len <= self.max_len:
            raise DataError("need 1 <= min_len <= max_len")
        if self.noise_sigma < 0:
            raise DataError("noise_sigma must be >= 0")


@dataclass
class SynthSplit:
    src: list            # token lists
    trg: list
    global_feat: np.ndarray
    spatial_feat: np.ndarray
    senses: np.ndarray   # sense label per sentence
    positions: np.ndarray  # index of the ambiguous token
    words: np.ndarray    # which ambiguous word

    def __len__(self):
        return len(self.src)

    def correct_token(self, i):
        return self.trg[i][self.positions[i]]


@dataclass
class SynthCorpus:
    config: SynthConfig
    seed: int
    splits: dict = field(default_factory=dict)

    def sense_tokens(self, word):
        return [sense_token(word, j) for j in range(self.config.senses_per_word)]


def sense_token(word, sense):
    return f"y{word}_{sense}"


def _directions(rng, n, dim):
    q, _ = np.linalg.qr(rng.standard_normal((dim, n)))
    return q.T  # n orthonormal rows


def synth_generate(cfg: SynthConfig | None = None, seed: int = 0, out_dir=None) -> SynthCorpus:
    """Toy language where one token per sentence is ambiguous from text alone.

    The ambiguous source token ``x{k}`` translates to ``y{k}_{j}`` for a sense
    ``j`` drawn uniformly and independently of every other token. Only the
    visual features carry ``j``: the global vector is a sense direction plus
    Gaussian noise; the spatial map holds that signal in one random cell.
    """
    cfg = cfg or SynthConfig()
    cfg.validate()
    root = np.random.SeedSequence(seed)
    dir_rng, *split_seeds = [make_rng(s) for s in root.spawn(4)]
    g_dirs = _directions(dir_rng, cfg.senses_per_word, cfg.D_g) * cfg.signal
    s_dirs = _directions(dir_rng, cfg.senses_per_word, cfg.D_s) * cfg.signal

    corpus = SynthCorpus(cfg, seed)
    for name, n, rng in zip(("train", "valid", "test"),
                            (cfg.n_train, cfg.n_valid, cfg.n_test), split_seeds):
        src, trg = [], []
        senses = rng.integers(0, cfg.senses_per_word, size=n)
        words = rng.integers(0, cfg.n_ambiguous_words, size=n)
        positions = np.zeros(n, dtype=np.int64)
        for i in range(n):
            length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
            fillers = rng.integers(0, cfg.n_filler, size=length)
            pos = int(rng.integers(0, length))
            positions[i] = pos
            s_toks = [f"s{f:02d}" for f in fillers]
            t_toks = [f"t{f:02d}" for f in fillers]
            s_toks[pos] = f"x{words[i]}"
            t_toks[pos] = sense_token(words[i], senses[i])
            src.append(s_toks)
            trg.append(t_toks)
        gfeat = g_dirs[senses] + cfg.noise_sigma * rng.standard_normal((n, cfg.D_g))
        sfeat = cfg.noise_sigma * rng.standard_normal((n, cfg.P, cfg.D_s))
        cells = rng.integers(0, cfg.P, size=n)
        sfeat[np.arange(n), cells] += s_dirs[senses]
        corpus.splits[name] = SynthSplit(src, trg, gfeat.astype(np.float32),
                                         sfeat.astype(np.float32), senses, positions, words)
    if out_dir is not None:
        write_synth(corpus, out_dir)
    return corpus


def write_synth(corpus: SynthCorpus, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {}
    for name, sp in corpus.splits.items():
        (out / f"{name}.src").write_text("".join(" ".join(t) + "\n" for t in sp.src),
                                         encoding="utf-8")
        (out / f"{name}.trg").write_text("".join(" ".join(t) + "\n" for t in sp.trg),
                                         encoding="utf-8")
        write_features(out / f"{name}.global.mmtf", sp.global_feat)
        write_features(out / f"{name}.spatial.mmtf", sp.spatial_feat)
        (out / f"{name}.labels").write_text(
            "".join(f"{p}\t{sp.trg[i][p]}\n" for i, p in enumerate(sp.positions)),
            encoding="utf-8")
        files[name] = [f"{name}.{ext}" for ext in
                       ("src", "trg", "global.mmtf", "spatial.mmtf", "labels")]
    manifest = {"generator": "mmtl-synth v1", "seed": corpus.seed,
                "config": asdict(corpus.config), "files": files}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")


def read_labels(path):
    """Return ``[(position, correct_token), ...]`` from a ``.labels`` file."""
    rows = []
    for line in read_lines(path):
        pos, tok = line.split("\t")
        rows.append((int(pos), tok))
    return rows


def synth_vocabs(corpus: SynthCorpus):
    """Source/target vocabularies covering every token the generator can emit."""
    from .textpipe import vocab_build
    cfg = corpus.config
    src = [f"s{f:02d}" for f in range(cfg.n_filler)] + [f"x{k}" for k in range(cfg.n_ambiguous_words)]
    trg = [f"t{f:02d}" for f in range(cfg.n_filler)] + [
        sense_token(k, j) for k in range(cfg.n_ambiguous_words) for j in range(cfg.senses_per_word)]
    return vocab_build([src]), vocab_build([trg])


def synth_samples(split: SynthSplit, src_vocab: Vocabulary, trg_vocab: Vocabulary) -> list[Sample]:
    """Encode a synthetic split with both feature kinds attached."""
    return [make_sample(src_vocab.encode(s), trg_vocab.encode(t), g, sp)
            for s, t, g, sp in zip(split.src, split.trg, split.global_feat, split.spatial_feat)]
