"""Punctuation normalisation, tokenisation, BPE and vocabularies."""
from __future__ import annotations

import re
import warnings
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

MARKER = "@@"
BPE_HEADER = "mmtl-bpe v1"

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")

# Versioned so that tokenisation stays stable across releases.
NORMALIZATION_VERSION = 1
NORMALIZATION_RULES = (
    ("“", '"'), ("”", '"'), ("„", '"'), ("‟", '"'),
    ("«", '"'), ("»", '"'), ("″", '"'),
    ("‘", "'"), ("’", "'"), ("‚", "'"), ("‛", "'"), ("′", "'"),
    ("‐", "-"), ("‑", "-"), ("‒", "-"), ("–", "-"),
    ("—", "-"), ("―", "-"), ("−", "-"),
    ("…", "..."),
)

# words keep internal apostrophes and hyphens; any other non-space symbol is
# its own token
_TOKEN_RE = re.compile(r"\w+(?:['-]\w+)*|[^\w\s]")


def normalize_line(raw: str) -> list[str]:
    """Normalise punctuation, split it from words and lowercase."""
    for src, dst in NORMALIZATION_RULES:
        raw = raw.replace(src, dst)
    raw = " ".join(raw.split())
    return _TOKEN_RE.findall(raw.lower())


@dataclass
class BpeModel:
    merges: list = field(default_factory=list)
    marker: str = MARKER

    def __post_init__(self):
        self.merges = [tuple(m) for m in self.merges]
        if len(set(self.merges)) != len(self.merges):
            raise ValueError("duplicate merge in BPE model")
        self._ranks = {m: i for i, m in enumerate(self.merges)}
        self._cache = {}

    def __len__(self):
        return len(self.merges)

    def segment(self, word: str) -> list[str]:
        """Split one word into symbols, applying merges in learned order."""
        if word in self._cache:
            return self._cache[word]
        symbols = list(word)
        last = -1
        while len(symbols) > 1:
            best = None
            for pair in zip(symbols, symbols[1:]):
                r = self._ranks.get(pair)
                if r is not None and r > last and (best is None or r < best):
                    best = r
            if best is None:
                break
            symbols = _merge_pair(symbols, self.merges[best])
            last = best
        self._cache[word] = symbols
        return symbols

    def save(self, path):
        lines = [BPE_HEADER] + [f"{a} {b}" for a, b in self.merges]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if not lines or lines[0].strip() != BPE_HEADER:
            raise ValueError(f"{path}: missing '{BPE_HEADER}' header")
        merges = []
        for n, line in enumerate(lines[1:], start=2):
            if not line.strip():
                continue
            parts = line.split(" ")
            if len(parts) != 2:
                raise ValueError(f"{path}:{n}: expected 'left right', got {line!r}")
            merges.append((parts[0], parts[1]))
        return cls(merges)


def _merge_pair(symbols, pair):
    a, b = pair
    out = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == a and symbols[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return out


def bpe_learn(corpus, n_merges: int) -> BpeModel:
    """Learn merges greedily over frequency-weighted word types.

    ``corpus`` is an iterable of token lists (plain strings are split on
    whitespace). Stops early when no pair occurs at least twice. Ties go to
    the lexicographically smallest pair.
    """
    if n_merges < 0:
        raise ValueError("n_merges must be >= 0")
    freqs = Counter()
    for line in corpus:
        toks = line.split() if isinstance(line, str) else line
        freqs.update(toks)
    if not freqs:
        raise ValueError("cannot learn BPE from an empty corpus")

    words = {w: list(w) for w in freqs}
    merges = []
    for _ in range(n_merges):
        counts = Counter()
        for w, syms in words.items():
            f = freqs[w]
            for pair in zip(syms, syms[1:]):
                counts[pair] += f
        if not counts:
            break
        top = max(counts.values())
        if top < 2:
            break
        pair = min(p for p, c in counts.items() if c == top)
        merges.append(pair)
        for w, syms in words.items():
            if len(syms) > 1:
                words[w] = _merge_pair(syms, pair)
    return BpeModel(merges)


def bpe_apply(model: BpeModel, tokens) -> list[str]:
    out = []
    for word in tokens:
        syms = model.segment(word)
        out.extend(s + model.marker for s in syms[:-1])
        out.append(syms[-1])
    return out


def bpe_undo(subwords, marker=MARKER) -> list[str]:
    """Glue marker-carrying subwords onto their successors."""
    out = []
    buf = ""
    for sw in subwords:
        if sw.endswith(marker):
            buf += sw[: -len(marker)]
        else:
            out.append(buf + sw)
            buf = ""
    if buf:
        warnings.warn("dangling BPE continuation marker at end of sequence", stacklevel=2)
        out.append(buf)
    return out


class Vocabulary:
    """Token/id bijection with the four reserved ids 0..3."""

    def __init__(self, tokens=()):
        self.itos = list(SPECIALS)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for t in tokens:
            if t in self.stoi:
                raise ValueError(f"duplicate vocabulary token {t!r}")
            self.stoi[t] = len(self.itos)
            self.itos.append(t)

    def __len__(self):
        return len(self.itos)

    def __contains__(self, token):
        return token in self.stoi

    def encode(self, tokens) -> list[int]:
        return [self.stoi.get(t, UNK) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.itos[i] for i in ids]

    @property
    def tokens(self):
        return self.itos[len(SPECIALS):]

    def save(self, path):
        text = "".join(f"{t}\t{i}\n" for i, t in enumerate(self.itos))
        Path(path).write_text(text, encoding="utf-8")

    @classmethod
    def load(cls, path):
        pairs = []
        for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line:
                continue
            tok, _, idx = line.rpartition("\t")
            pairs.append((int(idx), tok))
        pairs.sort()
        if [i for i, _ in pairs] != list(range(len(pairs))):
            raise ValueError(f"{path}: ids are not contiguous from 0")
        if tuple(t for _, t in pairs[: len(SPECIALS)]) != SPECIALS:
            raise ValueError(f"{path}: reserved ids 0-3 must be {SPECIALS}")
        return cls(t for _, t in pairs[len(SPECIALS):])


def vocab_build(corpus) -> Vocabulary:
    """Distinct subwords ordered by descending frequency, then lexicographically."""
    counts = Counter()
    for line in corpus:
        counts.update(line.split() if isinstance(line, str) else line)
    counts = {t: c for t, c in counts.items() if t not in SPECIALS}
    return Vocabulary(sorted(counts, key=lambda t: (-counts[t], t)))
