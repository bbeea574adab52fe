"""Byte-level corpora, contiguous splits, calibration segments and batches."""
from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

VOCAB_SIZE = 256


@dataclass(frozen=True)
class Corpus:
    tokens: np.ndarray
    source: str = "<memory>"

    def __post_init__(self):
        toks = np.asarray(self.tokens, dtype=np.int64)
        if toks.ndim != 1:
            raise ValueError("corpus tokens must be 1-D")
        if toks.size and (toks.min() < 0 or toks.max() >= VOCAB_SIZE):
            raise ValueError(f"tokens must lie in [0, {VOCAB_SIZE})")
        object.__setattr__(self, "tokens", toks)

    def __len__(self):
        return len(self.tokens)

    def decode(self) -> bytes:
        return decode(self.tokens)


@dataclass(frozen=True)
class CalibrationSet:
    segments: np.ndarray  # (n, L)
    seed: int
    offsets: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self):
        return len(self.segments)

    def batches(self, batch_size: int):
        for start in range(0, len(self.segments), batch_size):
            yield self.segments[start:start + batch_size]


def encode(data: bytes | str) -> np.ndarray:
    if isinstance(data, str):
        data = data.encode("utf-8")
    return np.frombuffer(data, dtype=np.uint8).astype(np.int64)


def decode(tokens) -> bytes:
    return np.asarray(tokens, dtype=np.uint8).tobytes()


def default_corpus_path() -> Path:
    return Path(str(resources.files("npft") / "corpora" / "default.txt"))


def load_corpus(path, split_fractions: Sequence[float] = (0.9, 0.05, 0.05)) -> tuple[Corpus, Corpus, Corpus]:
    """Read ``path`` as bytes and split it contiguously into (train, valid, calib)."""
    fr = [float(f) for f in split_fractions]
    if len(fr) != 3 or any(f < 0 for f in fr) or abs(sum(fr) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be three non-negative numbers summing to 1, got {split_fractions}")
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"corpus file not found: {path}")
    toks = encode(path.read_bytes())
    if toks.size == 0:
        raise ValueError(f"corpus file is empty: {path}")
    n = len(toks)
    n_train = int(round(fr[0] * n))
    n_valid = min(int(round(fr[1] * n)), n - n_train)
    a, b = n_train, n_train + n_valid
    name = str(path)
    return (Corpus(toks[:a], f"{name}[train]"), Corpus(toks[a:b], f"{name}[valid]"),
            Corpus(toks[b:], f"{name}[calib]"))


def sample_calibration(corpus: Corpus, n: int, L: int, seed: int) -> CalibrationSet:
    """``n`` contiguous length-``L`` segments at uniformly random offsets."""
    if n <= 0 or L <= 0:
        raise ValueError("segment count and length must be positive")
    if len(corpus) < L:
        raise ValueError(f"corpus of {len(corpus)} tokens is shorter than segment length {L}")
    rng = np.random.default_rng(seed)
    offsets = rng.integers(0, len(corpus) - L + 1, size=n)
    segs = np.stack([corpus.tokens[o:o + L] for o in offsets])
    return CalibrationSet(segs, seed, offsets)


def sample_batch(tokens: np.ndarray, batch_size: int, seq_len: int, rng: np.random.Generator) -> np.ndarray:
    if len(tokens) < seq_len:
        raise ValueError(f"need at least {seq_len} tokens, have {len(tokens)}")
    starts = rng.integers(0, len(tokens) - seq_len + 1, size=batch_size)
    return np.stack([tokens[s:s + seq_len] for s in starts])


# ---------------------------------------------------------------------------
# synthetic default corpus
# ---------------------------------------------------------------------------

_NOUNS = [("cat", "cats"), ("dog", "dogs"), ("river", "rivers"), ("farmer", "farmers"),
          ("teacher", "teachers"), ("city", "cities"), ("machine", "machines"), ("bird", "birds"),
          ("child", "children"), ("engineer", "engineers"), ("garden", "gardens"), ("ship", "ships"),
          ("mountain", "mountains"), ("student", "students"), ("market", "markets"), ("storm", "storms")]
_VERBS = [("watches", "watch"), ("finds", "find"), ("builds", "build"), ("follows", "follow"),
          ("carries", "carry"), ("remembers", "remember"), ("likes", "like"), ("visits", "visit"),
          ("paints", "paint"), ("repairs", "repair"), ("describes", "describe"), ("counts", "count")]
_INTRANS = [("sleeps", "sleep"), ("waits", "wait"), ("sings", "sing"), ("travels", "travel"),
            ("works", "work"), ("rests", "rest")]
_ADJ = ["old", "small", "bright", "quiet", "green", "heavy", "quick", "gentle", "distant", "strange",
        "warm", "busy"]
_ADV = ["slowly", "often", "carefully", "never", "always", "quietly", "again", "today"]
_PLACES = ["near the bridge", "in the morning", "by the sea", "after the rain", "under the old tree",
           "in the north", "before dinner", "at the station"]
_CONJ = ["and", "but", "because", "while", "so"]
_NAMES = ["Ada", "Boris", "Clara", "Dmitri", "Elena", "Farid", "Greta", "Hugo"]


def _noun_phrase(rng, plural: bool) -> str:
    noun = _NOUNS[rng.integers(len(_NOUNS))][1 if plural else 0]
    det = rng.choice(["the", "some", "many", "two", "three"]) if plural else rng.choice(["the", "a", "one", "every"])
    if det == "a" and rng.random() < 0.5:
        adj = _ADJ[rng.integers(len(_ADJ))]
        det = "an" if adj[0] in "aeiou" else "a"
        return f"{det} {adj} {noun}"
    if rng.random() < 0.4:
        return f"{det} {_ADJ[rng.integers(len(_ADJ))]} {noun}"
    return f"{det} {noun}"


def _clause(rng) -> str:
    plural = rng.random() < 0.5
    if rng.random() < 0.15:
        subj, plural = _NAMES[rng.integers(len(_NAMES))], False
    else:
        subj = _noun_phrase(rng, plural)
    parts = [subj]
    if rng.random() < 0.25:
        parts.append(_ADV[rng.integers(len(_ADV))])
    if rng.random() < 0.7:
        parts.append(_VERBS[rng.integers(len(_VERBS))][1 if plural else 0])
        parts.append(_noun_phrase(rng, rng.random() < 0.5))
    else:
        parts.append(_INTRANS[rng.integers(len(_INTRANS))][1 if plural else 0])
    if rng.random() < 0.35:
        parts.append(_PLACES[rng.integers(len(_PLACES))])
    return " ".join(parts)


def synthetic_text(n_bytes: int, seed: int = 0) -> str:
    """English-like text from a small agreement-respecting grammar."""
    rng = np.random.default_rng(seed)
    out: list[str] = []
    size = 0
    while size < n_bytes:
        sentences = []
        for _ in range(int(rng.integers(3, 7))):
            s = _clause(rng)
            if rng.random() < 0.3:
                s = f"{s} {_CONJ[rng.integers(len(_CONJ))]} {_clause(rng)}"
            if rng.random() < 0.1:
                s = f"{s}, {int(rng.integers(2, 100))} times"
            sentences.append(s[0].upper() + s[1:] + ("?" if rng.random() < 0.05 else "."))
        para = " ".join(sentences) + "\n\n"
        out.append(para)
        size += len(para)
    return "".join(out)[:n_bytes]
