"""Counter-fitted word vectors and substitute-word sets."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from .core import TextSample

log = logging.getLogger(__name__)


@dataclass
class VectorStore:
    """Lowercased word -> vector table. Immutable after construction."""

    words: list[str] = field(default_factory=list)
    vectors: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))
    malformed: int = 0
    duplicates: int = 0

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] != len(self.words):
            raise ValueError("vectors must be a (len(words), dim) matrix")
        self.index = {w: i for i, w in enumerate(self.words)}
        if len(self.index) != len(self.words):
            raise ValueError("duplicate words in vector store")
        self._sq = np.einsum("ij,ij->i", self.vectors, self.vectors)
        self.vectors.setflags(write=False)

    @classmethod
    def from_dict(cls, table: dict[str, Sequence[float]]) -> "VectorStore":
        words, vecs = [], []
        for w, v in table.items():
            w = w.lower()
            if w in words:
                continue
            words.append(w)
            vecs.append(v)
        dim = len(vecs[0]) if vecs else 0
        return cls(words, np.array(vecs, dtype=np.float64).reshape(len(words), dim))

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self):
        return len(self.words)

    def __contains__(self, word: str) -> bool:
        return word.lower() in self.index

    def vector(self, word: str) -> np.ndarray:
        return self.vectors[self.index[word.lower()]]

    def similarities(self, word: str) -> np.ndarray:
        """Cosine of every stored vector against ``word``'s vector."""
        i = self.index[word.lower()]
        dots = self.vectors @ self.vectors[i]
        denom = np.sqrt(self._sq * self._sq[i])
        with np.errstate(invalid="ignore", divide="ignore"):
            sims = np.where(denom > 0, dots / np.where(denom > 0, denom, 1.0), 0.0)
        return np.clip(sims, -1.0, 1.0)


def load_vectors(path: str | Path) -> VectorStore:
    """Read ``word v1 ... vD`` lines.

    Lines whose values do not parse are skipped and counted in
    ``store.malformed``; a line with a different number of values than the
    first one is an error.
    """
    words, rows = [], []
    seen = set()
    dim = None
    malformed = dup = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.rstrip("\n").split()
            if not parts:
                continue
            if len(parts) < 2:
                malformed += 1
                continue
            try:
                vec = [float(x) for x in parts[1:]]
            except ValueError:
                malformed += 1
                continue
            if dim is None:
                dim = len(vec)
            elif len(vec) != dim:
                raise ValueError(f"{path}:{lineno}: expected {dim} values, found {len(vec)}")
            word = parts[0].lower()
            if word in seen:
                dup += 1
                continue
            seen.add(word)
            words.append(word)
            rows.append(vec)
    if malformed:
        log.warning("%s: skipped %d malformed lines", path, malformed)
    store = VectorStore(words, np.array(rows, dtype=np.float64).reshape(len(words), dim or 0))
    store.malformed = malformed
    store.duplicates = dup
    return store


def save_vectors(store: VectorStore, path: str | Path, precision: int = 6):
    with open(path, "w", encoding="utf-8") as fh:
        for w, v in zip(store.words, store.vectors):
            fh.write(w + " " + " ".join(f"{x:.{precision}f}" for x in v) + "\n")


class SynonymProvider(Protocol):
    """Fallback source of substitutes for words without a stored vector."""

    def candidates(self, text: TextSample, position: int, count: int) -> list[str]: ...


@dataclass
class StaticSynonyms:
    """Lookup-table provider: word -> ordered list of synonyms."""

    table: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        self.table = {k.lower(): list(v) for k, v in self.table.items()}

    @classmethod
    def load(cls, path: str | Path) -> "StaticSynonyms":
        with open(path, encoding="utf-8") as fh:
            return cls(json.load(fh))

    def candidates(self, text: TextSample, position: int, count: int) -> list[str]:
        word = text.tokens[position].lower()
        out = []
        for s in self.table.get(word, []):
            if s and s.lower() != word and s not in out:
                out.append(s)
            if len(out) >= count:
                break
        return out


class NoSynonyms:
    def candidates(self, text, position, count):
        return []


def substitute_set(word: str, store: VectorStore, tau: float, fallback: SynonymProvider | None = None,
                   context: tuple[TextSample, int] | None = None, W: int = 10) -> list[str]:
    """Candidate replacements for ``word``.

    Stored words: every other vocabulary entry whose cosine with ``word`` is
    strictly above ``tau``, most similar first, ties alphabetical. Unknown
    words: up to ``W`` words from ``fallback``.
    """
    if not -1.0 <= tau <= 1.0:
        raise ValueError("tau must lie in [-1, 1]")
    key = word.lower()
    if key in store.index:
        sims = store.similarities(key)
        hits = [(-float(sims[i]), store.words[i]) for i in np.flatnonzero(sims > tau)
                if store.words[i] != key]
        return [w for _, w in sorted(hits)]
    if fallback is None:
        return []
    if context is None:
        context = (TextSample("_", word), 0)
    text, pos = context
    return [c for c in fallback.candidates(text, pos, W) if c.lower() != key][:W]
