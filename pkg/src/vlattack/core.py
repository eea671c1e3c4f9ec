"""Shared types, budgets and small numeric helpers."""

from __future__ import annotations

import json
import math
import re
import struct
import warnings
from dataclasses import dataclass, field, fields, asdict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")

ABLATIONS = frozenset({"no_cf", "no_li", "no_ig", "no_io"})


class ZeroNormWarning(RuntimeWarning):
    pass


def tokenize(raw: str) -> list[str]:
    return _TOKEN_RE.findall(raw)


def is_word(token: str) -> bool:
    return any(ch.isalnum() for ch in token)


@dataclass(frozen=True)
class ImageSample:
    """An H x W x C image with values in [0, 1].

    Pixels are stored as float32 unless a float64 array is passed in, which
    is kept as-is (used by gradient checks that need double precision).
    """

    id: str
    pixels: np.ndarray
    source_path: str | None = None

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.dtype != np.float64:
            px = px.astype(np.float32)
        if px.ndim == 2:
            px = px[:, :, None]
        if px.ndim != 3 or min(px.shape) < 1:
            raise ValueError(f"image {self.id!r}: expected H x W x C pixels, got shape {px.shape}")
        if not np.all(np.isfinite(px)) or px.min() < 0.0 or px.max() > 1.0:
            raise ValueError(f"image {self.id!r}: pixel values must lie in [0, 1]")
        px = px.copy()
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pixels.shape

    def with_pixels(self, pixels: np.ndarray) -> "ImageSample":
        return ImageSample(self.id, pixels, self.source_path)


@dataclass(frozen=True)
class TextSample:
    id: str
    raw: str
    tokens: tuple[str, ...] = ()

    def __post_init__(self):
        toks = tuple(self.tokens) if self.tokens else tuple(tokenize(self.raw))
        if not toks:
            raise ValueError(f"text {self.id!r} has no tokens")
        if "".join(toks) != "".join(self.raw.split()):
            raise ValueError(f"text {self.id!r}: tokens do not reproduce the raw string")
        object.__setattr__(self, "tokens", toks)

    def __len__(self):
        return len(self.tokens)

    def replace(self, position: int, word: str) -> "TextSample":
        """Return a copy with the token at ``position`` swapped for ``word``.

        The raw string keeps its original spacing.
        """
        spans = [m.span() for m in _TOKEN_RE.finditer(self.raw)]
        start, end = spans[position]
        raw = self.raw[:start] + word + self.raw[end:]
        toks = list(self.tokens)
        toks[position] = word
        return TextSample(self.id, raw, tuple(toks))


@dataclass
class ImageTextPair:
    image: ImageSample
    captions: list[TextSample]


@dataclass
class PairBatch:
    pairs: list[ImageTextPair]

    def __post_init__(self):
        if not self.pairs:
            raise ValueError("a batch needs at least one image")
        ids = []
        for p in self.pairs:
            if not p.captions:
                raise ValueError(f"image {p.image.id!r} has no captions")
            ids.append(p.image.id)
            ids.extend(c.id for c in p.captions)
        if len(set(ids)) != len(ids):
            raise ValueError("ids must be unique within a batch")

    def __len__(self):
        return len(self.pairs)


@dataclass(frozen=True)
class PerturbBudget:
    epsilon_v: float = 2 / 255
    epsilon_t: int = 1

    def __post_init__(self):
        if self.epsilon_v < 0:
            raise ValueError("epsilon_v must be >= 0")
        if int(self.epsilon_t) != self.epsilon_t or self.epsilon_t < 0:
            raise ValueError("epsilon_t must be a nonnegative integer")


@dataclass
class AttackConfig:
    budget: PerturbBudget = field(default_factory=PerturbBudget)
    alpha: float = 0.5 / 255
    steps_init: int = 10
    steps_contrastive: int = 10
    tau: float = 0.4
    W: int = 10
    lambda_: float = -10.0
    batch_size: int = 16
    scales: tuple[float, ...] = (0.50, 0.75, 1.00, 1.25, 1.50)
    top_k: tuple[int, ...] = (1, 5, 10)
    seed: int = 0
    ablation: frozenset[str] = frozenset()
    m_captions: int = 5
    skip_stopwords: bool = False
    shuffle: bool = False
    restrict_to_clean_hits: bool = True
    clean_text_gallery: bool = False
    # re-run (init, refine) this many times; >1 is experimental
    rounds: int = 1

    def __post_init__(self):
        if isinstance(self.budget, dict):
            self.budget = PerturbBudget(**self.budget)
        self.scales = tuple(float(s) for s in self.scales)
        self.top_k = tuple(int(k) for k in self.top_k)
        self.ablation = frozenset(self.ablation)
        self.validate()

    def validate(self):
        errors = self.problems()
        if errors:
            raise ValueError("invalid attack config: " + "; ".join(errors))

    def problems(self) -> list[str]:
        errs = []
        if not self.alpha > 0:
            errs.append("alpha must be > 0")
        if self.steps_init < 0 or self.steps_contrastive < 0:
            errs.append("step counts must be >= 0")
        if not -1.0 <= self.tau <= 1.0:
            errs.append("tau must lie in [-1, 1]")
        if self.W < 0:
            errs.append("W must be >= 0")
        if self.batch_size < 1:
            errs.append("batch_size must be >= 1")
        if not self.scales or any(s <= 0 for s in self.scales):
            errs.append("scales must be nonempty and positive")
        if not self.top_k or any(k < 1 for k in self.top_k):
            errs.append("top_k entries must be >= 1")
        if self.m_captions < 1:
            errs.append("m_captions must be >= 1")
        if self.rounds < 1:
            errs.append("rounds must be >= 1")
        unknown = set(self.ablation) - ABLATIONS
        if unknown:
            errs.append(f"unknown ablation switches {sorted(unknown)}")
        return errs

    def to_dict(self) -> dict:
        d = {}
        for f in fields(self):
            val = getattr(self, f.name)
            if isinstance(val, PerturbBudget):
                val = asdict(val)
            elif isinstance(val, frozenset):
                val = sorted(val)
            elif isinstance(val, tuple):
                val = list(val)
            d["lambda" if f.name == "lambda_" else f.name] = val
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AttackConfig":
        d = dict(d)
        if "lambda" in d:
            d["lambda_"] = d.pop("lambda")
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AdversarialRecord:
    """Outcome for one (image, caption) pair."""

    pair_id: str
    image_id: str
    adversarial_image: ImageSample
    adversarial_text: TextSample
    original_text: TextSample
    linf_distance: float
    edit_distance: int
    text_similarity: float = float("nan")
    substituted: bool = True
    init_trace: list[float] = field(default_factory=list)
    refine_trace: list[float] = field(default_factory=list)

    @property
    def loss_trace(self) -> list[float]:
        return self.init_trace + self.refine_trace

    def to_json(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "image_id": self.image_id,
            "original_text": self.original_text.raw,
            "adversarial_text": self.adversarial_text.raw,
            "substituted": self.substituted,
            "text_similarity": self.text_similarity,
            "linf_distance": self.linf_distance,
            "edit_distance": self.edit_distance,
            "init_trace": self.init_trace,
            "refine_trace": self.refine_trace,
        }


def cosine(u, v) -> float:
    """Cosine similarity; zero-norm input yields 0.0 with a ZeroNormWarning."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise ValueError(f"length mismatch: {u.shape[0]} vs {v.shape[0]}")
    uu = float(np.dot(u, u))
    vv = float(np.dot(v, v))
    if uu == 0.0 or vv == 0.0:
        warnings.warn("cosine of a zero-norm vector, returning 0", ZeroNormWarning, stacklevel=2)
        return 0.0
    # sqrt(uu * vv) == uu exactly when u == v, so self-similarity is exactly 1
    c = float(np.dot(u, v)) / math.sqrt(uu * vv)
    return min(1.0, max(-1.0, c))


def linf_distance(a, b) -> float:
    pa = a.pixels if isinstance(a, ImageSample) else np.asarray(a)
    pb = b.pixels if isinstance(b, ImageSample) else np.asarray(b)
    if pa.shape != pb.shape:
        raise ValueError(f"shape mismatch: {pa.shape} vs {pb.shape}")
    if pa.size == 0:
        return 0.0
    return float(np.max(np.abs(pa.astype(np.float64) - pb.astype(np.float64))))


def word_edit_distance(a: TextSample | Sequence[str], b: TextSample | Sequence[str]) -> int:
    """Count of substituted word positions (substitution-only distance)."""
    ta = [t.lower() for t in (a.tokens if isinstance(a, TextSample) else a)]
    tb = [t.lower() for t in (b.tokens if isinstance(b, TextSample) else b)]
    n = min(len(ta), len(tb))
    return abs(len(ta) - len(tb)) + sum(x != y for x, y in zip(ta[:n], tb[:n]))


def match_case(template: str, word: str) -> str:
    if template.isupper() and len(template) > 1:
        return word.upper()
    if template[:1].isupper():
        return word[:1].upper() + word[1:]
    return word


# --- dataset manifest -------------------------------------------------------

def load_image(path: str | Path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    return arr.astype(np.float32) / np.float32(255.0)


def load_manifest(path: str | Path, m_captions: int | None = None) -> list[ImageTextPair]:
    """Read a JSON Lines dataset manifest; image paths resolve relative to it."""
    path = Path(path)
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                img_path = Path(obj["image"])
                caps = obj["captions"]
                iid = str(obj["id"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{lineno}: malformed manifest entry ({exc})") from exc
            if not img_path.is_absolute():
                img_path = path.parent / img_path
            try:
                pixels = load_image(img_path)
            except OSError as exc:
                raise OSError(f"{path}:{lineno}: cannot read image {img_path}: {exc}") from exc
            if m_captions is not None:
                caps = caps[:m_captions]
            texts = [TextSample(f"{iid}#{j}", c) for j, c in enumerate(caps)]
            pairs.append(ImageTextPair(ImageSample(iid, pixels, str(img_path)), texts))
    return pairs


# --- binary blobs: u32 header length, JSON header, little-endian float32 --------

def write_blob(path: str | Path, header: dict, arrays: dict[str, np.ndarray]):
    entries = []
    offset = 0
    chunks = []
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        chunks.append(data)
        offset += len(data)
    head = dict(header, dtype="float32-le", tensors=entries)
    hbytes = json.dumps(head, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(struct.pack("<I", len(hbytes)))
        fh.write(hbytes)
        for c in chunks:
            fh.write(c)


def read_blob(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    (n,) = struct.unpack("<I", raw[:4])
    header = json.loads(raw[4 : 4 + n].decode("utf-8"))
    body = raw[4 + n :]
    arrays = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=e["offset"])
        arrays[e["name"]] = arr.reshape(e["shape"]).astype(np.float32)
    return header, arrays


def batches(items: Sequence, size: int) -> Iterable[list]:
    for i in range(0, len(items), size):
        yield list(items[i : i + size])
