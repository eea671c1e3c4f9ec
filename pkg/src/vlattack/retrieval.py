"""Image-text retrieval metrics before and after an attack."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .backend import Backend
from .core import ImageTextPair


@dataclass
class Gallery:
    ids: list[str]
    features: np.ndarray
    modality: str = "text"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("gallery ids must be unique")
        if self.features.ndim != 2 or self.features.shape[0] != len(self.ids):
            raise ValueError("features must be a (len(ids), dim) matrix")
        # position of each item in ascending-id order, for tie-breaking
        order = sorted(range(len(self.ids)), key=lambda i: self.ids[i])
        self._id_rank = np.empty(len(self.ids), dtype=np.int64)
        self._id_rank[order] = np.arange(len(self.ids))
        self._sq = np.einsum("ij,ij->i", self.features, self.features)

    def __len__(self):
        return len(self.ids)

    def similarities(self, query) -> np.ndarray:
        q = np.asarray(query, dtype=np.float64)
        denom = np.sqrt(self._sq * float(q @ q))
        dots = self.features @ q
        with np.errstate(invalid="ignore", divide="ignore"):
            sims = np.where(denom > 0, dots / np.where(denom > 0, denom, 1.0), 0.0)
        return np.clip(sims, -1.0, 1.0)

    def ranking(self, query) -> np.ndarray:
        """Gallery indices by descending cosine, ties by ascending id."""
        return np.lexsort((self._id_rank, -self.similarities(query)))

    def rank_of(self, query, gold: str | Iterable[str]) -> int:
        """1-based rank of the best-placed gold item."""
        golds = {gold} if isinstance(gold, str) else set(gold)
        missing = golds - set(self.ids)
        if missing:
            raise KeyError(f"gold ids not in gallery: {sorted(missing)}")
        order = self.ranking(query)
        for r, i in enumerate(order, 1):
            if self.ids[i] in golds:
                return r
        raise AssertionError("unreachable")


def retrieve_top_k(query_feature, gallery: Gallery, k: int) -> list[str]:
    if not 1 <= k <= len(gallery):
        raise ValueError(f"k={k} outside 1..{len(gallery)}")
    return [gallery.ids[i] for i in gallery.ranking(query_feature)[:k]]


def attack_success(query_feature, gold_id: str | Iterable[str], gallery: Gallery, k: int) -> bool:
    """True when no gold item survives in the top ``k``."""
    golds = {gold_id} if isinstance(gold_id, str) else set(gold_id)
    missing = golds - set(gallery.ids)
    if missing:
        raise KeyError(f"gold ids not in gallery: {sorted(missing)}")
    return golds.isdisjoint(retrieve_top_k(query_feature, gallery, k))


@dataclass
class QueryRow:
    task: str
    query_id: str
    gold_ids: list[str]
    rank_pre: int
    rank_post: int

    def to_json(self, top_k: Sequence[int]) -> dict:
        return {
            "task": self.task,
            "query_id": self.query_id,
            "gold_ids": self.gold_ids,
            "rank_pre": self.rank_pre,
            "rank_post": self.rank_post,
            "success": {str(k): self.rank_pre <= k < self.rank_post for k in top_k},
        }


def asr(rows: Sequence[QueryRow], k: int, restrict: bool = True) -> float:
    """Fraction of queries whose gold item leaves the top ``k``.

    With ``restrict`` only queries that were hits before the attack count.
    """
    pool = [r for r in rows if r.rank_pre <= k] if restrict else list(rows)
    if not pool:
        return 0.0
    return sum(r.rank_post > k for r in pool) / len(pool)


def recall(rows: Sequence[QueryRow], k: int, post: bool) -> float:
    if not rows:
        return 0.0
    return sum((r.rank_post if post else r.rank_pre) <= k for r in rows) / len(rows)


@dataclass
class RetrievalReport:
    rows: list[QueryRow]
    top_k: tuple[int, ...]
    restrict_to_clean_hits: bool = True
    text_gallery: str = "adversarial"
    similarity: str = "cosine of final features"
    diagnostics: dict = field(default_factory=dict)

    def task_rows(self, task: str) -> list[QueryRow]:
        return [r for r in self.rows if r.task == task]

    def asr(self, task: str, k: int) -> float:
        return asr(self.task_rows(task), k, self.restrict_to_clean_hits)

    def metrics(self) -> dict:
        out = {}
        for task in ("TR", "IR"):
            rows = self.task_rows(task)
            out[task] = {
                "queries": len(rows),
                "asr": {str(k): asr(rows, k, self.restrict_to_clean_hits) for k in self.top_k},
                "evaluated": {str(k): sum(r.rank_pre <= k for r in rows) if self.restrict_to_clean_hits
                              else len(rows) for k in self.top_k},
                "recall_pre": {str(k): recall(rows, k, False) for k in self.top_k},
                "recall_post": {str(k): recall(rows, k, True) for k in self.top_k},
            }
        return out

    def summary(self) -> dict:
        return {
            "top_k": list(self.top_k),
            "restrict_to_clean_hits": self.restrict_to_clean_hits,
            "text_gallery": self.text_gallery,
            "similarity": self.similarity,
            "metrics": self.metrics(),
            "diagnostics": self.diagnostics,
        }

    def write(self, directory: str | Path, name: str = "report"):
        directory = Path(directory)
        with open(directory / f"{name}.json", "w", encoding="utf-8") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        with open(directory / f"{name}_queries.jsonl", "w", encoding="utf-8") as fh:
            for r in self.rows:
                fh.write(json.dumps(r.to_json(self.top_k), sort_keys=True) + "\n")

    def table(self) -> str:
        m = self.metrics()
        head = "task  " + "  ".join(f"ASR@{k:<3}" for k in self.top_k)
        lines = [head]
        for task in ("TR", "IR"):
            lines.append(f"{task:<5} " + "  ".join(f"{100 * m[task]['asr'][str(k)]:6.2f}" for k in self.top_k))
        return "\n".join(lines)


def _features(pairs: Sequence[ImageTextPair], backend: Backend):
    img = backend.image_features([p.image for p in pairs])
    caps = [c for p in pairs for c in p.captions]
    txt = backend.text_features(caps)
    owner = [i for i, p in enumerate(pairs) for _ in p.captions]
    return img, [c.id for c in caps], txt, owner


def evaluate(clean: Sequence[ImageTextPair], adversarial: Sequence[ImageTextPair], victim: Backend,
             top_k: Sequence[int] = (1, 5, 10), restrict_to_clean_hits: bool = True,
             clean_text_gallery: bool = False) -> RetrievalReport:
    """Rank every image (TR) and caption (IR) query before and after the attack.

    Adversarial queries search the adversarial galleries unless
    ``clean_text_gallery`` keeps TR on the clean captions.
    """
    def layout(pairs):
        return [(p.image.id, [c.id for c in p.captions]) for p in pairs]

    if layout(clean) != layout(adversarial):
        raise ValueError("clean and adversarial pair sets do not line up")
    img_ids = [p.image.id for p in clean]
    c_img, cap_ids, c_txt, owner = _features(clean, victim)
    a_img, _, a_txt, _ = _features(adversarial, victim)
    if clean_text_gallery:
        a_txt_gallery = c_txt
    else:
        a_txt_gallery = a_txt

    txt_pre, txt_post = Gallery(cap_ids, c_txt), Gallery(cap_ids, a_txt_gallery)
    img_pre, img_post = Gallery(img_ids, c_img, "image"), Gallery(img_ids, a_img, "image")
    rows = []
    for i, p in enumerate(clean):
        gold = [c.id for c in p.captions]
        rows.append(QueryRow("TR", p.image.id, gold, txt_pre.rank_of(c_img[i], gold),
                             txt_post.rank_of(a_img[i], gold)))
    for j, cid in enumerate(cap_ids):
        gold = img_ids[owner[j]]
        rows.append(QueryRow("IR", cid, [gold], img_pre.rank_of(c_txt[j], gold),
                             img_post.rank_of(a_txt[j], gold)))
    report = RetrievalReport(rows, tuple(top_k), restrict_to_clean_hits,
                             "clean" if clean_text_gallery else "adversarial")
    if len(clean) >= 2:
        report.diagnostics = {
            "clean": dict(zip(("mean_pos", "mean_neg"), gap_from_features(c_img, c_txt, owner))),
            "adversarial": dict(zip(("mean_pos", "mean_neg"), gap_from_features(a_img, a_txt, owner))),
        }
    return report


def gap_from_features(img: np.ndarray, txt: np.ndarray, owner: Sequence[int]) -> tuple[float, float]:
    if len(img) < 2:
        raise ValueError("need at least two pairs for a negative-pair mean")
    a = img / np.linalg.norm(img, axis=1, keepdims=True)
    b = txt / np.linalg.norm(txt, axis=1, keepdims=True)
    sims = b @ a.T
    mask = np.zeros_like(sims, dtype=bool)
    mask[np.arange(len(owner)), np.asarray(owner)] = True
    return float(sims[mask].mean()), float(sims[~mask].mean())


def similarity_gap(pairs: Sequence[ImageTextPair], backend: Backend) -> tuple[float, float]:
    """Mean cosine over matched (image, caption) pairs and over all unmatched ones."""
    if len(pairs) < 2:
        raise ValueError("need at least two pairs for a negative-pair mean")
    img, _, txt, owner = _features(pairs, backend)
    return gap_from_features(img, txt, owner)
