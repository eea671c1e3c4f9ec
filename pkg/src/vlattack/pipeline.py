"""Batched attack procedure and run persistence."""

from __future__ import annotations

import datetime as _dt
import hashlib
import json
import logging
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .backend import Backend
from .core import (AdversarialRecord, AttackConfig, ImageSample, ImageTextPair, PairBatch, TextSample,
                   batches, linf_distance, load_manifest, read_blob, word_edit_distance, write_blob)
from .image_attack import attack_image, build_contrast_sets
from .retrieval import RetrievalReport, evaluate
from .text_attack import Lexicon, select_adversarial_text

log = logging.getLogger(__name__)

AUDIT_TOL = 1e-6


class AttackError(RuntimeError):
    pass


class BudgetError(AttackError):
    pass


@dataclass
class RunManifest:
    config: dict
    surrogate: dict
    victim: dict
    dataset: str | None
    output_dir: str | None
    started: str = ""
    finished: str = ""
    version: str = __version__
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "config": self.config,
            "surrogate": self.surrogate,
            "victim": self.victim,
            "dataset": self.dataset,
            "output_dir": self.output_dir,
            "started": self.started,
            "finished": self.finished,
            "version": self.version,
            "fingerprint": self.fingerprint(),
            **self.extra,
        }

    def fingerprint(self) -> str:
        """Hash of everything that determines the outputs (not timestamps or paths)."""
        payload = json.dumps([self.config, self.surrogate, self.victim, self.version], sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def attack_batch(batch: PairBatch, surrogate: Backend, lexicon: Lexicon, config: AttackConfig,
                 text_cache: dict | None = None) -> list[AdversarialRecord]:
    """Attack every caption, then every image against its batch-level contrast sets."""
    surrogate.require(gradients=True)
    m = config.m_captions
    adv_texts: dict[str, TextSample] = {}
    selections = {}
    for pair in batch.pairs:
        try:
            feat = surrogate.encode_image(pair.image).final_feature
            for cap in pair.captions[:m]:
                sel = select_adversarial_text(pair.image, cap, surrogate, lexicon, config, image_feature=feat)
                adv_texts[cap.id] = sel.text
                selections[cap.id] = sel
        except Exception as exc:
            raise AttackError(f"pair {pair.image.id!r}, text stage: {exc}") from exc

    records = []
    for i, pair in enumerate(batch.pairs):
        try:
            sets = build_contrast_sets(batch, adv_texts, i, config)
            res = attack_image(pair.image, sets, config, surrogate, text_cache)
        except Exception as exc:
            raise AttackError(f"pair {pair.image.id!r}, image stage: {exc}") from exc
        dist = linf_distance(res.image, pair.image)
        for cap in pair.captions[:m]:
            sel = selections[cap.id]
            rec = AdversarialRecord(
                pair_id=cap.id,
                image_id=pair.image.id,
                adversarial_image=res.image,
                adversarial_text=sel.text,
                original_text=cap,
                linf_distance=dist,
                edit_distance=word_edit_distance(sel.text, cap),
                text_similarity=sel.similarity,
                substituted=sel.substituted,
                init_trace=list(res.init_trace),
                refine_trace=list(res.refine_trace),
            )
            audit(rec, config)
            records.append(rec)
    return records


def audit(rec: AdversarialRecord, config: AttackConfig):
    if rec.linf_distance > config.budget.epsilon_v + AUDIT_TOL:
        raise BudgetError(f"pair {rec.pair_id!r}: L-inf {rec.linf_distance} exceeds {config.budget.epsilon_v}")
    if rec.edit_distance > config.budget.epsilon_t:
        raise BudgetError(f"pair {rec.pair_id!r}: {rec.edit_distance} substitutions exceed {config.budget.epsilon_t}")


def order_pairs(pairs: Sequence[ImageTextPair], config: AttackConfig) -> list[ImageTextPair]:
    pairs = list(pairs)
    if config.shuffle:
        perm = np.random.default_rng(config.seed).permutation(len(pairs))
        pairs = [pairs[i] for i in perm]
    return pairs


def attack_pairs(pairs: Sequence[ImageTextPair], surrogate: Backend, lexicon: Lexicon, config: AttackConfig,
                 on_batch=None) -> list[AdversarialRecord]:
    records = []
    cache: dict = {}
    for chunk in batches(order_pairs(pairs, config), config.batch_size):
        out = attack_batch(PairBatch(chunk), surrogate, lexicon, config, cache)
        records.extend(out)
        if on_batch is not None:
            on_batch(out)
    return records


def adversarial_pairs(pairs: Sequence[ImageTextPair], records: Sequence[AdversarialRecord],
                      m_captions: int | None = None) -> tuple[list[ImageTextPair], list[ImageTextPair]]:
    """Matching (clean, adversarial) pair lists restricted to attacked captions."""
    by_caption = {r.pair_id: r for r in records}
    clean, adv = [], []
    for p in pairs:
        caps = [c for c in p.captions[:m_captions] if c.id in by_caption]
        if not caps:
            continue
        recs = [by_caption[c.id] for c in caps]
        clean.append(ImageTextPair(p.image, caps))
        adv.append(ImageTextPair(recs[0].adversarial_image, [r.adversarial_text for r in recs]))
    return clean, adv


def evaluate_records(pairs, records, victim: Backend, config: AttackConfig) -> RetrievalReport:
    clean, adv = adversarial_pairs(pairs, records, config.m_captions)
    return evaluate(clean, adv, victim, config.top_k, config.restrict_to_clean_hits, config.clean_text_gallery)


# --- persistence --------------------------------------------------------------

def _safe(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]", "_", name)


def write_records(out_dir: Path, records: Sequence[AdversarialRecord], export_png: bool = False,
                  originals: dict[str, ImageSample] | None = None, mode: str = "w"):
    tdir = out_dir / "tensors"
    tdir.mkdir(parents=True, exist_ok=True)
    written = set()
    with open(out_dir / "records.jsonl", mode, encoding="utf-8") as fh:
        for rec in records:
            row = rec.to_json()
            fname = f"tensors/{_safe(rec.image_id)}.bin"
            row["tensor"] = fname
            if rec.image_id not in written:
                write_blob(out_dir / fname, {"image_id": rec.image_id, "format": "vlattack-image"},
                           {"pixels": rec.adversarial_image.pixels})
            if export_png:
                png = f"tensors/{_safe(rec.image_id)}.png"
                q = save_png(rec.adversarial_image, out_dir / png)
                row["png"] = png
                if originals is not None and rec.image_id in originals:
                    row["png_linf_distance"] = linf_distance(q, originals[rec.image_id].pixels)
            written.add(rec.image_id)
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def save_png(image: ImageSample, path: Path) -> np.ndarray:
    from PIL import Image

    q = np.clip(np.rint(image.pixels.astype(np.float64) * 255), 0, 255).astype(np.uint8)
    Image.fromarray(q if q.shape[2] != 1 else q[:, :, 0]).save(path)
    return q.astype(np.float32) / np.float32(255.0)


def load_records(run_dir: str | Path, pairs: Sequence[ImageTextPair]) -> list[AdversarialRecord]:
    """Rebuild records of a finished run against the clean dataset."""
    run_dir = Path(run_dir)
    by_id = {c.id: (p, c) for p in pairs for c in p.captions}
    records = []
    images: dict[str, ImageSample] = {}
    with open(run_dir / "records.jsonl", encoding="utf-8") as fh:
        for line in fh:
            row = json.loads(line)
            if row.get("truncated"):
                log.warning("%s: run was interrupted; using partial records", run_dir)
                continue
            pair, cap = by_id[row["pair_id"]]
            if row["image_id"] not in images:
                _, arrays = read_blob(run_dir / row["tensor"])
                images[row["image_id"]] = pair.image.with_pixels(arrays["pixels"])
            adv_text = TextSample(cap.id, row["adversarial_text"])
            records.append(AdversarialRecord(
                row["pair_id"], row["image_id"], images[row["image_id"]], adv_text, cap,
                row["linf_distance"], row["edit_distance"], row["text_similarity"], row["substituted"],
                row["init_trace"], row["refine_trace"]))
    return records


def _now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def attack_dataset(manifest_path: str | Path, surrogate: Backend, victim: Backend, config: AttackConfig,
                   lexicon: Lexicon, out_dir: str | Path | None = None, export_png: bool = False,
                   manifest_extra: dict | None = None):
    """Attack a whole dataset manifest on the surrogate and score it on the victim."""
    pairs = load_manifest(manifest_path)
    run = RunManifest(config.to_dict(), surrogate.descriptor.to_json(), victim.descriptor.to_json(),
                      str(manifest_path), str(out_dir) if out_dir else None, started=_now(),
                      extra=manifest_extra or {})
    out = Path(out_dir) if out_dir else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "records.jsonl").write_text("")
    originals = {p.image.id: p.image for p in pairs}

    def flush(batch_records):
        if out is not None:
            write_records(out, batch_records, export_png, originals, mode="a")

    t0 = time.perf_counter()
    try:
        records = attack_pairs(pairs, surrogate, lexicon, config, on_batch=flush)
    except KeyboardInterrupt:
        if out is not None:
            with open(out / "records.jsonl", "a", encoding="utf-8") as fh:
                fh.write(json.dumps({"truncated": True}) + "\n")
        raise
    log.info("attacked %d captions in %.1fs", len(records), time.perf_counter() - t0)
    report = evaluate_records(pairs, records, victim, config)
    run.finished = _now()
    if out is not None:
        report.write(out)
        with open(out / "manifest.json", "w", encoding="utf-8") as fh:
            json.dump(run.to_json(), fh, indent=2, sort_keys=True)
            fh.write("\n")
    return records, report
