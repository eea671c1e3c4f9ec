"""Synthetic toy dataset: captions over a small vocabulary, images tuned to match them.

Images start as procedural colour blobs and are then optimized against the
toy encoder until every image retrieves its own captions first (and vice
versa) by a chosen cosine margin, so white-box clean recall@1 is 100% by
construction.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np
import torch

from .backend import ToyBackend, ToyConfig, torch_cosine
from .core import TextSample
from .lexicon import VectorStore, save_vectors

log = logging.getLogger(__name__)

SUBJECTS = [
    ["dog", "puppy", "hound", "pooch"],
    ["cat", "kitten", "kitty", "feline"],
    ["man", "guy", "gentleman", "fellow"],
    ["woman", "lady", "madam", "dame"],
    ["child", "kid", "youngster", "toddler"],
    ["bird", "fowl", "birdie", "songbird"],
    ["horse", "pony", "stallion", "mare"],
]
ADJECTIVES = [
    ["red", "crimson", "scarlet"],
    ["blue", "azure", "navy"],
    ["small", "little", "tiny", "petite"],
    ["large", "big", "huge", "giant"],
    ["happy", "glad", "cheerful", "joyful"],
    ["old", "aged", "elderly", "ancient"],
]
# no stored vectors for verbs: they exercise the fallback provider
VERBS = [
    ["runs", "sprints", "dashes", "races"],
    ["sits", "rests", "perches", "lounges"],
    ["jumps", "leaps", "hops", "bounds"],
    ["walks", "strolls", "wanders", "ambles"],
    ["plays", "frolics", "romps", "gambols"],
]
PLACES = [
    ["park", "garden", "meadow"],
    ["street", "road", "avenue"],
    ["beach", "shore", "coast"],
    ["house", "home", "dwelling"],
    ["field", "pasture", "lawn"],
]
FUNCTION_WORDS = ["a", "the", "in", "on", "near", "at", "by"]
PREPOSITIONS = ["in", "on", "near", "at", "by"]

VECTOR_DIM = 50
FILLER_WORDS = 120


def vocabulary() -> list[str]:
    words = list(FUNCTION_WORDS)
    for groups in (SUBJECTS, ADJECTIVES, VERBS, PLACES):
        for g in groups:
            words.extend(g)
    return words


def make_vectors(rng: np.random.Generator) -> VectorStore:
    table = {}
    for groups in (SUBJECTS, ADJECTIVES, PLACES):
        for g in groups:
            centre = rng.standard_normal(VECTOR_DIM)
            centre /= np.linalg.norm(centre)
            for w in g:
                noise = rng.standard_normal(VECTOR_DIM)
                table[w] = centre + 0.35 * noise / np.linalg.norm(noise)
    for i in range(FILLER_WORDS):
        table[f"filler{i:03d}"] = rng.standard_normal(VECTOR_DIM)
    store = VectorStore.from_dict({w: np.round(v, 6) for w, v in table.items()})
    return store


def make_synonym_table() -> dict[str, list[str]]:
    table = {}
    for groups in (SUBJECTS, ADJECTIVES, VERBS, PLACES):
        for g in groups:
            for w in g:
                table[w] = [x for x in g if x != w]
    return table


def make_captions(rng: np.random.Generator, size: int, per_image: int) -> list[list[str]]:
    combos = set()
    out = []
    while len(out) < size:
        key = (rng.integers(len(SUBJECTS)), rng.integers(len(ADJECTIVES)),
               rng.integers(len(VERBS)), rng.integers(len(PLACES)))
        if (key[0], key[2], key[3]) in combos:
            continue
        combos.add((key[0], key[2], key[3]))
        s, a, v, p = SUBJECTS[key[0]], ADJECTIVES[key[1]], VERBS[key[2]], PLACES[key[3]]
        pick = lambda g: g[rng.integers(len(g))]
        subj, verb, place = pick(s), pick(v), pick(p)
        caps = []
        for j in range(per_image):
            prep = PREPOSITIONS[rng.integers(len(PREPOSITIONS))]
            text = f"a {pick(a)} {subj} {verb} {prep} the {place}"
            if j == 0:
                text = text[0].upper() + text[1:]
            caps.append(text)
        out.append(caps)
    return out


def procedural_images(rng: np.random.Generator, n: int, size: int, channels: int = 3) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    imgs = np.empty((n, size, size, channels))
    for i in range(n):
        bg = rng.uniform(0.2, 0.8, channels)
        img = np.broadcast_to(bg, (size, size, channels)).copy()
        for _ in range(2):
            cy, cx = rng.uniform(0, 1, 2)
            r = rng.uniform(0.15, 0.4)
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))[..., None]
            img = img * (1 - blob) + rng.uniform(0, 1, channels) * blob
        imgs[i] = img
    return np.clip(imgs, 0, 1)


def _margins(img_f, txt_f, owner):
    sims = torch_cosine(txt_f[:, None, :], img_f[None, :, :])  # captions x images
    n_img = img_f.shape[0]
    own = sims[torch.arange(len(owner)), owner]
    mask = torch.zeros_like(sims, dtype=torch.bool)
    mask[torch.arange(len(owner)), owner] = True
    ir = own - sims.masked_fill(mask, -2).max(1).values
    tr = []
    for i in range(n_img):
        mine = owner == i
        tr.append(sims[mine, i].min() - sims[~mine, i].max())
    return ir, torch.stack(tr)


def synthesize_images(backend: ToyBackend, captions: list[list[str]], base: np.ndarray, margin: float,
                      max_steps: int = 1500, lr: float = 0.05) -> np.ndarray:
    """Tune images until each pair's retrieval margin reaches ``margin`` after 8-bit rounding."""
    texts = [TextSample(f"c{i}_{j}", c) for i, caps in enumerate(captions) for j, c in enumerate(caps)]
    owner = torch.tensor([i for i, caps in enumerate(captions) for _ in caps])
    txt_f = torch.from_numpy(backend.text_features(texts))
    logit = torch.logit(torch.from_numpy(np.clip(base, 0.02, 0.98))).requires_grad_(True)
    opt = torch.optim.Adam([logit], lr=lr)
    done = torch.zeros(len(captions), dtype=torch.bool)
    for step in range(max_steps):
        x = torch.sigmoid(logit)
        img_f = backend.forward_images(x).final_feature
        ir, tr = _margins(img_f, txt_f, owner)
        ir_img = torch.stack([ir[owner == i].min() for i in range(len(captions))])
        worst = torch.minimum(ir_img, tr)
        if step % 10 == 0:
            with torch.no_grad():
                q = torch.round(torch.sigmoid(logit) * 255) / 255
                qf = backend.forward_images(q).final_feature
                qir, qtr = _margins(qf, txt_f, owner)
                qir_img = torch.stack([qir[owner == i].min() for i in range(len(captions))])
                done = torch.minimum(qir_img, qtr) >= margin
            if bool(done.all()):
                break
        # push only pairs still short of the margin
        loss = -(torch.clamp(worst - margin * 1.5, max=0.0) * (~done)).sum()
        opt.zero_grad()
        loss.backward()
        opt.step()
    else:
        log.warning("fixture synthesis stopped at max_steps with %d/%d pairs at margin",
                    int(done.sum()), len(captions))
    with torch.no_grad():
        return torch.sigmoid(logit).numpy()


DEFAULT_BACKEND = {"kind": "toy", "seed": 0}


def make_fixture(out_dir: str | Path, size: int = 32, seed: int = 7, captions_per_image: int = 2,
                 margin: float = 0.05, backend_seed: int = 0, image_size: int = 32,
                 patch_size: int = 8) -> Path:
    """Write manifest, PNG images, vectors, synonym table, toy weights and a run config."""
    from PIL import Image

    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    groups = tuple(tuple(g) for gs in (SUBJECTS, ADJECTIVES, VERBS, PLACES) for g in gs)
    backend = ToyBackend(ToyConfig(vocab=tuple(vocabulary()), word_groups=groups, seed=backend_seed,
                                   image_size=image_size, patch_size=patch_size))
    cfg = backend.config
    captions = make_captions(rng, size, captions_per_image)
    base = procedural_images(rng, size, cfg.image_size, cfg.channels)
    imgs = synthesize_images(backend, captions, base, margin)

    lines = []
    for i, (img, caps) in enumerate(zip(imgs, captions)):
        iid = f"img{i:03d}"
        q = np.clip(np.rint(img * 255), 0, 255).astype(np.uint8)
        Image.fromarray(q).save(out / "images" / f"{iid}.png")
        lines.append(json.dumps({"id": iid, "image": f"images/{iid}.png", "captions": caps}, sort_keys=True))
    (out / "manifest.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    save_vectors(make_vectors(rng), out / "vectors.txt")
    with open(out / "synonyms.json", "w", encoding="utf-8") as fh:
        json.dump(make_synonym_table(), fh, indent=1, sort_keys=True)
        fh.write("\n")
    backend.save(out / "toy.bin")
    config = {
        "dataset": "manifest.jsonl",
        "vectors": "vectors.txt",
        "synonyms": "synonyms.json",
        "surrogate": {"kind": "toy", "weights": "toy.bin"},
        "victim": {"kind": "toy", "weights": "toy.bin"},
    }
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out
