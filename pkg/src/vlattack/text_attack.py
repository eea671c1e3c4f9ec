"""Single-word substitution attack on captions."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .backend import Backend
from .core import AttackConfig, ImageSample, TextSample, cosine, is_word, match_case
from .lexicon import NoSynonyms, SynonymProvider, VectorStore, substitute_set

STOPWORDS = frozenset(
    "a an the of in on at to for with by from and or but is are was were be been "
    "this that these those it its as into onto over under".split()
)


@dataclass
class Lexicon:
    store: VectorStore = field(default_factory=VectorStore)
    fallback: SynonymProvider = field(default_factory=NoSynonyms)

    def substitutes(self, text: TextSample, position: int, tau: float, W: int,
                    use_vectors: bool = True) -> list[str]:
        store = self.store if use_vectors else _EMPTY
        word = text.tokens[position]
        subs = substitute_set(word, store, tau, self.fallback, (text, position), W)
        return [match_case(word, s) for s in subs]


_EMPTY = VectorStore()


@dataclass
class CandidateText:
    text: TextSample
    position: int
    substitute: str
    similarity: float = float("nan")


@dataclass
class TextSelection:
    text: TextSample
    similarity: float
    substituted: bool
    num_candidates: int


def candidate_texts(t: TextSample, lexicon: Lexicon, config: AttackConfig | None = None) -> list[CandidateText]:
    """All single-substitution variants of ``t``, position-major, lexicon order within a position."""
    config = config or AttackConfig()
    use_vectors = "no_cf" not in config.ablation
    out = []
    if config.budget.epsilon_t < 1:
        return out
    for j, tok in enumerate(t.tokens):
        if not is_word(tok):
            continue
        if config.skip_stopwords and tok.lower() in STOPWORDS:
            continue
        for s in lexicon.substitutes(t, j, config.tau, config.W, use_vectors):
            out.append(CandidateText(t.replace(j, s), j, s))
    return out


def select_adversarial_text(v: ImageSample, t: TextSample, backend: Backend, lexicon: Lexicon,
                            config: AttackConfig | None = None, image_feature=None) -> TextSelection:
    """Pick the candidate whose text feature is least similar to the clean image.

    With no candidates the original text comes back with ``substituted=False``.
    Ties resolve to the first candidate in enumeration order.
    """
    if image_feature is None:
        image_feature = backend.encode_image(v).final_feature
    cands = candidate_texts(t, lexicon, config)
    if not cands:
        own = cosine(backend.encode_text(t).final_feature, image_feature)
        return TextSelection(t, own, False, 0)
    feats = backend.text_features([c.text for c in cands])
    sims = np.array([cosine(f, image_feature) for f in feats])
    for c, s in zip(cands, sims):
        c.similarity = float(s)
    best = int(np.argmin(sims))
    return TextSelection(cands[best].text, float(sims[best]), True, len(cands))
