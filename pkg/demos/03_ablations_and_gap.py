"""
Ablations, batch size and the positive/negative similarity gap
==============================================================

Runs the four single-component ablations and three batch sizes on the toy
dataset, then compares matched versus unmatched image-text similarity with
and without the contrastive refinement stage. Takes about a minute.
"""

import tempfile
from pathlib import Path

from vlattack import (AttackConfig, Lexicon, StaticSynonyms, ToyBackend, attack_pairs, evaluate_records,
                      load_manifest, load_vectors, make_fixture)

out = make_fixture(Path(tempfile.mkdtemp()) / "toy")
pairs = load_manifest(out / "manifest.jsonl")
backend = ToyBackend.load(out / "toy.bin")
lexicon = Lexicon(load_vectors(out / "vectors.txt"), StaticSynonyms.load(out / "synonyms.json"))


def run(**kw):
    cfg = AttackConfig(**kw)
    return evaluate_records(pairs, attack_pairs(pairs, backend, lexicon, cfg), backend, cfg)


print(f"{'setting':<14} TR@1   IR@1   pos    neg")
for name, kw in [("full", {}), ("no_cf", {"ablation": {"no_cf"}}), ("no_li", {"ablation": {"no_li"}}),
                 ("no_ig", {"ablation": {"no_ig"}}), ("no_io", {"ablation": {"no_io"}}),
                 ("B=4", {"batch_size": 4}), ("B=8", {"batch_size": 8})]:
    rep = run(**kw)
    d = rep.diagnostics["adversarial"]
    print(f"{name:<14} {rep.asr('TR', 1):.3f}  {rep.asr('IR', 1):.3f}  {d['mean_pos']:.3f}  {d['mean_neg']:.3f}")

# sign steps push almost every pixel to the edge of the L-inf ball, so on this
# small encoder no_ig and no_li end up scoring like the full method
