"""One test per acceptance criterion; each records a PASS/FAIL line for the terminal summary."""

import json
import time

import numpy as np
import pytest
import torch

import conftest
import oracles
from conftest import random_image
from test_retrieval import TableBackend, _tables, brute_force, make_pairs
from vlattack.backend import ToyBackend, ToyConfig, value_and_grad
from vlattack.cli import main
from vlattack.core import AttackConfig, ImageSample, PairBatch, TextSample, batches
from vlattack.image_attack import (ContrastSets, PgdProblem, attack_image, build_contrast_sets,
                                   contrastive_objective, layer_importance, layer_loss_objective, pgd_optimize)
from vlattack.lexicon import StaticSynonyms, VectorStore, substitute_set
from vlattack.pipeline import attack_pairs, evaluate_records
from vlattack.retrieval import evaluate
from vlattack.text_attack import Lexicon, select_adversarial_text

EPS = 2 / 255

# ASR per (task, k) on the 32-pair fixture at seed 0, computed once and frozen
FROZEN_ASR = {
    4: {"TR": (13 / 16, 3 / 8, 7 / 32), "IR": (47 / 64, 11 / 32, 9 / 64)},
    8: {"TR": (13 / 16, 3 / 8, 7 / 32), "IR": (47 / 64, 11 / 32, 9 / 64)},
    16: {"TR": (13 / 16, 13 / 32, 1 / 4), "IR": (47 / 64, 11 / 32, 9 / 64)},
}


def record(n, ok, detail):
    line = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    conftest.ACCEPTANCE[n] = line
    print(line)
    assert ok, line


def within_budget(records):
    return all(r.linf_distance <= EPS + 1e-6 and r.edit_distance <= 1 for r in records)


def test_criterion_01_budgets(fixture_data):
    pairs, backend, lex = fixture_data
    cfg = AttackConfig()
    t0 = time.perf_counter()
    records = attack_pairs(pairs, backend, lex, cfg)
    evaluate_records(pairs, records, backend, cfg)
    elapsed = time.perf_counter() - t0
    worst = max(r.linf_distance for r in records)
    ok = len(records) == 64 and within_budget(records) and elapsed < 60
    record(1, ok, f"{len(records)} records, max L-inf {worst * 255:.4f}/255, "
                  f"max edits {max(r.edit_distance for r in records)}, {elapsed:.1f}s")


def _fd_check(obj, x, rng, coords=20):
    def f(y):
        with torch.no_grad():
            return float(obj(torch.from_numpy(y)))

    _, g = value_and_grad(obj, x)
    worst = 0.0
    for k in rng.choice(x.size, coords, replace=False):
        idx = tuple(int(i) for i in np.unravel_index(k, x.shape))
        fd = oracles.central_difference(f, x, idx)
        err = 0.0 if abs(g[idx] - fd) < 1e-12 else oracles.rel_error(g[idx], fd)
        worst = max(worst, err)
    return worst


def test_criterion_02_gradients(fixture_data):
    pairs, backend, _ = fixture_data
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    v = pairs[0].image
    x = np.clip(v.pixels.astype(np.float64) + rng.uniform(-EPS, EPS, v.shape), 0, 1)
    e_layer = _fd_check(layer_loss_objective(v, layer_importance(v, backend), backend), x, rng)
    sets = ContrastSets(list(pairs[0].captions), [c for p in pairs[1:4] for c in p.captions])
    e_con = _fd_check(contrastive_objective(sets, AttackConfig().scales, -10, backend), x, rng)
    elapsed = time.perf_counter() - t0
    ok = e_layer < 1e-4 and e_con < 1e-4 and elapsed < 30
    record(2, ok, f"max rel error layer {e_layer:.2e}, contrastive {e_con:.2e}, 20 coords each, {elapsed:.1f}s")


def test_criterion_03_selection_oracle(toy):
    rng = np.random.default_rng(3)
    words = list(toy.config.vocab) + ["zebra", "tree", "sky", "green"]
    mismatches = 0
    sizes = []
    for case in range(50):
        n = int(rng.integers(2, 7))
        tokens = list(rng.choice(words, n))
        table = {}
        budget = 200
        for w in dict.fromkeys(tokens):
            cnt = int(rng.integers(0, min(40, budget // n) + 1))
            table[w] = [f"s{case}_{w}_{i}" if rng.random() < 0.5 else str(rng.choice(words)) for i in range(cnt)]
        lex = Lexicon(fallback=StaticSynonyms(table))
        cfg = AttackConfig(W=200)
        v = random_image(rng, image_id=f"c{case}")
        t = TextSample("t", " ".join(tokens))
        sel = select_adversarial_text(v, t, toy, lex, cfg)
        img = toy.encode_image(v).final_feature
        best, best_sim, count = t.raw, np.inf, 0
        for j, w in enumerate(t.tokens):
            seen = []
            for s in table.get(w.lower(), []):
                if s.lower() == w.lower() or s in seen:
                    continue
                seen.append(s)
                toks = list(t.tokens)
                toks[j] = s
                count += 1
                sim = oracles.cos(toy.encode_text(toks).final_feature, img)
                if sim < best_sim:
                    best, best_sim = " ".join(toks), sim
        sizes.append(count)
        mismatches += sel.text.raw != best or sel.num_candidates != count
    ok = mismatches == 0 and max(sizes) <= 200
    record(3, ok, f"50 cases, {min(sizes)}-{max(sizes)} candidates, {mismatches} mismatches")


def test_criterion_04_substitute_oracle():
    rng = np.random.default_rng(4)
    taus = (-0.5, 0.0, 0.4, 0.9)
    checked = mismatches = 0
    for n in (10, 100, 1000, 10000):
        centres = rng.standard_normal((max(n // 20, 1), 16))
        vecs = centres[rng.integers(len(centres), size=n)] + 0.4 * rng.standard_normal((n, 16))
        words = [f"w{i:05d}" for i in range(n)]
        store = VectorStore(words, vecs)
        for q in rng.choice(n, 3, replace=False):
            word = words[q]
            sims = [oracles.cos(vecs[i], vecs[q]) for i in range(n)]
            for tau in taus:
                expected = {words[i] for i in range(n) if i != q and sims[i] > tau}
                mismatches += set(substitute_set(word, store, tau)) != expected
                checked += 1
    record(4, mismatches == 0, f"{checked} (store, word, tau) checks up to 10^4 entries, {mismatches} mismatches")


def test_criterion_05_layer_importance(toy):
    rng = np.random.default_rng(5)
    last_exact = in_range = 0
    for i in range(100):
        w = layer_importance(random_image(rng, image_id=f"r{i}"), toy)
        last_exact += w[-1] == 1.0
        in_range += bool(np.all((w >= -1) & (w <= 1)))
    ident = ToyBackend(ToyConfig(identity_layers=True))
    ones = all(np.allclose(layer_importance(random_image(rng), ident), 1.0, atol=1e-12) for _ in range(5))
    ok = last_exact == 100 and in_range == 100 and ones
    record(5, ok, f"last weight exactly 1 in {last_exact}/100, in [-1,1] in {in_range}/100, identity all-ones {ones}")


def test_criterion_06_pgd_oracle():
    def square(x):
        return (x ** 2).sum()

    iterates = []
    for steps in (1, 2, 3):
        x, _ = pgd_optimize(PgdProblem(np.full((1, 1, 1), 0.5), 0.5, 0.1, steps, square,
                                       init=np.full((1, 1, 1), 0.9)))
        iterates.append(float(x[0, 0, 0]))
    close = all(abs(a - b) <= 1e-9 for a, b in zip(iterates, (0.8, 0.7, 0.6)))
    c = np.random.default_rng(6).uniform(0, 1, (3, 3, 3))
    init = np.clip(c + 0.05, 0, 1)
    x0, _ = pgd_optimize(PgdProblem(c, 0.0, 0.1, 5, square, init=init))
    xs, _ = pgd_optimize(PgdProblem(c, 0.3, 0.1, 0, square, init=init))
    ok = close and np.array_equal(x0, c) and np.array_equal(xs, init)
    record(6, ok, f"iterates {iterates}, eps=0 exact {np.array_equal(x0, c)}, steps=0 exact {np.array_equal(xs, init)}")


def _stage_two_means(pairs, backend, lex, cfg):
    before = {"pos": [], "neg": []}
    after = {"pos": [], "neg": []}
    for chunk in batches(pairs, cfg.batch_size):
        batch = PairBatch(chunk)
        adv = {c.id: select_adversarial_text(p.image, c, backend, lex, cfg).text
               for p in chunk for c in p.captions}
        for i, p in enumerate(chunk):
            sets = build_contrast_sets(batch, adv, i, cfg)
            res = attack_image(p.image, sets, cfg, backend)
            pos_f = backend.text_features(sets.positives)
            neg_f = backend.text_features(sets.negatives)
            for img, acc in ((res.after_init, before), (res.image, after)):
                f = backend.encode_image(img).final_feature
                acc["pos"] += [oracles.cos(t, f) for t in pos_f]
                acc["neg"] += [oracles.cos(t, f) for t in neg_f]
    return ({k: float(np.mean(v)) for k, v in before.items()}, {k: float(np.mean(v)) for k, v in after.items()})


def test_criterion_07_contrastive_mechanism(fixture_data, runs):
    pairs, backend, lex = fixture_data
    before, after = _stage_two_means(pairs, backend, lex, AttackConfig())
    _, _, full = runs()
    _, _, no_io = runs(ablation=frozenset({"no_io"}))
    gap_full = full.diagnostics["adversarial"]["mean_pos"] - full.diagnostics["adversarial"]["mean_neg"]
    gap_no_io = no_io.diagnostics["adversarial"]["mean_pos"] - no_io.diagnostics["adversarial"]["mean_neg"]
    ok = after["pos"] < before["pos"] and after["neg"] > before["neg"] and gap_full < gap_no_io
    record(7, ok, f"pos {before['pos']:.4f}->{after['pos']:.4f}, neg {before['neg']:.6f}->{after['neg']:.6f}, "
                  f"gap full {gap_full:.4f} < no_io {gap_no_io:.4f}")


def test_criterion_08_metric_oracle():
    rng = np.random.default_rng(8)
    pairs = make_pairs(20, 2)
    clean, adv = _tables(rng, 20, 2, 1.0)
    ks = tuple(range(1, 21))

    class Victim(TableBackend):
        def image_features(self, images):
            src = adv if images[0].pixels is not pairs[0].image.pixels else clean
            return np.array([src[im.id] for im in images])

        def text_features(self, texts):
            src = adv if texts[0].raw.endswith(" adv") else clean
            return np.array([src[t.id] for t in texts])

    adv_pairs = [type(p)(ImageSample(p.image.id, p.image.pixels.copy()),
                         [TextSample(c.id, c.raw + " adv") for c in p.captions]) for p in pairs]
    exact = True
    monotone = {}
    for restrict in (True, False):
        report = evaluate(pairs, adv_pairs, Victim(clean), ks, restrict)
        expected = brute_force(pairs, clean, adv, ks, restrict)
        exact &= all(report.asr(t, k) == expected[t, k] for t, k in expected)
        rows_ok = True
        for task in ("TR", "IR"):
            rows = report.task_rows(task)
            for k in ks:
                r_pre = sum(oracles.rank_by_sort(clean[r.query_id], *_gallery(task, pairs, clean), r.gold_ids
                                                 if task == "TR" else r.gold_ids[0]) <= k for r in rows) / len(rows)
                rows_ok &= report.metrics()[task]["recall_pre"][str(k)] == r_pre
        exact &= rows_ok
        vals = [[report.asr(t, k) for k in ks] for t in ("TR", "IR")]
        monotone[restrict] = all(a >= b for v in vals for a, b in zip(v, v[1:]))
    same = evaluate(pairs, pairs, TableBackend(clean), (1, 5, 10))
    zero = all(same.asr(t, k) == 0.0 for t in ("TR", "IR") for k in (1, 5, 10))
    ok = exact and all(monotone.values()) and zero
    record(8, ok, f"brute-force equal {exact}, monotone in k (restricted {monotone[True]}, "
                  f"all queries {monotone[False]}), clean-vs-clean ASR 0 {zero}")


def _gallery(task, pairs, table):
    ids = [c.id for p in pairs for c in p.captions] if task == "TR" else [p.image.id for p in pairs]
    return ids, [table[i] for i in ids]


def test_criterion_09_ablations_and_batch_size(runs):
    complete = True
    for abl in ("no_cf", "no_li", "no_ig", "no_io"):
        _, records, report = runs(ablation=frozenset({abl}))
        complete &= len(records) == 64 and within_budget(records) and bool(report.metrics())
    table = {}
    for b in (4, 8, 16):
        _, records, report = runs(batch_size=b)
        complete &= within_budget(records)
        table[b] = {t: tuple(report.asr(t, k) for k in (1, 5, 10)) for t in ("TR", "IR")}
    trend = all(table[a][t][i] <= table[b][t][i] for a, b in ((4, 8), (8, 16))
                for t in ("TR", "IR") for i in range(3))
    frozen = all(table[b][t] == pytest.approx(FROZEN_ASR[b][t], abs=1e-12) for b in table for t in ("TR", "IR"))
    summary = ", ".join(f"B={b} TR@1 {table[b]['TR'][0]:.3f} TR@5 {table[b]['TR'][1]:.3f}" for b in table)
    record(9, complete and trend and frozen,
           f"4 ablations complete {complete}, non-decreasing in B {trend}, matches frozen {frozen} ({summary})")


def test_criterion_10_cli_determinism(fixture_dir, tmp_path):
    cfg = str(fixture_dir / "config.json")
    outs = [tmp_path / "a", tmp_path / "b"]
    for out in outs:
        assert main(["attack", "--config", cfg, "--out", str(out)]) == 0
    same = {name: (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()
            for name in ("records.jsonl", "report.json")}
    fp = [json.loads((o / "manifest.json").read_text())["fingerprint"] for o in outs]
    ok = all(same.values()) and fp[0] == fp[1]
    record(10, ok, f"records.jsonl identical {same['records.jsonl']}, report.json identical {same['report.json']}")
