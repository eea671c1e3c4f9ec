"""Command-line runner.

    vlattack make-fixture --out fx
    vlattack attack --config fx/config.json --out runs/a --set budget.epsilon_v=0.0039
    vlattack evaluate --config fx/config.json --records runs/a --set victim.weight_noise=0.1
    vlattack diagnose-layers --config fx/config.json --image img000 --out diag
    vlattack gap-plot --config fx/config.json --records runs/a --out gap
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .core import AttackConfig, load_manifest

log = logging.getLogger("vlattack")

PATH_KEYS = ("dataset", "vectors", "synonyms", "out")
RUN_KEYS = {"dataset", "vectors", "synonyms", "surrogate", "victim", "out", "export_png"}
ATTACK_KEYS = {"lambda" if f.name == "lambda_" else f.name for f in fields(AttackConfig)}


class ConfigError(ValueError):
    def __init__(self, problems: list[str]):
        super().__init__("\n".join(problems))
        self.problems = problems


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _resolve(value, base: Path):
    if isinstance(value, str) and value and not Path(value).is_absolute():
        return str(base / value)
    return value


def load_config(path: str | None, overrides: list[str] = (), seed: int | None = None,
                out: str | None = None, backend: str | None = None) -> dict:
    """Merge the config file with ``--set`` overrides; file paths resolve next to the file."""
    doc: dict = {}
    if path:
        base = Path(path).resolve().parent
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        for k in PATH_KEYS:
            if k in doc:
                doc[k] = _resolve(doc[k], base)
        for k in ("surrogate", "victim"):
            if isinstance(doc.get(k), dict) and "weights" in doc[k]:
                doc[k]["weights"] = _resolve(doc[k]["weights"], base)
    problems = []
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            problems.append(f"--set expects key=value, got {item!r}")
            continue
        node = doc
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                problems.append(f"--set {key}: {p} is not a section")
                break
        else:
            node[parts[-1]] = _parse_value(raw)
    if seed is not None:
        doc["seed"] = seed
    if out is not None:
        doc["out"] = out
    if backend is not None:
        spec = {"kind": "toy", "weights": backend} if backend.endswith(".bin") else {"kind": backend}
        doc["surrogate"] = spec
        doc.setdefault("victim", spec)
    problems.extend(validate(doc))
    if problems:
        raise ConfigError(problems)
    doc.setdefault("surrogate", {"kind": "toy"})
    doc.setdefault("victim", copy.deepcopy(doc["surrogate"]))
    return doc


def validate(doc: dict) -> list[str]:
    problems = []
    unknown = set(doc) - RUN_KEYS - ATTACK_KEYS
    for k in sorted(unknown):
        problems.append(f"unknown config key {k!r}")
    for k in ("dataset", "vectors", "synonyms"):
        if doc.get(k) and not Path(doc[k]).exists():
            problems.append(f"{k} file not found: {doc[k]}")
    for k in ("surrogate", "victim"):
        spec = doc.get(k)
        if spec is not None and not isinstance(spec, dict):
            problems.append(f"{k} must be a mapping")
        elif spec and spec.get("weights") and not Path(spec["weights"]).exists():
            problems.append(f"{k} weights file not found: {spec['weights']}")
    try:
        attack_config(doc)
    except (TypeError, ValueError) as exc:
        problems.append(str(exc))
    return problems


def attack_config(doc: dict) -> AttackConfig:
    return AttackConfig.from_dict({k: v for k, v in doc.items() if k in ATTACK_KEYS})


def _lexicon(doc):
    from .lexicon import StaticSynonyms, VectorStore, load_vectors
    from .text_attack import Lexicon

    store = load_vectors(doc["vectors"]) if doc.get("vectors") else VectorStore()
    lex = Lexicon(store)
    if doc.get("synonyms"):
        lex.fallback = StaticSynonyms.load(doc["synonyms"])
    return lex


def _require(doc, *keys):
    missing = [k for k in keys if not doc.get(k)]
    if missing:
        raise ConfigError([f"missing required setting {k!r}" for k in missing])


def cmd_attack(doc: dict) -> int:
    from .backend import build_backend
    from .pipeline import attack_dataset

    _require(doc, "dataset", "out")
    cfg = attack_config(doc)
    surrogate = build_backend(doc["surrogate"])
    victim = build_backend(doc["victim"])
    records, report = attack_dataset(doc["dataset"], surrogate, victim, cfg, _lexicon(doc), doc["out"],
                                     export_png=bool(doc.get("export_png")),
                                     manifest_extra={"effective_config": doc})
    print(f"{len(records)} pairs attacked, results in {doc['out']}")
    print(report.table())
    return 0


def cmd_evaluate(doc: dict, records_dir: str) -> int:
    from .backend import build_backend
    from .pipeline import evaluate_records, load_records

    _require(doc, "dataset")
    cfg = attack_config(doc)
    pairs = load_manifest(doc["dataset"])
    records = load_records(records_dir, pairs)
    victim = build_backend(doc["victim"])
    report = evaluate_records(pairs, records, victim, cfg)
    out = Path(doc.get("out") or records_dir)
    out.mkdir(parents=True, exist_ok=True)
    report.write(out, "evaluation")
    with open(out / "evaluation_victim.json", "w", encoding="utf-8") as fh:
        json.dump(victim.descriptor.to_json(), fh, indent=2, sort_keys=True)
    print(report.table())
    return 0


def _plot(path: Path, draw):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    draw(ax)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def cmd_diagnose_layers(doc: dict, image_id: str) -> int:
    from .backend import build_backend, layer_diagnostics

    _require(doc, "dataset", "out")
    pairs = {p.image.id: p for p in load_manifest(doc["dataset"])}
    if image_id not in pairs:
        raise ConfigError([f"image {image_id!r} not in {doc['dataset']}"])
    backend = build_backend(doc["surrogate"])
    rows = layer_diagnostics(pairs[image_id].image, backend)
    out = Path(doc["out"])
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"layers_{image_id}.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=["layer", "cls_similarity", "skip_similarity"])
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})

    def draw(ax):
        ls = [r["layer"] for r in rows]
        ax.plot(ls, [r["cls_similarity"] for r in rows], "o-", label="[CLS] vs top layer")
        ax.plot(ls, [r["skip_similarity"] for r in rows], "s--", label="output with layer skipped")
        ax.set_xlabel("layer")
        ax.set_ylabel("cosine similarity")
        ax.legend()

    _plot(out / f"layers_{image_id}.png", draw)
    for r in rows:
        print(f"{r['layer']:>3}  {r['cls_similarity']:.6f}  {r['skip_similarity']:.6f}")
    return 0


def cmd_gap_plot(doc: dict, records_dir: str | None) -> int:
    from .backend import build_backend
    from .pipeline import adversarial_pairs, load_records
    from .retrieval import similarity_gap

    _require(doc, "dataset", "out")
    cfg = attack_config(doc)
    pairs = load_manifest(doc["dataset"], cfg.m_captions)
    backend = build_backend(doc["victim"])
    result = {}
    if records_dir:
        records = load_records(records_dir, pairs)
        if not records:
            raise ConfigError([f"no records in {records_dir}"])
        clean, adv = adversarial_pairs(pairs, records, cfg.m_captions)
        result["clean"] = similarity_gap(clean, backend)
        result["adversarial"] = similarity_gap(adv, backend)
    else:
        result["clean"] = similarity_gap(pairs, backend)
    out = Path(doc["out"])
    out.mkdir(parents=True, exist_ok=True)
    summary = {k: {"mean_pos": v[0], "mean_neg": v[1]} for k, v in result.items()}
    with open(out / "similarity_gap.json", "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")

    def draw(ax):
        import numpy as np

        names = list(result)
        x = np.arange(len(names))
        ax.bar(x - 0.2, [result[n][0] for n in names], 0.4, label="positive pairs")
        ax.bar(x + 0.2, [result[n][1] for n in names], 0.4, label="negative pairs")
        ax.set_xticks(x, names)
        ax.set_ylabel("mean cosine similarity")
        ax.legend()

    _plot(out / "similarity_gap.png", draw)
    for k, (pos, neg) in result.items():
        print(f"{k:<12} pos {pos:.4f}  neg {neg:.4f}  gap {pos - neg:.4f}")
    return 0


def cmd_make_fixture(out: str, size: int, seed: int) -> int:
    from .fixture import make_fixture

    path = make_fixture(out, size=size, seed=seed)
    print(f"fixture written to {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config value (dotted keys, JSON values); repeatable")
    common.add_argument("--out", help="output directory")
    common.add_argument("--seed", type=int)
    common.add_argument("--backend", help="backend kind or path to a toy weight blob")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="vlattack", description=__doc__.splitlines()[0] if __doc__ else None)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("attack", parents=[common], help="attack a dataset and score it")
    p = sub.add_parser("evaluate", parents=[common], help="re-score a finished run on another victim")
    p.add_argument("--records", required=True, help="run directory holding records.jsonl")
    p = sub.add_parser("diagnose-layers", parents=[common], help="per-layer [CLS] and layer-skip curves")
    p.add_argument("--image", required=True, help="image id from the dataset manifest")
    p = sub.add_parser("gap-plot", parents=[common], help="mean positive/negative pair similarity")
    p.add_argument("--records", help="run directory; omit to plot the clean dataset only")
    p = sub.add_parser("make-fixture", parents=[common], help="write the synthetic toy dataset")
    p.add_argument("--size", type=int, default=32)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "make-fixture":
            if not args.out:
                raise ConfigError(["--out is required"])
            return cmd_make_fixture(args.out, args.size, 7 if args.seed is None else args.seed)
        doc = load_config(args.config, args.overrides, args.seed, args.out, args.backend)
        if args.command == "attack":
            return cmd_attack(doc)
        if args.command == "evaluate":
            return cmd_evaluate(doc, args.records)
        if args.command == "diagnose-layers":
            return cmd_diagnose_layers(doc, args.image)
        if args.command == "gap-plot":
            return cmd_gap_plot(doc, args.records)
    except ConfigError as exc:
        for p in exc.problems:
            print(f"error: {p}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("interrupted; partial records flushed", file=sys.stderr)
        return 130
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 1


if __name__ == "__main__":
    sys.exit(main())
