"""Command-line entry points: synth, prepare, train, eval, infer, ablate.

Every command reads one JSON config (``--config``), applies ``--set key=value``
overrides and ``--seed``, and writes under ``--out``. Layout of an output dir::

    corpus/     synthetic WAVs + sidecars, reports.jsonl, synth_spec.json
    prepared/   catalog.json, labels.jsonl, split.json
    train/      model.pt, loss_log.json, losses.png, manifest.json
    eval/       metrics.json, metrics.txt, roc/<class>.csv, roc/<class>.png
    ablate/     table_train.{json,txt}, table_infer.{json,txt}
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Optional

from hsdlab import __version__
from hsdlab.audiofeat import AugmentPolicy, FeatureError, read_wav
from hsdlab.catalog import (
    AbnormalityCatalog,
    CatalogError,
    annotate,
    build_label_schema,
    canonical_order,
    default_catalog,
    extract_entities,
    matched_surfaces,
    read_labels,
    read_reports,
    split_corpus,
    strip_numeric,
    write_labels,
)
from hsdlab.metrics import (
    MetricsError,
    config_hash,
    evaluate,
    roc_auc,
    run_ablation_infer,
    run_ablation_train,
    write_roc_csv,
)
from hsdlab.model import CheckpointError, ModelConfig, ModelError, load_checkpoint, save_checkpoint
from hsdlab.pipeline import InferConfig, TrainConfig, TrainingAborted, labeled_set, predict, decide, train
from hsdlab.synthgen import SynthSpec, gen_corpus, write_corpus

log = logging.getLogger("hsdlab")

EXIT_OK, EXIT_INVALID, EXIT_ABORT = 0, 2, 3
DEFAULT_ROC_CLASSES = ("VSD", "PDA", "Shunt", "Hypertrophy")

DEFAULTS: dict = {
    "seed": 0,
    "synth": {"n_samples": 200},
    "data": {"reports": None, "audio_dir": None, "catalog": None},
    "prepare": {"k": 12, "min_count": 20, "ratio": [9, 1]},
    "model": {},
    "train": {},
    "infer": {},
    "eval": {"roc_classes": list(DEFAULT_ROC_CLASSES), "plots": True},
    "ablate": {"grid": ["full", "no_pretrained_text", "no_pretrained_audio", "no_contrastive", "entity_words"],
               "n_values": [0, 1, 10, 50]},
}


class ConfigError(ValueError):
    pass


# --- config ---------------------------------------------------------------------------------

def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise ConfigError(f"--set expects key=value, got {assignment!r}")
    key, value = assignment.split("=", 1)
    node = cfg
    parts = key.strip().split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"--set {key}: {p} is not a section")
    node[parts[-1]] = _parse_value(value)


def load_config(path: Optional[str], overrides=(), seed: Optional[int] = None) -> dict:
    """Defaults, then the file, then --set flags, then --seed."""
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        try:
            cfg = _merge(cfg, json.loads(Path(path).read_text(encoding="utf-8")))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from exc
    for a in overrides:
        apply_override(cfg, a)
    if seed is not None:
        cfg["seed"] = seed
    return cfg


def run_hash(cfg: dict, *sections: str) -> str:
    """Hash of the seed and the named sections; the output directory never enters it."""
    return config_hash({"seed": cfg["seed"], **{s: cfg.get(s) for s in sections}})


def synth_spec(cfg: dict) -> SynthSpec:
    doc = dict(cfg["synth"])
    doc.setdefault("rng_seed", cfg["seed"])
    return SynthSpec.from_json(doc)


def model_config(cfg: dict) -> ModelConfig:
    return ModelConfig.from_json(cfg["model"])


def train_config(cfg: dict) -> TrainConfig:
    doc = dict(cfg["train"])
    doc.setdefault("seed", cfg["seed"])
    if "augment" in doc and isinstance(doc["augment"], dict):
        doc["augment"] = AugmentPolicy.from_json(doc["augment"])
    return TrainConfig(**doc)


def infer_config(cfg: dict) -> InferConfig:
    return InferConfig(**cfg["infer"])


def _dump(path: Path, doc) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n", encoding="utf-8")


# --- data plumbing ------------------------------------------------------------------------------

def _corpus_paths(cfg: dict, out: Path) -> tuple[Path, Path]:
    reports = cfg["data"].get("reports")
    audio = cfg["data"].get("audio_dir")
    if reports:
        return Path(reports), Path(audio) if audio else Path(reports).parent / "audio"
    return out / "corpus" / "reports.jsonl", out / "corpus" / "audio"


def _portable(path: Path, out: Path) -> str:
    """Paths inside the output dir are stored relative to it, so artifacts do not embed ``--out``."""
    try:
        return Path(path).resolve().relative_to(out.resolve()).as_posix()
    except ValueError:
        return str(Path(path).resolve())


def _resolve(path: str, out: Path) -> Path:
    p = Path(path)
    return p if p.is_absolute() else out / p


def _prepared(out: Path) -> tuple[AbnormalityCatalog, dict, dict]:
    pdir = out / "prepared"
    for name in ("catalog.json", "labels.jsonl", "split.json"):
        if not (pdir / name).exists():
            raise ConfigError(f"missing {pdir / name}; run `hsdlab prepare` first")
    catalog = AbnormalityCatalog.load(pdir / "catalog.json")
    labels = read_labels(pdir / "labels.jsonl", catalog.k)
    split = json.loads((pdir / "split.json").read_text())
    return catalog, labels, split


def _split_set(out: Path, part: str, cache: bool = True):
    catalog, labels, split = _prepared(out)
    ids = split[part]
    audio_dir = _resolve(split["audio_dir"], out)
    reports = {r.report_id: r for r in read_reports(_resolve(split["reports"], out))}
    missing = [i for i in ids if not (audio_dir / f"{i}.wav").exists()]
    if missing:
        raise ConfigError(f"{len(missing)} recordings missing under {audio_dir}, e.g. {missing[0]}.wav")
    notes = [matched_surfaces(strip_numeric(reports[i]), catalog) for i in ids]
    data = labeled_set(ids, [labels[i] for i in ids], catalog.names,
                       lambda j: read_wav(audio_dir / f"{ids[j]}.wav"), notes)
    return catalog, (data.cached() if cache else data), split


# --- commands --------------------------------------------------------------------------------

def cmd_synth(cfg: dict, out: Path, args) -> int:
    spec = synth_spec(cfg)
    corpus = gen_corpus(spec, default_catalog())
    write_corpus(out / "corpus", corpus)
    print(f"wrote {len(corpus)} synthetic recordings to {out / 'corpus'}")
    return EXIT_OK


def cmd_prepare(cfg: dict, out: Path, args) -> int:
    reports_path, audio_dir = _corpus_paths(cfg, out)
    if not reports_path.exists():
        if cfg["data"].get("reports"):
            raise ConfigError(f"reports file not found: {reports_path}")
        cmd_synth(cfg, out, args)
    reports = read_reports(reports_path)
    stripped = [strip_numeric(r) for r in reports]
    p = cfg["prepare"]
    if cfg["data"].get("catalog"):
        catalog = AbnormalityCatalog.load(cfg["data"]["catalog"])
    else:
        lib = default_catalog()
        freq = extract_entities(stripped, lib.synonym_table())
        catalog = canonical_order(build_label_schema(freq, int(p["k"]), int(p["min_count"])))
    rows = [(r.report_id, annotate(r, catalog)) for r in stripped]
    ids = [rid for rid, _ in rows]
    train_ids, test_ids = split_corpus(ids, tuple(p["ratio"]), cfg["seed"])
    pdir = out / "prepared"
    pdir.mkdir(parents=True, exist_ok=True)
    catalog.save(pdir / "catalog.json")
    write_labels(pdir / "labels.jsonl", rows)
    labels = dict(rows)
    prevalence = {
        part: {n: int(sum(labels[i][j] for i in part_ids)) for j, n in enumerate(catalog.names)}
        for part, part_ids in (("train", train_ids), ("test", test_ids))
    }
    _dump(pdir / "split.json", {
        "config_hash": run_hash(cfg, "synth", "data", "prepare"),
        "seed": cfg["seed"],
        "reports": _portable(reports_path, out),
        "audio_dir": _portable(audio_dir, out),
        "train": train_ids,
        "test": test_ids,
        "prevalence": prevalence,
    })
    width = max(len(n) for n in catalog.names)
    print(f"{'class'.ljust(width)}  {'train':>6}  {'test':>6}")
    for n in catalog.names:
        print(f"{n.ljust(width)}  {prevalence['train'][n]:6d}  {prevalence['test'][n]:6d}")
    print(f"{len(rows)} labelled reports, {len(train_ids)} train / {len(test_ids)} test")
    return EXIT_OK


def _train_hash(cfg: dict, out: Path) -> str:
    split = json.loads((out / "prepared" / "split.json").read_text())
    return config_hash({"split": split["config_hash"], "run": run_hash(cfg, "model", "train")})


def cmd_train(cfg: dict, out: Path, args) -> int:
    catalog, data, split = _split_set(out, "train")
    tcfg, mcfg = train_config(cfg), model_config(cfg)
    tdir = out / "train"
    tdir.mkdir(parents=True, exist_ok=True)
    ckpt = tdir / "model.pt"
    chash = _train_hash(cfg, out)
    model, resume, history = None, None, []
    if args.resume and ckpt.exists():
        model, doc = load_checkpoint(ckpt)
        if doc.get("run_hash") != chash and not args.force:
            raise ConfigError("checkpoint was trained with a different config; use --force to resume anyway")
        model.train()
        resume = {k: doc[k] for k in ("epochs_done", "global_step", "optimizer_state")}
        history = list(doc.get("loss_log", []))
        print(f"resuming at epoch {resume['epochs_done']}")

    def stream(entry):
        con = "-" if entry["con"] is None else f"{entry['con']:.4f}"
        print(f"epoch {entry['epoch']:3d}  bce {entry['bce']:.4f}  con {con}  "
              f"lambda {entry['lambda']:.4f}  total {entry['total']:.4f}", flush=True)

    started = time.time()
    res = train(data, catalog, tcfg, mcfg, model=model, resume=resume, on_epoch=stream)
    history += res.log
    save_checkpoint(ckpt, res.model, {
        "run_hash": chash,
        "seed": tcfg.seed,
        "epochs_done": res.epochs_done,
        "global_step": res.global_step,
        "optimizer_state": res.optimizer_state,
        "loss_log": history,
        "catalog": catalog.to_json(),
    })
    _dump(tdir / "loss_log.json", {"config_hash": chash, "seed": tcfg.seed, "epochs": history})
    if cfg["eval"].get("plots", True) and history:
        from hsdlab.plotting import plot_losses
        plot_losses(history, tdir / "losses.png")
    _dump(tdir / "manifest.json", {
        "config_hash": chash,
        "seed": tcfg.seed,
        "config": {"model": mcfg.to_json(), "train": tcfg.to_json()},
        "split": {"train": split["train"], "test": split["test"]},
        "prevalence": split["prevalence"],
        "lambda_trajectory": [h["lambda"] for h in history],
        "loss_log": history,
        "checkpoint": _portable(ckpt, out),
        "version": __version__,
        "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
        "wall_seconds": round(time.time() - started, 1),
    })
    print(f"checkpoint written to {ckpt}")
    return EXIT_OK


def _load_trained(cfg: dict, out: Path, args):
    ckpt = Path(cfg.get("checkpoint") or out / "train" / "model.pt")
    if not ckpt.exists():
        raise ConfigError(f"checkpoint not found: {ckpt}")
    model, doc = load_checkpoint(ckpt)
    if (out / "prepared" / "split.json").exists() and doc.get("run_hash") != _train_hash(cfg, out):
        msg = "checkpoint config hash does not match the current config"
        if not args.force:
            raise ConfigError(msg + "; rerun with --force to evaluate anyway")
        log.warning(msg)
    return model, doc


def cmd_eval(cfg: dict, out: Path, args) -> int:
    model, doc = _load_trained(cfg, out, args)
    catalog, data, _ = _split_set(out, "test")
    if len(data) == 0:
        raise ConfigError("empty test split")
    icfg = infer_config(cfg)
    chash = config_hash({"checkpoint": doc["run_hash"], "infer": cfg["infer"]})
    report, probs = evaluate(model, data, catalog, icfg, cfg_hash=chash, seed=cfg["seed"])
    edir = out / "eval"
    _dump(edir / "metrics.json", report.to_json())
    (edir / "metrics.txt").write_text(report.to_text(), encoding="utf-8")
    print(report.to_text(), end="")
    classes = cfg["eval"].get("roc_classes") or list(DEFAULT_ROC_CLASSES)
    unknown = [c for c in classes if c not in catalog.names]
    if unknown:
        raise ConfigError(f"ROC classes not in catalog: {unknown}")
    plots = cfg["eval"].get("plots", True)
    if plots:
        from hsdlab.plotting import plot_roc
    for name in classes:
        j = catalog.index(name)
        try:
            curve, auc = roc_auc(probs[:, j], data.labels[:, j])
        except MetricsError as exc:
            log.warning("%s: %s", name, exc)
            continue
        write_roc_csv(edir / "roc" / f"{name}.csv", curve)
        if plots:
            plot_roc(curve, auc, name, edir / "roc" / f"{name}.png")
        print(f"ROC {name}: AUC {auc:.4f}")
    return EXIT_OK


def cmd_infer(cfg: dict, out: Path, args) -> int:
    if not args.inputs:
        raise ConfigError("infer needs at least one WAV path")
    model, doc = _load_trained(cfg, out, args)
    catalog = AbnormalityCatalog.from_json(doc["catalog"])
    icfg = infer_config(cfg)
    from hsdlab.audiofeat import featurize

    records = [read_wav(p) for p in args.inputs]
    probs = predict(model, [featurize(r) for r in records], catalog, icfg)
    labels = decide(probs, icfg.threshold)
    rows = []
    for path, rec, p, y in zip(args.inputs, records, probs, labels):
        rows.append({"input": str(path), "record_id": rec.record_id,
                     "probabilities": {n: round(float(v), 6) for n, v in zip(catalog.names, p)},
                     "positive": [n for n, v in zip(catalog.names, y) if v]})
        print(f"{rec.record_id}: {', '.join(rows[-1]['positive']) or 'none'}")
    _dump(out / "infer" / "predictions.json", {"config_hash": run_hash(cfg, "infer"), "predictions": rows})
    return EXIT_OK


def cmd_ablate(cfg: dict, out: Path, args) -> int:
    catalog, train_set, _ = _split_set(out, "train")
    _, test_set, _ = _split_set(out, "test")
    cache = Path(os.environ.get("HSDLAB_CACHE") or out / "cache") / "ablate"
    tcfg, mcfg, icfg = train_config(cfg), model_config(cfg), infer_config(cfg)
    key = _train_hash(cfg, out)
    table = run_ablation_train(cfg["ablate"]["grid"], train_set, test_set, catalog, tcfg, mcfg, icfg,
                               cache_dir=cache, data_key=key)
    adir = out / "ablate"
    _dump(adir / "table_train.json", {"config_hash": key, "seed": cfg["seed"], **table.to_json()})
    (adir / "table_train.txt").write_text(table.to_text(), encoding="utf-8")
    print(table.to_text(), end="")
    if table.cache_hits:
        print(f"cached cells reused: {', '.join(table.cache_hits)}")
    n_values = cfg["ablate"].get("n_values") or []
    if n_values:
        ckpt = out / "train" / "model.pt"
        if ckpt.exists():
            model, _ = _load_trained(cfg, out, args)
        else:
            from hsdlab.pipeline import train as train_model
            model = train_model(train_set, catalog, tcfg, mcfg).model
        rows = run_ablation_infer(model, test_set, catalog, icfg, n_values, key)
        _dump(adir / "table_infer.json", {"config_hash": key, "seed": cfg["seed"], **rows.to_json()})
        (adir / "table_infer.txt").write_text(rows.to_text(), encoding="utf-8")
        print(rows.to_text(), end="")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "prepare": cmd_prepare,
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int, help="global seed (overrides config)")
    common.add_argument("--out", default="runs/default", help="output directory")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. train.epochs=2 (repeatable)")
    common.add_argument("--force", action="store_true", help="proceed despite config hash mismatch")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="hsdlab", description="Heart-sound abnormality diagnosis experiments.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    sub.add_parser("prepare", parents=[common], help="extract labels, build catalog and split")
    p = sub.add_parser("train", parents=[common], help="train a model on the prepared split")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint in OUT/train")
    sub.add_parser("eval", parents=[common], help="metrics tables and ROC curves on the test split")
    p = sub.add_parser("infer", parents=[common], help="predict abnormalities for WAV files")
    p.add_argument("inputs", nargs="*", help="WAV files")
    sub.add_parser("ablate", parents=[common], help="training and inference ablation tables")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.set, args.seed)
        return COMMANDS[args.command](cfg, Path(args.out), args)
    except TrainingAborted as exc:
        print(f"error: training aborted: {exc}", file=sys.stderr)
        return EXIT_ABORT
    except (ConfigError, CatalogError, FeatureError, MetricsError, ModelError, CheckpointError,
            ValueError, TypeError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ABORT


if __name__ == "__main__":
    sys.exit(main())
