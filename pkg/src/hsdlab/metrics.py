"""Precision/recall/F1, ROC/AUC and the ablation harness."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata

log = logging.getLogger(__name__)

TRAIN_CELLS = ("full", "no_pretrained_text", "no_pretrained_audio", "no_contrastive", "entity_words")
INFER_ROWS = {0: "Only Entity"}


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise MetricsError("counts must be non-negative")

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


def confusion(labels, decisions) -> list[ConfusionCounts]:
    """Per-class counts from (M, K) binary label and decision matrices."""
    y = np.asarray(labels, dtype=bool)
    p = np.asarray(decisions, dtype=bool)
    if y.shape != p.shape:
        raise MetricsError(f"shape mismatch {y.shape} vs {p.shape}")
    return [
        ConfusionCounts(int((y[:, j] & p[:, j]).sum()), int((~y[:, j] & p[:, j]).sum()),
                        int((y[:, j] & ~p[:, j]).sum()), int((~y[:, j] & ~p[:, j]).sum()))
        for j in range(y.shape[1])
    ]


def prf(c: ConfusionCounts) -> tuple[float, float, float]:
    """Precision, recall, F1; any undefined ratio is reported as 0."""
    p = c.tp / (c.tp + c.fp) if c.tp + c.fp else 0.0
    r = c.tp / (c.tp + c.fn) if c.tp + c.fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def roc_curve(scores, labels) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(fpr, tpr, thresholds) with one point per distinct score, starting at (0, 0)."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricsError("degenerate ROC: labels contain a single class")
    order = np.argsort(-s, kind="mergesort")
    s, y = s[order], y[order]
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tps = np.cumsum(y)[last]
    fps = np.cumsum(~y)[last]
    fpr = np.r_[0.0, fps / n_neg]
    tpr = np.r_[0.0, tps / n_pos]
    thr = np.r_[np.inf, s[last]]
    return fpr, tpr, thr


def roc_auc(scores, labels) -> tuple[tuple[np.ndarray, np.ndarray, np.ndarray], float]:
    """Curve points and the Mann-Whitney AUC, ties counting one half."""
    curve = roc_curve(scores, labels)
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos, n_neg = int(y.sum()), int((~y).sum())
    ranks = rankdata(s)
    auc = (ranks[y].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg)
    return curve, float(auc)


def write_roc_csv(path, curve) -> None:
    fpr, tpr, thr = curve
    lines = ["fpr,tpr,threshold"]
    lines += [f"{a:.10g},{b:.10g},{t:.10g}" for a, b, t in zip(fpr, tpr, thr)]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text("\n".join(lines) + "\n")


# --- reports ------------------------------------------------------------------------------

@dataclass
class MetricsReport:
    class_names: list[str]
    precision: list[float]
    recall: list[float]
    f1: list[float]
    n_samples: int
    auc: Optional[list[Optional[float]]] = None
    config_hash: str = ""
    seed: Optional[int] = None

    @property
    def macro(self) -> dict[str, float]:
        return {k: float(np.mean(getattr(self, k))) for k in ("precision", "recall", "f1")}

    @property
    def macro_f1(self) -> float:
        return self.macro["f1"]

    @classmethod
    def from_predictions(cls, class_names: Sequence[str], labels, decisions, scores=None,
                         config_hash: str = "", seed: Optional[int] = None) -> "MetricsReport":
        counts = confusion(labels, decisions)
        if not counts or np.asarray(labels).shape[0] == 0:
            raise MetricsError("no samples to score")
        p, r, f = zip(*(prf(c) for c in counts))
        auc = None
        if scores is not None:
            y = np.asarray(labels)
            auc = []
            for j in range(y.shape[1]):
                try:
                    auc.append(roc_auc(np.asarray(scores)[:, j], y[:, j])[1])
                except MetricsError:
                    auc.append(None)
        return cls(list(class_names), list(p), list(r), list(f), int(np.asarray(labels).shape[0]),
                   auc, config_hash, seed)

    def to_json(self) -> dict:
        pct = lambda xs: [round(100 * x, 2) for x in xs]
        doc = {
            "config_hash": self.config_hash,
            "seed": self.seed,
            "n_samples": self.n_samples,
            "classes": self.class_names,
            "precision": pct(self.precision),
            "recall": pct(self.recall),
            "f1": pct(self.f1),
            "average": {k: round(100 * v, 2) for k, v in self.macro.items()},
        }
        if self.auc is not None:
            doc["auc"] = [None if a is None else round(a, 4) for a in self.auc]
        return doc

    def to_text(self) -> str:
        """Aligned table: one row per metric, one column per class plus Average."""
        head = ["Metric", *self.class_names, "Average"]
        rows = [head]
        for label, key in (("P", "precision"), ("R", "recall"), ("F1", "f1")):
            vals = getattr(self, key)
            rows.append([label, *(f"{100 * v:.2f}" for v in vals), f"{100 * self.macro[key]:.2f}"])
        widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
        return "\n".join("  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in rows) + "\n"


def ablation_text(rows: Sequence[tuple[str, Optional[MetricsReport]]], errors: Optional[dict] = None) -> str:
    """One line per cell with macro P, R, F1 in percent."""
    width = max([len("Setting")] + [len(n) for n, _ in rows])
    out = [f"{'Setting'.ljust(width)}  {'P':>6}  {'R':>6}  {'F1':>6}"]
    for name, rep in rows:
        if rep is None:
            out.append(f"{name.ljust(width)}  failed: {(errors or {}).get(name, 'unknown error')}")
            continue
        m = rep.macro
        out.append(f"{name.ljust(width)}  {100 * m['precision']:6.2f}  {100 * m['recall']:6.2f}  {100 * m['f1']:6.2f}")
    return "\n".join(out) + "\n"


def config_hash(doc: dict) -> str:
    return hashlib.sha256(json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()[:16]


# --- evaluation and ablations -------------------------------------------------------------------

def evaluate(model, data, catalog, infer_cfg, features=None, cfg_hash: str = "",
             seed: Optional[int] = None) -> tuple[MetricsReport, np.ndarray]:
    from hsdlab.pipeline import decide, eval_features, predict

    feats = features if features is not None else eval_features(data)
    if len(feats) == 0:
        raise MetricsError("empty test split")
    probs = predict(model, feats, catalog, infer_cfg)
    rep = MetricsReport.from_predictions(catalog.names, data.labels, decide(probs, infer_cfg.threshold),
                                         probs, cfg_hash, seed)
    return rep, probs


def cell_configs(cell: str, train_cfg, model_cfg, infer_cfg):
    """Train, model and inference configs for one ablation cell."""
    if cell not in TRAIN_CELLS:
        raise MetricsError(f"unknown ablation cell {cell!r}")
    if cell == "no_pretrained_text":
        model_cfg = replace(model_cfg, text_init=None)
    elif cell == "no_pretrained_audio":
        model_cfg = replace(model_cfg, audio_init=None)
    elif cell == "no_contrastive":
        train_cfg = replace(train_cfg, use_contrastive=False)
    elif cell == "entity_words":
        train_cfg = replace(train_cfg, query_source="entity_words")
        infer_cfg = replace(infer_cfg, n_descriptions=0)
    return train_cfg, model_cfg, infer_cfg


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


@dataclass
class AblationResult:
    rows: list[tuple[str, Optional[MetricsReport]]]
    logs: dict[str, list[dict]] = field(default_factory=dict)
    errors: dict[str, str] = field(default_factory=dict)
    cache_hits: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "rows": [{"setting": n, "metrics": None if r is None else r.to_json()} for n, r in self.rows],
            "errors": self.errors,
        }

    def to_text(self) -> str:
        return ablation_text(self.rows, self.errors)


def run_ablation_train(grid: Sequence[str], train_set, test_set, catalog, train_cfg, model_cfg, infer_cfg,
                       cache_dir=None, data_key: str = "") -> AblationResult:
    """Train and score one model per cell on a shared split; finished cells are cached."""
    from hsdlab.pipeline import eval_features, train

    feats = eval_features(test_set)
    result = AblationResult([])
    for cell in grid:
        tc, mc, ic = cell_configs(cell, train_cfg, model_cfg, infer_cfg)
        key = config_hash({"cell": cell, "train": tc.to_json(), "model": mc.to_json(),
                           "infer": vars(ic), "data": data_key})
        path = Path(cache_dir) / f"{cell}-{key}.json" if cache_dir else None
        if path is not None and path.exists():
            doc = json.loads(path.read_text())
            result.rows.append((cell, MetricsReport(**doc["report"])))
            result.logs[cell] = doc["log"]
            result.cache_hits.append(cell)
            continue
        try:
            res = train(train_set, catalog, tc, mc)
            rep, _ = evaluate(res.model, test_set, catalog, ic, feats, key, tc.seed)
        except Exception as exc:  # one failed cell must not sink the table
            log.error("ablation cell %s failed: %s", cell, exc)
            result.rows.append((cell, None))
            result.errors[cell] = f"{type(exc).__name__}: {exc}"
            continue
        result.rows.append((cell, rep))
        result.logs[cell] = res.log
        if path is not None:
            _atomic_write(path, json.dumps({"report": vars(rep), "log": res.log}, sort_keys=True))
    return result


def run_ablation_infer(model, test_set, catalog, infer_cfg, n_values: Sequence[int] = (0, 1, 10, 50),
                       cfg_hash: str = "") -> AblationResult:
    """Score one trained model with N descriptions per class for each N."""
    from hsdlab.pipeline import eval_features

    feats = eval_features(test_set)
    result = AblationResult([])
    for n in n_values:
        name = INFER_ROWS.get(n, f"N={n}")
        try:
            rep, _ = evaluate(model, test_set, catalog, replace(infer_cfg, n_descriptions=n), feats, cfg_hash)
        except Exception as exc:
            result.rows.append((name, None))
            result.errors[name] = f"{type(exc).__name__}: {exc}"
            continue
        result.rows.append((name, rep))
    return result
