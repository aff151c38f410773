"""Training schedule, the training loop, and description-ensemble inference."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import torch

from hsdlab.audiofeat import AugmentPolicy, FilterBankFeatures, HeartSoundRecord, featurize, stack_frames
from hsdlab.catalog import AbnormalityCatalog, matched_surfaces
from hsdlab.model import (
    KnowledgeQueryModel,
    ModelConfig,
    bce_loss,
    catalog_texts,
    contrastive_loss,
    semantic_description,
    set_seed,
    total_loss,
)

log = logging.getLogger(__name__)


class TrainingAborted(RuntimeError):
    pass


class InferenceError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr: float = 5e-5
    weight_decay: float = 0.02
    epochs: int = 100
    warmup_epochs: int = 20
    batch_size: int = 16
    grad_accum: int = 1
    seed: int = 0
    tau: float = 0.07
    augment: AugmentPolicy = field(default_factory=AugmentPolicy.default)
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    query_source: str = "definition"   # or "entity_words"
    use_contrastive: bool = True
    num_threads: Optional[int] = None

    def __post_init__(self):
        if isinstance(self.augment, dict):
            self.augment = AugmentPolicy.from_json(self.augment)
        self.betas = tuple(self.betas)
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.epochs > 0 and not self.warmup_epochs < self.epochs:
            raise ValueError("warmup_epochs must be smaller than epochs")
        if self.query_source not in ("definition", "entity_words"):
            raise ValueError(f"unknown query_source {self.query_source!r}")

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["augment"] = self.augment.to_json()
        doc["betas"] = list(self.betas)
        return doc


@dataclass
class InferConfig:
    n_descriptions: int = 10
    threshold: float = 0.5
    selection_seed: Optional[int] = None
    include_definition: bool = False

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")
        if self.n_descriptions < 0:
            raise ValueError("n_descriptions must be >= 0")


# --- data ------------------------------------------------------------------------------

@dataclass
class LabeledSet:
    """Recordings with labels and semantic descriptions; records load lazily."""

    ids: list[str]
    labels: np.ndarray
    descriptions: list[str]
    loader: Callable[[int], HeartSoundRecord]

    def __len__(self):
        return len(self.ids)

    def record(self, i: int) -> HeartSoundRecord:
        return self.loader(i)

    def subset(self, idx: Sequence[int]) -> "LabeledSet":
        idx = list(idx)
        base = self.loader
        return LabeledSet([self.ids[i] for i in idx], self.labels[idx],
                          [self.descriptions[i] for i in idx], lambda j: base(idx[j]))

    def cached(self) -> "LabeledSet":
        """Materialise every record in memory."""
        records = [self.loader(i) for i in range(len(self))]
        return LabeledSet(list(self.ids), self.labels, list(self.descriptions), records.__getitem__)


# --- schedule ----------------------------------------------------------------------------

def lr_at(step: int, total_steps: int, warmup_steps: int, base_lr: float) -> float:
    """Linear warmup to ``base_lr`` then cosine decay to zero at ``total_steps``."""
    if step < warmup_steps:
        return base_lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return base_lr
    progress = min(1.0, (step - warmup_steps) / (total_steps - warmup_steps))
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def make_optimizer(model: KnowledgeQueryModel, cfg: TrainConfig) -> torch.optim.AdamW:
    decay, no_decay = [], []
    for name, p in model.named_parameters():
        if not p.requires_grad:
            continue
        (decay if p.ndim >= 2 else no_decay).append(p)
    groups = [{"params": decay, "weight_decay": cfg.weight_decay},
              {"params": no_decay, "weight_decay": 0.0}]
    kwargs = dict(lr=cfg.lr, betas=cfg.betas, eps=cfg.adam_eps)
    try:
        return torch.optim.AdamW(groups, fused=True, **kwargs)
    except (RuntimeError, TypeError):
        return torch.optim.AdamW(groups, **kwargs)


def query_texts(catalog: AbnormalityCatalog, source: str = "definition") -> list[str]:
    if source == "entity_words":
        return [e.canonical_name for e in catalog.entities]
    return [e.definition_text for e in catalog.entities]


def batch_tensors(feats: Sequence[FilterBankFeatures]) -> tuple[torch.Tensor, torch.Tensor]:
    lengths = torch.tensor([f.num_frames for f in feats], dtype=torch.long)
    return torch.from_numpy(stack_frames(feats)), lengths


# --- training ------------------------------------------------------------------------------

@dataclass
class TrainResult:
    model: KnowledgeQueryModel
    log: list[dict]
    optimizer_state: dict
    epochs_done: int
    global_step: int


def train(
    data: LabeledSet,
    catalog: AbnormalityCatalog,
    config: TrainConfig,
    model_config: Optional[ModelConfig] = None,
    model: Optional[KnowledgeQueryModel] = None,
    resume: Optional[dict] = None,
    on_epoch: Optional[Callable[[dict], None]] = None,
    stop_after: Optional[int] = None,
) -> TrainResult:
    """Joint BCE + contrastive training with AdamW and warmup-cosine schedule.

    ``resume`` is a dict with ``epochs_done``, ``global_step`` and
    ``optimizer_state`` from an earlier call; epoch numbering continues.
    ``stop_after`` ends the loop once that many epochs are done while keeping
    the learning-rate schedule of the full ``config.epochs`` run.
    """
    if len(data) == 0:
        raise ValueError("empty training set")
    if data.labels.shape[1] != catalog.k:
        raise ValueError("label width does not match catalog")
    if config.num_threads:
        torch.set_num_threads(config.num_threads)
    set_seed(config.seed)
    if model is None:
        model = KnowledgeQueryModel.from_texts(model_config or ModelConfig(), catalog_texts(catalog))
        model.load_encoder_init()
    if not config.use_contrastive:
        with torch.no_grad():
            model.lam.zero_()
        model.lam.requires_grad_(False)
    opt = make_optimizer(model, config)
    start_epoch, global_step = 0, 0
    if resume:
        opt.load_state_dict(resume["optimizer_state"])
        start_epoch, global_step = int(resume["epochs_done"]), int(resume["global_step"])

    n = len(data)
    micro = config.batch_size
    micro_per_epoch = math.ceil(n / micro)
    steps_per_epoch = math.ceil(micro_per_epoch / config.grad_accum)
    total_steps = config.epochs * steps_per_epoch
    warmup_steps = config.warmup_epochs * steps_per_epoch
    queries = query_texts(catalog, config.query_source)
    labels_all = torch.from_numpy(np.asarray(data.labels, dtype=np.float32))
    policy = config.augment
    static = not policy.enabled
    feat_cache: dict[int, FilterBankFeatures] = {}

    def features(i: int, epoch: int) -> FilterBankFeatures:
        if static:
            if i not in feat_cache:
                feat_cache[i] = featurize(data.record(i))
            return feat_cache[i]
        return featurize(data.record(i), policy.reseeded(epoch, i))

    history: list[dict] = []
    end_epoch = config.epochs if stop_after is None else min(config.epochs, stop_after)
    for epoch in range(start_epoch, end_epoch):
        model.train()
        # dropout draws depend only on (seed, epoch), so resumed runs match uninterrupted ones
        torch.manual_seed(config.seed * 1_000_003 + epoch)
        order = np.random.default_rng([config.seed, epoch]).permutation(n)
        sums = {"bce": 0.0, "con": 0.0, "total": 0.0}
        n_micro = 0
        opt.zero_grad(set_to_none=True)
        for mb in range(micro_per_epoch):
            idx = order[mb * micro:(mb + 1) * micro]
            feats, lengths = batch_tensors([features(int(i), epoch) for i in idx])
            H, mask = model.encode_audio(feats.float(), lengths)
            logits = model.query_decode(H, mask, model.encode_texts(queries))
            bce = bce_loss(torch.sigmoid(logits), labels_all[idx])
            con = None
            if config.use_contrastive:
                r = model.encode_texts([data.descriptions[int(i)] for i in idx])
                con = contrastive_loss(model.pooled_audio(H, mask), r, config.tau)
            loss = total_loss(bce, con, model.lam, config.tau)
            if not torch.isfinite(loss.total):
                raise TrainingAborted(
                    f"non-finite loss at epoch {epoch} step {global_step}: "
                    f"bce={bce.item()}, con={None if con is None else con.item()}, "
                    f"lambda={model.lam.detach().item()}, grad norms={_grad_norms(model)}"
                )
            (loss.total / config.grad_accum).backward()
            sums["bce"] += bce.item()
            sums["con"] += 0.0 if con is None else con.item()
            sums["total"] += loss.total.item()
            n_micro += 1
            if (mb + 1) % config.grad_accum == 0 or mb == micro_per_epoch - 1:
                global_step += 1
                lr = lr_at(min(global_step, total_steps), total_steps, warmup_steps, config.lr)
                for g in opt.param_groups:
                    g["lr"] = lr
                opt.step()
                opt.zero_grad(set_to_none=True)
        entry = {
            "epoch": epoch,
            "bce": sums["bce"] / n_micro,
            "con": sums["con"] / n_micro if config.use_contrastive else None,
            "lambda": model.lam.detach().item(),
            "total": sums["total"] / n_micro,
            "lr": opt.param_groups[0]["lr"],
            "step": global_step,
        }
        if not all(math.isfinite(v) for v in (entry["bce"], entry["lambda"], entry["total"])):
            raise TrainingAborted(f"non-finite epoch summary {entry}")
        history.append(entry)
        log.info("epoch %d bce=%.4f con=%s lambda=%.4f total=%.4f", epoch, entry["bce"],
                 "-" if entry["con"] is None else f"{entry['con']:.4f}", entry["lambda"], entry["total"])
        if on_epoch:
            on_epoch(entry)
    model.eval()
    return TrainResult(model, history, opt.state_dict(), max(start_epoch, end_epoch), global_step)


def _grad_norms(model: KnowledgeQueryModel) -> dict[str, float]:
    out = {}
    for name in ("text_encoder", "audio_encoder", "decoder"):
        grads = [p.grad for p in getattr(model, name).parameters() if p.grad is not None]
        out[name] = float(torch.sqrt(sum((g ** 2).sum() for g in grads))) if grads else 0.0
    return out


# --- inference ------------------------------------------------------------------------------

def description_sets(catalog: AbnormalityCatalog, cfg: InferConfig) -> list[list[str]]:
    """Per-class query texts: names for N=0, else N bank descriptions."""
    sets = []
    for e in catalog.entities:
        if cfg.n_descriptions == 0:
            sets.append([e.canonical_name])
            continue
        pool = ([e.definition_text] if cfg.include_definition else []) + list(e.description_bank)
        if cfg.n_descriptions > len(pool):
            raise InferenceError(
                f"class {e.canonical_name}: {cfg.n_descriptions} descriptions requested, bank has {len(pool)}"
            )
        if cfg.selection_seed is None:
            chosen = pool[: cfg.n_descriptions]
        else:
            pick = np.random.default_rng([cfg.selection_seed, e.entity_id]).choice(
                len(pool), cfg.n_descriptions, replace=False)
            chosen = [pool[i] for i in sorted(pick)]
        sets.append(chosen)
    return sets


@torch.no_grad()
def description_probabilities(
    model: KnowledgeQueryModel,
    features: Sequence[FilterBankFeatures],
    texts: Sequence[str],
) -> np.ndarray:
    """Sigmoid output of every query text for every recording, shape (M, Q)."""
    model.eval()
    # one text at a time: a query's embedding must not depend on what it is batched with
    emb = torch.cat([model.encode_texts([t]) for t in texts])
    out = np.empty((len(features), len(texts)))
    for i, f in enumerate(features):
        H, mask = model.encode_audio(torch.from_numpy(np.asarray(f.frames, dtype=np.float32)))
        logits = model.query_decode(H, mask, emb)[0].double()
        out[i] = torch.sigmoid(logits).numpy()
    return out


def predict(
    model: KnowledgeQueryModel,
    features: Sequence[FilterBankFeatures],
    catalog: AbnormalityCatalog,
    cfg: InferConfig,
) -> np.ndarray:
    """Class probabilities (M, K): the mean of each class's description outputs."""
    sets = description_sets(catalog, cfg)
    flat = [t for s in sets for t in s]
    probs = description_probabilities(model, features, flat)
    out = np.empty((len(features), catalog.k))
    pos = 0
    for j, s in enumerate(sets):
        out[:, j] = probs[:, pos:pos + len(s)].mean(axis=1)
        pos += len(s)
    return out


def infer(record: HeartSoundRecord, catalog: AbnormalityCatalog, model: KnowledgeQueryModel,
          cfg: InferConfig = InferConfig()) -> np.ndarray:
    return predict(model, [featurize(record)], catalog, cfg)[0]


def decide(preds, threshold: float = 0.5) -> np.ndarray:
    """Inclusive threshold: probability >= threshold is a positive."""
    return (np.asarray(preds) >= threshold).astype(np.int64)


def eval_features(data: LabeledSet) -> list[FilterBankFeatures]:
    return [featurize(data.record(i)) for i in range(len(data))]


def labeled_set(ids: Sequence[str], labels, names: Sequence[str],
                loader: Callable[[int], HeartSoundRecord],
                annotations: Optional[Sequence[dict]] = None) -> LabeledSet:
    """Pair recordings with labels and the [SEP]-joined semantic description of each."""
    labels = np.asarray(labels, dtype=np.int64)
    descs = []
    for i, row in enumerate(labels):
        pos = [n for n, v in zip(names, row) if v]
        notes = None
        if annotations:
            notes = {n: [a for a in annotations[i].get(n, ()) if a.lower() != n.lower()] for n in pos}
        descs.append(semantic_description(pos, notes))
    return LabeledSet(list(ids), labels, descs, loader)


def synth_labeled_set(corpus) -> LabeledSet:
    notes = [matched_surfaces(r, corpus.catalog) for r in corpus.reports]
    return labeled_set(corpus.ids, corpus.labels, corpus.catalog.names, corpus.record, notes)
