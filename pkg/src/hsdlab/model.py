"""Knowledge-aware query-based transformer and its losses.

Class queries are text embeddings of abnormality definitions. Each query
cross-attends to the encoded heart-sound map independently of the other
queries, so a query's logit depends only on the audio, the query and the
weights. In eval mode every text, recording and query is processed on its
own, which makes batched and one-at-a-time results bit-identical.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
import zlib
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch
from torch import Tensor, nn

SEP = "[SEP]"
PRED_EPS = 1e-7


class ModelError(ValueError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class ModelConfig:
    d: int = 256
    heads: int = 4
    ffn_mult: int = 2
    text_layers: int = 2
    decoder_layers: int = 2
    audio_channels: tuple[int, ...] = (8, 16, 32, 32)
    num_mel_bins: int = 64
    dropout: float = 0.1
    vocab_size: int = 8192
    max_text_len: int = 128
    text_positions: bool = True
    query_self_attention: bool = False
    head_layers: int = 1
    contrastive_projection: bool = False
    lambda_init: float = 1.0
    text_init: Optional[str] = None
    audio_init: Optional[str] = None

    def __post_init__(self):
        self.audio_channels = tuple(self.audio_channels)
        if self.d % self.heads:
            raise ModelError("d must be divisible by heads")

    @property
    def total_stride(self) -> int:
        return 2 ** len(self.audio_channels)

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["audio_channels"] = list(self.audio_channels)
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "ModelConfig":
        return cls(**doc)

    def digest(self) -> str:
        doc = self.to_json()
        doc.pop("text_init"), doc.pop("audio_init")
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]


# --- tokenizer -----------------------------------------------------------------------

_WORD = re.compile(r"\[sep\]|[a-z0-9]+|[^\sa-z0-9]")


def tokenize(text: str) -> list[str]:
    return _WORD.findall(text.lower())


class Tokenizer:
    """Word-level vocabulary from catalog texts; unseen words hash into spare ids."""

    PAD, UNK, SEP_ID = 0, 1, 2
    SPECIALS = ("[pad]", "[unk]", "[sep]")

    def __init__(self, words: Sequence[str], vocab_size: int = 8192):
        words = [w for w in words if w not in self.SPECIALS]
        n_fixed = len(self.SPECIALS) + len(words)
        if n_fixed >= vocab_size:
            raise ModelError(f"vocabulary of {n_fixed} words does not fit in {vocab_size} ids")
        self.words = list(words)
        self.vocab_size = vocab_size
        self._ids = {w: i for i, w in enumerate(self.SPECIALS + tuple(self.words))}
        self._n_fixed = n_fixed

    @classmethod
    def build(cls, texts: Sequence[str], vocab_size: int = 8192) -> "Tokenizer":
        counts = Counter(t for text in texts for t in tokenize(text))
        words = sorted(counts, key=lambda w: (-counts[w], w))
        return cls(words[: vocab_size - len(cls.SPECIALS) - 1], vocab_size)

    def token_id(self, tok: str) -> int:
        i = self._ids.get(tok)
        if i is not None:
            return i
        spare = self.vocab_size - self._n_fixed
        return self._n_fixed + zlib.crc32(tok.encode()) % spare

    def encode(self, text: str, max_len: int) -> list[int]:
        return [self.token_id(t) for t in tokenize(text)][:max_len]


# --- building blocks -----------------------------------------------------------------------

def sinusoid_positions(n: int, d: int, device=None, dtype=None) -> Tensor:
    pos = torch.arange(n, dtype=torch.float64)[:, None]
    div = torch.exp(torch.arange(0, d, 2, dtype=torch.float64) * (-math.log(10000.0) / d))
    pe = torch.zeros(n, d, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * div)
    pe[:, 1::2] = torch.cos(pos * div[: d // 2])
    return pe.to(device=device, dtype=dtype or torch.get_default_dtype())


class Attention(nn.Module):
    def __init__(self, d: int, heads: int, dropout: float):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.o = nn.Linear(d, d)
        self.drop = nn.Dropout(dropout)

    def forward(self, query: Tensor, key: Tensor, value: Tensor, key_mask: Optional[Tensor] = None) -> Tensor:
        # query (B, Q, d); key/value (B, S, d); key_mask (B, S) True for valid positions
        b, nq, d = query.shape
        h = self.heads
        q = self.q(query).view(b, nq, h, d // h).transpose(1, 2)
        k = self.k(key).view(b, -1, h, d // h).transpose(1, 2)
        v = self.v(value).view(b, -1, h, d // h).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        if key_mask is not None:
            scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        att = self.drop(torch.softmax(scores, dim=-1))
        out = (att @ v).transpose(1, 2).reshape(b, nq, d)
        return self.o(out)


class FeedForward(nn.Sequential):
    def __init__(self, d: int, mult: int, dropout: float):
        super().__init__(nn.Linear(d, d * mult), nn.GELU(), nn.Dropout(dropout), nn.Linear(d * mult, d))


class EncoderLayer(nn.Module):
    def __init__(self, d, heads, mult, dropout):
        super().__init__()
        self.att = Attention(d, heads, dropout)
        self.ff = FeedForward(d, mult, dropout)
        self.n1 = nn.LayerNorm(d)
        self.n2 = nn.LayerNorm(d)
        self.drop = nn.Dropout(dropout)

    def forward(self, x, mask):
        x = self.n1(x + self.drop(self.att(x, x, x, mask)))
        return self.n2(x + self.drop(self.ff(x)))


class TextEncoder(nn.Module):
    """Token embeddings, a small bidirectional transformer, masked mean pooling."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = nn.Embedding(cfg.vocab_size, cfg.d, padding_idx=Tokenizer.PAD)
        self.layers = nn.ModuleList(
            EncoderLayer(cfg.d, cfg.heads, cfg.ffn_mult, cfg.dropout) for _ in range(cfg.text_layers)
        )

    def forward(self, ids: Tensor, mask: Tensor) -> Tensor:
        x = self.embed(ids) * math.sqrt(self.cfg.d)
        if self.cfg.text_positions:
            x = x + sinusoid_positions(ids.shape[1], self.cfg.d, x.device, x.dtype)
        for layer in self.layers:
            x = layer(x, mask)
        m = mask[..., None].to(x.dtype)
        return (x * m).sum(1) / m.sum(1)


class AudioEncoder(nn.Module):
    """Strided 2-D conv stack over (time, mel) and a linear projection to d.

    Each block halves time and mel resolution, so the output has
    ceil(num_frames / 2**blocks) rows.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        blocks, c_in = [], 1
        for c in cfg.audio_channels:
            blocks += [nn.Conv2d(c_in, c, 3, stride=2, padding=1, padding_mode="replicate"), nn.GELU()]
            c_in = c
        self.convs = nn.Sequential(*blocks)
        f = cfg.num_mel_bins
        for _ in cfg.audio_channels:
            f = (f + 1) // 2
        self.proj = nn.Linear(c_in * f, cfg.d)

    def forward(self, feats: Tensor, lengths: Optional[Tensor] = None) -> tuple[Tensor, Tensor]:
        # feats (B, T, F) raw log energies
        b, t, _ = feats.shape
        if lengths is None:
            lengths = torch.full((b,), t, dtype=torch.long)
        valid = torch.arange(t)[None, :] < lengths[:, None]
        # per-recording scalar standardisation; a gain change is a constant shift in the log domain
        vm = valid[..., None].to(feats.dtype)
        count = vm.sum((1, 2)) * feats.shape[2]
        mean = (feats * vm).sum((1, 2)) / count
        var = (((feats - mean[:, None, None]) * vm) ** 2).sum((1, 2)) / count
        x = (feats - mean[:, None, None]) / torch.sqrt(var[:, None, None] + 1e-5)
        x = self.convs(x[:, None])                      # (B, C, T', F')
        x = x.permute(0, 2, 1, 3).flatten(2)           # (B, T', C*F')
        out_len = lengths.clone()
        for _ in self.cfg.audio_channels:
            out_len = (out_len + 1) // 2
        mask = torch.arange(x.shape[1])[None, :] < out_len[:, None]
        return self.proj(x), mask


class DecoderLayer(nn.Module):
    def __init__(self, d, heads, mult, dropout, self_attention: bool):
        super().__init__()
        self.self_att = Attention(d, heads, dropout) if self_attention else None
        self.n0 = nn.LayerNorm(d) if self_attention else None
        self.cross = Attention(d, heads, dropout)
        self.ff = FeedForward(d, mult, dropout)
        self.n1 = nn.LayerNorm(d)
        self.n2 = nn.LayerNorm(d)
        self.drop = nn.Dropout(dropout)

    def forward(self, q, memory, memory_keys, mask):
        if self.self_att is not None:
            q = self.n0(q + self.drop(self.self_att(q, q, q)))
        q = self.n1(q + self.drop(self.cross(q, memory_keys, memory, mask)))
        return self.n2(q + self.drop(self.ff(q)))


class QueryDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.layers = nn.ModuleList(
            DecoderLayer(cfg.d, cfg.heads, cfg.ffn_mult, cfg.dropout, cfg.query_self_attention)
            for _ in range(cfg.decoder_layers)
        )
        head = []
        for _ in range(cfg.head_layers - 1):
            head += [nn.Linear(cfg.d, cfg.d), nn.GELU()]
        head.append(nn.Linear(cfg.d, 1))
        self.head = nn.Sequential(*head)

    def forward(self, H: Tensor, mask: Tensor, queries: Tensor) -> Tensor:
        # H (B, S, d); queries (Q, d) shared or (B, Q, d); returns logits (B, Q)
        if queries.dim() == 2:
            queries = queries[None].expand(H.shape[0], -1, -1)
        keys = H + sinusoid_positions(H.shape[1], H.shape[2], H.device, H.dtype)
        q = queries
        for layer in self.layers:
            q = layer(q, H, keys, mask)
        return self.head(q).squeeze(-1)


class KnowledgeQueryModel(nn.Module):
    def __init__(self, cfg: ModelConfig, tokenizer: Tokenizer):
        super().__init__()
        self.cfg = cfg
        self.tokenizer = tokenizer
        self.text_encoder = TextEncoder(cfg)
        self.audio_encoder = AudioEncoder(cfg)
        self.decoder = QueryDecoder(cfg)
        self.contrast_proj = nn.Linear(cfg.d, cfg.d) if cfg.contrastive_projection else None
        self.lam = nn.Parameter(torch.tensor(float(cfg.lambda_init)))

    @classmethod
    def from_texts(cls, cfg: ModelConfig, texts: Sequence[str]) -> "KnowledgeQueryModel":
        return cls(cfg, Tokenizer.build(texts, cfg.vocab_size))

    # -- text -----------------------------------------------------------------------
    def _text_batch(self, texts: Sequence[str]) -> tuple[Tensor, Tensor]:
        enc = [self.tokenizer.encode(t, self.cfg.max_text_len) for t in texts]
        for t, e in zip(texts, enc):
            if not e:
                raise ModelError(f"text has no tokens: {t!r}")
        n = max(len(e) for e in enc)
        ids = torch.zeros(len(enc), n, dtype=torch.long)
        for i, e in enumerate(enc):
            ids[i, : len(e)] = torch.tensor(e)
        return ids, ids != Tokenizer.PAD

    def encode_texts(self, texts: Sequence[str]) -> Tensor:
        if any(not t.strip() for t in texts):
            raise ModelError("empty text")
        if not self.training:
            return torch.cat([self.text_encoder(*self._text_batch([t])) for t in texts])
        return self.text_encoder(*self._text_batch(texts))

    def encode_text(self, text: str) -> Tensor:
        return self.encode_texts([text])[0]

    # -- audio ------------------------------------------------------------------------
    def encode_audio(self, feats: Tensor, lengths: Optional[Tensor] = None) -> tuple[Tensor, Tensor]:
        if feats.dim() == 2:
            feats = feats[None]
        if lengths is None:
            lengths = torch.full((feats.shape[0],), feats.shape[1], dtype=torch.long)
        if int(lengths.min()) < self.cfg.total_stride:
            raise ModelError(f"need at least {self.cfg.total_stride} frames, got {int(lengths.min())}")
        if not self.training and feats.shape[0] > 1:
            outs = [self.audio_encoder(feats[i:i + 1, : int(lengths[i])]) for i in range(feats.shape[0])]
            n = max(h.shape[1] for h, _ in outs)
            H = feats.new_zeros(len(outs), n, self.cfg.d)
            mask = torch.zeros(len(outs), n, dtype=torch.bool)
            for i, (h, m) in enumerate(outs):
                H[i, : h.shape[1]] = h[0]
                mask[i, : h.shape[1]] = m[0]
            return H, mask
        return self.audio_encoder(feats, lengths)

    # -- decoding -----------------------------------------------------------------------
    def query_decode(self, H: Tensor, mask: Tensor, queries: Tensor) -> Tensor:
        """Logits (B, Q). In eval mode, independent queries are decoded one by one."""
        if H.dim() == 2:
            H, mask = H[None], mask[None]
        if self.training or self.cfg.query_self_attention:
            return self.decoder(H, mask, queries)
        cols = []
        for i in range(H.shape[0]):
            h, m = H[i:i + 1, : int(mask[i].sum())], mask[i:i + 1, : int(mask[i].sum())]
            cols.append(torch.cat([self.decoder(h, m, queries[j:j + 1]) for j in range(queries.shape[0])], dim=1))
        return torch.cat(cols, dim=0)

    def pooled_audio(self, H: Tensor, mask: Tensor) -> Tensor:
        m = mask[..., None].to(H.dtype)
        pooled = (H * m).sum(1) / m.sum(1)
        return self.contrast_proj(pooled) if self.contrast_proj is not None else pooled

    def forward(self, feats: Tensor, lengths: Optional[Tensor], query_texts: Sequence[str]) -> Tensor:
        H, mask = self.encode_audio(feats, lengths)
        return self.query_decode(H, mask, self.encode_texts(query_texts))

    # -- persistence ---------------------------------------------------------------------
    def shape_manifest(self) -> dict[str, list[int]]:
        return {k: list(v.shape) for k, v in self.state_dict().items()}

    def load_encoder_init(self) -> None:
        """Copy text/audio encoder weights from the checkpoints named in the config."""
        for path, prefix, module in ((self.cfg.text_init, "text_encoder.", self.text_encoder),
                                     (self.cfg.audio_init, "audio_encoder.", self.audio_encoder)):
            if not path:
                continue
            state = torch.load(path, map_location="cpu", weights_only=True)["state_dict"]
            sub = {k[len(prefix):]: v for k, v in state.items() if k.startswith(prefix)}
            _check_shapes(module.state_dict(), sub, path)
            module.load_state_dict(sub)


def _check_shapes(expected: dict, got: dict, source) -> None:
    missing = sorted(set(expected) - set(got))
    extra = sorted(set(got) - set(expected))
    bad = [k for k in expected if k in got and tuple(expected[k].shape) != tuple(got[k].shape)]
    if missing or extra or bad:
        detail = "; ".join(
            part for part in (
                f"missing {missing[:5]}" if missing else "",
                f"unexpected {extra[:5]}" if extra else "",
                "shape mismatch " + ", ".join(
                    f"{k}: {tuple(got[k].shape)} vs {tuple(expected[k].shape)}" for k in bad[:5]) if bad else "",
            ) if part
        )
        raise CheckpointError(f"{source}: {detail}")


def save_checkpoint(path, model: KnowledgeQueryModel, extra: Optional[dict] = None) -> None:
    doc = {
        "config": model.cfg.to_json(),
        "config_hash": model.cfg.digest(),
        "vocab": model.tokenizer.words,
        "shapes": model.shape_manifest(),
        "state_dict": model.state_dict(),
    }
    doc.update(extra or {})
    tmp = Path(str(path) + ".tmp")
    torch.save(doc, tmp)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[KnowledgeQueryModel, dict]:
    """Rebuild the model from a checkpoint; any shape disagreement raises."""
    doc = torch.load(path, map_location="cpu", weights_only=False)
    cfg = ModelConfig.from_json(doc["config"])
    model = KnowledgeQueryModel(cfg, Tokenizer(doc["vocab"], cfg.vocab_size))
    expected = model.state_dict()
    manifest = doc["shapes"]
    for k, shape in manifest.items():
        if k in expected and list(expected[k].shape) != list(shape):
            raise CheckpointError(f"{path}: manifest shape for {k} is {shape}, model has {list(expected[k].shape)}")
    _check_shapes(expected, doc["state_dict"], path)
    model.load_state_dict(doc["state_dict"])
    model.eval()
    return model, doc


# --- losses ------------------------------------------------------------------------------

@dataclass
class LossBreakdown:
    bce: Tensor
    con: Optional[Tensor]
    lam: Tensor
    total: Tensor
    tau: float = 0.07

    def as_floats(self) -> dict:
        return {
            "bce": float(self.bce.detach()),
            "con": None if self.con is None else float(self.con.detach()),
            "lambda": float(self.lam.detach()),
            "total": float(self.total.detach()),
        }


def bce_loss(preds: Tensor, labels: Tensor, eps: float = PRED_EPS) -> Tensor:
    """Mean binary cross-entropy over all N*K entries of probability predictions."""
    if preds.shape != labels.shape:
        raise ModelError(f"shape mismatch: preds {tuple(preds.shape)} vs labels {tuple(labels.shape)}")
    p = preds.clamp(eps, 1 - eps)
    s = labels.to(p.dtype)
    return -(s * torch.log(p) + (1 - s) * torch.log(1 - p)).mean()


def contrastive_loss(audio: Tensor, text: Tensor, tau: float = 0.07, mask: Optional[Tensor] = None) -> Tensor:
    """Symmetric InfoNCE between mean-pooled audio maps and description embeddings.

    ``audio`` is either pooled (N, d) or a map batch (N, S, d) with an
    optional validity mask (N, S).
    """
    if tau <= 0:
        raise ModelError("tau must be positive")
    if audio.dim() == 3:
        if mask is None:
            audio = audio.mean(1)
        else:
            m = mask[..., None].to(audio.dtype)
            audio = (audio * m).sum(1) / m.sum(1)
    a_norm = audio.norm(dim=-1, keepdim=True)
    t_norm = text.norm(dim=-1, keepdim=True)
    if bool((a_norm == 0).any()) or bool((t_norm == 0).any()):
        raise ModelError("degenerate embedding")
    sim = (audio / a_norm) @ (text / t_norm).T / tau
    diag = torch.arange(sim.shape[0])
    row = torch.log_softmax(sim, dim=1)[diag, diag]
    col = torch.log_softmax(sim, dim=0)[diag, diag]
    return -(row + col).mean()


def total_loss(bce: Tensor, con: Optional[Tensor], lam: Tensor, tau: float = 0.07) -> LossBreakdown:
    total = bce if con is None else bce + lam * con
    return LossBreakdown(bce, con, lam, total, tau)


def semantic_description(names: Sequence[str], annotations: Optional[dict[str, Sequence[str]]] = None) -> str:
    """Positive entity names (each followed by its annotations) joined by [SEP]; "normal" if none."""
    parts = []
    for name in names:
        parts.append(name)
        parts.extend((annotations or {}).get(name, ()))
    return f" {SEP} ".join(parts) if parts else "normal"


def catalog_texts(catalog) -> list[str]:
    """Texts the tokenizer vocabulary is built from."""
    texts = ["normal", SEP]
    for e in catalog.entities:
        texts += [e.canonical_name, e.full_name, e.definition_text, *e.synonyms, *e.description_bank]
    return [t for t in texts if t]


def set_seed(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % (2 ** 32))
