"""Echocardiography report processing and the multi-label abnormality schema.

Reports are reduced to prose (measurements removed), abnormality mentions
are counted across the corpus, the most frequent abnormalities become the
label schema, and each report is annotated against that schema.
"""

from __future__ import annotations

import json
import math
import random
import re
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping, Optional, Protocol, Sequence

DEFAULT_ORDER = (
    "ASD", "VSD", "PVS", "PDA", "PFO", "AS", "PH",
    "Prolapse", "Regurgitation", "Shunt", "Hypertrophy", "Dilation",
)
NEGATION_WINDOW = 4


class CatalogError(ValueError):
    pass


@dataclass(frozen=True)
class NumericIndex:
    key: str
    value: float
    unit: str = ""


@dataclass(frozen=True)
class EchoReportRaw:
    report_id: str
    numeric_indices: tuple[NumericIndex, ...] = ()
    description: str = ""
    diagnosis: str = ""

    @property
    def text(self) -> str:
        return f"{self.description}\n{self.diagnosis}"

    def to_json(self) -> dict:
        return {
            "report_id": self.report_id,
            "numeric_indices": [
                {"key": n.key, "value": n.value, "unit": n.unit} for n in self.numeric_indices
            ],
            "description": self.description,
            "diagnosis": self.diagnosis,
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "EchoReportRaw":
        missing = [k for k in ("report_id", "numeric_indices", "description", "diagnosis") if k not in doc]
        if missing:
            raise CatalogError(f"missing field(s): {', '.join(missing)}")
        if not isinstance(doc["description"], str) or not isinstance(doc["diagnosis"], str):
            raise CatalogError("description and diagnosis must be strings")
        if not doc["description"].strip() and not doc["diagnosis"].strip():
            raise CatalogError("description and diagnosis are both empty")
        try:
            indices = tuple(
                NumericIndex(str(n["key"]), float(n["value"]), str(n.get("unit", "")))
                for n in doc["numeric_indices"]
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise CatalogError(f"bad numeric_indices entry: {exc}") from exc
        return cls(str(doc["report_id"]), indices, doc["description"], doc["diagnosis"])


@dataclass(frozen=True)
class AbnormalityEntity:
    entity_id: int
    canonical_name: str
    definition_text: str
    synonyms: tuple[str, ...] = ()
    negation_cues: tuple[str, ...] = ()
    description_bank: tuple[str, ...] = ()
    full_name: str = ""

    def __post_init__(self):
        if not self.definition_text.strip():
            raise CatalogError(f"{self.canonical_name}: empty definition_text")
        if any(not d.strip() for d in self.description_bank):
            raise CatalogError(f"{self.canonical_name}: empty description in bank")
        if len(set(self.description_bank)) != len(self.description_bank):
            raise CatalogError(f"{self.canonical_name}: duplicate descriptions in bank")

    def to_json(self) -> dict:
        return {
            "entity_id": self.entity_id,
            "canonical_name": self.canonical_name,
            "full_name": self.full_name,
            "definition_text": self.definition_text,
            "synonyms": list(self.synonyms),
            "negation_cues": list(self.negation_cues),
            "description_bank": list(self.description_bank),
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "AbnormalityEntity":
        return cls(
            entity_id=int(doc["entity_id"]),
            canonical_name=doc["canonical_name"],
            definition_text=doc["definition_text"],
            synonyms=tuple(doc.get("synonyms", ())),
            negation_cues=tuple(doc.get("negation_cues", ())),
            description_bank=tuple(doc.get("description_bank", ())),
            full_name=doc.get("full_name", ""),
        )


@dataclass(frozen=True)
class AbnormalityCatalog:
    entities: tuple[AbnormalityEntity, ...]
    min_count: int = 20
    k: int = 12

    def __post_init__(self):
        if len(self.entities) != self.k:
            raise CatalogError(f"catalog has {len(self.entities)} entities, expected k={self.k}")
        names = [e.canonical_name for e in self.entities]
        if len(set(names)) != len(names):
            raise CatalogError("canonical names must be unique")
        for i, e in enumerate(self.entities):
            if e.entity_id != i:
                raise CatalogError(f"entity {e.canonical_name} has id {e.entity_id}, expected {i}")

    @property
    def names(self) -> list[str]:
        return [e.canonical_name for e in self.entities]

    def index(self, name: str) -> int:
        return self.names.index(name)

    def synonym_table(self) -> dict[str, str]:
        return {s.lower(): e.canonical_name for e in self.entities for s in e.synonyms}

    def with_banks(self, banks: Mapping[str, Sequence[str]]) -> "AbnormalityCatalog":
        ents = tuple(
            replace(e, description_bank=tuple(banks.get(e.canonical_name, e.description_bank)))
            for e in self.entities
        )
        return replace(self, entities=ents)

    def to_json(self) -> dict:
        return {"k": self.k, "min_count": self.min_count, "entities": [e.to_json() for e in self.entities]}

    @classmethod
    def from_json(cls, doc: Mapping) -> "AbnormalityCatalog":
        ents = tuple(AbnormalityEntity.from_json(e) for e in doc["entities"])
        return cls(ents, int(doc.get("min_count", 20)), int(doc.get("k", len(ents))))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, ensure_ascii=False) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "AbnormalityCatalog":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


@dataclass(frozen=True)
class FrequencyEntry:
    surface_form: str
    mapped_entity: Optional[str]
    count: int


@dataclass(frozen=True)
class EntityFrequencyTable:
    entries: tuple[FrequencyEntry, ...]

    def __post_init__(self):
        if any(e.count < 0 for e in self.entries):
            raise CatalogError("negative count")
        object.__setattr__(self, "entries", tuple(sorted(self.entries, key=lambda e: (-e.count, e.surface_form))))

    def entity_counts(self) -> dict[str, int]:
        counts: dict[str, int] = {}
        for e in self.entries:
            if e.mapped_entity is not None:
                counts[e.mapped_entity] = counts.get(e.mapped_entity, 0) + e.count
        return counts


# --- knowledge base -----------------------------------------------------------

def _load_kb() -> dict:
    return json.loads(resources.files("hsdlab.data").joinpath("default_catalog.json").read_text(encoding="utf-8"))


def entity_library() -> dict[str, AbnormalityEntity]:
    """All abnormalities the extractor knows about, keyed by canonical name."""
    kb = _load_kb()
    return {d["canonical_name"]: AbnormalityEntity.from_json(d) for d in kb["entities"] + kb["extra_entities"]}


def default_synonym_table() -> dict[str, Optional[str]]:
    """Surface form -> canonical entity, or None for non-abnormality findings."""
    kb = _load_kb()
    table: dict[str, Optional[str]] = {s: None for s in kb["non_abnormality_surfaces"]}
    for d in kb["entities"] + kb["extra_entities"]:
        for s in d["synonyms"]:
            table[s.lower()] = d["canonical_name"]
    return table


def default_catalog() -> AbnormalityCatalog:
    kb = _load_kb()
    return AbnormalityCatalog(
        tuple(AbnormalityEntity.from_json(d) for d in kb["entities"]), int(kb["min_count"]), int(kb["k"])
    )


# --- numeric stripping ----------------------------------------------------------

_UNITS = sorted(
    ["%", "mm", "cm", "m", "ml", "l", "mmhg", "mm hg", "m/s", "cm/s", "ms", "s", "bpm",
     "g", "kg", "g/m2", "g/m²", "ml/m2", "cm2", "cm²", "mm2", "kpa", "hz"],
    key=len, reverse=True,
)
_NUM = r"[-+]?\d+(?:[.,]\d+)?"
_NUM_RANGE = rf"{_NUM}(?:\s*(?:-|–|~|to|x|×|/)\s*{_NUM})*"
_UNIT_ALT = "|".join(re.escape(u) for u in _UNITS)
_MEASURE = re.compile(rf"(?<![\w.]){_NUM_RANGE}(?:\s*(?:{_UNIT_ALT}))?(?![\w/])", re.IGNORECASE)


def _key_pattern(keys: Iterable[str]) -> Optional[re.Pattern]:
    keys = sorted({k for k in keys if k.strip()}, key=len, reverse=True)
    if not keys:
        return None
    alt = "|".join(re.escape(k) for k in keys)
    return re.compile(rf"(?<!\w)(?:{alt})\s*[:=]?\s*(?={_NUM})", re.IGNORECASE)


def _tidy(text: str) -> str:
    text = re.sub(r"[ \t]+", " ", text)
    text = re.sub(r" ?\n ?", "\n", text)
    text = re.sub(r" +([,.;:!?])", r"\1", text)
    text = re.sub(r"([,;:])(?:[ ]*[,;:])+", r"\1", text)
    text = re.sub(r"[,;:]+\.", ".", text)
    text = re.sub(r"\.(?:[ ]*[.,;:])+", ".", text)
    text = re.sub(r"(^|\n)[ ]*[.,;:]+[ ]*", r"\1", text)
    text = re.sub(r"\(\s*\)", "", text)
    text = re.sub(r"[ \t]+", " ", text)
    text = re.sub(r" +([,.;:!?])", r"\1", text)
    return text.strip()


def _strip_text(text: str, key_re: Optional[re.Pattern]) -> str:
    if key_re is not None:
        text = key_re.sub("", text)
    text = _MEASURE.sub("", text)
    prev = None
    while prev != text:
        prev, text = text, _tidy(text)
    return text


def strip_numeric(report: EchoReportRaw) -> EchoReportRaw:
    """Drop numeric indices and every measurement phrase from the prose.

    A measurement phrase is a number (or range) plus an adjacent unit; when
    the number follows one of the report's index keys, the key goes too.
    """
    key_re = _key_pattern(n.key for n in report.numeric_indices)
    return replace(
        report,
        numeric_indices=(),
        description=_strip_text(report.description, key_re),
        diagnosis=_strip_text(report.diagnosis, key_re),
    )


# --- mention finding ---------------------------------------------------------------

_TOKEN = re.compile(r"[a-z0-9]+(?:[-'][a-z0-9]+)*")
_CLAUSE_BREAK = re.compile(r"[.;:!?,\n]|\bbut\b|\bhowever\b", re.IGNORECASE)


@dataclass(frozen=True)
class Mention:
    surface: str
    entity: Optional[str]
    clause: int
    token_start: int
    negated: bool


def _clauses(text: str) -> list[list[str]]:
    return [_TOKEN.findall(part.lower()) for part in _CLAUSE_BREAK.split(text)]


def find_mentions(
    text: str,
    synonym_table: Mapping[str, Optional[str]],
    negation_cues: Mapping[Optional[str], Sequence[str]] | Sequence[str] = (),
    window: int = NEGATION_WINDOW,
) -> list[Mention]:
    """Longest-match whole-phrase search of synonym surfaces, clause by clause.

    A mention is negated when a cue phrase ends within ``window`` tokens
    before it inside the same clause.
    """
    surfaces: dict[tuple[str, ...], tuple[str, Optional[str]]] = {}
    for surface, ent in synonym_table.items():
        toks = tuple(_TOKEN.findall(surface.lower()))
        if toks:
            surfaces.setdefault(toks, (surface, ent))
    max_len = max((len(t) for t in surfaces), default=0)

    def cues_for(ent):
        if isinstance(negation_cues, Mapping):
            return negation_cues.get(ent, ())
        return negation_cues

    mentions = []
    for ci, toks in enumerate(_clauses(text)):
        i = 0
        while i < len(toks):
            for n in range(min(max_len, len(toks) - i), 0, -1):
                hit = surfaces.get(tuple(toks[i:i + n]))
                if hit is not None:
                    negated = _negated(toks, i, cues_for(hit[1]), window)
                    mentions.append(Mention(hit[0], hit[1], ci, i, negated))
                    i += n
                    break
            else:
                i += 1
    return mentions


def _negated(toks: Sequence[str], start: int, cues: Sequence[str], window: int) -> bool:
    lo = max(0, start - window)
    for cue in cues:
        ct = _TOKEN.findall(cue.lower())
        if not ct:
            continue
        # cue must end inside [start - window, start - 1]
        for end in range(lo, start):
            b = end - len(ct) + 1
            if b >= 0 and list(toks[b:end + 1]) == ct:
                return True
    return False


# --- corpus statistics -----------------------------------------------------------

def extract_entities(
    corpus: Sequence[EchoReportRaw], synonym_table: Mapping[str, Optional[str]]
) -> EntityFrequencyTable:
    """Count, per surface form, how many reports mention it (once per report)."""
    if not corpus:
        raise CatalogError("empty corpus")
    counts = {s.lower(): 0 for s in synonym_table}
    lowered = {s.lower(): e for s, e in synonym_table.items()}
    for report in corpus:
        stripped = strip_numeric(report)
        seen = {m.surface.lower() for m in find_mentions(stripped.text, lowered)}
        for s in seen:
            counts[s] += 1
    return EntityFrequencyTable(
        tuple(FrequencyEntry(s, lowered[s], c) for s, c in counts.items() if c > 0)
    )


def build_label_schema(
    freq: EntityFrequencyTable,
    k: int = 12,
    min_count: int = 20,
    library: Optional[Mapping[str, AbnormalityEntity]] = None,
) -> AbnormalityCatalog:
    """Keep the ``k`` most frequent abnormalities with at least ``min_count`` reports.

    Surface counts are summed per mapped entity; equal counts are ordered
    by name. Entity details come from ``library`` (the packaged knowledge
    base by default); unknown names get a placeholder definition.
    """
    counts = freq.entity_counts()
    eligible = sorted(((n, c) for n, c in counts.items() if c >= min_count), key=lambda t: (-t[1], t[0]))
    if len(eligible) < k:
        raise CatalogError(
            f"insufficient eligible entities: need {k}, have {len(eligible)} "
            f"(deficit {k - len(eligible)}) with count >= {min_count}"
        )
    library = entity_library() if library is None else library
    ents = []
    for i, (name, _) in enumerate(eligible[:k]):
        base = library.get(name)
        if base is None:
            base = AbnormalityEntity(i, name, f"{name} is an abnormal echocardiographic finding.", (name.lower(),))
        ents.append(replace(base, entity_id=i))
    return AbnormalityCatalog(tuple(ents), min_count, k)



def canonical_order(catalog: AbnormalityCatalog, reference: Optional[AbnormalityCatalog] = None) -> AbnormalityCatalog:
    """Reorder entities to follow ``reference`` (the packaged 12-class order by default).

    Entities absent from the reference keep their relative order after the known ones.
    """
    ref = (reference or default_catalog()).names
    rank = {n: i for i, n in enumerate(ref)}
    ents = sorted(catalog.entities, key=lambda e: (rank.get(e.canonical_name, len(ref)), e.entity_id))
    return replace(catalog, entities=tuple(replace(e, entity_id=i) for i, e in enumerate(ents)))

# --- annotation ---------------------------------------------------------------------

class AbnormalityResolver(Protocol):
    def present(self, text: str, catalog: AbnormalityCatalog) -> set[str]:
        """Canonical names asserted present in ``text``."""


@dataclass
class RuleResolver:
    """Synonym matching with a preceding negation-cue window.

    Hedged mentions ("possible small PFO") count as present.
    """

    window: int = NEGATION_WINDOW
    extra_surfaces: Mapping[str, Optional[str]] = field(default_factory=dict)

    def present(self, text: str, catalog: AbnormalityCatalog) -> set[str]:
        table = dict(self.extra_surfaces)
        table.update(catalog.synonym_table())
        cues = {e.canonical_name: e.negation_cues for e in catalog.entities}
        found = set()
        for m in find_mentions(text, table, cues, self.window):
            if m.entity is not None and not m.negated:
                found.add(m.entity)
        return found & set(catalog.names)


def annotate(
    report: EchoReportRaw, catalog: AbnormalityCatalog, resolver: Optional[AbnormalityResolver] = None
) -> list[int]:
    resolver = resolver or RuleResolver()
    present = resolver.present(report.text, catalog)
    return [int(name in present) for name in catalog.names]


def matched_surfaces(report: EchoReportRaw, catalog: AbnormalityCatalog) -> dict[str, list[str]]:
    """Affirmed surface forms per entity, used as annotations in the semantic description."""
    cues = {e.canonical_name: e.negation_cues for e in catalog.entities}
    out: dict[str, list[str]] = {}
    for m in find_mentions(report.text, catalog.synonym_table(), cues):
        if m.entity is not None and not m.negated and m.surface not in out.setdefault(m.entity, []):
            out[m.entity].append(m.surface)
    return out


# --- splitting -------------------------------------------------------------------------

def n_test_samples(n: int, ratio: tuple[int, int] = (9, 1)) -> int:
    # round half up
    return int(math.floor(n * ratio[1] / sum(ratio) + 0.5))


def split_corpus(samples: Sequence, ratio: tuple[int, int] = (9, 1), seed: int = 0) -> tuple[list, list]:
    """Uniform random, unstratified split of sample ids (or samples)."""
    n = len(samples)
    if n < 10:
        raise CatalogError(f"need at least 10 samples to split, got {n}")
    order = list(range(n))
    random.Random(seed).shuffle(order)
    n_test = n_test_samples(n, ratio)
    test_idx = sorted(order[:n_test])
    train_idx = sorted(order[n_test:])
    return [samples[i] for i in train_idx], [samples[i] for i in test_idx]


# --- file formats ------------------------------------------------------------------------

def read_reports(path) -> list[EchoReportRaw]:
    """Read a report JSONL file; errors carry the 1-based line number."""
    reports, seen = [], set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                report = EchoReportRaw.from_json(json.loads(line))
            except (json.JSONDecodeError, CatalogError) as exc:
                raise CatalogError(f"{path}:{lineno}: {exc}") from exc
            if report.report_id in seen:
                raise CatalogError(f"{path}:{lineno}: duplicate report_id {report.report_id!r}")
            seen.add(report.report_id)
            reports.append(report)
    return reports


def write_reports(path, reports: Iterable[EchoReportRaw]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_json(), ensure_ascii=False) + "\n")


def write_labels(path, rows: Iterable[tuple[str, Sequence[int]]]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rid, labels in rows:
            fh.write(json.dumps({"report_id": rid, "labels": [int(v) for v in labels]}) + "\n")


def read_labels(path, k: Optional[int] = None) -> dict[str, list[int]]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            doc = json.loads(line)
            labels = [int(v) for v in doc["labels"]]
            if k is not None and len(labels) != k:
                raise CatalogError(f"{path}:{lineno}: expected {k} labels, got {len(labels)}")
            if any(v not in (0, 1) for v in labels):
                raise CatalogError(f"{path}:{lineno}: labels must be 0/1")
            out[doc["report_id"]] = labels
    return out
