"""Synthetic auscultation corpora with learnable per-abnormality signatures.

Each record is five site segments of an S1/S2 pulse train over a white
sensor-noise floor. Every positive label adds band-limited murmur noise in
its own frequency band and cardiac phase, loudest at its emphasized site.
Reports are written so that the catalog annotator recovers the labels.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.integrate import trapezoid
from scipy.signal import welch

from hsdlab.audiofeat import SITES, HeartSoundRecord, SiteSpan
from hsdlab.catalog import (
    AbnormalityCatalog,
    EchoReportRaw,
    NumericIndex,
    default_catalog,
)

PHASES = ("systole", "diastole", "continuous")


@dataclass(frozen=True)
class Signature:
    band_low_hz: float
    band_high_hz: float
    phase: str
    site_emphasis: str
    snr_db: float = 20.0


def default_signatures(snr_db: float = 20.0) -> tuple[Signature, ...]:
    # 12 disjoint 45 Hz bands with 20 Hz guards between 110 and 890 Hz
    phases = ["systole", "systole", "systole", "continuous", "diastole", "systole",
              "diastole", "systole", "systole", "continuous", "diastole", "diastole"]
    sites = ["pulmonic", "tricuspid", "pulmonic", "pulmonic", "erb", "aortic",
             "pulmonic", "mitral", "mitral", "erb", "mitral", "tricuspid"]
    return tuple(
        Signature(110.0 + 65.0 * j, 155.0 + 65.0 * j, phases[j], sites[j], snr_db) for j in range(12)
    )


# Class prevalences for a 12-class corpus in catalog order. Chosen for
# desk-scale learnability; each class clears min_count=20 at n=200.
DEFAULT_PRIORS = (0.25, 0.35, 0.20, 0.25, 0.22, 0.18, 0.20, 0.18, 0.32, 0.30, 0.25, 0.22)


@dataclass(frozen=True)
class SynthSpec:
    n_samples: int = 200
    class_priors: tuple[float, ...] = DEFAULT_PRIORS
    heart_rate_bpm: tuple[float, float] = (70.0, 130.0)
    signatures: tuple[Signature, ...] = field(default_factory=default_signatures)
    rng_seed: int = 0
    sample_rate_hz: int = 4000
    site_duration_s: float = 15.0
    noise_floor: float = 0.02
    off_site_gain: float = 0.5
    murmur_jitter_db: float = 3.0
    ambient_snr_db: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "class_priors", tuple(float(p) for p in self.class_priors))
        object.__setattr__(self, "heart_rate_bpm", tuple(self.heart_rate_bpm))
        object.__setattr__(self, "signatures", tuple(
            s if isinstance(s, Signature) else Signature(**s) for s in self.signatures))
        if len(self.class_priors) != len(self.signatures):
            raise ValueError("one prior per signature required")
        if any(not 0 <= p <= 1 for p in self.class_priors):
            raise ValueError("priors must lie in [0, 1]")
        nyq = self.sample_rate_hz / 2
        for s in self.signatures:
            if not 0 < s.band_low_hz < s.band_high_hz < nyq:
                raise ValueError(f"bad band {s.band_low_hz}-{s.band_high_hz} Hz")
            if s.phase not in PHASES or s.site_emphasis not in SITES:
                raise ValueError(f"bad signature {s}")
        keys = [(s.band_low_hz, s.band_high_hz, s.phase) for s in self.signatures]
        if len(set(keys)) != len(keys):
            raise ValueError("signatures must differ in (band, phase)")

    @property
    def k(self) -> int:
        return len(self.signatures)

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["signatures"] = [asdict(s) for s in self.signatures]
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "SynthSpec":
        doc = dict(doc)
        if "signatures" in doc:
            doc["signatures"] = tuple(Signature(**s) for s in doc["signatures"])
        return cls(**doc)


def sample_seed(corpus_seed: int, index: int) -> int:
    """Per-sample seed; parallel and serial generation agree."""
    return int(np.random.SeedSequence([corpus_seed, index]).generate_state(1)[0])


def _band_noise(rng, n, low, high, sr):
    """Unit-variance noise confined to [low, high] Hz, shaped in the frequency domain."""
    freqs = np.fft.rfftfreq(n, 1.0 / sr)
    band = np.flatnonzero((freqs >= low) & (freqs <= high))
    spec = np.zeros(len(freqs), dtype=complex)
    spec[band] = rng.standard_normal(len(band)) + 1j * rng.standard_normal(len(band))
    y = np.fft.irfft(spec, n)
    return y / (np.std(y) + 1e-12)


def _pulse(sr, freq, dur, rng):
    t = np.arange(int(dur * sr)) / sr
    env = np.exp(-0.5 * ((t - dur / 2) / (dur / 6)) ** 2)
    return env * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))


def _phase_masks(n, sr, rng, hr_range):
    """Return (pulse train, systole mask, diastole mask) for one site segment."""
    hr = rng.uniform(*hr_range)
    period = 60.0 / hr
    base = np.zeros(n)
    sys_mask = np.zeros(n, dtype=bool)
    dia_mask = np.zeros(n, dtype=bool)
    t = rng.uniform(0, period)
    onsets = []
    while t < n / sr:
        onsets.append(t)
        t += period * rng.uniform(0.97, 1.03)
    s1 = _pulse(sr, 45.0, 0.08, rng)
    s2 = _pulse(sr, 60.0, 0.06, rng)
    prev_end = 0
    for t0 in onsets:
        a = int(t0 * sr)
        b = int((t0 + 0.33 * period) * sr)
        for start, p, amp in ((a, s1, 1.0), (b, s2, 0.7)):
            seg = base[start:start + len(p)]
            seg += amp * p[:len(seg)]
        sys_mask[min(n, a + int(0.06 * sr)):min(n, b - int(0.02 * sr))] = True
        dia_mask[prev_end:max(prev_end, a - int(0.03 * sr))] = True
        prev_end = min(n, b + int(0.06 * sr))
    dia_mask[prev_end:] = True
    return base, sys_mask, dia_mask


def _taper(mask, sr):
    # 10 ms ramps avoid clicks at murmur boundaries
    w = max(1, int(0.01 * sr))
    kernel = np.ones(w) / w
    return np.convolve(mask.astype(float), kernel, mode="same")


def gen_sample(labels: Sequence[int], spec: SynthSpec, seed: int, record_id: str = "") -> HeartSoundRecord:
    if len(labels) != spec.k:
        raise ValueError(f"expected {spec.k} labels, got {len(labels)}")
    rng = np.random.default_rng(seed)
    sr = spec.sample_rate_hz
    n_site = int(round(spec.site_duration_s * sr))
    pieces, spans = [], []
    for si, site in enumerate(SITES):
        base, sys_mask, dia_mask = _phase_masks(n_site, sr, rng, spec.heart_rate_bpm)
        x = base + spec.noise_floor * rng.standard_normal(n_site)
        for j, sig in enumerate(spec.signatures):
            if not labels[j]:
                continue
            if sig.phase == "systole":
                env = _taper(sys_mask, sr)
            elif sig.phase == "diastole":
                env = _taper(dia_mask, sr)
            else:
                env = np.ones(n_site)
            # murmur in-band power sits snr_db above the noise floor's in-band power
            noise_band_frac = (sig.band_high_hz - sig.band_low_hz) / (sr / 2)
            level_db = sig.snr_db + rng.uniform(-spec.murmur_jitter_db, spec.murmur_jitter_db)
            amp = spec.noise_floor * math.sqrt(noise_band_frac * 10 ** (level_db / 10))
            if site != sig.site_emphasis:
                amp *= spec.off_site_gain
            x += amp * env * _band_noise(rng, n_site, sig.band_low_hz, sig.band_high_hz, sr)
        if spec.ambient_snr_db is not None:
            x += _ambient(rng, n_site, sr, x, spec.ambient_snr_db)
        spans.append(SiteSpan(site, si * n_site, (si + 1) * n_site))
        pieces.append(x)
    samples = np.concatenate(pieces) * 0.5
    return HeartSoundRecord(record_id or f"syn{seed}", samples.astype(np.float32), sr, tuple(spans))


def _ambient(rng, n, sr, x, snr_db):
    """Speech-band babble plus sparse rubbing transients."""
    babble = _band_noise(rng, n, 300.0, min(1800.0, sr / 2 - 50), sr)
    babble *= 0.5 + 0.5 * np.abs(np.sin(2 * np.pi * rng.uniform(2, 5) * np.arange(n) / sr))
    rub = np.zeros(n)
    for _ in range(rng.poisson(3)):
        a = int(rng.integers(0, max(1, n - sr // 5)))
        rub[a:a + sr // 5] += rng.standard_normal(min(sr // 5, n - a)) * 3.0
    noise = babble + rub
    scale = math.sqrt(np.mean(x ** 2) / (np.mean(noise ** 2) + 1e-12) / 10 ** (snr_db / 10))
    return scale * noise


# --- reports -------------------------------------------------------------------------

_NORMAL_FINDINGS = [
    "Situs solitus with levocardia.",
    "The aortic arch is left sided.",
    "Ventricular systolic function is preserved.",
    "Normal pulmonary venous return.",
    "Coronary artery origins appear normal.",
    "No pericardial effusion.",
]


def _report(rid: str, labels: Sequence[int], catalog: AbnormalityCatalog, rng) -> EchoReportRaw:
    indices = (
        NumericIndex("LVEF", float(rng.integers(55, 75)), "%"),
        NumericIndex("LVEDD", float(rng.integers(25, 45)), "mm"),
        NumericIndex("HR", float(rng.integers(70, 130)), "bpm"),
    )
    numeric = f"LVEF {int(indices[0].value)}%. LVEDD {int(indices[1].value)} mm."
    positives = [e for e, v in zip(catalog.entities, labels) if v]
    negatives = [e for e, v in zip(catalog.entities, labels) if not v]
    normal = list(rng.choice(_NORMAL_FINDINGS, size=3, replace=False))
    if not positives:
        return EchoReportRaw(rid, indices, f"{numeric} " + " ".join(normal), "normal study")
    sentences = []
    for e in positives:
        surface = e.synonyms[int(rng.integers(0, len(e.synonyms)))] if e.synonyms else e.canonical_name
        hedge = str(rng.choice(["", "Mild ", "Moderate ", "Small "]))
        phrase = f"{hedge}{surface}" if hedge else surface
        sentences.append(f"{phrase[0].upper()}{phrase[1:]} is seen.")
    if negatives and rng.random() < 0.7:
        e = negatives[int(rng.integers(0, len(negatives)))]
        sentences.append(f"No {e.synonyms[0] if e.synonyms else e.canonical_name}.")
    description = f"{numeric} " + " ".join(normal[:2] + sentences)
    diagnosis = "; ".join(
        e.full_name or e.canonical_name for e in positives[: max(1, len(positives) // 2 + 1)]
    )
    return EchoReportRaw(rid, indices, description, diagnosis)


@dataclass
class SynthCorpus:
    spec: SynthSpec
    labels: np.ndarray
    reports: list[EchoReportRaw]
    catalog: AbnormalityCatalog

    @property
    def ids(self) -> list[str]:
        return [r.report_id for r in self.reports]

    def record(self, i: int) -> HeartSoundRecord:
        """Waveform for sample ``i``, regenerated on demand."""
        return gen_sample(self.labels[i], self.spec, sample_seed(self.spec.rng_seed, i), self.ids[i])

    @property
    def records(self) -> list[HeartSoundRecord]:
        return [self.record(i) for i in range(len(self.reports))]

    def __len__(self):
        return len(self.reports)


def gen_corpus(spec: SynthSpec, catalog: Optional[AbnormalityCatalog] = None) -> SynthCorpus:
    """Draw labels independently per class and write one report per sample.

    Waveforms are produced lazily through :meth:`SynthCorpus.record`, which
    keeps thousand-sample corpora within a few hundred MB.
    """
    if spec.n_samples < 10:
        raise ValueError("n_samples must be at least 10")
    catalog = catalog or default_catalog()
    if catalog.k != spec.k:
        raise ValueError("catalog and synth spec disagree on class count")
    rng = np.random.default_rng([spec.rng_seed, 1])
    labels = (rng.random((spec.n_samples, spec.k)) < np.asarray(spec.class_priors)).astype(np.int64)
    reports = []
    for i in range(spec.n_samples):
        rid = f"syn{spec.rng_seed}-{i:05d}"
        reports.append(_report(rid, labels[i], catalog, np.random.default_rng([spec.rng_seed, 2, i])))
    return SynthCorpus(spec, labels, reports, catalog)


# --- band-power oracle ----------------------------------------------------------------

def band_power(x: np.ndarray, sr: int, low: float, high: float) -> float:
    f, p = welch(np.asarray(x, dtype=np.float64), fs=sr, nperseg=1024)
    sel = (f >= low) & (f <= high)
    return float(trapezoid(p[sel], f[sel]))


def band_power_ratios(record: HeartSoundRecord, spec: SynthSpec) -> np.ndarray:
    """Per-class in-band power at the emphasized site over the expected noise-floor power."""
    out = np.empty(spec.k)
    for j, sig in enumerate(spec.signatures):
        seg = record.span(sig.site_emphasis)
        floor = (0.5 * spec.noise_floor) ** 2 * (sig.band_high_hz - sig.band_low_hz) / (spec.sample_rate_hz / 2)
        out[j] = band_power(seg, spec.sample_rate_hz, sig.band_low_hz, sig.band_high_hz) / floor
    return out


def oracle_detect(record: HeartSoundRecord, spec: SynthSpec, threshold: float = 4.0) -> np.ndarray:
    return (band_power_ratios(record, spec) >= threshold).astype(np.int64)


def write_corpus(out_dir, corpus: SynthCorpus) -> None:
    """WAV + sidecar per record, reports JSONL and the synth spec."""
    from hsdlab.audiofeat import write_wav
    from hsdlab.catalog import write_reports

    out = Path(out_dir)
    (out / "audio").mkdir(parents=True, exist_ok=True)
    for i in range(len(corpus)):
        write_wav(out / "audio" / f"{corpus.ids[i]}.wav", corpus.record(i))
    write_reports(out / "reports.jsonl", corpus.reports)
    (out / "synth_spec.json").write_text(json.dumps(corpus.spec.to_json(), indent=1) + "\n", encoding="utf-8")
