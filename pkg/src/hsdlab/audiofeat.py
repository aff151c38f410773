"""Filter-bank features and training-time augmentation for heart-sound records."""

from __future__ import annotations

import json
import math
import struct
import wave
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import scipy.fft

SITES = ("aortic", "pulmonic", "erb", "tricuspid", "mitral")
FRAME_LEN_MS = 100
FRAME_SHIFT_MS = 40
LOG_FLOOR = 1e-10


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class SiteSpan:
    site: str
    start: int
    end: int


@dataclass
class HeartSoundRecord:
    record_id: str
    samples: np.ndarray
    sample_rate_hz: int
    site_spans: tuple[SiteSpan, ...] = ()

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        if self.samples.dtype not in (np.float32, np.float64):
            self.samples = self.samples.astype(np.float32)
        if self.sample_rate_hz <= 0:
            raise FeatureError("sample_rate_hz must be positive")
        if not self.site_spans:
            self.site_spans = (SiteSpan(SITES[0], 0, len(self.samples)),)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.sample_rate_hz

    def span(self, site: str) -> np.ndarray:
        for s in self.site_spans:
            if s.site == site:
                return self.samples[s.start:s.end]
        raise KeyError(site)

    def validate(self, min_site_s: float = 15.0) -> None:
        pos = 0
        for s in self.site_spans:
            if s.site not in SITES:
                raise FeatureError(f"unknown site {s.site!r}")
            if s.start != pos or s.end <= s.start:
                raise FeatureError("site spans must be ordered, contiguous and non-empty")
            if (s.end - s.start) / self.sample_rate_hz < min_site_s:
                raise FeatureError(f"site {s.site} shorter than {min_site_s} s")
            pos = s.end
        if pos != len(self.samples):
            raise FeatureError("site spans do not cover the recording")

    def sidecar(self) -> dict:
        return {
            "record_id": self.record_id,
            "sample_rate_hz": self.sample_rate_hz,
            "site_spans": [{"site": s.site, "start": s.start, "end": s.end} for s in self.site_spans],
        }


@dataclass
class FilterBankFeatures:
    frames: np.ndarray
    sample_rate_hz: int
    frame_len_ms: int = FRAME_LEN_MS
    frame_shift_ms: int = FRAME_SHIFT_MS

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def num_mel_bins(self) -> int:
        return self.frames.shape[1]


def expected_num_frames(duration_ms: float, frame_len_ms: float = FRAME_LEN_MS,
                        frame_shift_ms: float = FRAME_SHIFT_MS) -> int:
    if duration_ms < frame_len_ms:
        return 0
    return 1 + int((duration_ms - frame_len_ms) // frame_shift_ms)


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m) / 2595.0) - 1.0)


@lru_cache(maxsize=16)
def mel_filterbank(num_bins: int, n_fft: int, sample_rate: int,
                   f_min: float = 20.0, f_max: Optional[float] = None) -> np.ndarray:
    """Triangular mel filters, shape (num_bins, n_fft // 2 + 1)."""
    f_max = sample_rate / 2 if f_max is None else f_max
    edges = _mel_to_hz(np.linspace(_hz_to_mel(f_min), _hz_to_mel(f_max), num_bins + 2))
    freqs = np.linspace(0, sample_rate / 2, n_fft // 2 + 1)
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    fb.setflags(write=False)
    return fb


def compute_filterbanks(record: HeartSoundRecord, num_mel_bins: int = 64,
                        log_floor: float = LOG_FLOOR) -> FilterBankFeatures:
    """Log mel filter-bank energies over 100 ms Hann frames with a 40 ms hop."""
    sr = record.sample_rate_hz
    if sr < 2000:
        raise FeatureError(f"sample rate {sr} Hz below 2 kHz")
    # integer sample counts; exact for rates that are multiples of 25 Hz
    frame_len = int(round(sr * FRAME_LEN_MS / 1000))
    hop = int(round(sr * FRAME_SHIFT_MS / 1000))
    x = np.asarray(record.samples, dtype=np.float64)
    if len(x) < frame_len:
        raise FeatureError("input shorter than one frame")
    n_frames = 1 + (len(x) - frame_len) // hop
    frames = np.lib.stride_tricks.sliding_window_view(x, frame_len)[::hop][:n_frames]
    n_fft = 1 << (frame_len - 1).bit_length()
    spec = scipy.fft.rfft(frames * _hann(frame_len), n=n_fft)
    power = spec.real ** 2 + spec.imag ** 2
    energies = power @ mel_filterbank(num_mel_bins, n_fft, sr).T
    return FilterBankFeatures(np.log(np.maximum(energies, log_floor)), sr)


@lru_cache(maxsize=8)
def _hann(n: int) -> np.ndarray:
    return np.hanning(n)


# --- augmentation ----------------------------------------------------------------

WAVE_OPS = ("chunk_drop", "speed_perturb", "clip", "noise", "amplify")
ALL_OPS = WAVE_OPS + ("spec_augment",)


@dataclass(frozen=True)
class AugmentPolicy:
    """Which augmentations run and their parameter ranges."""

    enabled: frozenset = frozenset()
    chunk_drop_max_frac: float = 0.10
    chunk_drop_count: int = 2
    speed_factors: tuple[float, ...] = (0.95, 1.0, 1.05)
    clip_frac: float = 0.9
    noise_snr_db: tuple[float, float] = (15.0, 30.0)
    amplify_gain: tuple[float, float] = (0.5, 2.0)
    time_masks: int = 2
    time_mask_max: int = 40
    freq_masks: int = 2
    freq_mask_max: int = 8
    rng_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "enabled", frozenset(self.enabled))
        bad = set(self.enabled) - set(ALL_OPS)
        if bad:
            raise FeatureError(f"unknown augmentation(s): {sorted(bad)}")
        if not 0 <= self.chunk_drop_max_frac <= 0.10:
            raise FeatureError("chunk_drop_max_frac must be within [0, 0.1]")
        if any(not 0.9 <= f <= 1.1 for f in self.speed_factors):
            raise FeatureError("speed factors must be within [0.9, 1.1]")
        if not 0 < self.clip_frac <= 1:
            raise FeatureError("clip_frac must be in (0, 1]")
        lo, hi = self.amplify_gain
        if not 0 < lo <= hi:
            raise FeatureError("amplify_gain must be a positive range")
        if self.noise_snr_db[0] > self.noise_snr_db[1]:
            raise FeatureError("noise_snr_db range reversed")

    @classmethod
    def default(cls, seed: int = 0) -> "AugmentPolicy":
        return cls(enabled=frozenset(ALL_OPS), rng_seed=seed)

    @classmethod
    def none(cls) -> "AugmentPolicy":
        return cls()

    def reseeded(self, *keys: int) -> "AugmentPolicy":
        seq = np.random.SeedSequence([self.rng_seed, *keys])
        return replace(self, rng_seed=int(seq.generate_state(1)[0]))

    def to_json(self) -> dict:
        return {
            "enabled": sorted(self.enabled),
            "chunk_drop_max_frac": self.chunk_drop_max_frac,
            "chunk_drop_count": self.chunk_drop_count,
            "speed_factors": list(self.speed_factors),
            "clip_frac": self.clip_frac,
            "noise_snr_db": list(self.noise_snr_db),
            "amplify_gain": list(self.amplify_gain),
            "time_masks": self.time_masks,
            "time_mask_max": self.time_mask_max,
            "freq_masks": self.freq_masks,
            "freq_mask_max": self.freq_mask_max,
            "rng_seed": self.rng_seed,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "AugmentPolicy":
        doc = dict(doc)
        for key in ("speed_factors", "noise_snr_db", "amplify_gain"):
            if key in doc:
                doc[key] = tuple(doc[key])
        doc["enabled"] = frozenset(doc.get("enabled", ()))
        return cls(**doc)


def augment(record: HeartSoundRecord, policy: AugmentPolicy) -> HeartSoundRecord:
    """Waveform-domain augmentation; ops run in a fixed order from one seeded stream."""
    ops = policy.enabled & set(WAVE_OPS)
    if not ops:
        return record
    rng = np.random.default_rng(policy.rng_seed)
    x = np.asarray(record.samples, dtype=np.float32)
    spans = [(s.site, s.start, s.end) for s in record.site_spans]

    if "chunk_drop" in ops and len(x) > 0:
        per_chunk = int(policy.chunk_drop_max_frac * len(x)) // max(policy.chunk_drop_count, 1)
        cuts = []
        for _ in range(policy.chunk_drop_count):
            width = int(rng.integers(0, per_chunk + 1)) if per_chunk > 0 else 0
            start = int(rng.integers(0, max(len(x) - width, 1)))
            cuts.append((start, start + width))
        # merge overlapping cuts, then remove them back to front
        merged = []
        for a, b in sorted(c for c in cuts if c[1] > c[0]):
            if merged and a <= merged[-1][1]:
                merged[-1] = (merged[-1][0], max(b, merged[-1][1]))
            else:
                merged.append((a, b))

        def shift(pos):
            return pos - sum(min(max(pos - a, 0), b - a) for a, b in merged)

        spans = [(site, shift(a), shift(b)) for site, a, b in spans]
        if merged:
            x = np.concatenate([x[a:b] for a, b in _complement(merged, len(x))])

    if "speed_perturb" in ops:
        factor = float(rng.choice(policy.speed_factors))
        if factor != 1.0 and len(x) > 1:
            # playing faster by `factor` shortens the signal by the same factor
            n_out = max(1, int(round(len(x) / factor)))
            pos = np.arange(n_out, dtype=np.float64) * factor
            i0 = np.minimum(pos.astype(np.int64), len(x) - 2)
            frac = (pos - i0).astype(np.float32)
            x = x[i0] * (1 - frac) + x[i0 + 1] * frac
            spans = [(site, min(n_out, int(round(a / factor))), min(n_out, int(round(b / factor))))
                     for site, a, b in spans]
            spans[-1] = (spans[-1][0], spans[-1][1], n_out)

    if "clip" in ops:
        peak = float(np.max(np.abs(x))) if len(x) else 0.0
        if peak > 0:
            lim = policy.clip_frac * peak
            x = np.clip(x, -lim, lim)

    if "noise" in ops:
        snr = rng.uniform(*policy.noise_snr_db)
        power = float(np.dot(x, x)) / len(x) if len(x) else 0.0
        if power > 0:
            noise = rng.standard_normal(len(x), dtype=np.float32)
            noise *= math.sqrt(power / 10 ** (snr / 10))
            x = x + noise

    if "amplify" in ops:
        x = x * np.float32(rng.uniform(*policy.amplify_gain))

    return HeartSoundRecord(record.record_id, x, record.sample_rate_hz,
                            tuple(SiteSpan(*s) for s in spans))


def _complement(cuts, n):
    pos = 0
    for a, b in cuts:
        if a > pos:
            yield pos, a
        pos = b
    if pos < n:
        yield pos, n


def amplify(record: HeartSoundRecord, gain: float) -> HeartSoundRecord:
    return replace(record, samples=np.asarray(record.samples, np.float64) * gain)


def augment_spec(features: FilterBankFeatures, policy: AugmentPolicy) -> FilterBankFeatures:
    """SpecAugment-style masking; masked stripes take the matrix mean."""
    if "spec_augment" not in policy.enabled:
        return features
    m = np.array(features.frames, copy=True)
    n_t, n_f = m.shape
    fill = m.mean()
    rng = np.random.default_rng([policy.rng_seed, 0x5A])
    for _ in range(policy.freq_masks):
        width = int(rng.integers(0, min(policy.freq_mask_max, n_f) + 1))
        start = int(rng.integers(0, n_f - width + 1))
        m[:, start:start + width] = fill
    for _ in range(policy.time_masks):
        width = int(rng.integers(0, min(policy.time_mask_max, n_t) + 1))
        start = int(rng.integers(0, n_t - width + 1))
        m[start:start + width, :] = fill
    return replace(features, frames=m)


def featurize(record: HeartSoundRecord, policy: Optional[AugmentPolicy] = None,
              num_mel_bins: int = 64) -> FilterBankFeatures:
    """Waveform augmentation, filter banks, then spectrogram masking."""
    if policy is None:
        return compute_filterbanks(record, num_mel_bins)
    return augment_spec(compute_filterbanks(augment(record, policy), num_mel_bins), policy)


# --- file formats -----------------------------------------------------------------

def write_wav(path, record: HeartSoundRecord, full_scale: float = 1.0) -> None:
    """PCM16 mono WAV plus ``<stem>.json`` sidecar."""
    path = Path(path)
    pcm = np.clip(np.round(record.samples / full_scale * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(record.sample_rate_hz)
        w.writeframes(pcm.tobytes())
    path.with_suffix(".json").write_text(json.dumps(record.sidecar()) + "\n", encoding="utf-8")


def read_wav(path, full_scale: float = 1.0) -> HeartSoundRecord:
    path = Path(path)
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise FeatureError(f"{path}: expected PCM16 mono")
        sr = w.getframerate()
        pcm = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
    samples = pcm.astype(np.float32) / 32767.0 * full_scale
    side_path = path.with_suffix(".json")
    if side_path.exists():
        side = json.loads(side_path.read_text(encoding="utf-8"))
        if int(side["sample_rate_hz"]) != sr:
            raise FeatureError(f"{side_path}: sample rate disagrees with WAV header")
        spans = tuple(SiteSpan(s["site"], int(s["start"]), int(s["end"])) for s in side["site_spans"])
        rid = side["record_id"]
    else:
        spans, rid = (), path.stem
    return HeartSoundRecord(rid, samples, sr, spans)


_CACHE_HEADER = struct.Struct("<II")


def save_feature_cache(path, features: FilterBankFeatures) -> None:
    """Header of two little-endian uint32 (num_frames, num_bins), then float32 rows."""
    m = np.ascontiguousarray(features.frames, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_CACHE_HEADER.pack(*m.shape))
        fh.write(m.tobytes())


def load_feature_cache(path, sample_rate_hz: int) -> FilterBankFeatures:
    raw = Path(path).read_bytes()
    n_frames, n_bins = _CACHE_HEADER.unpack_from(raw)
    body = raw[_CACHE_HEADER.size:]
    if len(body) != 4 * n_frames * n_bins:
        raise FeatureError(f"{path}: truncated feature cache")
    frames = np.frombuffer(body, dtype="<f4").reshape(n_frames, n_bins).astype(np.float32)
    return FilterBankFeatures(frames, sample_rate_hz)


def stack_frames(feats: Sequence[FilterBankFeatures]) -> np.ndarray:
    """Right-pad with each matrix's last row to a common frame count."""
    n = max(f.num_frames for f in feats)
    out = np.empty((len(feats), n, feats[0].num_mel_bins), dtype=np.float32)
    for i, f in enumerate(feats):
        out[i, :f.num_frames] = f.frames
        out[i, f.num_frames:] = f.frames[-1]
    return out
