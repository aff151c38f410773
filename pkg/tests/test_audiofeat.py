import math

import numpy as np
import pytest

from hsdlab.audiofeat import (
    ALL_OPS,
    SITES,
    AugmentPolicy,
    FeatureError,
    FilterBankFeatures,
    HeartSoundRecord,
    SiteSpan,
    amplify,
    augment,
    augment_spec,
    compute_filterbanks,
    expected_num_frames,
    featurize,
    load_feature_cache,
    mel_filterbank,
    read_wav,
    save_feature_cache,
    stack_frames,
    write_wav,
)

SR = 4000


def noise_record(seconds, seed=0, sr=SR):
    rng = np.random.default_rng(seed)
    return HeartSoundRecord("r", rng.standard_normal(int(round(seconds * sr))) * 0.1, sr)


def five_site_record(seconds_per_site=15.0, seed=0):
    n = int(seconds_per_site * SR)
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(5 * n) * 0.1
    spans = tuple(SiteSpan(s, i * n, (i + 1) * n) for i, s in enumerate(SITES))
    return HeartSoundRecord("five", x, SR, spans)


def count_frames_by_sliding(n_samples, frame_len, hop):
    count, start = 0, 0
    while start + frame_len <= n_samples:
        count += 1
        start += hop
    return count


# --- framing -------------------------------------------------------------------------------

def test_num_frames_75s():
    assert expected_num_frames(75_000) == 1873
    assert compute_filterbanks(noise_record(75.0)).num_frames == 1873


def test_single_frame_boundary():
    feats = compute_filterbanks(noise_record(0.1))
    assert feats.num_frames == 1
    assert feats.frames.shape == (1, 64)


def test_too_short():
    with pytest.raises(FeatureError, match="input shorter than one frame"):
        compute_filterbanks(noise_record(0.099))


def test_low_sample_rate_rejected():
    with pytest.raises(FeatureError):
        compute_filterbanks(noise_record(1.0, sr=1000))


def test_framing_formula_random_durations():
    rng = np.random.default_rng(1)
    for n in rng.integers(int(0.1 * SR), int(120 * SR), size=500):
        n = int(n)
        oracle = count_frames_by_sliding(n, 400, 160)
        assert expected_num_frames(n * 1000 / SR) == oracle


def test_framing_formula_matches_features():
    rng = np.random.default_rng(2)
    for n in rng.integers(400, 40_000, size=25):
        rec = HeartSoundRecord("r", np.zeros(int(n)), SR)
        assert compute_filterbanks(rec).num_frames == count_frames_by_sliding(int(n), 400, 160)


def test_silence_is_finite_and_constant():
    feats = compute_filterbanks(HeartSoundRecord("z", np.zeros(SR * 2), SR))
    assert np.all(np.isfinite(feats.frames))
    assert np.all(feats.frames == feats.frames[0])
    assert np.allclose(feats.frames, math.log(1e-10))


def test_deterministic():
    rec = noise_record(3.0)
    assert np.array_equal(compute_filterbanks(rec).frames, compute_filterbanks(rec).frames)


@pytest.mark.parametrize("g", [0.37, 2.0, 3.0])
def test_scale_covariance(g):
    rec = noise_record(5.0, seed=4)
    a = compute_filterbanks(rec).frames
    b = compute_filterbanks(amplify(rec, g)).frames
    shift = b - a
    assert np.allclose(shift, 2 * math.log(g), rtol=1e-6, atol=1e-6 * abs(2 * math.log(g)))


def test_mel_filterbank_shape_and_peaks():
    fb = mel_filterbank(64, 512, SR)
    assert fb.shape == (64, 257)
    assert np.all(fb >= 0) and np.all(fb.max(axis=1) <= 1.0)
    assert np.all(np.diff(fb.argmax(axis=1)) >= 0)


def test_tone_lands_in_matching_bin():
    t = np.arange(SR * 2) / SR
    rec = HeartSoundRecord("tone", np.sin(2 * np.pi * 500 * t), SR)
    feats = compute_filterbanks(rec)
    fb = mel_filterbank(64, 512, SR)
    expected = int(np.argmax(fb[:, round(500 / (SR / 2) * 256)]))
    assert abs(int(np.argmax(feats.frames.mean(0))) - expected) <= 1


# --- augmentation ----------------------------------------------------------------------------

def test_augment_identity_when_disabled():
    rec = five_site_record()
    out = augment(rec, AugmentPolicy.none())
    assert out is rec or np.array_equal(out.samples, rec.samples)


def test_amplify_only_doubles():
    rec = noise_record(1.0)
    pol = AugmentPolicy(enabled={"amplify"}, amplify_gain=(2.0, 2.0))
    out = augment(rec, pol)
    assert np.array_equal(out.samples, rec.samples.astype(np.float32) * np.float32(2.0))


def test_augment_deterministic_random_policies():
    rec = five_site_record(seconds_per_site=3.0)
    rng = np.random.default_rng(9)
    for i in range(20):
        ops = [op for op in ALL_OPS if rng.random() < 0.6]
        pol = AugmentPolicy(enabled=frozenset(ops), rng_seed=int(rng.integers(1 << 30)))
        a, b = featurize(rec, pol), featurize(rec, pol)
        assert np.array_equal(a.frames, b.frames)


def test_augment_duration_bounds():
    rec = five_site_record(seconds_per_site=3.0)
    for seed in range(30):
        pol = AugmentPolicy(enabled={"speed_perturb", "chunk_drop"}, rng_seed=seed)
        out = augment(rec, pol)
        n = len(rec.samples)
        assert n * 0.9 / 1.05 - 2 <= len(out.samples) <= n / 0.95 + 2
        assert out.site_spans[-1].end == len(out.samples)
        assert [s.site for s in out.site_spans] == list(SITES)


def test_chunk_drop_removes_at_most_ten_percent():
    rec = noise_record(10.0)
    for seed in range(20):
        out = augment(rec, AugmentPolicy(enabled={"chunk_drop"}, rng_seed=seed))
        assert len(rec.samples) - len(out.samples) <= 0.1 * len(rec.samples)


def test_clip_at_ninety_percent_of_peak():
    rec = noise_record(1.0)
    out = augment(rec, AugmentPolicy(enabled={"clip"}))
    peak = np.abs(rec.samples).max()
    assert np.isclose(np.abs(out.samples).max(), 0.9 * peak, rtol=1e-6)


def test_noise_snr_range():
    rec = noise_record(5.0)
    x = rec.samples.astype(np.float32)
    for seed in range(10):
        out = augment(rec, AugmentPolicy(enabled={"noise"}, rng_seed=seed))
        resid = out.samples - x
        snr = 10 * np.log10(np.mean(x ** 2) / np.mean(resid ** 2))
        assert 14.8 <= snr <= 30.2


def test_policy_bounds_validated():
    with pytest.raises(FeatureError):
        AugmentPolicy(chunk_drop_max_frac=0.2)
    with pytest.raises(FeatureError):
        AugmentPolicy(enabled={"reverb"})
    with pytest.raises(FeatureError):
        AugmentPolicy(amplify_gain=(0.0, 2.0))


def test_policy_json_roundtrip():
    pol = AugmentPolicy.default(seed=5)
    assert AugmentPolicy.from_json(pol.to_json()) == pol


def test_reseeded_distinct_and_stable():
    pol = AugmentPolicy.default(seed=1)
    assert pol.reseeded(0, 3) == pol.reseeded(0, 3)
    assert pol.reseeded(0, 3).rng_seed != pol.reseeded(1, 3).rng_seed


def _feats(n_t=200, n_f=64, seed=0):
    return FilterBankFeatures(np.random.default_rng(seed).standard_normal((n_t, n_f)), SR)


def test_spec_augment_zero_masks_identity():
    f = _feats()
    pol = AugmentPolicy(enabled={"spec_augment"}, time_masks=0, freq_masks=0)
    assert np.array_equal(augment_spec(f, pol).frames, f.frames)


def test_spec_augment_single_freq_mask_width():
    f = _feats()
    for seed in range(20):
        pol = AugmentPolicy(enabled={"spec_augment"}, time_masks=0, freq_masks=1, freq_mask_max=8, rng_seed=seed)
        out = augment_spec(f, pol).frames
        masked = np.flatnonzero(np.all(out == f.frames.mean(), axis=0))
        rng = np.random.default_rng([seed, 0x5A])
        width = int(rng.integers(0, 9))
        assert len(masked) == width
        if width:
            assert np.all(np.diff(masked) == 1)


def test_spec_augment_bounds_fuzz():
    rng = np.random.default_rng(5)
    for i in range(100):
        n_t, n_f = int(rng.integers(1, 120)), int(rng.integers(1, 80))
        pol = AugmentPolicy(enabled={"spec_augment"}, time_masks=int(rng.integers(0, 4)),
                            time_mask_max=int(rng.integers(0, 200)), freq_masks=int(rng.integers(0, 4)),
                            freq_mask_max=int(rng.integers(0, 100)), rng_seed=i)
        f = _feats(n_t, n_f, seed=i)
        out = augment_spec(f, pol)
        assert out.frames.shape == (n_t, n_f)
        assert np.all(np.isfinite(out.frames))


def test_train_path_equals_eval_path_when_disabled():
    rec = five_site_record(seconds_per_site=2.0)
    assert np.array_equal(featurize(rec, AugmentPolicy.none()).frames, featurize(rec).frames)


# --- records and files -------------------------------------------------------------------------

def test_record_validation():
    five_site_record().validate()
    rec = five_site_record(seconds_per_site=2.0)
    with pytest.raises(FeatureError, match="shorter"):
        rec.validate()
    bad = HeartSoundRecord("b", np.zeros(100), SR, (SiteSpan("aortic", 0, 50),))
    with pytest.raises(FeatureError, match="cover"):
        bad.validate(min_site_s=0)


def test_wav_roundtrip(tmp_path):
    rec = five_site_record(seconds_per_site=1.0)
    write_wav(tmp_path / "a.wav", rec)
    back = read_wav(tmp_path / "a.wav")
    assert back.record_id == "five" and back.site_spans == rec.site_spans
    assert np.max(np.abs(back.samples - rec.samples)) <= 1 / 32767


def test_feature_cache_roundtrip(tmp_path):
    f = FilterBankFeatures(np.arange(12, dtype=np.float32).reshape(3, 4), SR)
    save_feature_cache(tmp_path / "f.bin", f)
    raw = (tmp_path / "f.bin").read_bytes()
    assert raw[:8] == (3).to_bytes(4, "little") + (4).to_bytes(4, "little")
    assert np.array_equal(load_feature_cache(tmp_path / "f.bin", SR).frames, f.frames)
    (tmp_path / "g.bin").write_bytes(raw[:-4])
    with pytest.raises(FeatureError, match="truncated"):
        load_feature_cache(tmp_path / "g.bin", SR)


def test_stack_frames_pads_with_last_row():
    a = FilterBankFeatures(np.ones((3, 2)), SR)
    b = FilterBankFeatures(np.arange(10).reshape(5, 2).astype(float), SR)
    out = stack_frames([a, b])
    assert out.shape == (2, 5, 2)
    assert np.array_equal(out[0, 3:], np.ones((2, 2)))
