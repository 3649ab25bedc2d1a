import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from noisykws.data import (NOISE_TYPES, SEEN_TYPES, SNR_GRID, DataError, DatasetManifest, Entry, MixSpec,
                           NoiseClip, build_mtr_assignments, build_test_suites, ingest_speech_commands,
                           measured_snr, mean_power, mix_at_snr, noise_gain, split_pretrain_train,
                           synth_corpus, synth_noise)
from noisykws.dsp import MfccConfig, Waveform, compute_features, encode_wav


def make_pool(n, prefix="u"):
    return DatasetManifest([Entry(f"{prefix}{i:06d}", f"{prefix}{i}.wav", i % 35, "train") for i in range(n)],
                           [f"k{i}" for i in range(35)])


def noise_clip(kind="SSN", n=32000, seed=0):
    return NoiseClip(kind, Waveform(np.random.default_rng(seed).normal(scale=0.2, size=n)))


# ---------------------------------------------------------------- Speech Commands layout


@pytest.fixture
def sc_tree(tmp_path):
    words = ["yes", "no", "up", "down", "left"]
    for w in words:
        (tmp_path / w).mkdir()
        for i in range(6):
            (tmp_path / w / f"spk{i}_nohash_0.wav").write_bytes(encode_wav(Waveform(np.zeros(160))))
    (tmp_path / "_background_noise_").mkdir()
    (tmp_path / "validation_list.txt").write_text("\n".join(f"{w}/spk0_nohash_0.wav" for w in words) + "\n")
    (tmp_path / "testing_list.txt").write_text("\n".join(f"{w}/spk1_nohash_0.wav" for w in words) + "\n")
    return tmp_path


def test_ingest_subset(sc_tree):
    m = ingest_speech_commands(sc_tree)
    assert len(m.labels) == 5 and "_background_noise_" not in m.labels
    assert {e.id for e in m.split("validation")} == set((sc_tree / "validation_list.txt").read_text().split())
    assert {e.id for e in m.split("test")} == set((sc_tree / "testing_list.txt").read_text().split())
    assert m.counts()["train"] == 20


def test_ingest_rejects_double_listing(sc_tree):
    (sc_tree / "testing_list.txt").write_text("yes/spk0_nohash_0.wav\n")
    with pytest.raises(DataError):
        ingest_speech_commands(sc_tree)


def test_ingest_errors(sc_tree):
    (sc_tree / "empty").mkdir()
    with pytest.raises(DataError):
        ingest_speech_commands(sc_tree)
    (sc_tree / "empty").rmdir()
    (sc_tree / "testing_list.txt").unlink()
    with pytest.raises(DataError):
        ingest_speech_commands(sc_tree)


# ---------------------------------------------------------------- splits


def test_full_scale_split_counts():
    # 67,874 + 16,969 training-pool recordings; validation/test come from the list files
    m = split_pretrain_train(make_pool(67874 + 16969), 0.8, seed=0)
    c = m.counts()
    assert (c["pretrain"], c["train"]) == (67874, 16969)
    assert 67874 + 16969 + 9981 + 11005 == 105829


def test_small_split_stable():
    a = split_pretrain_train(make_pool(10), 0.8, seed=4)
    b = split_pretrain_train(make_pool(10), 0.8, seed=4)
    assert a.counts()["pretrain"] == 8 and a.counts()["train"] == 2
    assert a.entries == b.entries


@pytest.mark.parametrize("fraction", [0.0, 1.0, -0.5])
def test_split_rejects_degenerate_fraction(fraction):
    with pytest.raises(DataError):
        split_pretrain_train(make_pool(10), fraction)


def test_split_rejects_empty_pool():
    with pytest.raises(DataError):
        split_pretrain_train(DatasetManifest([Entry("a", "a", 0, "test")], ["x"]), 0.8)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_split_deterministic_and_disjoint(seed):
    a = split_pretrain_train(make_pool(57), 0.8, seed)
    b = split_pretrain_train(make_pool(57), 0.8, seed)
    assert a.entries == b.entries
    pre = {e.id for e in a.split("pretrain")}
    tr = {e.id for e in a.split("train")}
    assert not pre & tr and len(pre | tr) == 57 and len(pre) == round(0.8 * 57)


def test_manifest_jsonl_round_trip(tmp_path):
    m = make_pool(5).with_mix({"u000001": MixSpec("BUS", 5, 100, 42)})
    m.write_jsonl(tmp_path / "m.jsonl")
    back = DatasetManifest.read_jsonl(tmp_path / "m.jsonl")
    assert back.entries == m.entries and back.labels == m.labels
    first = json.loads((tmp_path / "m.jsonl").read_text().splitlines()[2])
    assert first["mix"]["noise_type"] == "BUS"


def test_manifest_rejects_duplicates():
    with pytest.raises(DataError):
        DatasetManifest([Entry("a", "a", 0, "train"), Entry("a", "b", 0, "test")], ["x"])


# ---------------------------------------------------------------- mixing


def test_gain_arithmetic():
    assert noise_gain(1.0, 1.0, 0) == 1.0
    assert noise_gain(1.0, 1.0, 20) == pytest.approx(0.1)
    assert noise_gain(4.0, 1.0, 0) == pytest.approx(2.0)


def test_mix_equal_power_zero_db():
    clean = Waveform(np.ones(100))
    noise = NoiseClip("BUS", Waveform(np.concatenate([-np.ones(50), np.ones(150)])))
    out = mix_at_snr(clean, noise, MixSpec("BUS", 0, 50, 0))
    np.testing.assert_allclose(out.samples, 2.0)


@pytest.mark.parametrize("snr", SNR_GRID)
def test_mix_snr_remeasured(snr):
    rng = np.random.default_rng(snr + 100 + 0)
    clean = Waveform(rng.normal(scale=0.3, size=16000))
    noise = noise_clip("STR", seed=snr + 17)
    spec = MixSpec("STR", snr, 1234, 0)
    out = mix_at_snr(clean, noise, spec)
    assert measured_snr(clean.samples, out.samples - clean.samples) == pytest.approx(snr, abs=1e-3)


def test_mix_errors():
    clean = Waveform(np.ones(100))
    with pytest.raises(DataError):
        mix_at_snr(Waveform(np.zeros(100)), noise_clip(), MixSpec("SSN", 0, 0, 0))
    with pytest.raises(DataError):
        mix_at_snr(clean, NoiseClip("SSN", Waveform(np.zeros(200))), MixSpec("SSN", 0, 0, 0))
    with pytest.raises(DataError):
        mix_at_snr(clean, noise_clip(n=150), MixSpec("SSN", 0, 60, 0))
    with pytest.raises(DataError):
        MixSpec("SSN", float("inf"), 0, 0)


def test_mix_peak_normalization():
    clean = Waveform(np.full(100, 0.9))
    out = mix_at_snr(clean, NoiseClip("SSN", Waveform(np.ones(100))), MixSpec("SSN", 0, 0, 0), peak_normalize=True)
    assert np.abs(out.samples).max() == pytest.approx(1.0)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10**6), scale=st.floats(1e-3, 1e3), snr=st.sampled_from(SNR_GRID))
def test_snr_scale_invariance(seed, scale, snr):
    rng = np.random.default_rng(seed)
    c, n = rng.normal(size=16000), rng.normal(size=20000)
    spec = MixSpec("SSN", snr, 100, 0)
    a = mix_at_snr(Waveform(c), NoiseClip("SSN", Waveform(n)), spec)
    b = mix_at_snr(Waveform(scale * c), NoiseClip("SSN", Waveform(scale * n)), spec)
    np.testing.assert_allclose(b.samples, scale * a.samples, rtol=1e-9, atol=1e-12 * scale)
    assert measured_snr(scale * c, b.samples - scale * c) == pytest.approx(snr, abs=1e-3)


# ---------------------------------------------------------------- synthetic noise


@pytest.mark.parametrize("kind", NOISE_TYPES)
def test_synth_noise_deterministic(kind):
    a, b = synth_noise(kind, 1.0, seed=3), synth_noise(kind, 1.0, seed=3)
    assert len(a.waveform) == 16000
    assert a.waveform.samples.tobytes() == b.waveform.samples.tobytes()
    assert a.role == ("seen" if kind in SEEN_TYPES else "unseen")
    assert np.abs(a.waveform.samples).max() < 1


def band_energies(x):
    spec = np.abs(np.fft.rfft(x)) ** 2
    f = np.fft.rfftfreq(x.size, 1 / 16000)
    edges = [0, 250, 1000, 4000, 8001]
    e = np.array([spec[(f >= lo) & (f < hi)].sum() for lo, hi in zip(edges[:-1], edges[1:])])
    return e / e.sum()


def test_ssn_is_low_frequency_weighted():
    x = synth_noise("SSN", 2.0, seed=0).waveform.samples
    spec = np.abs(np.fft.rfft(x)) ** 2
    f = np.fft.rfftfreq(x.size, 1 / 16000)
    assert spec[f < 1000].sum() > spec[(f >= 4000) & (f <= 8000)].sum()


def test_noise_types_have_distinct_band_signatures():
    sig = {k: band_energies(synth_noise(k, 4.0, seed=1).waveform.samples) for k in NOISE_TYPES}
    for i, a in enumerate(NOISE_TYPES):
        for b in NOISE_TYPES[i + 1:]:
            assert np.abs(sig[a] - sig[b]).sum() > 0.05, (a, b, sig[a], sig[b])


def test_unknown_noise_type():
    with pytest.raises(DataError):
        synth_noise("RAIN")


# ---------------------------------------------------------------- multistyle assignments


def test_mtr_marginals():
    entries = make_pool(1000).entries
    specs = build_mtr_assignments(entries, 0.5, SEEN_TYPES, SNR_GRID, seed=11)
    noisy = [s for s in specs.values() if s is not None]
    assert len(noisy) == 500
    types = Counter(s.noise_type for s in noisy)
    snrs = Counter(s.snr_db for s in noisy)
    assert set(types) == set(SEEN_TYPES) and all(95 <= v <= 155 for v in types.values())
    assert set(snrs) == set(SNR_GRID) and all(40 <= v <= 105 for v in snrs.values())
    assert all(s.on_grid() for s in noisy)


def test_mtr_zero_fraction_and_errors():
    entries = make_pool(20).entries
    assert all(v is None for v in build_mtr_assignments(entries, 0.0, seed=1).values())
    with pytest.raises(DataError):
        build_mtr_assignments(entries, 0.5, seen_types=[])
    with pytest.raises(DataError):
        build_mtr_assignments(entries, 1.5)


def test_mtr_order_independent():
    entries = make_pool(200).entries
    shuffled = [entries[i] for i in np.random.default_rng(0).permutation(len(entries))]
    assert build_mtr_assignments(entries, 0.5, seed=5) == build_mtr_assignments(shuffled, 0.5, seed=5)


# ---------------------------------------------------------------- test suites


def test_suite_matrix():
    test = make_pool(12, "t").entries
    suites = build_test_suites(test, NOISE_TYPES, SNR_GRID, seed=2, noise_length=32000)
    assert len(suites) == 43
    assert sum(s.noise_type is not None for s in suites) == 42
    assert all(len(s) == 12 for s in suites)
    again = build_test_suites(test, NOISE_TYPES, SNR_GRID, seed=2, noise_length=32000)
    assert [s.items for s in suites] == [s.items for s in again]


def test_suite_ssn_zero_db_remeasures():
    test = make_pool(10, "t").entries
    suite = next(s for s in build_test_suites(test, seed=3) if s.noise_type == "SSN" and s.snr_db == 0)
    noise = synth_noise("SSN", 10.0, seed=0)
    rng = np.random.default_rng(0)
    for e, spec in suite.items:
        clean = Waveform(rng.normal(scale=0.2, size=16000))
        out = mix_at_snr(clean, noise, spec)
        assert measured_snr(clean.samples, out.samples - clean.samples) == pytest.approx(0.0, abs=1e-3)


# ---------------------------------------------------------------- synthetic corpus


def test_synth_corpus_shape():
    m, audio = synth_corpus(10, 100, seed=7)
    assert len(m.entries) == 1000 and len(audio) == 1000
    assert Counter(e.label for e in m.entries) == {k: 100 for k in range(10)}
    assert all(len(w) == 16000 for w in audio.values())
    c = m.counts()
    assert c["test"] == 100 and c["validation"] == 100 and c["pretrain"] == round(0.8 * 800)


def test_synth_items_differ_across_seeds():
    _, a = synth_corpus(2, 10, seed=1)
    _, b = synth_corpus(2, 10, seed=2)
    assert not np.array_equal(a["c00_0005"].samples, b["c00_0005"].samples)


def test_synth_corpus_nearest_centroid_separable():
    m, audio = synth_corpus(10, 60, seed=7)
    cfg = MfccConfig()

    def mean_mfcc(entries):
        return np.stack([compute_features(audio[e.id], cfg).mean(axis=0) for e in entries])

    train = m.split("train") + m.split("pretrain")
    test = m.split("test")
    xtr, ytr = mean_mfcc(train), np.array([e.label for e in train])
    xte, yte = mean_mfcc(test), np.array([e.label for e in test])
    centroids = np.stack([xtr[ytr == k].mean(axis=0) for k in range(10)])
    pred = np.argmin(((xte[:, None] - centroids[None]) ** 2).sum(-1), axis=1)
    assert (pred == yte).mean() > 0.9


def test_synth_corpus_rejects_single_class():
    with pytest.raises(DataError):
        synth_corpus(1, 10)
