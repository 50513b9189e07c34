import itertools
import math
from dataclasses import replace

import numpy as np
import oracles
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mrclip.report_model import ORIENTATIONS, Finding
from mrclip.synth import (
    EmptyInput,
    ImageCode,
    SynthConfig,
    generate_corpus,
    ground_truth_image,
    iter_pairs,
    load_corpus,
    preprocess_intensities,
    sample_subject,
    save_corpus,
    split_dataset,
)

SMALL = SynthConfig(n_subjects=300, seed=4)


class TestCorpus:
    def test_pairing_rule(self):
        for r in generate_corpus(SMALL):
            if r.is_normal:
                assert len(r.pairs) == 5
                assert all(p.description.is_normal for p in r.pairs)
            else:
                mods = {f.modality for f in r.findings}
                assert len(r.pairs) == len(mods)
                for p in r.pairs:
                    assert p.description.findings == [f for f in r.findings if f.modality == p.modality]

    def test_deterministic(self):
        a = generate_corpus(SMALL)
        b = generate_corpus(SMALL)
        assert [r.to_json() for r in a] == [r.to_json() for r in b]

    def test_seed_changes_corpus(self):
        a = generate_corpus(SMALL)
        b = generate_corpus(replace(SMALL, seed=5))
        assert [r.to_json() for r in a] != [r.to_json() for r in b]

    def test_findings_within_limits(self):
        cfg = SMALL
        for r in generate_corpus(cfg):
            assert len(r.findings) <= cfg.max_findings
            assert len(set(r.findings)) == len(r.findings)
            vocab = cfg.vocabulary
            for f in r.findings:
                assert f.anatomic_site in vocab.finding_sites and f.appearance in vocab.finding_appearances

    def test_normal_rate(self):
        cfg = replace(SMALL, n_subjects=2000, normal_rate=0.25)
        frac = np.mean([r.is_normal for r in generate_corpus(cfg)])
        assert abs(frac - 0.25) < 3 * math.sqrt(0.25 * 0.75 / 2000)

    def test_near_duplicates_share_most_fields(self):
        cfg = replace(SMALL, near_duplicate_rate=1.0, normal_rate=0.0)
        rng = np.random.default_rng(0)
        history = [Finding("T1WI", "left", "pons", "high signal")]
        rec = sample_subject(cfg, rng, 0, history, ImageCode(cfg))
        seed_f = history[0]
        first = rec.findings[0]
        diff = sum(getattr(first, k) != getattr(seed_f, k) for k in ("modality", "orientation", "anatomic_site", "appearance"))
        assert diff == 1

    def test_jsonl_round_trip(self, tmp_path):
        recs = generate_corpus(replace(SMALL, n_subjects=20))
        path = tmp_path / "c.jsonl"
        save_corpus(recs, path, SMALL)
        back = load_corpus(path)
        assert [r.to_json() for r in back] == [r.to_json() for r in recs]
        assert (tmp_path / "c.jsonl.config.json").exists()
        for p, q in zip(iter_pairs(recs), iter_pairs(back)):
            assert np.array_equal(p.image, q.image)

    @pytest.mark.parametrize("kw", [dict(n_subjects=0), dict(noise_sigma=-1), dict(normal_rate=1.5)])
    def test_config_validation(self, kw):
        with pytest.raises(ValueError):
            SynthConfig(**kw)


class TestImageCode:
    def test_noise_free_repeatable(self, f1):
        cfg = replace(SMALL, noise_sigma=0.0)
        a = ground_truth_image([f1], f1.modality, cfg, np.random.default_rng(0))
        b = ground_truth_image([f1], f1.modality, cfg, np.random.default_rng(1))
        assert np.array_equal(a, b)

    def test_other_modalities_ignored(self, f1, f2):
        cfg = replace(SMALL, noise_sigma=0.0)
        rng = np.random.default_rng(0)
        assert np.array_equal(
            ground_truth_image([f1, f2], f1.modality, cfg, rng), ground_truth_image([f1], f1.modality, cfg, rng)
        )

    def test_injective_over_small_vocabulary(self):
        cfg = SynthConfig(vocab_sizes=(4, 4), noise_sigma=0.0, seed=3)
        code = ImageCode(cfg)
        vocab = cfg.vocabulary
        m = "T2WI"
        singles = [Finding(m, o, s, a) for o, s, a in itertools.product(ORIENTATIONS, vocab.finding_sites, vocab.finding_appearances)]
        assert len(singles) == 64
        sets = [()]
        for k in (1, 2, 3):
            sets.extend(itertools.combinations(singles, k))
        vecs = np.stack([code.encode(s) for s in sets])
        assert len(np.unique(vecs, axis=0)) == len(sets)
        # Order of findings within a set never changes the code.
        assert np.array_equal(code.encode(singles[:3]), code.encode(singles[2::-1]))

    def test_noise_magnitude(self):
        cfg = replace(SMALL, noise_sigma=0.1)
        code = ImageCode(cfg)
        rng = np.random.default_rng(9)
        clean = code.encode([])
        devs = np.stack([ground_truth_image([], "DWI", cfg, rng, code) - clean for _ in range(10_000 // cfg.feature_dim + 1)])
        expected = 0.1 * math.sqrt(2 / math.pi)
        assert round(expected, 2) == 0.08
        assert abs(np.abs(devs).mean() - expected) < 0.2 * expected

    def test_bad_modality(self):
        with pytest.raises(ValueError):
            ground_truth_image([], "PET", SMALL, np.random.default_rng(0))


class TestPreprocess:
    def test_no_outliers(self):
        out = preprocess_intensities(np.arange(10.0))
        np.testing.assert_allclose(out, np.arange(10) / 9, rtol=0, atol=1e-15)

    def test_outlier_clipped(self):
        raw = np.append(np.zeros(1000), 1e6)
        hi = oracles.percentile_nearest_rank(sorted(raw.tolist()), 99.9)
        assert hi == 0.0
        assert np.array_equal(preprocess_intensities(raw), np.zeros(1001))

    def test_outlier_clipped_to_rank_value(self):
        raw = np.append(np.arange(1000.0), 1e6)
        hi = oracles.percentile_nearest_rank(raw.tolist(), 99.9)
        assert hi == 999.0
        expected = np.minimum(raw, hi) / hi
        np.testing.assert_allclose(preprocess_intensities(raw), expected, rtol=1e-12)

    def test_constant(self):
        assert np.array_equal(preprocess_intensities(np.full(7, 3.0)), np.zeros(7))

    def test_empty(self):
        with pytest.raises(EmptyInput):
            preprocess_intensities([])

    @given(st.lists(st.floats(0, 1e3, allow_nan=False), min_size=2, max_size=200))
    def test_range_and_monotone(self, xs):
        x = np.array(xs)
        out = preprocess_intensities(x)
        assert out.min() >= 0 and out.max() <= 1
        order = np.argsort(x, kind="stable")
        assert np.all(np.diff(out[order]) >= 0)

    @given(st.lists(st.floats(0, 1, allow_nan=False), min_size=1, max_size=50))
    def test_idempotent_when_top_value_repeats(self, xs):
        # Idempotence holds once the clipping percentile equals the max,
        # which a normalised array guarantees when its top value repeats.
        x = preprocess_intensities(np.array(xs + [max(xs)] * 2000))
        again = preprocess_intensities(x)
        np.testing.assert_allclose(again, x, atol=1e-12)

    @given(st.lists(st.floats(0, 1e3, allow_nan=False), min_size=1, max_size=1000))
    def test_idempotent_on_small_arrays(self, xs):
        # Below 1001 samples the nearest-rank 99.9th percentile is the max.
        x = preprocess_intensities(np.array(xs))
        np.testing.assert_allclose(preprocess_intensities(x), x, atol=1e-12)


class TestSplit:
    def test_sizes_and_partition(self):
        recs = generate_corpus(replace(SMALL, n_subjects=100))
        train, test = split_dataset(recs, 0.7, seed=1)
        assert (len(train), len(test)) == (70, 30)
        a = {r.subject_id for r in train}
        b = {r.subject_id for r in test}
        assert not a & b and a | b == set(range(100))

    def test_deterministic(self):
        recs = generate_corpus(replace(SMALL, n_subjects=50))
        ids = lambda pair: [r.subject_id for r in pair[0]]  # noqa: E731
        assert ids(split_dataset(recs, 0.5, 3)) == ids(split_dataset(recs, 0.5, 3))
        assert ids(split_dataset(recs, 0.5, 3)) != ids(split_dataset(recs, 0.5, 4))

    @pytest.mark.parametrize("frac", [0.0, 1.0])
    def test_bad_fraction(self, frac):
        with pytest.raises(ValueError):
            split_dataset([], frac, 0)
