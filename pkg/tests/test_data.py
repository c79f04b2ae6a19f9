import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from avsr_llm.autograd import DegenerateInputError, ParameterError
from avsr_llm.data import (SNR_LEVELS_DB, ToyCorpusSpec, adaptive_time_mask, babble_noise, generate_corpus,
                           load_corpus, mix_noise_at_snr, read_features, save_corpus, split_corpus,
                           word_tables, write_features, z_normalize)
from avsr_llm.nn import ConfigError

from helpers import measured_snr_db, tiny_corpus_spec


def signal_pair(seed, T=80, d=6):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(T, d)).astype(np.float32), rng.normal(size=(T, d)).astype(np.float32)


class TestCorpus:
    def test_deterministic(self):
        a = generate_corpus(tiny_corpus_spec(seed=3))
        b = generate_corpus(tiny_corpus_spec(seed=3))
        assert all(np.array_equal(x.audio, y.audio) and np.array_equal(x.words, y.words) for x, y in zip(a, b))

    def test_prefix_is_stable(self):
        full = generate_corpus(tiny_corpus_spec())
        short = generate_corpus(tiny_corpus_spec(), n_utterances=5)
        assert all(np.array_equal(full[i].audio, short[i].audio) for i in range(5))

    def test_noiseless_utterances_of_same_words_match(self):
        spec = tiny_corpus_spec(emission_noise_std=0.0, vocab_size=2, min_words=2, max_words=2, n_train=40)
        seen = {}
        for u in generate_corpus(spec):
            key = tuple(u.words)
            if key in seen:
                assert np.array_equal(seen[key].audio, u.audio) and np.array_equal(seen[key].video, u.video)
            seen[key] = u
        assert len(seen) < 40

    def test_audio_video_frame_ratio(self):
        spec = tiny_corpus_spec()
        for u in generate_corpus(spec):
            assert u.audio.shape == (2 * len(u.words), spec.d_audio)
            assert u.video.shape == (len(u.words), spec.d_video)
            assert spec.min_words <= len(u.words) <= spec.max_words

    def test_split_hygiene(self):
        spec = tiny_corpus_spec()
        splits = split_corpus(generate_corpus(spec))
        assert [len(splits[s]) for s in ("train", "valid", "test")] == [spec.n_train, spec.n_valid, spec.n_test]
        ids = [u.uid for s in splits.values() for u in s]
        assert len(ids) == len(set(ids))

    @pytest.mark.parametrize("kw", [{"vocab_size": 0}, {"vocab_size": 101}, {"min_words": 3, "max_words": 2},
                                    {"audio_frames_per_word": 0}, {"emission_noise_std": -1.0}])
    def test_invalid_spec(self, kw):
        with pytest.raises(ConfigError):
            generate_corpus(tiny_corpus_spec(**kw))

    def test_round_trip_on_disk(self, tmp_path):
        spec = tiny_corpus_spec()
        utts = generate_corpus(spec)
        save_corpus(utts, spec, tmp_path)
        loaded, spec2 = load_corpus(tmp_path)
        assert spec2 == spec
        for a, b in zip(utts, loaded):
            assert a.uid == b.uid and a.split == b.split
            assert np.array_equal(a.words, b.words)
            assert np.array_equal(a.audio, b.audio) and np.array_equal(a.video, b.video)

    def test_feature_file_rejects_foreign_bytes(self, tmp_path):
        path = tmp_path / "x.f32"
        path.write_bytes(b"nope" + bytes(8))
        with pytest.raises(ValueError):
            read_features(path)
        write_features(path, np.ones((2, 3)))
        assert read_features(path).shape == (2, 3)

    def test_no_adjacent_repeats(self):
        utts = generate_corpus(tiny_corpus_spec(vocab_size=3, n_train=60))
        assert all(np.all(np.diff(u.words) != 0) for u in utts)
        counts = np.bincount(np.concatenate([u.words for u in utts]), minlength=3)
        assert counts.min() > 0.2 * counts.sum()

    def test_frames_of_a_word_share_a_base(self):
        spec = tiny_corpus_spec(audio_frames_per_word=4, frame_variation=0.1)
        audio, _ = word_tables(spec)
        within = np.linalg.norm(audio - audio.mean(axis=1, keepdims=True), axis=-1).mean()
        between = np.linalg.norm(audio[0].mean(0) - audio[1].mean(0))
        assert within < 0.2 * between
        flat, _ = word_tables(tiny_corpus_spec(audio_frames_per_word=4, frame_variation=0.0))
        assert np.array_equal(flat, np.repeat(flat[:, :1], 4, axis=1))

    def test_default_spec_matches_toy_task(self):
        spec = ToyCorpusSpec()
        assert (spec.vocab_size, spec.n_train) == (32, 2000)


class TestSnrMixing:
    @pytest.mark.parametrize("snr", [-5.0, 0.0, 5.0, 10.0, 15.0, 20.0])
    def test_target_snr_is_met(self, snr):
        for seed in range(10):
            clean, noise = signal_pair(seed)
            mixed = mix_noise_at_snr(clean, noise, snr)
            assert abs(measured_snr_db(clean, mixed) - snr) < 0.01

    def test_clean_condition_is_bit_exact(self):
        clean, noise = signal_pair(0)
        out = mix_noise_at_snr(clean, noise, math.inf)
        assert out is clean or np.array_equal(out, clean)
        assert out.tobytes() == clean.tobytes()

    def test_zero_power_inputs(self):
        clean, noise = signal_pair(1)
        with pytest.raises(DegenerateInputError):
            mix_noise_at_snr(np.zeros_like(clean), noise, 0.0)
        with pytest.raises(DegenerateInputError):
            mix_noise_at_snr(clean, np.zeros_like(noise), 0.0)

    def test_shape_mismatch(self):
        clean, noise = signal_pair(2)
        with pytest.raises(ParameterError):
            mix_noise_at_snr(clean, noise[:-1], 0.0)

    def test_levels(self):
        assert SNR_LEVELS_DB == (-5.0, 0.0, 5.0, 10.0, 15.0, 20.0, math.inf)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(-10.0, 30.0), st.integers(0, 1000))
    def test_any_finite_snr(self, snr, seed):
        clean, noise = signal_pair(seed, T=40)
        assert abs(measured_snr_db(clean, mix_noise_at_snr(clean, noise, snr)) - snr) < 0.01


class TestBabble:
    def test_excluded_utterance_never_used(self):
        pool = [np.full((4, 2), float(i)) for i in range(4)]
        for seed in range(50):
            noise = babble_noise(8, pool, np.random.default_rng(seed), n_talkers=1, exclude=2)
            assert not np.any(noise == 2.0)

    def test_shape_and_averaging(self):
        pool = [np.full((3, 2), 5.0)] * 3
        noise = babble_noise(7, pool, np.random.default_rng(0), n_talkers=5)
        assert noise.shape == (7, 2) and np.allclose(noise, 5.0)

    def test_needs_another_talker(self):
        with pytest.raises(DegenerateInputError):
            babble_noise(3, [np.ones((3, 2))], np.random.default_rng(0), exclude=0)


class TestNormalizationAndMasking:
    def test_z_normalize(self):
        x = np.random.default_rng(0).normal(3.0, 4.0, size=(50, 6)).astype(np.float32)
        z = z_normalize(x)
        assert abs(z.mean()) < 1e-5 and abs(z.std() - 1) < 1e-5 and z.dtype == np.float32

    def test_z_normalize_constant_input(self):
        z = z_normalize(np.full((4, 3), 2.0))
        assert np.all(z == 0)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 300), st.floats(0.0, 0.99), st.integers(0, 10_000))
    def test_mask_bound(self, T, rho, seed):
        x = np.random.default_rng(seed).normal(size=(T, 3)) + 10.0
        out = adaptive_time_mask(x, rho, np.random.default_rng(seed))
        changed = np.any(out != x, axis=1).sum()
        assert changed <= math.floor(rho * T)

    def test_zero_rate_is_identity(self):
        x = np.random.default_rng(1).normal(size=(30, 3))
        assert np.array_equal(adaptive_time_mask(x, 0.0, np.random.default_rng(0)), x)

    def test_bad_rate(self):
        with pytest.raises(ParameterError):
            adaptive_time_mask(np.zeros((4, 2)), 1.0, np.random.default_rng(0))
