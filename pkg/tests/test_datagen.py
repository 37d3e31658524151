import hashlib
import json
import math
from pathlib import Path

import numpy as np
import pytest

import avtse.datagen as dg
import avtse.objectives as obj


def small_cfg(**overrides):
    base = dict(n_train=16, n_dev=8, n_eval=16, n_speakers=6, n_eval_speakers=2,
                duration_s=0.6, visual_dim=8)
    base.update(overrides)
    return dg.GenConfig(**base)


def measured_snr_db(signal, noisy):
    noise = noisy - signal
    return 10 * math.log10((signal @ signal) / (noise @ noise))


class TestSpeakers:
    def test_pool_enforces_center_separation(self):
        pool = dg.make_speaker_pool(8, seed=0, min_center_gap=120.0)
        centers = sorted(s.primary_center for s in pool)
        gaps = np.diff(centers)
        assert gaps.min() >= 0.4 * 120.0  # jitter stays well under a grid step

    def test_two_speakers_spectral_centroids_differ(self):
        pool = dg.make_speaker_pool(2, seed=1)
        sr = 8000

        def centroid(wave):
            spec = np.abs(np.fft.rfft(wave)) ** 2
            freqs = np.fft.rfftfreq(len(wave), 1 / sr)
            return float((freqs * spec).sum() / spec.sum())

        a = dg.synth_utterance(pool[0], 1.0, seed=7, sample_rate=sr)
        b = dg.synth_utterance(pool[1], 1.0, seed=7, sample_rate=sr)
        assert abs(centroid(a) - centroid(b)) > 200.0

    def test_pool_too_dense_rejected(self):
        with pytest.raises(ValueError):
            dg.make_speaker_pool(100, seed=0, min_center_gap=200.0)


class TestUtterances:
    def test_deterministic_per_speaker_and_seed(self):
        spk = dg.make_speaker_pool(2, seed=2)[0]
        a = dg.synth_utterance(spk, 0.7, seed=3)
        b = dg.synth_utterance(spk, 0.7, seed=3)
        assert np.array_equal(a, b)
        c = dg.synth_utterance(spk, 0.7, seed=4)
        assert not np.array_equal(a, c)

    def test_peak_normalized(self):
        spk = dg.make_speaker_pool(2, seed=5)[1]
        wave = dg.synth_utterance(spk, 0.5, seed=0)
        assert np.max(np.abs(wave)) <= 0.9 + 1e-9

    def test_too_short_duration_rejected(self):
        spk = dg.make_speaker_pool(2, seed=6)[0]
        with pytest.raises(ValueError):
            dg.synth_utterance(spk, 0.2, seed=0)


class TestMix:
    def test_zero_sir_equal_powers(self):
        pool = dg.make_speaker_pool(2, seed=7)
        t = dg.synth_utterance(pool[0], 0.5, seed=1)
        i = dg.synth_utterance(pool[1], 0.5, seed=2)
        mixture, gain = dg.mix(t, i, sir_db=0.0)
        p_t = t @ t
        p_i = (gain * i) @ (gain * i)
        assert abs(10 * math.log10(p_t / p_i)) < 0.01

    def test_gain_arithmetic(self):
        pool = dg.make_speaker_pool(2, seed=8)
        t = dg.synth_utterance(pool[0], 0.5, seed=1)
        i = dg.synth_utterance(pool[1], 0.5, seed=2)
        _, g0 = dg.mix(t, i, sir_db=0.0)
        _, g6 = dg.mix(t, i, sir_db=6.0)
        assert abs(g6 - g0 / 10 ** (6 / 20)) < 1e-12

    def test_measured_sir_matches_request_over_seeds(self):
        pool = dg.make_speaker_pool(4, seed=9)
        rng = np.random.default_rng(10)
        for k in range(100):
            t = dg.synth_utterance(pool[k % 4], 0.5, seed=k)
            i = dg.synth_utterance(pool[(k + 1) % 4], 0.5, seed=k + 1000)
            sir = float(rng.uniform(-6, 6))
            _, gain = dg.mix(t, i, sir)
            measured = 10 * math.log10((t @ t) / ((gain * i) @ (gain * i)))
            assert abs(measured - sir) < 0.01

    def test_silent_interferer_rejected(self):
        with pytest.raises(ValueError):
            dg.mix(np.ones(16), np.zeros(16), 0.0)


class TestAudioClueCorruption:
    def test_exact_snr(self):
        pool = dg.make_speaker_pool(2, seed=11)
        clue = dg.synth_utterance(pool[0], 0.5, seed=0)
        for snr in (-20.0, -5.0, 0.0, 7.5, 20.0):
            noisy = dg.corrupt_audio_clue(clue, snr, seed=42)
            assert abs(measured_snr_db(clue, noisy) - snr) < 0.01

    def test_minus_twenty_means_hundredfold_noise(self):
        pool = dg.make_speaker_pool(2, seed=12)
        clue = dg.synth_utterance(pool[0], 0.5, seed=1)
        noisy = dg.corrupt_audio_clue(clue, -20.0, seed=7)
        noise = noisy - clue
        assert abs((noise @ noise) / (clue @ clue) - 100.0) < 0.1

    def test_deterministic_per_seed(self):
        clue = np.sin(np.arange(4000) * 0.01)
        a = dg.corrupt_audio_clue(clue, -3.0, seed=5)
        b = dg.corrupt_audio_clue(clue, -3.0, seed=5)
        assert np.array_equal(a, b)

    def test_silent_clue_rejected(self):
        with pytest.raises(ValueError):
            dg.corrupt_audio_clue(np.zeros(100), 0.0, seed=0)


class TestVisualFeatures:
    def test_frame_count(self):
        spk = dg.make_speaker_pool(2, seed=13)[0]
        wave = dg.synth_utterance(spk, 1.0, seed=2)
        feats = dg.synth_visual_features(wave, fps=25, d_v=8, speaker=spk)
        assert feats.shape == (25, 8)

    def test_silent_target_gives_speaker_offset(self):
        spk = dg.make_speaker_pool(2, seed=14)[0]
        feats = dg.synth_visual_features(np.zeros(8000), fps=25, d_v=8, speaker=spk)
        assert np.allclose(feats, feats[0])  # floor envelope: constant frames

    def test_features_track_frame_energy(self):
        spk = dg.make_speaker_pool(2, seed=15)[0]
        rng = np.random.default_rng(16)
        wave = np.concatenate([dg.synth_utterance(spk, 1.0, seed=s) for s in range(4)])
        feats = dg.synth_visual_features(wave, fps=25, d_v=8, speaker=spk)
        hop = 8000 // 25
        energy = np.array([np.sum(wave[i * hop:(i + 1) * hop] ** 2) for i in range(feats.shape[0])])
        # distance from the silent-frame feature point tracks activity
        silent = dg.synth_visual_features(np.zeros(len(wave)), 25, 8, spk)[0]
        activity = np.linalg.norm(feats - silent, axis=1)
        r = np.corrcoef(activity, np.log10(energy + 1e-9))[0, 1]
        assert r > 0.5


class TestMasks:
    def test_mask_spec_validation(self):
        with pytest.raises(ValueError):
            dg.MaskSpec("rect", width=10, height=10)       # below protocol minimum
        with pytest.raises(ValueError):
            dg.MaskSpec("rect", width=150, height=50)      # above protocol maximum
        with pytest.raises(ValueError):
            dg.MaskSpec("wavy")
        assert dg.MaskSpec("full").width == obj.FACE_PIXELS

    def test_none_mask_leaves_features(self):
        feats = np.random.default_rng(17).normal(size=(10, 8))
        token = dg.occlusion_token(8, seed=0)
        out, per = dg.corrupt_visual(feats, dg.MaskSpec("none"), token)
        assert np.array_equal(out, feats)
        assert np.array_equal(per, np.zeros(10))

    def test_full_mask_replaces_with_token(self):
        feats = np.random.default_rng(18).normal(size=(6, 8))
        token = dg.occlusion_token(8, seed=0)
        out, per = dg.corrupt_visual(feats, dg.MaskSpec("full"), token)
        assert np.allclose(out, np.tile(token, (6, 1)))
        assert np.array_equal(per, np.full(6, obj.FULL_PERIMETER))

    def test_rect_mask_interpolates_by_perimeter(self):
        feats = np.ones((4, 8))
        token = dg.occlusion_token(8, seed=0)
        spec = dg.MaskSpec("rect", width=40, height=30)
        out, per = dg.corrupt_visual(feats, spec, token)
        rho = 140.0 / 752.0
        assert np.allclose(out, (1 - rho) * feats + rho * token[None, :])
        assert np.array_equal(per, np.full(4, 140))

    def test_intermittent_only_masks_scheduled_frames(self):
        rng = np.random.default_rng(19)
        sched = dg.make_intermittent_schedule(25, rng)
        feats = rng.normal(size=(25, 8))
        token = dg.occlusion_token(8, seed=0)
        out, per = dg.corrupt_visual(feats, dg.MaskSpec("intermittent_full", frame_schedule=sched), token)
        mask = np.zeros(25, dtype=bool)
        mask[sched] = True
        assert np.allclose(out[mask], np.tile(token, (mask.sum(), 1)))
        assert np.array_equal(out[~mask], feats[~mask])
        assert 0.48 <= mask.mean() <= 0.52

    def test_intermittent_schedules_are_consecutive_runs(self):
        rng = np.random.default_rng(20)
        for _ in range(20):
            sched = dg.make_intermittent_schedule(50, rng)
            arr = np.asarray(sched)
            runs = np.split(arr, np.flatnonzero(np.diff(arr) > 1) + 1)
            assert all(len(r) >= 1 for r in runs)
            assert abs(len(arr) / 50 - 0.5) <= 0.02 + 1e-9  # boundary inclusive


class TestFileFormats:
    def test_wav_roundtrip(self, tmp_path):
        wave = np.random.default_rng(21).uniform(-0.8, 0.8, size=4000)
        path = tmp_path / "x.wav"
        dg.write_wav(path, wave, 8000)
        loaded, sr = dg.read_wav(path)
        assert sr == 8000
        assert np.max(np.abs(loaded - wave)) < 1.0 / 32768.0

    def test_feature_roundtrip(self, tmp_path):
        feats = np.random.default_rng(22).normal(size=(7, 5)).astype(np.float32)
        path = tmp_path / "x.avf"
        dg.write_features(path, feats)
        loaded = dg.read_features(path)
        assert np.array_equal(loaded.astype(np.float32), feats)

    def test_feature_magic_checked(self, tmp_path):
        path = tmp_path / "bad.avf"
        path.write_bytes(b"WRNG" + b"\x00" * 16)
        with pytest.raises(ValueError, match="magic"):
            dg.read_features(path)


def tree_hash(root: Path) -> str:
    digest = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            digest.update(str(path.relative_to(root)).encode())
            digest.update(path.read_bytes())
    return digest.hexdigest()


class TestBuildDataset:
    @pytest.fixture(scope="class")
    def built(self, tmp_path_factory):
        out = tmp_path_factory.mktemp("ds")
        manifests = dg.build_dataset(small_cfg(), out, seed=123)
        return out, manifests

    def test_manifests_written_and_valid(self, built):
        out, manifests = built
        assert set(manifests) == {"train", "dev", "eval"}
        for path in manifests.values():
            dg.validate_manifest(path)

    def test_split_sizes(self, built):
        _, manifests = built
        assert len(dg.read_manifest(manifests["train"])) == 16
        assert len(dg.read_manifest(manifests["dev"])) == 8
        assert len(dg.read_manifest(manifests["eval"])) == 16

    def test_speaker_splits_disjoint(self, built):
        out, manifests = built
        train_spk = set()
        eval_spk = set()
        for e in dg.read_manifest(manifests["train"]):
            train_spk.update({e.target_speaker, e.interferer_speaker})
        for e in dg.read_manifest(manifests["eval"]):
            eval_spk.update({e.target_speaker, e.interferer_speaker})
        assert not (train_spk & eval_spk)

    def test_bit_deterministic_tree(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        dg.build_dataset(small_cfg(), a, seed=9)
        dg.build_dataset(small_cfg(), b, seed=9)
        assert tree_hash(a) == tree_hash(b)

    def test_eval_grid_covers_all_conditions(self, built):
        _, manifests = built
        conditions = {e.condition for e in dg.read_manifest(manifests["eval"])}
        assert conditions == set(dg.EVAL_CONDITIONS)

    def test_mixtures_are_genuinely_hard(self, built):
        out, manifests = built
        for e in dg.read_manifest(manifests["eval"]):
            mixture, _ = dg.read_wav(out / e.mixture)
            target, _ = dg.read_wav(out / e.target)
            assert obj.si_sdr(mixture, target) < 3.0
            assert obj.si_sdr(target, target) == math.inf

    def test_insufficient_pool_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            dg.build_dataset(small_cfg(n_speakers=2, n_eval_speakers=1), tmp_path / "x", seed=0)


class TestCorruptionProportions:
    def test_histogram_matches_exact_plan(self):
        rng = np.random.default_rng(23)
        plan = dg._train_condition_plan(1000, clean_fraction=0.5, rng=rng)
        counts = {c: plan.count(c) for c in set(plan)}
        assert counts["both_clean"] == 500
        for kind in ("visual_full", "visual_partial", "audio_dead", "audio_partial"):
            assert abs(counts[kind] - 125) <= 20  # within 2% of 1000

    def test_oracles_recomputable_for_every_entry(self, tmp_path):
        out = tmp_path / "ds"
        manifests = dg.build_dataset(small_cfg(n_train=12), out, seed=77)
        for split, manifest in manifests.items():
            for e in dg.read_manifest(manifest):
                spec = dg.MaskSpec.from_dict(e.mask_spec)
                feats = dg.read_features(out / e.visual_clue)
                r_v, r_a = obj.oracle_reliability(spec, e.audio_clue_snr_db, feats.shape[0])
                assert np.array_equal(r_v, np.asarray(e.oracle_r_visual))
                assert r_a == e.oracle_r_audio


class TestShiftedDomain:
    def test_adapt_conditions_and_smearing(self, tmp_path):
        cfg = small_cfg(domain="shifted", n_train=9, n_dev=3, n_eval=6)
        out = tmp_path / "shifted"
        manifests = dg.build_dataset(cfg, out, seed=5)
        conditions = [e.condition for e in dg.read_manifest(manifests["train"])]
        assert set(conditions) == set(dg.ADAPT_CONDITIONS)
        counts = {c: conditions.count(c) for c in dg.ADAPT_CONDITIONS}
        assert max(counts.values()) - min(counts.values()) <= 1
        dg.validate_manifest(manifests["train"])
