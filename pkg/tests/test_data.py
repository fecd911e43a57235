import csv
import os

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from aunet.config import ConfigError
from aunet.data import (AUDataset, AUSample, DataError, SynthConfig, TripletRecord, au_regions, binarize_intensity,
                        load_au_dataset, load_triplets, make_folds, region_maps, render_synth, synth_dataset,
                        synth_generate, synth_sample, synth_triplets, write_synth, _odd_one_out)


class TestBinarize:
    @pytest.mark.parametrize("v,bit", [(0, 0), (1, 0), (2, 1), (3, 1), (4, 1), (5, 1)])
    def test_table(self, v, bit):
        assert binarize_intensity(v) == bit

    @pytest.mark.parametrize("v", [-1, 6, 2.5])
    def test_out_of_range(self, v):
        with pytest.raises(DataError):
            binarize_intensity(v)

    def test_monotone(self):
        for v in range(6):
            for w in range(v, 6):
                assert binarize_intensity(v) <= binarize_intensity(w)


def _write_labels(root, header, rows, make_images=True):
    os.makedirs(os.path.join(root, "images"), exist_ok=True)
    with open(os.path.join(root, "labels.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    if make_images:
        from aunet.data import write_image
        for r in rows:
            d = os.path.join(root, "images", r[0])
            os.makedirs(d, exist_ok=True)
            write_image(os.path.join(d, f"{r[1]}.png"), np.zeros((3, 4, 4)))


class TestLoad:
    def test_intensity_mode(self, tmp_path):
        _write_labels(tmp_path, ["subject", "frame", "AU1", "AU2", "AU4", "AU6"], [["s1", "0001", 0, 1, 2, 5]])
        ds = load_au_dataset(tmp_path, intensity_mode=True)
        assert ds.au_names == ["AU1", "AU2", "AU4", "AU6"]
        assert ds.samples[0].labels.tolist() == [0, 0, 1, 1]
        assert ds.image(0).shape == (3, 4, 4)

    def test_binary_mode_unchanged(self, tmp_path):
        _write_labels(tmp_path, ["subject", "frame", "AU1", "AU2", "AU3"], [["s1", "0001", 1, 0, 1]])
        assert load_au_dataset(tmp_path).samples[0].labels.tolist() == [1, 0, 1]

    def test_empty(self, tmp_path):
        _write_labels(tmp_path, ["subject", "frame", "AU1"], [])
        with pytest.raises(DataError, match="no samples"):
            load_au_dataset(tmp_path)

    def test_missing_image(self, tmp_path):
        _write_labels(tmp_path, ["subject", "frame", "AU1"], [["s1", "0001", 1]], make_images=False)
        with pytest.raises(DataError, match="missing image"):
            load_au_dataset(tmp_path)

    def test_column_count(self, tmp_path):
        _write_labels(tmp_path, ["subject", "frame", "AU1", "AU2"], [["s1", "0001", 1]])
        with pytest.raises(DataError):
            load_au_dataset(tmp_path)

    def test_malformed_value(self, tmp_path):
        _write_labels(tmp_path, ["subject", "frame", "AU1"], [["s1", "0001", "x"]])
        with pytest.raises(DataError):
            load_au_dataset(tmp_path)
        _write_labels(tmp_path, ["subject", "frame", "AU1"], [["s1", "0001", 3]])
        with pytest.raises(DataError):
            load_au_dataset(tmp_path)

    def test_dataset_invariants(self):
        with pytest.raises(DataError):
            AUDataset([AUSample("s", "f", np.zeros((3, 2, 2)), np.array([1, 0]))], ["AU1"])
        with pytest.raises(DataError):
            AUDataset([AUSample("", "f", np.zeros((3, 2, 2)), np.array([1]))], ["AU1"])

    def test_round_trip_synthetic_folder(self, tmp_path):
        cfg = SynthConfig(n_aus=2, image_size=16, n_identities=3)
        ds = write_synth(tmp_path, cfg, 6, n_triplets=4)
        back = load_au_dataset(tmp_path)
        assert back.au_names == ds.au_names
        assert [s.subject for s in back.samples] == [s.subject for s in ds.samples]
        np.testing.assert_array_equal(back.labels(), ds.labels())
        # 8-bit quantisation only
        assert np.abs(back.images() - ds.images()).max() <= 0.5 / 255 + 1e-6
        trips = load_triplets(tmp_path)
        assert len(trips) == 4 and all(isinstance(t.a, str) for t in trips)


class TestTriplets:
    def test_record_invariants(self):
        with pytest.raises(DataError):
            TripletRecord(1, 2, 3, 3)
        with pytest.raises(DataError):
            TripletRecord(1, 1, 3, 0)
        assert TripletRecord("a", "b", "c", 0).ordered() == ("b", "c", "a")

    def test_equal_pair(self):
        assert _odd_one_out([np.array([0.3, 0.3]), np.array([0.3, 0.3]), np.array([0.9, 0.1])]) == 2

    def test_hand_example(self):
        vs = [np.array([0.0, 0.0]), np.array([0.1, 0.0]), np.array([1.0, 1.0])]
        assert _odd_one_out(vs) == oracles.odd_one_out(vs) == 2

    def test_tie_rejected(self):
        vs = [np.array([0.0]), np.array([1.0]), np.array([2.0])]
        assert _odd_one_out(vs) is None

    def test_deterministic_and_consistent(self):
        cfg = SynthConfig(n_aus=3, image_size=16, n_identities=4)
        a = synth_triplets(cfg, 40, seed=7, pool_size=60)
        assert a == synth_triplets(cfg, 40, seed=7, pool_size=60)
        for t in a:
            vecs = [synth_sample(cfg, i).intensities for i in t.refs]
            assert t.odd == oracles.odd_one_out(vecs)

    def test_too_many_ties(self):
        cfg = SynthConfig(n_aus=1, image_size=8, n_identities=1)
        with pytest.raises((DataError, ConfigError)):
            synth_triplets(cfg, 1, seed=0, pool_size=2)


class TestFolds:
    def test_41_subjects(self):
        folds = make_folds([f"S{i:03d}" for i in range(41)], 3, seed=0)
        assert sorted(len(t) for _, t in folds) == [13, 14, 14]

    def test_three_subjects(self):
        folds = make_folds(["a", "b", "c"], 3, seed=1)
        assert sorted(t[0] for _, t in folds) == ["a", "b", "c"]
        assert all(len(t) == 1 for _, t in folds)

    def test_deterministic(self):
        s = [str(i) for i in range(20)]
        assert make_folds(s, 4, 9) == make_folds(list(reversed(s)), 4, 9)

    def test_errors(self):
        with pytest.raises(ConfigError):
            make_folds(["a", "b"], 3)
        with pytest.raises(ConfigError):
            make_folds(["a", "b"], 1)

    @settings(max_examples=100, deadline=None)
    @given(st.integers(2, 60), st.integers(2, 8), st.integers(0, 10_000))
    def test_exclusive_partition(self, n, k, seed):
        if k > n:
            k = n
        subjects = [f"s{i}" for i in range(n)]
        folds = make_folds(subjects, k, seed)
        tests = [t for _, t in folds]
        flat = [s for t in tests for s in t]
        assert sorted(flat) == sorted(subjects)
        for train, test in folds:
            assert set(train) | set(test) == set(subjects) and not set(train) & set(test)
        sizes = [len(t) for t in tests]
        assert max(sizes) - min(sizes) <= 1


class TestSynth:
    def test_regions_disjoint_and_small(self):
        for n in (1, 2, 4, 8, 12):
            cfg = SynthConfig(n_aus=n, image_size=64)
            maps = region_maps(cfg)[:, 0].astype(int)
            assert maps.sum(0).max() == 1
            assert maps.sum() < 0.5 * 64 * 64

    def test_region_maps_match_rectangles(self):
        cfg = SynthConfig(n_aus=4, image_size=32)
        for k, (t, l, b, r) in enumerate(au_regions(cfg)):
            m = region_maps(cfg)[k, 0]
            assert m[t:b, l:r].all() and m.sum() == (b - t) * (r - l)

    def test_zero_intensity_is_base_plus_noise(self):
        from aunet.data import identity_pattern
        cfg = SynthConfig(n_aus=4, image_size=32, noise_std=0.0)
        img = render_synth(cfg, 2, np.zeros(4))
        np.testing.assert_allclose(img, np.clip(identity_pattern(cfg, 2), 0, 1).astype(np.float32))

    def test_intensity_raises_region_mean(self):
        cfg = SynthConfig(n_aus=4, image_size=32, noise_std=0.0)
        for k, (t, l, b, r) in enumerate(au_regions(cfg)):
            on = np.zeros(4)
            on[k] = 1.0
            a = render_synth(cfg, 0, on)[:, t:b, l:r].mean()
            z = render_synth(cfg, 0, np.zeros(4))[:, t:b, l:r].mean()
            assert a > z

    def test_sample_invariants(self):
        cfg = SynthConfig(n_aus=4, image_size=32)
        for s in synth_generate(cfg, 20):
            assert s.image.shape == (3, 32, 32) and s.image.min() >= 0 and s.image.max() <= 1
            np.testing.assert_array_equal(s.labels, (s.intensities >= 0.5).astype(int))
            assert s.region_maps.shape == (4, 1, 32, 32)

    def test_deterministic_bytes(self):
        cfg = SynthConfig(n_aus=4, image_size=32, seed=5)
        a = synth_generate(cfg, 12)
        b = synth_generate(cfg, 12)
        assert all(x.image.tobytes() == y.image.tobytes() for x, y in zip(a, b))
        # samples are independent of how many are generated and in which order
        assert synth_sample(cfg, 7).image.tobytes() == a[7].image.tobytes()

    def test_deterministic_across_threads(self):
        from concurrent.futures import ThreadPoolExecutor
        cfg = SynthConfig(n_aus=4, image_size=32, seed=11)
        serial = [synth_sample(cfg, i).image.tobytes() for i in range(16)]
        with ThreadPoolExecutor(4) as ex:
            par = list(ex.map(lambda i: synth_sample(cfg, i).image.tobytes(), range(16)))
        assert serial == par

    def test_dataset_subjects(self):
        ds = synth_dataset(SynthConfig(n_aus=2, image_size=16, n_identities=9), 27)
        assert len(ds.subjects()) == 9 and len(ds) == 27
        assert ds.region_maps.shape == (2, 16, 16)
