import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import spearmanr

from mownet.datasynth import (BENIGN, MALIGNANT, UNSURE, Dataset, SynthConfig,
                              bin_score, generate, generating_direction,
                              load_dataset, require_class_capacity, save_dataset,
                              split_train_test)
from mownet.errors import CapacityError, ContractError, FormatError


class TestBinScore:
    def test_benign_below_lower_boundary(self):
        assert bin_score(2.4) == BENIGN

    def test_unsure_midpoint(self):
        assert bin_score(3.0) == UNSURE

    def test_boundaries_are_unsure(self):
        assert bin_score(2.5) == UNSURE
        assert bin_score(3.5) == UNSURE

    def test_extremes(self):
        assert bin_score(1.0) == BENIGN
        assert bin_score(5.0) == MALIGNANT

    def test_out_of_range_rejected(self):
        for bad in (0.99, 5.01, -3.0):
            with pytest.raises(ContractError):
                bin_score(bad)

    @given(st.floats(1.0, 5.0))
    @settings(max_examples=200, deadline=None)
    def test_total_partition(self, score):
        label = bin_score(score)
        if score < 2.5:
            assert label == BENIGN
        elif score <= 3.5:
            assert label == UNSURE
        else:
            assert label == MALIGNANT


class TestGenerate:
    def test_noiseless_limit_collapses_to_line(self):
        config = SynthConfig(dim=4, n_per_class=30, sigma_score=1e-9,
                             sigma_feature=1e-12, overlap=0.0, seed=5)
        ds = generate(config)
        direction = generating_direction(config)
        unit = direction / np.linalg.norm(direction)
        # distances to the score line are noise-level tiny
        proj = ds.features @ unit
        residual = ds.features - np.outer(proj, unit)
        assert np.abs(residual).max() < 1e-9
        # projections ordered exactly by score
        order = np.argsort(ds.scores, kind="stable")
        assert np.all(np.diff(proj[order]) >= -1e-9)
        # three collinear points, one per class
        for c in range(3):
            pts = ds.features[ds.labels == c]
            assert np.abs(pts - pts[0]).max() < 1e-6

    def test_deterministic(self):
        a, b = generate(SynthConfig(seed=3)), generate(SynthConfig(seed=3))
        assert a == b
        assert a.features.tobytes() == b.features.tobytes()

    def test_default_frequencies_and_monotone_projection(self):
        config = SynthConfig(seed=0)
        ds = generate(config)
        assert len(ds) == 1500
        freqs = np.bincount(ds.labels, minlength=3) / len(ds)
        assert np.all(np.abs(freqs - 1 / 3) <= 1 / 3 * 0.10)
        proj = ds.features @ generating_direction(config)
        rho = spearmanr(ds.scores, proj).statistic
        assert rho >= 0.9

    def test_labels_always_rebinned_from_scores(self):
        ds = generate(SynthConfig(seed=11, n_per_class=200))
        for i in range(len(ds)):
            assert ds.labels[i] == bin_score(ds.scores[i])

    def test_capacity_for_default_config(self):
        ds = generate(SynthConfig(seed=1))
        require_class_capacity(ds, k=10)

    def test_capacity_error_names_class(self):
        features = np.zeros((5, 2))
        labels = np.array([0, 0, 1, 2, 2], dtype=np.uint8)
        ds = Dataset(features, np.array([2.0, 2.0, 3.0, 4.0, 4.0]), labels)
        with pytest.raises(CapacityError, match="unsure"):
            require_class_capacity(ds, k=1)


class TestSplit:
    def test_deterministic_and_disjoint(self):
        ds = generate(SynthConfig(seed=2, n_per_class=50))
        tr1, te1 = split_train_test(ds, 0.8, seed=4)
        tr2, te2 = split_train_test(ds, 0.8, seed=4)
        assert tr1 == tr2 and te1 == te2
        assert len(tr1) + len(te1) == len(ds)
        assert len(te1) == 30

    def test_bad_fraction(self):
        ds = generate(SynthConfig(seed=2, n_per_class=10))
        with pytest.raises(ContractError):
            split_train_test(ds, 1.0, seed=0)


class TestFileFormat:
    def test_round_trip_bit_exact(self, tmp_path):
        ds = generate(SynthConfig(seed=7, n_per_class=20))
        path = tmp_path / "data.ds"
        save_dataset(path, ds)
        assert load_dataset(path) == ds

    def test_empty_dataset_round_trips(self, tmp_path):
        ds = Dataset(np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.uint8))
        path = tmp_path / "empty.ds"
        save_dataset(path, ds)
        loaded = load_dataset(path)
        assert len(loaded) == 0
        assert loaded.dim == 4

    def test_truncated_file_is_format_error(self, tmp_path):
        ds = generate(SynthConfig(seed=7, n_per_class=5))
        path = tmp_path / "trunc.ds"
        save_dataset(path, ds)
        blob = path.read_bytes()
        path.write_bytes(blob[: len(blob) // 2])
        with pytest.raises(FormatError, match="byte offset"):
            load_dataset(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.ds"
        path.write_bytes(b"NOPE!!!" + b"\x00" * 16)
        with pytest.raises(FormatError, match="magic"):
            load_dataset(path)

    def test_unknown_version_named(self, tmp_path):
        path = tmp_path / "v9.ds"
        path.write_bytes(b"MOWDS9\n" + b"\x00" * 8)
        with pytest.raises(FormatError, match="version"):
            load_dataset(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        ds = generate(SynthConfig(seed=7, n_per_class=5))
        path = tmp_path / "extra.ds"
        save_dataset(path, ds)
        path.write_bytes(path.read_bytes() + b"junk")
        with pytest.raises(FormatError, match="trailing"):
            load_dataset(path)
