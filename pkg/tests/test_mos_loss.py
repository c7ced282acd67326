import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mownet import autodiff as ad
from mownet.autodiff import ParamSet, backward, grad_check
from mownet.datasynth import Dataset
from mownet.errors import CapacityError, ContractError, NumericError
from mownet.model import (BackboneSpec, WeightNetSpec, WeightVector,
                          forward_backbone, init_backbone, init_weightnets)
from mownet.mos import (MetaOrdinalSet, mce_loss, meta_class_loss_values,
                        meta_class_losses, mos_mean_ce, sample_mos)


def toy_dataset(n_per_class=4, dim=3, seed=0):
    rng = np.random.default_rng(seed)
    n = 3 * n_per_class
    labels = np.repeat(np.arange(3), n_per_class).astype(np.uint8)
    features = rng.normal(size=(n, dim)) + labels[:, None]
    scores = np.array([2.0, 3.0, 4.0])[labels]
    return Dataset(features, scores, labels)


class TestSampleMos:
    def test_k1_gives_one_per_class(self):
        ds = toy_dataset()
        mos = sample_mos(ds.class_index(), target_index=0, k=1,
                         rng=np.random.default_rng(0))
        assert mos.size == 3
        assert mos.k == 1
        mos.validate(ds.labels, k=1)

    def test_sole_member_class_capacity_error(self):
        features = np.zeros((3, 2))
        labels = np.array([0, 1, 2], dtype=np.uint8)
        ds = Dataset(features, np.array([2.0, 3.0, 4.0]), labels)
        with pytest.raises(CapacityError, match="benign"):
            sample_mos(ds.class_index(), target_index=0, k=1,
                       rng=np.random.default_rng(0))

    def test_uniform_frequency_over_many_draws(self):
        # class 0 has 4 eligible members after excluding the target
        ds = toy_dataset(n_per_class=5)
        target = 0  # class 0, leaves indices 1..4 eligible
        rng = np.random.default_rng(42)
        counts = {}
        draws = 10_000
        for _ in range(draws):
            mos = sample_mos(ds.class_index(), target, k=1, rng=rng)
            idx = mos.per_class_indices[0][0]
            counts[idx] = counts.get(idx, 0) + 1
        freqs = np.array([counts.get(i, 0) for i in range(1, 5)]) / draws
        assert np.all(np.abs(freqs - 0.25) <= 0.02)
        # chi-square against uniform as an independent check
        from scipy.stats import chisquare
        stat = chisquare(list(counts.values()))
        assert stat.pvalue > 1e-4

    def test_deterministic_given_rng_state(self):
        ds = toy_dataset()
        a = sample_mos(ds.class_index(), 2, 2, np.random.default_rng(9))
        b = sample_mos(ds.class_index(), 2, 2, np.random.default_rng(9))
        assert a == b

    def test_target_never_included_whole_epoch(self):
        ds = toy_dataset(n_per_class=6)
        rng = np.random.default_rng(1)
        for target in range(len(ds)):
            mos = sample_mos(ds.class_index(), target, k=3, rng=rng)
            mos.validate(ds.labels, k=3)
            assert target not in mos.all_indices()

    def test_k_zero_rejected(self):
        ds = toy_dataset()
        with pytest.raises(ContractError):
            sample_mos(ds.class_index(), 0, 0, np.random.default_rng(0))

    def test_extra_exclusion(self):
        ds = toy_dataset(n_per_class=4)
        rng = np.random.default_rng(5)
        banned = [0, 1, 4, 5, 8, 9]
        for _ in range(50):
            mos = sample_mos(ds.class_index(), 0, 2, rng, extra_exclude=banned)
            assert not set(mos.all_indices()) & set(banned)


class TestMetaClassLosses:
    def test_perfect_classifier_near_zero(self):
        # huge aligned logits make the true-class log-prob approach zero
        ds = toy_dataset(dim=3)
        w = np.zeros((3, 3))
        theta = ParamSet([("layer0.weight", ad.leaf(w)),
                          ("layer0.bias", ad.leaf(np.zeros(3)))])
        # one-hot features scaled by 50: class c has feature c dominant
        features = np.zeros((12, 3))
        labels = np.repeat(np.arange(3), 4).astype(np.uint8)
        features[np.arange(12), labels] = 50.0
        ds = Dataset(features, np.array([2.0, 3.0, 4.0])[labels], labels)
        theta = ParamSet([("layer0.weight", ad.leaf(np.eye(3))),
                          ("layer0.bias", ad.leaf(np.zeros(3)))])
        mos = sample_mos(ds.class_index(), 0, 2, np.random.default_rng(0))
        values = meta_class_losses(theta, mos, ds).floats()
        assert np.all(values < 1e-12)

    def test_uniform_predictor_ln_c(self):
        ds = toy_dataset()
        theta = ParamSet([("layer0.weight", ad.leaf(np.zeros((3, 3)))),
                          ("layer0.bias", ad.leaf(np.zeros(3)))])
        mos = sample_mos(ds.class_index(), 0, 2, np.random.default_rng(0))
        values = meta_class_losses(theta, mos, ds).floats()
        np.testing.assert_allclose(values, np.log(3.0), atol=1e-14)

    def test_k2_is_mean_of_individual_ces(self):
        ds = toy_dataset(dim=4)
        theta = init_backbone(BackboneSpec(4, (5,), 3), 3)
        mos = sample_mos(ds.class_index(), 1, 2, np.random.default_rng(2))
        values = meta_class_losses(theta, mos, ds).floats()
        for c in range(3):
            singles = []
            for idx in mos.per_class_indices[c]:
                pred = forward_backbone(theta, ds.features[idx])
                singles.append(-float(pred.log_probs.data[c]))
            assert values[c] == pytest.approx(np.mean(singles), rel=1e-12)

    def test_detached_values_match_graph(self):
        ds = toy_dataset(dim=4)
        theta = init_backbone(BackboneSpec(4, (5,), 3), 3)
        mos = sample_mos(ds.class_index(), 1, 2, np.random.default_rng(2))
        np.testing.assert_allclose(meta_class_loss_values(theta, mos, ds),
                                   meta_class_losses(theta, mos, ds).floats(),
                                   atol=1e-15)

    def test_gradient_flows_to_theta(self):
        ds = toy_dataset(dim=4)
        theta = init_backbone(BackboneSpec(4, (5,), 3), 3)
        mos = sample_mos(ds.class_index(), 1, 2, np.random.default_rng(2))

        def builder():
            return meta_class_losses(theta, mos, ds).values[1]

        report = grad_check(builder, theta, fd_step=1e-5, tol=1e-6)
        assert report.passed, report.summary()


def uniform_weights(values):
    return WeightVector(tuple(ad.constant(v) for v in values))


class TestMceLoss:
    def test_one_hot_recovers_standard_ce(self):
        lp = ad.log_softmax(ad.constant([0.2, -1.0, 0.4]))
        omega = uniform_weights([0.0, 1.0, 0.0])
        assert mce_loss(lp, omega).item() == pytest.approx(-float(lp.data[1]), abs=1e-15)

    def test_all_ones_uniform_prediction(self):
        lp = ad.log_softmax(ad.constant([0.0, 0.0, 0.0]))
        omega = uniform_weights([1.0, 1.0, 1.0])
        assert mce_loss(lp, omega).item() == pytest.approx(3 * np.log(3.0), abs=1e-12)

    def test_weighted_case_direct_evaluation(self):
        p_hat = np.array([0.7, 0.2, 0.1])
        omega = uniform_weights([0.5, 0.2, 0.3])
        lp = ad.constant(np.log(p_hat))
        expected = -float(np.sum([0.5, 0.2, 0.3] * np.log(p_hat)))
        assert mce_loss(lp, omega).item() == pytest.approx(expected, rel=1e-14)
        assert expected == pytest.approx(1.1910, abs=5e-5)

    @given(st.lists(st.floats(0.01, 0.97), min_size=3, max_size=3),
           st.floats(0.0, 3.0), st.floats(0.0, 3.0))
    @settings(max_examples=50, deadline=None)
    def test_linear_in_omega(self, probs, a, b):
        p = np.array(probs)
        p = p / p.sum()
        lp = ad.constant(np.log(p))
        rng = np.random.default_rng(0)
        w1, w2 = rng.uniform(0.05, 0.95, 3), rng.uniform(0.05, 0.95, 3)
        combined = uniform_weights(a * w1 + b * w2)
        left = mce_loss(lp, combined).item()
        right = (a * mce_loss(lp, uniform_weights(w1)).item()
                 + b * mce_loss(lp, uniform_weights(w2)).item())
        assert left == pytest.approx(right, rel=1e-10, abs=1e-12)

    @given(st.lists(st.floats(0.01, 0.97), min_size=3, max_size=3))
    @settings(max_examples=50, deadline=None)
    def test_nonnegative_for_nonnegative_weights(self, probs):
        p = np.array(probs)
        p = p / p.sum()
        omega = uniform_weights(np.random.default_rng(1).uniform(0, 1, 3))
        assert mce_loss(ad.constant(np.log(p)), omega).item() >= 0.0

    def test_gradient_wrt_logits_matches_fd(self):
        logits = ParamSet([("z", ad.leaf([0.3, -0.2, 0.9]))])
        phi = init_weightnets(WeightNetSpec(3, 4), 0)

        def builder():
            lp = ad.log_softmax(logits["z"])
            from mownet.model import forward_weightnets
            omega = forward_weightnets(phi, [0.4, 1.0, 0.1])
            return mce_loss(lp, omega)

        report = grad_check(builder, logits, fd_step=1e-5, tol=1e-6)
        assert report.passed, report.summary()

    def test_non_finite_input_raises_with_location(self):
        lp = ad.constant([np.nan, -1.0, -2.0])
        with pytest.raises(NumericError, match="class 0"):
            mce_loss(lp, uniform_weights([0.3, 0.3, 0.3]))

    def test_length_mismatch(self):
        lp = ad.constant([-1.0, -1.0])
        with pytest.raises(ContractError):
            mce_loss(lp, uniform_weights([1.0, 1.0, 1.0]))


def test_mos_mean_ce_matches_manual_mean():
    ds = toy_dataset(dim=4)
    theta = init_backbone(BackboneSpec(4, (5,), 3), 8)
    rng = np.random.default_rng(3)
    mos_list = [sample_mos(ds.class_index(), i, 2, rng) for i in (0, 5)]
    value = ad.forward_eval(mos_mean_ce(theta, mos_list, ds))
    ces = []
    for mos in mos_list:
        for c in sorted(mos.per_class_indices):
            for idx in mos.per_class_indices[c]:
                pred = forward_backbone(theta, ds.features[idx])
                ces.append(-float(pred.log_probs.data[c]))
    assert value == pytest.approx(np.mean(ces), rel=1e-13)
