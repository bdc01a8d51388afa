import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from uncspan import data
from uncspan.data import Component, LabeledDataset, MixtureSpec
from uncspan.errors import ConfigError, InputError, ParseError


def sigmoid(t):
    return 1.0 / (1.0 + math.exp(-t))


def three_component_spec():
    return MixtureSpec(
        (
            Component(0, (-2.0, 0.0), 0.5, 0.25),
            Component(1, (2.0, 0.0), 0.7, 0.5),
            Component(0, (0.0, 3.0), 1.0, 0.25),
        ),
        2,
    )


class TestSpec:
    def test_weights_must_sum_to_one(self):
        with pytest.raises(ConfigError, match="weights"):
            MixtureSpec((Component(0, (0.0,), 1.0, 0.5), Component(1, (1.0,), 1.0, 0.6)), 1)

    @pytest.mark.parametrize("sigma", [0.0, -1.0, float("inf")])
    def test_sigma_positive(self, sigma):
        with pytest.raises(ConfigError, match="sigma"):
            MixtureSpec((Component(0, (0.0,), sigma, 0.5), Component(1, (1.0,), 1.0, 0.5)), 1)

    def test_mean_dimension(self):
        with pytest.raises(ConfigError, match=r"components\[1\]\.mean"):
            MixtureSpec((Component(0, (0.0, 0.0), 1.0, 0.5), Component(1, (1.0,), 1.0, 0.5)), 2)

    def test_labels_contiguous(self):
        with pytest.raises(ConfigError, match="labels"):
            MixtureSpec((Component(0, (0.0,), 1.0, 0.5), Component(2, (1.0,), 1.0, 0.5)), 1)

    def test_multi_component_class_count(self):
        assert three_component_spec().num_classes == 2


class TestSample:
    def test_shapes_and_determinism(self):
        spec = data.default_spec()
        a = data.sample(spec, 1000, seed=5)
        b = data.sample(spec, 1000, seed=5)
        c = data.sample(spec, 1000, seed=6)
        assert a.features.shape == (1000, 2) and a.labels.shape == (1000,)
        assert a == b
        assert a != c

    def test_single_component_constant_label(self):
        spec = MixtureSpec((Component(0, (1.0,), 1.0, 1.0),), 1)
        ds = data.sample(spec, 500, seed=0)
        assert set(ds.labels.tolist()) == {0}

    def test_label_frequencies_within_five_sigma(self):
        spec = three_component_spec()
        n = 40_000
        ds = data.sample(spec, n, seed=11)
        # class 0 collects two components of weight 0.25 each
        for k, w in [(0, 0.5), (1, 0.5)]:
            count = int(np.sum(ds.labels == k))
            assert abs(count - n * w) <= 5 * math.sqrt(n * w * (1 - w))

    def test_component_moments(self):
        spec = data.default_spec()
        ds = data.sample(spec, 100_000, seed=2)
        for k, mean in [(0, (-1.0, 0.0)), (1, (1.0, 0.0))]:
            X = ds.features[ds.labels == k]
            se = 1.0 / math.sqrt(len(X))
            assert np.all(np.abs(X.mean(axis=0) - mean) <= 5 * se)
            assert np.all(np.abs(X.std(axis=0) - 1.0) <= 5 * se)

    def test_invalid_n(self):
        with pytest.raises(InputError):
            data.sample(data.default_spec(), 0, seed=0)


class TestPosterior:
    def test_midpoint_is_uniform(self):
        p = data.true_posterior(data.default_spec(), np.array([0.0, 4.0]))
        np.testing.assert_allclose(p, [0.5, 0.5], atol=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(
        st.floats(-6, 6),
        st.floats(0.1, 3.0),
        st.floats(0.3, 2.0),
    )
    def test_one_dimensional_logistic(self, x, mu, sigma):
        # symmetric pair at +-mu: log-odds is 2*mu*x / sigma^2
        spec = MixtureSpec((Component(0, (-mu,), sigma, 0.5), Component(1, (mu,), sigma, 0.5)), 1)
        p1 = data.true_posterior(spec, np.array([x]))[1]
        assert p1 == pytest.approx(sigmoid(2 * mu * x / sigma**2), abs=1e-12)

    def test_unequal_priors(self):
        spec = MixtureSpec((Component(0, (-1.0,), 1.0, 0.8), Component(1, (1.0,), 1.0, 0.2)), 1)
        p1 = data.true_posterior(spec, np.array([0.0]))[1]
        assert p1 == pytest.approx(0.2, abs=1e-15)

    def test_far_limit(self):
        spec = data.default_spec()
        assert data.true_posterior(spec, np.array([40.0, 0.0]))[1] == pytest.approx(1.0, abs=1e-15)
        assert data.true_posterior(spec, np.array([-40.0, 0.0]))[0] == pytest.approx(1.0, abs=1e-15)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(0)
        P = data.true_posterior(three_component_spec(), rng.normal(0, 5, size=(200, 2)))
        np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)

    def test_monte_carlo_ball(self):
        # fraction of each label among samples near x approximates p(y | x)
        spec = data.default_spec()
        ds = data.sample(spec, 2_000_000, seed=3)
        r = 0.05 * 1.0
        for x in ([0.0, 0.0], [0.5, 0.3], [-0.4, -0.5]):
            near = np.sum((ds.features - x) ** 2, axis=1) <= r * r
            frac = float(np.mean(ds.labels[near] == 1))
            assert near.sum() > 500
            assert abs(frac - data.true_posterior(spec, np.array(x))[1]) <= 0.05

    def test_shared_label_components(self):
        spec = three_component_spec()
        x = np.array([0.3, 1.1])
        # hand-computed mixture densities
        def dens(mean, s, w):
            sq = (x[0] - mean[0]) ** 2 + (x[1] - mean[1]) ** 2
            return w * math.exp(-sq / (2 * s * s)) / (2 * math.pi * s * s)
        p0 = dens((-2, 0), 0.5, 0.25) + dens((0, 3), 1.0, 0.25)
        p1 = dens((2, 0), 0.7, 0.5)
        assert data.true_posterior(spec, x)[0] == pytest.approx(p0 / (p0 + p1), rel=1e-12)

    def test_bad_input(self):
        with pytest.raises(InputError):
            data.true_posterior(data.default_spec(), np.array([0.0]))
        with pytest.raises(InputError):
            data.true_posterior(data.default_spec(), np.array([np.nan, 0.0]))


class TestOutliers:
    def test_zero_offset_matches_in_distribution(self):
        spec = data.default_spec()
        osr, _ = data.make_osr_and_ood_sets(spec, (0.0, 0.0), 10.0, 20_000, seed=0)
        ref = data.sample(spec, 20_000, seed=1)
        np.testing.assert_allclose(osr.features.mean(axis=0), ref.features.mean(axis=0), atol=0.06)
        np.testing.assert_allclose(osr.features.std(axis=0), ref.features.std(axis=0), atol=0.03)

    def test_sentinel_labels_and_sizes(self):
        osr, ood = data.make_osr_and_ood_sets(data.default_spec(), (0.0, 3.0), 10.0, 123, seed=4)
        assert len(osr) == len(ood) == 123
        assert set(osr.labels.tolist()) == set(ood.labels.tolist()) == {2}

    def test_osr_offset_shifts_mean(self):
        osr, _ = data.make_osr_and_ood_sets(data.default_spec(), (0.0, 3.0), 10.0, 20_000, seed=0)
        assert osr.features[:, 1].mean() == pytest.approx(3.0, abs=0.05)

    def test_ood_posterior_uninformative(self):
        spec = data.default_spec()
        _, ood = data.make_osr_and_ood_sets(spec, (0.0, 3.0), 10.0, 5000, seed=2)
        msp = data.true_posterior(spec, ood.features).max(axis=1)
        assert abs(msp.mean() - 0.5) <= 0.05

    def test_ood_far_from_data(self):
        spec = data.default_spec()
        _, ood = data.make_osr_and_ood_sets(spec, (0.0, 3.0), 10.0, 2000, seed=2)
        assert abs(ood.features[:, 1].mean()) > 8.0

    def test_deterministic(self):
        spec = data.default_spec()
        a = data.make_osr_and_ood_sets(spec, (0.0, 3.0), 10.0, 50, seed=9)
        b = data.make_osr_and_ood_sets(spec, (0.0, 3.0), 10.0, 50, seed=9)
        assert a[0] == b[0] and a[1] == b[1]

    def test_bad_scale(self):
        with pytest.raises(ConfigError):
            data.make_osr_and_ood_sets(data.default_spec(), (0.0, 0.0), 0.0, 5, seed=0)


class TestCsv:
    def test_roundtrip_bit_exact(self, tmp_path):
        ds = data.sample(three_component_spec(), 300, seed=8)
        data.save_csv(ds, tmp_path / "d.csv")
        assert data.load_csv(tmp_path / "d.csv") == ds

    def test_sentinel_roundtrip(self, tmp_path):
        _, ood = data.make_osr_and_ood_sets(data.default_spec(), (0.0, 3.0), 10.0, 10, seed=1)
        data.save_csv(ood, tmp_path / "o.csv")
        assert data.load_csv(tmp_path / "o.csv") == ood

    def test_empty_file(self, tmp_path):
        (tmp_path / "e.csv").write_text("")
        with pytest.raises(ParseError, match="missing header"):
            data.load_csv(tmp_path / "e.csv")

    @pytest.mark.parametrize(
        "body, lineno",
        [("0.5,0.1,1\n0.2,x,0\n", 3), ("0.5,1\n", 2), ("0.5,0.1,5\n", 2), ("nan,0.1,0\n", 2)],
    )
    def test_malformed_row_names_line(self, tmp_path, body, lineno):
        (tmp_path / "b.csv").write_text("d=2,c=2\n" + body)
        with pytest.raises(ParseError, match=f"line {lineno}"):
            data.load_csv(tmp_path / "b.csv")

    def test_bad_header(self, tmp_path):
        (tmp_path / "h.csv").write_text("dims 2\n0,0,0\n")
        with pytest.raises(ParseError, match="line 1"):
            data.load_csv(tmp_path / "h.csv")


class TestDatasetType:
    def test_misaligned(self):
        with pytest.raises(InputError):
            LabeledDataset(np.zeros((3, 2)), np.zeros(2), 2)

    def test_label_range(self):
        with pytest.raises(InputError):
            LabeledDataset(np.zeros((1, 2)), [3], 2)

    def test_subset_keeps_row_ids(self):
        ds = data.sample(data.default_spec(), 10, seed=0)
        sub = ds.subset(np.array([7, 2]))
        assert sub.row_ids.tolist() == [7, 2]


def test_probe_grid_on_axis():
    g = data.probe_grid(data.default_spec(), n=9, half_width=4.0)
    np.testing.assert_allclose(g[:, 1], 0.0)
    np.testing.assert_allclose(g[:, 0], np.linspace(-4, 4, 9))
