import json
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from maskaae.errors import DegenerateError, InvalidArgumentError, StateError
from maskaae.metrics import (
    EvalConfig,
    MetricsRecord,
    PCAWhitening,
    evaluate,
    feature_extract,
    frechet_distance,
    frechet_from_moments,
    nac,
)
from maskaae.losses import LossWeights
from maskaae.networks import BundleConfig, active_dimensions, build_bundle
from maskaae.synthetic_data import GeneratorSpec, make_dataset


class TestFrechet:
    def test_univariate_closed_form(self):
        assert frechet_from_moments([0.0], [[1.0]], [1.0], [[1.0]]) == pytest.approx(1.0, abs=1e-8)

    def test_commuting_covariances(self):
        d = frechet_from_moments(np.zeros(2), np.eye(2), np.zeros(2), 4 * np.eye(2))
        assert d == pytest.approx(2.0, abs=1e-8)

    def test_identical_sets(self, rng):
        a = rng.standard_normal((500, 6)) @ rng.standard_normal((6, 6))
        assert abs(frechet_distance(a, a)) <= 1e-6

    def test_symmetry(self, rng):
        a = rng.standard_normal((400, 5))
        b = rng.standard_normal((300, 5)) * 2 + 1
        assert frechet_distance(a, b) == pytest.approx(frechet_distance(b, a), abs=1e-8)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_non_negative(self, seed):
        r = np.random.default_rng(seed)
        a, b = r.standard_normal((50, 4)), r.standard_normal((60, 4)) * r.uniform(0.1, 3)
        assert frechet_distance(a, b) >= -1e-6
        assert abs(frechet_distance(a, a)) <= 1e-6

    def test_non_finite(self):
        with pytest.raises(InvalidArgumentError):
            frechet_distance(np.array([[np.nan, 1.0]] * 4), np.ones((4, 2)))

    def test_few_samples_warn(self, rng):
        with pytest.warns(RuntimeWarning):
            frechet_distance(rng.standard_normal((3, 5)), rng.standard_normal((3, 5)))


class TestFeatures:
    def test_identity(self, rng):
        x = rng.standard_normal((10, 3))
        assert feature_extract(x, "identity") is x

    def test_whitening(self, rng):
        x = rng.standard_normal((20_000, 10)) @ rng.standard_normal((10, 10))
        t = PCAWhitening(6).fit(x)
        c = np.cov(feature_extract(x, "pca_w", t), rowvar=False)
        assert np.all(np.abs(c - np.eye(6)) < 0.05)

    def test_p_larger_than_d(self, rng):
        with pytest.raises(InvalidArgumentError):
            PCAWhitening(5).fit(rng.standard_normal((20, 4)))

    def test_unfitted(self, rng):
        with pytest.raises(StateError):
            PCAWhitening(2).transform(rng.standard_normal((4, 3)))
        with pytest.raises(StateError):
            feature_extract(rng.standard_normal((4, 3)), "pca_w")

    def test_unknown(self, rng):
        with pytest.raises(InvalidArgumentError):
            feature_extract(rng.standard_normal((4, 3)), "inception")


class TestNAC:
    def test_correlated_pair_reaches_one(self, rng):
        # two identical active columns plus a masked constant column that supplies the minimum
        z1 = rng.standard_normal(200)
        enc = np.stack([z1, z1, np.full(200, 3.0)], axis=1)
        assert nac(enc, {0, 1}) == pytest.approx(1.0, abs=1e-12)

    def test_two_identical_columns_alone_are_degenerate(self, rng):
        z1 = rng.standard_normal(100)
        with pytest.raises(DegenerateError):
            nac(np.stack([z1, z1], axis=1))

    def test_isotropic_gaussian_small(self, rng):
        assert nac(rng.standard_normal((5000, 8))) < 0.08

    def test_single_active_dim(self, rng):
        assert nac(rng.standard_normal((50, 4)), {2}) == 0.0

    def test_constant(self):
        with pytest.raises(DegenerateError):
            nac(np.ones((10, 3)))

    def test_empty_active_set(self, rng):
        with pytest.raises(InvalidArgumentError):
            nac(rng.standard_normal((10, 3)), set())

    def test_hand_value(self):
        # centred columns a=[1,-1,0,0], b=[1,-1,1,-1]: |S| = [[2,2],[2,4]] -> min 2, max 4
        enc = np.array([[1.0, 1.0], [-1.0, -1.0], [0.0, 1.0], [0.0, -1.0]])
        assert nac(enc) == pytest.approx(0.0)
        enc3 = np.column_stack([enc, [2.0, 0.0, -2.0, 0.0]])
        # c=[2,0,-2,0]: |S| adds |a.c|=2, |b.c|=0, |c.c|=8 -> min 0, max 8
        # off-diagonals normalised: ab=2/8, ac=2/8, bc=0 -> mean 1/6
        assert nac(enc3) == pytest.approx(1.0 / 6.0, abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_permutation_and_shift_invariance(self, seed):
        r = np.random.default_rng(seed)
        enc = r.standard_normal((40, 5)) @ r.standard_normal((5, 5))
        active = [0, 2, 3]
        base = nac(enc, active)
        perm = r.permutation(5)
        inv = np.argsort(perm)
        assert nac(enc[:, perm], [int(inv[j]) for j in active]) == pytest.approx(base, abs=1e-12)
        assert nac(enc + r.standard_normal(5) * 10, active) == pytest.approx(base, abs=1e-9)


class TestRecord:
    def test_jsonl_round_trip(self):
        rec = MetricsRecord(step=3, frechet=0.1 + 0.2, nac=None, m_A=2, loss_ae=1e-300, loss_dm=-2.5,
                            loss_gen=1 / 3, loss_mask=7.0, omega=-0.0, mu=[0.1, 0.7, 1 / 7])
        line = rec.to_json()
        assert "\n" not in line
        assert MetricsRecord.from_json(line) == rec
        assert json.loads(line)["frechet"] == 0.1 + 0.2

    def test_nan_rejected(self):
        rec = MetricsRecord(0, float("nan"), None, 0, 0, 0, 0, 0, 0, [])
        with pytest.raises(ValueError):
            rec.to_json()


class TestEvaluate:
    @pytest.fixture
    def setup(self):
        spec = GeneratorSpec(n=2, k=16, d=10, seed=3)
        ds = make_dataset(spec, 600)
        bundle = build_bundle(BundleConfig(data_dim=10, latent_dim=4, hidden_widths=(8,)), seed=1)
        return ds, bundle

    def test_deterministic_and_consistent(self, setup):
        ds, bundle = setup
        cfg = EvalConfig(eval_count=300, nac_batch=300, loss_batch=32)
        r1 = evaluate(bundle, ds, cfg, LossWeights(), step=5, seed=2)
        r2 = evaluate(bundle, ds, cfg, LossWeights(), step=5, seed=2)
        assert r1.to_json() == r2.to_json()
        assert r1.m_A == active_dimensions(bundle.mu(), 0.5)
        assert 0 <= r1.m_A <= 4 and r1.frechet >= -1e-6 and len(r1.mu) == 4

    def test_wae_counts_all_dims(self):
        ds = make_dataset(GeneratorSpec(n=2, k=16, d=10, seed=3), 300)
        b = build_bundle(BundleConfig(data_dim=10, latent_dim=3, hidden_widths=(8,), variant="wae_baseline"))
        rec = evaluate(b, ds, EvalConfig(eval_count=100, nac_batch=100, loss_batch=16), LossWeights(), 0, 0)
        assert rec.m_A == 3 and rec.nac is not None
