import numpy as np
import pytest

from timealloc import synth
from timealloc.estimator import fit_structural
from timealloc.model import feature_matrix, predict_shares, share_matrix


class TestGeneratePopulation:
    def test_seeded_determinism(self):
        cfg = synth.PopulationConfig(n=5, seed=123)
        a = synth.generate_population(cfg).to_csv(index=False)
        b = synth.generate_population(cfg).to_csv(index=False)
        assert a == b

    def test_all_white_reference(self):
        cfg = synth.PopulationConfig(n=50, seed=4, race_probs=(1.0, 0.0, 0.0, 0.0, 0.0))
        pop = synth.generate_population(cfg)
        for col in ("race_black", "race_native", "race_asian", "race_pacific"):
            assert (pop[col] == 0).all()

    def test_edu_probabilities_concentrate(self):
        cfg = synth.PopulationConfig(n=10000, seed=9, edu_probs=(0.4, 0.3, 0.2, 0.1))
        pop = synth.generate_population(cfg)
        shares = pop["edu"].value_counts(normalize=True).sort_index().to_numpy()
        np.testing.assert_allclose(shares, [0.4, 0.3, 0.2, 0.1], atol=0.015)

    def test_age_bounds_respected(self):
        cfg = synth.PopulationConfig(n=2000, seed=5)
        pop = synth.generate_population(cfg)
        assert pop["age"].between(*cfg.age_bounds).all()

    def test_invalid_configs_rejected(self):
        with pytest.raises(synth.SynthError):
            synth.PopulationConfig(n=0).validate()
        with pytest.raises(synth.SynthError):
            synth.PopulationConfig(edu_probs=(0.5, 0.5, 0.2, 0.1)).validate()
        with pytest.raises(synth.SynthError):
            synth.PopulationConfig(age_sd=-1.0).validate()
        with pytest.raises(synth.SynthError):
            synth.NoiseConfig("dirichlet", kappa=0.0).validate()
        with pytest.raises(synth.SynthError):
            synth.NoiseConfig("gaussian").validate()

    def test_z_columns_present_and_centered(self):
        pop = synth.generate_population(synth.PopulationConfig(n=400, seed=6))
        for f in ("age", "edu", "earnweek"):
            z = pop[f"{f}_z"].to_numpy()
            assert abs(z.mean()) < 1e-10
            assert abs(z.std(ddof=1) - 1.0) < 1e-10


class TestSimulateAllocations:
    def test_zero_theta_noiseless_uniform(self, population_500):
        data = synth.simulate_allocations(np.zeros((3, 11)), population_500)
        for a in ("leisure", "work", "sleep", "other"):
            np.testing.assert_allclose(data[f"minutes_{a}"], 360.0, atol=1e-12)

    def test_noiseless_matches_prediction_exactly(self, dense_theta, population_500):
        data = synth.simulate_allocations(dense_theta, population_500)
        S = share_matrix(data)
        P = predict_shares(dense_theta, feature_matrix(data))
        np.testing.assert_allclose(S, P, atol=1e-14)

    def test_dirichlet_concentration(self, dense_theta, population_500):
        data = synth.simulate_allocations(
            dense_theta,
            population_500,
            synth.NoiseConfig("dirichlet", kappa=10000.0),
            seed=21,
        )
        S = share_matrix(data)
        P = predict_shares(dense_theta, feature_matrix(data))
        assert np.abs(S - P).max() < 0.02
        assert np.all(S > 0)
        np.testing.assert_allclose(S.sum(axis=1), 1.0, atol=1e-12)

    def test_noiseless_refit_recovers_truth(self, dense_theta, population_500):
        data = synth.simulate_allocations(dense_theta, population_500)
        fit = fit_structural(data)
        assert fit.converged
        assert np.abs(fit.theta - dense_theta).mean() < 1e-6

    def test_pipeline_determinism(self, dense_theta):
        cfg = synth.PopulationConfig(n=80, seed=77)
        noise = synth.NoiseConfig("dirichlet", kappa=500.0)
        frames = []
        for _ in range(2):
            pop = synth.generate_population(cfg)
            frames.append(
                synth.simulate_allocations(dense_theta, pop, noise, seed=13).to_csv(index=False)
            )
        assert frames[0] == frames[1]

    def test_per_record_streams_order_free(self, dense_theta):
        # noise for record i depends on (seed, i) only, not on batch layout
        pop = synth.generate_population(synth.PopulationConfig(n=40, seed=3))
        noise = synth.NoiseConfig("dirichlet", kappa=200.0)
        full = synth.simulate_allocations(dense_theta, pop, noise, seed=9)
        head = synth.simulate_allocations(dense_theta, pop.head(10), noise, seed=9)
        np.testing.assert_allclose(
            share_matrix(full)[:10], share_matrix(head), atol=1e-15
        )

    def test_metadata_embeds_truth(self, dense_theta):
        cfg = synth.PopulationConfig(n=10, seed=1)
        meta = synth.dataset_metadata(cfg, dense_theta, synth.NoiseConfig(), seed=5)
        assert meta["generator"] == "numpy-pcg64"
        np.testing.assert_allclose(np.asarray(meta["theta_star"]), dense_theta)
