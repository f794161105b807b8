import numpy as np
import pytest

from timealloc import synth

# category mixes rich enough that every dummy column is populated even in
# small samples and bootstrap resamples
RICH_MIX = dict(
    race_probs=(0.55, 0.18, 0.07, 0.13, 0.07),
    spouse_probs=(0.50, 0.15, 0.35),
)


def rich_config(n, seed, **overrides):
    kwargs = dict(RICH_MIX)
    kwargs.update(overrides)
    return synth.PopulationConfig(n=n, seed=seed, **kwargs)


@pytest.fixture(scope="session")
def dense_theta():
    """Dense ground-truth coefficients with moderate magnitudes."""
    rng = np.random.default_rng(314)
    theta = rng.uniform(-0.4, 0.4, size=(3, 11))
    theta[:, 0] = [0.3, 0.5, 0.9]
    return theta


@pytest.fixture(scope="session")
def population_500():
    return synth.generate_population(rich_config(500, 2024))


def make_noiseless(theta, n, seed):
    pop = synth.generate_population(rich_config(n, seed))
    return synth.simulate_allocations(theta, pop, synth.NoiseConfig("none"), seed=seed)


def make_noisy(theta, n, seed, kappa):
    pop = synth.generate_population(rich_config(n, seed))
    return synth.simulate_allocations(
        theta, pop, synth.NoiseConfig("dirichlet", kappa=kappa), seed=seed
    )
