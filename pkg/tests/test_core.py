import numpy as np
import pytest
from scipy.integrate import quad
from scipy.special import ndtri

from bii.core import (
    Dataset,
    Prior,
    ReplicateSet,
    RngState,
    Theta,
    normal_quantile,
    prior_logpdf,
    prior_sample,
)


def test_theta_invariants():
    th = Theta([1.0, 2.0])
    assert th.dim == 2
    assert th.names == ("theta_1", "theta_2")
    with pytest.raises(ValueError):
        Theta([])
    with pytest.raises(ValueError):
        Theta([np.nan])
    with pytest.raises(ValueError):
        Theta([1.0], names=("a", "b"))


def test_theta_values_immutable():
    th = Theta([1.0, 2.0])
    with pytest.raises(ValueError):
        th.values[0] = 5.0


def test_dataset_scalar_and_records():
    d = Dataset([1.0, 2.0])
    assert d.size == 2 and not d.is_records
    r = Dataset(np.array([[2.0, 5.0, 10.0]]))
    assert r.size == 1 and r.is_records
    with pytest.raises(ValueError):
        Dataset(np.array([[6.0, 5.0, 10.0]]))  # m > l
    with pytest.raises(ValueError):
        Dataset(np.array([[1.0, 5.0, 0.0]]))  # t <= 0
    with pytest.raises(ValueError):
        Dataset(np.empty((0,)))


def test_replicate_set_pooling():
    reps = ReplicateSet((Dataset([1.0, 2.0]), Dataset([3.0, 4.0])))
    assert reps.n == 2 and reps.size == 2
    assert np.array_equal(reps.pooled().values, [1.0, 2.0, 3.0, 4.0])
    with pytest.raises(ValueError):
        ReplicateSet((Dataset([1.0]), Dataset([1.0, 2.0])))


# -- priors


def test_uniform_logpdf_inside_and_outside():
    prior = Prior.uniform([0.0], [1.0])
    assert prior_logpdf(prior, Theta([0.5])) == 0.0
    assert prior_logpdf(prior, Theta([1.5])) == -np.inf


def test_gamma_logpdf_frozen_value():
    # log(30^29 e^-30 / Gamma(30)) evaluated with an independent
    # high-precision special-function implementation (40-digit arithmetic)
    prior = Prior.gamma([30.0], [1.0])
    assert prior_logpdf(prior, Theta([30.0])) == pytest.approx(
        -2.622314898965503, abs=1e-12
    )


def test_prior_logpdf_dimension_mismatch():
    with pytest.raises(ValueError):
        prior_logpdf(Prior.uniform([0.0], [1.0]), Theta([0.5, 0.5]))


@pytest.mark.parametrize(
    "prior",
    [Prior.uniform([0.2], [3.5]), Prior.gamma([30.0], [1.0]), Prior.gamma([0.7], [2.0])],
)
def test_prior_normalizes_by_quadrature(prior):
    # 1-d quadrature of the density over the support
    if prior.kind == "uniform":
        lo, hi = float(prior.a[0]), float(prior.b[0])
    else:
        lo, hi = 1e-12, 80.0 / float(prior.b[0])
    total, _ = quad(
        lambda x: np.exp(prior_logpdf(prior, Theta([x]))), lo, hi, limit=200
    )
    assert total == pytest.approx(1.0, abs=1e-6)


def test_prior_sample_support_and_moments():
    rng = RngState(7)
    draws = np.array(
        [prior_sample(Prior.uniform([0.0], [2.0]), rng).values[0] for _ in range(200)]
    )
    assert np.all((draws >= 0.0) & (draws <= 2.0))

    g = Prior.gamma([30.0], [1.0])
    xs = np.array([prior_sample(g, rng).values[0] for _ in range(100_000)])
    se = np.sqrt(30.0 / xs.size)
    assert abs(xs.mean() - 30.0) < 3 * se


def test_prior_sample_deterministic_under_seed():
    a = prior_sample(Prior.gamma([2.0], [1.0]), RngState(123)).values
    b = prior_sample(Prior.gamma([2.0], [1.0]), RngState(123)).values
    assert np.array_equal(a, b)


def test_rng_spawn_streams_are_independent_and_reproducible():
    r1 = RngState(5)
    r2 = RngState(5)
    kids1 = r1.spawn(3)
    kids2 = r2.spawn(3)
    for a, b in zip(kids1, kids2):
        assert np.array_equal(a.generator.random(4), b.generator.random(4))
    assert not np.array_equal(kids1[0].generator.random(4), kids1[1].generator.random(4))


# -- normal quantile


def test_normal_quantile_accuracy():
    p = np.concatenate(
        [
            np.linspace(1e-10, 1 - 1e-10, 20001),
            [1e-300, 1e-200, 1e-30, 0.5, 1 - 1e-12],
        ]
    )
    assert np.max(np.abs(normal_quantile(p) - ndtri(p))) < 1e-9


def test_normal_quantile_rejects_boundary():
    for bad in (0.0, 1.0, -0.1, 1.1):
        with pytest.raises(ValueError):
            normal_quantile(bad)
