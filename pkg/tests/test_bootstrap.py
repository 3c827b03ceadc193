import numpy as np
import pytest

from milsurv.bootstrap import (
    blocked_bootstrap_mean,
    blocked_replicates,
    bootstrap_ci,
    paired_bootstrap_ci,
)
from milsurv.errors import NumericalError, ValidationError


def test_constant_metric_gives_point_interval():
    ci = bootstrap_ci(lambda idx: 3.5, 10, n_samples=200, seed=1)
    assert (ci.estimate, ci.lower, ci.upper) == (3.5, 3.5, 3.5)


def test_same_seed_same_interval():
    x = np.random.default_rng(0).normal(size=50)
    a = bootstrap_ci(lambda i: x[i].mean(), 50, n_samples=500, seed=7)
    b = bootstrap_ci(lambda i: x[i].mean(), 50, n_samples=500, seed=7)
    assert a == b
    c = bootstrap_ci(lambda i: x[i].mean(), 50, n_samples=500, seed=8)
    assert c != a


def test_gaussian_mean_width_matches_analytic():
    x = np.random.default_rng(42).normal(size=200)
    ci = bootstrap_ci(lambda i: x[i].mean(), 200, n_samples=9999, seed=0)
    analytic = 2 * 1.96 / np.sqrt(200)
    assert abs((ci.upper - ci.lower) - analytic) / analytic < 0.2
    assert ci.lower < x.mean() < ci.upper


def test_degenerate_replicates_skipped_then_fail():
    def sometimes(idx):
        if idx[0] % 4 == 1:
            raise ValidationError("degenerate labels")
        return 1.0

    ci = bootstrap_ci(sometimes, 8, n_samples=400, seed=0)
    assert ci.n_skipped > 0 and ci.n_used + ci.n_skipped == 400

    def mostly(idx):
        if idx[0] != 0:
            raise ValidationError("degenerate labels")
        return 1.0

    with pytest.raises(NumericalError):
        bootstrap_ci(mostly, 8, n_samples=400, seed=0)


def test_bootstrap_needs_two_cases():
    with pytest.raises(ValidationError):
        bootstrap_ci(lambda i: 0.0, 1)


def test_paired_bootstrap_delta():
    rng = np.random.default_rng(3)
    a = rng.normal(size=100)
    b = a - 0.5
    res = paired_bootstrap_ci(lambda i: a[i].mean(), lambda i: b[i].mean(), 100, n_samples=300, seed=2)
    # shared resamples make the difference exact on every replicate
    assert res["delta"].lower == pytest.approx(0.5) and res["delta"].upper == pytest.approx(0.5)
    assert res["a"].lower < res["a"].upper


def test_blocked_single_block_is_point():
    ci = blocked_bootstrap_mean([1.0, 2.0, 6.0], ["s", "s", "s"], n_samples=100, seed=0)
    assert ci.lower == ci.upper == ci.estimate == 3.0


def test_blocked_two_blocks_enumerates_multisets():
    values = np.r_[np.zeros(50), np.ones(50)]
    blocks = np.r_[np.zeros(50, int), np.ones(50, int)]
    reps = blocked_replicates(values, blocks, 2000, seed=5)
    assert set(np.unique(reps).tolist()) == {0.0, 0.5, 1.0}
    # probabilities 1/4, 1/2, 1/4
    assert abs(np.mean(reps == 0.5) - 0.5) < 0.05


def test_blocked_is_deterministic_and_validates():
    v = np.arange(10.0)
    b = np.repeat(["a", "b", "c", "d", "e"], 2)
    assert blocked_bootstrap_mean(v, b, 300, seed=1) == blocked_bootstrap_mean(v, b, 300, seed=1)
    with pytest.raises(ValidationError):
        blocked_bootstrap_mean([], [])
    with pytest.raises(ValidationError):
        blocked_bootstrap_mean([1.0, 2.0], ["a"])


def test_blocked_pools_patches_within_blocks():
    # one big block and one small block: replicate means are count-weighted
    v = np.r_[np.zeros(9), [1.0]]
    b = np.r_[np.zeros(9, int), [1]]
    reps = blocked_replicates(v, b, 1000, seed=0)
    assert set(np.round(np.unique(reps), 12).tolist()) <= {0.0, 0.1, 1.0}
