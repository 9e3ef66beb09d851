import math

import numpy as np
import pytest

from medi import bounds
from medi.errors import ConfigError, NumericError


def test_epsilon_zero_when_beta_and_M_vanish():
    assert bounds.stability_epsilon(100, 0.0, 0.0, 0.5) == 0.0


def test_epsilon_collapses_when_beta_zero():
    n, M, delta = 100, 1.0, 0.5
    expected = M * math.sqrt(math.log(1.0 / delta) / (2 * n))
    assert bounds.stability_epsilon(n, 0.0, M, delta) == pytest.approx(expected, abs=1e-15)


def test_epsilon_reference_value():
    # frozen from an independent high-precision evaluation of the formula
    got = bounds.stability_epsilon(1000, 0.001, 1.0, 0.05)
    assert got == pytest.approx(0.19551137801024747, abs=1e-12)


def test_epsilon_matches_mpmath_oracle():
    import mpmath

    mpmath.mp.dps = 50
    for n, beta, M, delta in [
        (1000, 0.001, 1.0, 0.05),
        (10, 0.3, 2.0, 0.5),
        (100000, 1e-7, 16.118095650958319, 0.01),
    ]:
        oracle = 2 * mpmath.mpf(beta) + (4 * n * mpmath.mpf(beta) + mpmath.mpf(M)) * mpmath.sqrt(
            mpmath.log(1 / mpmath.mpf(delta)) / (2 * n)
        )
        assert bounds.stability_epsilon(n, beta, M, delta) == pytest.approx(
            float(oracle), rel=1e-12
        )


def test_epsilon_rejects_bad_delta():
    for delta in (0.0, 1.0, -0.3, 2.0):
        with pytest.raises(ConfigError):
            bounds.stability_epsilon(10, 0.1, 1.0, delta)


def test_epsilon_monotone_in_beta_and_M():
    betas = np.linspace(0.0, 0.5, 8)
    Ms = np.linspace(0.0, 4.0, 8)
    for n in (10, 1000):
        vals_b = [bounds.stability_epsilon(n, b, 1.0, 0.1) for b in betas]
        assert all(x <= y + 1e-15 for x, y in zip(vals_b, vals_b[1:]))
        vals_m = [bounds.stability_epsilon(n, 0.01, M, 0.1) for M in Ms]
        assert all(x <= y + 1e-15 for x, y in zip(vals_m, vals_m[1:]))


def test_epsilon_vanishes_for_fast_decaying_beta():
    # beta_n = c / n^2 with c = 1e-6: slack shrinks as n grows
    c = 1e-6
    values = [
        bounds.stability_epsilon(n, c / n**2, 1.0, 0.1) for n in (10**2, 10**4, 10**6)
    ]
    assert values[0] > values[1] > values[2]
    assert values[2] < 2e-3


def test_spec_dataclass_recomputes_epsilon():
    spec = bounds.StabilityBoundSpec(n=1000, beta=0.001, M=1.0, delta=0.05)
    assert spec.epsilon == bounds.stability_epsilon(1000, 0.001, 1.0, 0.05)


def test_multitask_error_equals_naive_double_loop():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(1, 6))
        tasks = [rng.uniform(size=int(rng.integers(1, 7))).tolist() for _ in range(n)]
        got = bounds.empirical_multitask_error(tasks)
        total = 0.0
        for task in tasks:
            inner = 0.0
            for loss in task:
                inner += loss
            total += inner / len(task)
        assert got == pytest.approx(total / n, abs=1e-15)


class ConstantAlgorithm:
    def train(self, tasks, seed):
        return 0.42

    def task_loss(self, model, task):
        return 0.37


class MeanAggregator:
    """Model = mean of per-task statistics; loss = |model - test statistic|,
    clipped into [0, 1]."""

    def train(self, tasks, seed):
        return float(np.mean([t["stat"] for t in tasks]))

    def task_loss(self, model, task):
        return float(np.clip(abs(model - task["stat"]), 0.0, 1.0))


def _stat_task(rng):
    return {"stat": float(rng.uniform(0.0, 1.0))}


def test_constant_algorithm_has_zero_stability():
    result = bounds.empirical_stability_probe(
        ConstantAlgorithm(), _stat_task, n=5, trials=3, seed=0
    )
    assert result.beta_hat == 0.0


def test_mean_aggregator_stability_shrinks_with_n():
    # analytic oracle: deleting one task moves the mean by at most
    # |stat_i - mean_rest| / n <= 1/(n-1) * (range), so beta_hat(20) < beta_hat(5)
    algo = MeanAggregator()
    r5 = bounds.empirical_stability_probe(algo, _stat_task, n=5, trials=4, seed=1)
    r20 = bounds.empirical_stability_probe(algo, _stat_task, n=20, trials=4, seed=1)
    assert r5.beta_hat > r20.beta_hat
    assert r5.beta_hat <= 1.0 / (5 - 1) + 1e-12
    assert r20.beta_hat <= 1.0 / (20 - 1) + 1e-12


def test_replacement_variant_also_bounded():
    algo = MeanAggregator()
    r = bounds.empirical_stability_probe(
        algo, _stat_task, n=10, trials=3, seed=2, variant="replacement"
    )
    assert 0.0 <= r.beta_hat <= 1.0 / 10 + 1e-12  # replacement moves mean by <= 1/n


class FlakyAlgorithm:
    def __init__(self):
        self.calls = 0

    def train(self, tasks, seed):
        self.calls += 1
        return self.calls  # changes between identical calls

    def task_loss(self, model, task):
        return float(model)


def test_probe_aborts_on_nondeterministic_algorithm():
    with pytest.raises(NumericError):
        bounds.empirical_stability_probe(FlakyAlgorithm(), _stat_task, n=3, trials=1, seed=0)


def test_bound_check_vacuous_and_tight_cases():
    assert bounds.bound_check(0.3, 1e9, 0.9).passed
    assert bounds.bound_check(0.5, 0.0, 0.5).passed
    assert not bounds.bound_check(0.5, 0.1, 0.7).passed


def test_bound_check_monte_carlo_pass_rate():
    # mean-aggregator family: bound with probed beta and M=1 at delta=0.05
    # should hold in at least 95 of 100 independent tiny runs (probabilistic)
    algo = MeanAggregator()
    n = 8
    passes = 0
    runs = 100
    for run in range(runs):
        rng = np.random.default_rng(np.random.SeedSequence([run, 3]))
        tasks = [_stat_task(rng) for _ in range(n)]
        model = algo.train(tasks, 0)
        empirical = float(np.mean([algo.task_loss(model, t) for t in tasks]))
        fresh = [_stat_task(rng) for _ in range(200)]
        generalization = float(np.mean([algo.task_loss(model, t) for t in fresh]))
        probe = bounds.empirical_stability_probe(
            algo, _stat_task, n=n, trials=2, seed=run
        )
        eps = bounds.stability_epsilon(n, probe.beta_hat, 1.0, 0.05)
        passes += bounds.bound_check(empirical, eps, generalization).passed
    assert passes >= 95
