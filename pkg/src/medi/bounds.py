"""Uniform-stability generalization bound and an empirical stability probe.

The bound's slack is eps(n, beta) = 2*beta + (4*n*beta + M) * sqrt(log(1/delta) / (2n)).
The probe estimates beta by retraining a meta-algorithm on leave-one-task-out
(or replace-one-task) variants of its task sample and measuring the largest
held-out loss deviation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NumericError


def stability_epsilon(n, beta, M, delta):
    """Generalization slack for n tasks at stability beta, loss bound M."""
    if not 0.0 < delta < 1.0:
        raise ConfigError(f"delta must lie in (0, 1), got {delta}")
    if n < 1:
        raise ConfigError("n must be at least 1")
    if beta < 0:
        raise ConfigError("beta must be nonnegative")
    if M < 0:
        raise ConfigError("M must be nonnegative")
    return 2.0 * beta + (4.0 * n * beta + M) * math.sqrt(
        math.log(1.0 / delta) / (2.0 * n)
    )


@dataclass(frozen=True)
class StabilityBoundSpec:
    n: int
    beta: float
    M: float
    delta: float

    def __post_init__(self):
        stability_epsilon(self.n, self.beta, self.M, self.delta)  # validates

    @property
    def epsilon(self):
        return stability_epsilon(self.n, self.beta, self.M, self.delta)


def empirical_multitask_error(per_task_query_losses):
    """Average over tasks of the per-task mean query loss."""
    tasks = [np.asarray(t, dtype=np.float64) for t in per_task_query_losses]
    if not tasks:
        raise ConfigError("need at least one task")
    if any(t.size == 0 for t in tasks):
        raise ConfigError("every task needs at least one query loss")
    return float(np.mean([t.mean() for t in tasks]))


@dataclass
class ProbeResult:
    beta_hat: float
    variant: str
    n: int
    trials: int
    deviations: list = field(default_factory=list)


def empirical_stability_probe(meta_algorithm, task_generator, n, trials, seed,
                              variant="deletion"):
    """Estimate uniform stability by leave-one-out retraining.

    ``meta_algorithm`` exposes ``train(tasks, seed) -> model`` and
    ``task_loss(model, task) -> float``; ``task_generator(rng) -> task``
    draws i.i.d. tasks. Per trial: train on n tasks, then for every index i
    retrain on the sample with task i deleted (or replaced by a fresh draw)
    and record |held-out loss difference| on a fresh test task. beta_hat is
    the maximum deviation observed.

    The algorithm must be deterministic per seed; the probe verifies this
    by retraining once and aborts otherwise.
    """
    if variant not in ("deletion", "replacement"):
        raise ConfigError(f"unknown probe variant {variant!r}")
    if n < 2:
        raise ConfigError("probe needs at least two tasks")
    if trials < 1:
        raise ConfigError("trials must be positive")

    deviations = []
    for t in range(trials):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 83, t]))
        tasks = [task_generator(rng) for _ in range(n)]
        test_task = task_generator(rng)
        train_seed = int(np.random.SeedSequence([int(seed), 89, t]).generate_state(1)[0])

        base_model = meta_algorithm.train(tasks, train_seed)
        base_loss = float(meta_algorithm.task_loss(base_model, test_task))
        recheck = meta_algorithm.train(tasks, train_seed)
        recheck_loss = float(meta_algorithm.task_loss(recheck, test_task))
        if recheck_loss != base_loss:
            raise NumericError(
                "meta-algorithm is not deterministic under a fixed seed; "
                "stability probe is invalid"
            )

        for i in range(n):
            if variant == "deletion":
                variant_tasks = tasks[:i] + tasks[i + 1 :]
            else:
                variant_tasks = list(tasks)
                variant_tasks[i] = task_generator(rng)
            model_i = meta_algorithm.train(variant_tasks, train_seed)
            loss_i = float(meta_algorithm.task_loss(model_i, test_task))
            deviations.append(abs(base_loss - loss_i))
    return ProbeResult(
        beta_hat=float(max(deviations)),
        variant=variant,
        n=n,
        trials=trials,
        deviations=deviations,
    )


@dataclass
class BoundCheckRecord:
    empirical_error: float
    epsilon: float
    generalization_estimate: float
    passed: bool
    slack: float


def bound_check(empirical_error, epsilon, generalization_estimate):
    """Record whether the estimate respects empirical error + slack."""
    slack = empirical_error + epsilon - generalization_estimate
    return BoundCheckRecord(
        empirical_error=float(empirical_error),
        epsilon=float(epsilon),
        generalization_estimate=float(generalization_estimate),
        passed=bool(slack >= 0.0),
        slack=float(slack),
    )
