"""Permutation-invariant clustering evaluation and the k-means baseline.

Accuracy is the best agreement over injective mappings from cluster
indices to ground-truth labels, computed exactly with an optimal
assignment on the (zero-padded) contingency matrix.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import kernels
from .data import ObservationSet
from .errors import ConfigError

EXACT_MODE_LIMIT = 20


@dataclass
class ClusterAssignment:
    ids: np.ndarray
    labels: np.ndarray  # cluster index per observation
    num_clusters: int

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.ids.shape != self.labels.shape:
            raise ConfigError("assignment ids and labels disagree in length")
        if self.labels.size and (
            self.labels.min() < 0 or self.labels.max() >= self.num_clusters
        ):
            raise ConfigError(
                f"cluster indices must lie in [0, {self.num_clusters})"
            )

    def __len__(self):
        return len(self.ids)


def clustering_accuracy(pred, truth_ids, truth_labels):
    """Best-mapping agreement between predicted clusters and true labels.

    Exact for up to EXACT_MODE_LIMIT clusters/classes per side.
    """
    truth_ids = np.asarray(truth_ids, dtype=np.int64)
    truth_labels = np.asarray(truth_labels, dtype=np.int64)
    if truth_ids.shape != truth_labels.shape:
        raise ConfigError("truth ids and labels disagree in length")
    if len(pred) != len(truth_ids):
        raise ConfigError(
            f"prediction covers {len(pred)} observations, truth {len(truth_ids)}"
        )
    if sorted(pred.ids.tolist()) != sorted(truth_ids.tolist()):
        raise ConfigError("prediction and truth cover different observation ids")

    order = {int(i): pos for pos, i in enumerate(truth_ids)}
    aligned_truth = np.asarray([truth_labels[order[int(i)]] for i in pred.ids])

    classes = np.unique(aligned_truth)
    n_clusters = pred.num_clusters
    if n_clusters > EXACT_MODE_LIMIT or len(classes) > EXACT_MODE_LIMIT:
        raise ConfigError(
            f"exact mode supports up to {EXACT_MODE_LIMIT} clusters/classes"
        )
    class_pos = {int(c): j for j, c in enumerate(classes)}

    side = max(n_clusters, len(classes))
    table = np.zeros((side, side))
    for cl, lab in zip(pred.labels, aligned_truth):
        table[cl, class_pos[int(lab)]] += 1
    rows, cols = linear_sum_assignment(-table)
    return float(table[rows, cols].sum() / len(pred))


# ---------------------------------------------------------------------------
# k-means baseline
# ---------------------------------------------------------------------------

@dataclass
class KMeansModel:
    centroids: np.ndarray
    inertia: float

    def assign(self, features):
        X = np.atleast_2d(np.asarray(features, dtype=np.float64))
        d2 = ((X[:, None, :] - self.centroids[None, :, :]) ** 2).sum(axis=2)
        return np.argmin(d2, axis=1)


def fit_kmeans(features, num_clusters, seed, restarts=10, max_iter=300):
    """Seeded Lloyd iterations, best of ``restarts`` by inertia.

    Ties keep the lowest restart index, so runs replay identically.
    """
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    n = len(X)
    if num_clusters > n:
        raise ConfigError(f"k-means needs at least {num_clusters} points, got {n}")
    if num_clusters < 1:
        raise ConfigError("num_clusters must be positive")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 17]))
    best = None
    for r in range(restarts):
        init = X[rng.choice(n, size=num_clusters, replace=False)]
        labels, centroids, inertia, _ = kernels.lloyd(X, init, max_iter)
        if best is None or inertia < best[0] - 1e-12:
            best = (inertia, labels, centroids)
    inertia, labels, centroids = best
    return labels, KMeansModel(centroids=centroids, inertia=inertia)


def kmeans_baseline(observations, num_clusters, seed, restarts=10, max_iter=300):
    """Cluster the observations themselves; returns (assignment, model)."""
    if isinstance(observations, ObservationSet):
        ids, X = observations.ids, observations.features
    else:
        X = np.atleast_2d(np.asarray(observations, dtype=np.float64))
        ids = np.arange(len(X))
    if num_clusters == len(X):
        # degenerate but well-defined: every point is its own cluster
        labels = np.arange(len(X))
        model = KMeansModel(centroids=X.copy(), inertia=0.0)
    else:
        labels, model = fit_kmeans(X, num_clusters, seed, restarts, max_iter)
    assignment = ClusterAssignment(ids=np.asarray(ids), labels=labels,
                                   num_clusters=num_clusters)
    return assignment, model


# ---------------------------------------------------------------------------
# evaluation protocol
# ---------------------------------------------------------------------------

@dataclass
class ProtocolSummary:
    method: str
    way: int
    obsv: int
    trials: int
    accs: list
    seeds: list
    mean: float
    std: float
    wall_time: float
    records: list = field(default_factory=list)


def run_protocol(method, split, way, obsv, trials, master_seed,
                 eval_per_class=15, group_mode="per_group"):
    """Evaluate a discovery method over fresh sealed novel episodes.

    ``method`` exposes ``name`` and ``fit(observations, num_clusters, seed)
    -> clusterer`` where the clusterer has ``assign(features) -> labels``.
    Each trial draws ``obsv`` fit observations and ``eval_per_class`` fresh
    evaluation points per class; accuracy is scored on the evaluation
    points under the best cluster-to-class mapping.

    With grouped novel classes (alphabet-style splits), trials rotate
    through the groups unless ``group_mode="joint"`` pools all of them.
    """
    if trials < 1:
        raise ConfigError("trials must be positive")
    groups = list(split.novel_groups.items()) if split.novel_groups else []
    use_groups = bool(groups) and group_mode == "per_group"
    if group_mode not in ("per_group", "joint"):
        raise ConfigError(f"unknown group_mode {group_mode!r}")

    accs, seeds, records = [], [], []
    start = time.time()
    for t in range(trials):
        trial_seed = int(
            np.random.SeedSequence([int(master_seed), 59, t]).generate_state(1)[0]
        )
        rng = np.random.default_rng(np.random.SeedSequence([int(master_seed), 61, t]))
        classes = None
        group_name = None
        if use_groups:
            group_name, group_classes = groups[t % len(groups)]
            classes = group_classes
        episode = split.draw_novel_episode(
            way=way, obsv=obsv, eval_per_class=eval_per_class, rng=rng,
            classes=classes,
        )
        clusterer = method.fit(episode.fit, way, trial_seed)
        eval_labels = clusterer.assign(episode.eval.features)
        pred = ClusterAssignment(
            ids=episode.eval.ids, labels=eval_labels, num_clusters=way
        )
        acc = clustering_accuracy(pred, episode.eval.ids, episode.eval_labels)
        accs.append(acc)
        seeds.append(trial_seed)
        records.append(
            {
                "trial": t,
                "seed": trial_seed,
                "acc": acc,
                "group": group_name,
                "classes": [int(c) for c in episode.classes],
            }
        )
    accs_arr = np.asarray(accs)
    return ProtocolSummary(
        method=method.name,
        way=way,
        obsv=obsv,
        trials=trials,
        accs=[float(a) for a in accs],
        seeds=seeds,
        mean=float(accs_arr.mean()),
        std=float(accs_arr.std()),
        wall_time=time.time() - start,
        records=records,
    )


# ---------------------------------------------------------------------------
# discovery-method adapters
# ---------------------------------------------------------------------------

class KMeansMethod:
    """Raw-feature k-means: fit centroids on the observations, assign
    evaluation points to the nearest centroid."""

    name = "kmeans"

    def __init__(self, restarts=10, max_iter=300):
        self.restarts = restarts
        self.max_iter = max_iter

    def fit(self, observations, num_clusters, seed):
        _, model = kmeans_baseline(
            observations, num_clusters, seed, self.restarts, self.max_iter
        )
        return model


class ProtoMethod:
    """Prototype discovery on a trained embedding model."""

    name = "medi_pro"

    def __init__(self, model_config, params, restarts=10, balanced=False):
        self.model_config = model_config
        self.params = params
        self.restarts = restarts
        self.balanced = balanced

    def fit(self, observations, num_clusters, seed):
        from .proto import discover_clusters_proto

        _, clusterer = discover_clusters_proto(
            self.model_config,
            self.params,
            observations,
            num_clusters,
            seed,
            restarts=self.restarts,
            balanced=self.balanced,
        )
        return clusterer


class MamlMethod:
    """Adaptation-based discovery on a meta-trained state."""

    name = "medi_maml"

    def __init__(self, state, mode="argmax", adapt_steps=None):
        self.state = state
        self.mode = mode
        self.adapt_steps = adapt_steps

    def fit(self, observations, num_clusters, seed):
        from .maml import discover_clusters_maml

        _, clusterer = discover_clusters_maml(
            self.state, observations, num_clusters, seed,
            mode=self.mode, adapt_steps=self.adapt_steps,
        )
        return clusterer
