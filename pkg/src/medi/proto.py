"""Metric-based meta-discovery: episodic prototype training and
prototype-based cluster readout.

Per-class prototypes are mean embeddings; class posteriors are a softmax
over negative Euclidean distances to the prototypes; training minimizes the
negative log-posterior of query points under prototypes built from their
episode's support points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nets
from .data import ObservationSet
from .errors import ConfigError, NumericError

_DIST_EPS = 1e-24  # keeps sqrt differentiable when a query equals a prototype


@dataclass(frozen=True)
class ProtoConfig:
    rate: float = 0.001
    steps: int = 200
    tasks: int = 1000
    halve_every: int = 20
    num_sampled_classes: int = 5  # classes drawn from each episode's way
    way: int = 5
    support_per_class: int = 5
    query_per_class: int = 5
    optimizer: str = "adam"
    squared_distance: bool = False
    resample_small_episodes: bool = True

    def __post_init__(self):
        if self.rate <= 0:
            raise ConfigError("learning rate must be positive")
        if self.steps < 0 or self.tasks < 0:
            raise ConfigError("steps and tasks must be nonnegative")
        if self.optimizer not in ("adam", "gd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.num_sampled_classes < 1:
            raise ConfigError("num_sampled_classes must be positive")


@dataclass
class PrototypeSet:
    prototypes: dict  # id -> vector in embedding space
    counts: dict  # id -> contributing sample count

    def __post_init__(self):
        for key, vec in self.prototypes.items():
            if not np.isfinite(vec).all():
                raise NumericError(f"prototype {key} is non-finite")
            if self.counts.get(key, 0) < 1:
                raise ConfigError(f"prototype {key} has no contributing samples")

    def ordered(self):
        keys = sorted(self.prototypes)
        return keys, np.stack([self.prototypes[k] for k in keys])


def compute_prototypes(model_config, params, groups):
    """Mean embedding per group; errors name any empty group."""
    prototypes, counts = {}, {}
    for key, feats in groups.items():
        feats = np.atleast_2d(np.asarray(feats, dtype=np.float64))
        if feats.shape[0] == 0:
            raise ConfigError(f"group {key!r} is empty")
        z = nets.forward_embed(model_config, params, feats)
        prototypes[key] = z.mean(axis=0)
        counts[key] = int(feats.shape[0])
    return PrototypeSet(prototypes=prototypes, counts=counts)


def _distances(z, protos, squared):
    d2 = ((z[:, None, :] - protos[None, :, :]) ** 2).sum(axis=2)
    return d2 if squared else np.sqrt(d2 + _DIST_EPS)


def class_posterior(model_config, params, prototypes, x, squared=False):
    """Softmax over negative distances to the prototypes.

    Returns (ordered prototype ids, probability rows).
    """
    keys, protos = prototypes.ordered()
    X = np.atleast_2d(np.asarray(x, dtype=np.float64))
    z = nets.forward_embed(model_config, params, X)
    d = _distances(z, protos, squared)
    logits = -d
    logits = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return keys, e / e.sum(axis=1, keepdims=True)


def proto_loss_tensors(model_config, params, support_groups, query_groups,
                       squared=False):
    """Differentiable episode loss: mean negative log-posterior of query
    points, normalized by the per-class query count."""
    keys = sorted(support_groups)
    if sorted(query_groups) != keys:
        raise ConfigError("support and query must cover the same classes")
    protos = []
    for key in keys:
        feats = np.atleast_2d(np.asarray(support_groups[key], dtype=np.float64))
        if feats.shape[0] == 0:
            raise ConfigError(f"group {key!r} is empty")
        z = nets.embed_tensors(model_config, params, ad.Tensor(feats))
        protos.append(ad.tmean(z, axis=0, keepdims=True))

    query_counts = [np.atleast_2d(query_groups[k]).shape[0] for k in keys]
    if min(query_counts) == 0:
        raise ConfigError("query groups must be nonempty")
    k_per_class = query_counts[0]

    total = ad.Tensor(0.0)
    for qi, key in enumerate(keys):
        feats = np.atleast_2d(np.asarray(query_groups[key], dtype=np.float64))
        zq = nets.embed_tensors(model_config, params, ad.Tensor(feats))
        dist_cols = []
        for proto in protos:
            diff = ad.sub(zq, proto)
            d2 = ad.tsum(ad.mul(diff, diff), axis=1, keepdims=True)
            dist_cols.append(d2 if squared else ad.sqrt(ad.add(d2, ad.Tensor(_DIST_EPS))))
        # stack columns via concatenation-free trick: build (n, C) matrix
        onehots = np.eye(len(keys))
        logits = None
        for ci, dcol in enumerate(dist_cols):
            contrib = ad.matmul(ad.neg(dcol), ad.Tensor(onehots[ci : ci + 1]))
            logits = contrib if logits is None else ad.add(logits, contrib)
        logp = ad.log_softmax(logits, axis=1)
        picked = ad.mul(logp, ad.Tensor(np.repeat(onehots[qi : qi + 1], feats.shape[0], axis=0)))
        total = ad.add(total, ad.neg(ad.tsum(picked)))
    return ad.div(total, ad.Tensor(float(k_per_class)))


def proto_episode_loss(model_config, params, support_groups, query_groups,
                       squared=False):
    """Scalar value of the episode loss."""
    tensors = nets.params_to_tensors(params, requires_grad=False)
    with ad.no_grad():
        out = proto_loss_tensors(
            model_config, tensors, support_groups, query_groups, squared
        )
    value = float(out.data)
    if not np.isfinite(value):
        raise NumericError("episode loss is non-finite")
    return value


def _episode_groups(episode, class_subset):
    support = {}
    query = {}
    for row, cls in enumerate(episode.classes):
        if int(cls) in class_subset:
            support[int(cls)] = episode.support_features[row]
            query[int(cls)] = episode.query_features[row]
    return support, query


def train_medi_pro(split, sampler, config, model_config, seed):
    """Episodic prototype training.

    Tasks are spread uniformly over the optimizer steps; each step averages
    the episode loss over its share of tasks and applies one update. The
    learning rate halves every ``halve_every`` steps. Within an episode,
    ``num_sampled_classes`` of its classes are drawn uniformly without
    replacement.

    Returns (params, trace).
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 389]))
    params = nets.init_params(model_config, np.random.default_rng(
        np.random.SeedSequence([int(seed), 397])
    ))
    if config.steps == 0 or config.tasks == 0:
        return params, []

    per_step = [config.tasks // config.steps] * config.steps
    for i in range(config.tasks % config.steps):
        per_step[i] += 1

    opt = nets.Adam(params.size, config.rate) if config.optimizer == "adam" else None
    trace = []
    for step, n_tasks in enumerate(per_step):
        if n_tasks == 0:
            continue
        rate = config.rate * (0.5 ** (step // config.halve_every))
        grads = np.zeros_like(params.values)
        losses = []
        for _ in range(n_tasks):
            episode = sampler(
                config.way, config.support_per_class, config.query_per_class, rng
            )
            attempts = 0
            while episode.way < config.num_sampled_classes:
                if not config.resample_small_episodes or attempts >= 5:
                    raise ConfigError(
                        f"episode offers {episode.way} classes, "
                        f"needs {config.num_sampled_classes}"
                    )
                episode = sampler(
                    config.way, config.support_per_class, config.query_per_class, rng
                )
                attempts += 1
            chosen = rng.choice(
                episode.classes, size=config.num_sampled_classes, replace=False
            )
            support, query = _episode_groups(episode, {int(c) for c in chosen})

            def builder(tensors):
                return proto_loss_tensors(
                    model_config, tensors, support, query, config.squared_distance
                )

            g, loss = nets.gradient(builder, params)
            grads += g.values
            losses.append(loss)
        if not losses:
            continue
        grads /= len(losses)
        if config.optimizer == "adam":
            new_values = opt.step(params.values, grads, rate=rate)
        else:
            new_values = params.values - rate * grads
        params = nets.ParameterVector(new_values, params.layout)
        trace.append(float(np.mean(losses)))
    return params, trace


@dataclass
class ProtoClusterer:
    """Prototype table in embedding space; assigns nearest-prototype ids."""

    model_config: nets.ModelConfig
    params: nets.ParameterVector
    prototypes: np.ndarray  # (num_clusters, embed_dim)

    def assign(self, features):
        X = np.atleast_2d(np.asarray(features, dtype=np.float64))
        z = nets.forward_embed(self.model_config, self.params, X)
        d2 = ((z[:, None, :] - self.prototypes[None, :, :]) ** 2).sum(axis=2)
        return np.argmin(d2, axis=1)


def discover_clusters_proto(model_config, params, observations, num_clusters,
                            seed, restarts=10, balanced=False):
    """Group unlabeled observations around k-means prototypes in embedding
    space, then assign each observation to its nearest prototype.

    Returns (ClusterAssignment, ProtoClusterer).
    """
    from .metrics import ClusterAssignment, fit_kmeans

    if isinstance(observations, ObservationSet):
        ids, X = observations.ids, observations.features
    else:
        X = np.atleast_2d(np.asarray(observations, dtype=np.float64))
        ids = np.arange(len(X))
    if num_clusters > len(X):
        raise ConfigError(
            f"cannot form {num_clusters} clusters from {len(X)} observations"
        )
    z = nets.forward_embed(model_config, params, X)
    if num_clusters == len(X):
        labels = np.arange(len(X))
        centroids = z.copy()
    elif balanced:
        labels, centroids = _balanced_kmeans(z, num_clusters, seed)
    else:
        labels, model = fit_kmeans(z, num_clusters, seed, restarts=restarts)
        centroids = model.centroids
    clusterer = ProtoClusterer(
        model_config=model_config, params=params, prototypes=centroids
    )
    assignment = ClusterAssignment(
        ids=np.asarray(ids), labels=labels, num_clusters=num_clusters
    )
    return assignment, clusterer


def _balanced_kmeans(z, num_clusters, seed, rounds=20):
    """Capacity-constrained Lloyd variant: greedy assignment with per-cluster
    capacity ceil(n / num_clusters), prioritized by assignment margin."""
    n = len(z)
    if num_clusters == 1:
        return np.zeros(n, dtype=np.int64), z.mean(axis=0, keepdims=True)
    cap = int(np.ceil(n / num_clusters))
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 23]))
    centroids = z[rng.choice(n, size=num_clusters, replace=False)].copy()
    labels = np.zeros(n, dtype=np.int64)
    for _ in range(rounds):
        d2 = ((z[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        margin = np.partition(d2, 1, axis=1)[:, 1] - d2.min(axis=1)
        order = np.argsort(-margin)
        counts = np.zeros(num_clusters, dtype=np.int64)
        new_labels = np.empty(n, dtype=np.int64)
        for i in order:
            for c in np.argsort(d2[i]):
                if counts[c] < cap:
                    new_labels[i] = c
                    counts[c] += 1
                    break
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(num_clusters):
            members = labels == c
            if members.any():
                centroids[c] = z[members].mean(axis=0)
    return labels, centroids
