"""Optimization-based meta-discovery: bilevel training on pairwise
pseudo-labels, then cluster readout on unlabeled observations.

The inner task never touches labels: it builds ranking-statistics
pseudo-labels from embeddings and minimizes the pair BCE. The meta update
differentiates through the inner adaptation (second-order by default; the
first-order shortcut is available and flagged in every result).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nets, pairsim
from .data import ObservationSet
from .errors import ConfigError, NumericError


DISCOVERY_ADAPT_STEPS = 150
DISCOVERY_ADAPT_RATE = 0.5


@dataclass(frozen=True)
class MamlConfig:
    inner_rate: float = 0.001  # alpha
    meta_rate: float = 0.4  # eta
    inner_steps: int = 10
    meta_batch: int = 16
    order: str = "second"
    topk: int | None = None  # ranking-statistics width; None -> default rule
    episodes: int = 1000
    finetune_every: int = 200
    finetune_with_novel: bool = False
    way: int = 5
    support_per_class: int = 1
    query_per_class: int = 5

    def __post_init__(self):
        if self.inner_rate < 0 or self.meta_rate <= 0:
            raise ConfigError("rates must be positive (inner_rate may be zero)")
        if self.inner_steps < 1:
            raise ConfigError("inner_steps must be at least 1")
        if self.order not in ("second", "first"):
            raise ConfigError(f"unknown order mode {self.order!r}")
        if self.meta_batch < 1:
            raise ConfigError("meta_batch must be positive")


@dataclass
class MamlState:
    model: nets.ModelConfig
    params: nets.ParameterVector
    config: MamlConfig

    def topk(self):
        k = self.config.topk
        return pairsim.default_topk(self.model.embed_dim) if k is None else k


def init_maml_state(model_config, maml_config, seed):
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 271]))
    params = nets.init_params(model_config, rng)
    return MamlState(model=model_config, params=params, config=maml_config)


def _pair_loss_builder(state, features):
    """Pair BCE over current-parameter pseudo-labels for one feature batch.

    Pseudo-labels are recomputed from the embeddings each time the builder
    runs (they follow the adapted parameters) and enter the loss as
    constants, matching their role as discrete targets.
    """
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if X.shape[0] < 2:
        raise ConfigError("pairwise loss needs at least two examples")
    topk = state.topk()

    def builder(params):
        z = nets.embed_tensors(state.model, params, ad.Tensor(X))
        labels = pairsim.ranking_similarity(z.data, topk).s
        probs = nets.head_prob_tensors(state.model, params, z)
        scores = pairsim.pair_scores_tensors(probs)
        return pairsim.pair_bce_tensors(scores, labels)

    return builder


def inner_adapt(state, support_features, steps=None, rate=None):
    """Gradient-descent adaptation on unlabeled support features.

    Returns the adapted ParameterVector. No label channel exists on this
    path; pseudo-labels come from ranking statistics alone.
    """
    if isinstance(support_features, ObservationSet):
        support_features = support_features.features
    steps = state.config.inner_steps if steps is None else steps
    rate = state.config.inner_rate if rate is None else rate
    builder = _pair_loss_builder(state, support_features)
    return nets.adapt_params(builder, state.params, rate, steps)


def episode_inner_loss(state, features, params=None):
    """Current pair BCE value on a feature batch (diagnostics)."""
    builder = _pair_loss_builder(state, features)
    tensors = nets.params_to_tensors(
        state.params if params is None else params, requires_grad=False
    )
    with ad.no_grad():
        return float(builder(tensors).data)


def meta_step(state, episodes):
    """One meta update over a batch of episodes.

    Inner adaptation runs on each episode's support features; the outer
    loss is the same pairwise construction on the query features under the
    adapted parameters. The meta gradient is averaged over the batch and
    applied at the meta rate. Returns (new_state, mean outer loss).
    """
    if not episodes:
        raise ConfigError("meta_step needs a nonempty episode batch")
    cfg = state.config
    total = np.zeros_like(state.params.values)
    outer_losses = []
    for idx, ep in enumerate(episodes):
        inner_builder = _pair_loss_builder(state, ep.support_matrix())
        outer_builder = _pair_loss_builder(state, ep.query_matrix())
        try:
            g, info = nets.gradient_through_adaptation(
                outer_builder,
                inner_builder,
                state.params,
                alpha=cfg.inner_rate,
                inner_steps=cfg.inner_steps,
                order=cfg.order,
            )
        except NumericError as exc:
            raise NumericError(f"episode {idx}: {exc}") from exc
        total += g.values
        outer_losses.append(info["meta_loss"])
    mean_grad = total / len(episodes)
    new_params = nets.ParameterVector(
        state.params.values - cfg.meta_rate * mean_grad, state.params.layout
    )
    new_state = MamlState(model=state.model, params=new_params, config=cfg)
    return new_state, float(np.mean(outer_losses))


def train_medi_maml(split, sampler, config, model_config, seed):
    """Meta-train over CATA-sampled episodes until the episode budget ends.

    ``sampler(way, m, k, rng) -> Episode`` supplies inner tasks. The
    optional finetune hook adapts the running parameters on the novel
    observation set after every ``finetune_every`` consumed episodes.

    Returns (state, trace, flags): per-meta-step outer losses plus run
    flags (order mode, whether any episode used the sampler fallback, and
    whether the finetune hook fired).
    """
    state = init_maml_state(model_config, config, seed)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 733]))
    trace = []
    flags = {"order_mode": config.order, "fallback_used": False, "finetuned": False}

    consumed = 0
    next_finetune = config.finetune_every
    while consumed < config.episodes:
        batch_size = min(config.meta_batch, config.episodes - consumed)
        batch = []
        for _ in range(batch_size):
            ep = sampler(config.way, config.support_per_class, config.query_per_class, rng)
            if ep.fallback:
                flags["fallback_used"] = True
            batch.append(ep)
        state, outer = meta_step(state, batch)
        trace.append(outer)
        consumed += batch_size

        if config.finetune_with_novel and consumed >= next_finetune:
            obs = split.novel_observations
            if len(obs) >= 2:
                adapted = inner_adapt(state, obs.features)
                state = MamlState(model=state.model, params=adapted, config=config)
                flags["finetuned"] = True
            next_finetune += config.finetune_every
    return state, trace, flags


@dataclass
class MamlClusterer:
    """Adapted discovery model: assigns cluster ids to feature batches."""

    model: nets.ModelConfig
    params: nets.ParameterVector
    mode: str = "argmax"
    link_threshold: float = 0.5
    _fit_features: np.ndarray | None = None
    _fit_clusters: np.ndarray | None = None

    def assign(self, features):
        X = np.atleast_2d(np.asarray(features, dtype=np.float64))
        if self.mode == "argmax":
            z = nets.forward_embed(self.model, self.params, X)
            probs = nets.head_output(self.model, self.params, z)
            return np.argmax(probs, axis=1)
        # link mode: nearest fitted observation's cluster by pair score
        zq = nets.forward_embed(self.model, self.params, X)
        pq = nets.head_output(self.model, self.params, zq)
        zf = nets.forward_embed(self.model, self.params, self._fit_features)
        pf = nets.head_output(self.model, self.params, zf)
        scores = pq @ pf.T
        return self._fit_clusters[np.argmax(scores, axis=1)]


def discover_clusters_maml(state, observations, num_clusters, seed, mode="argmax",
                           adapt_steps=None, adapt_rate=None, reuse_head=False):
    """Discover clusters among unlabeled observations.

    A fresh head of width ``num_clusters`` replaces the training head (the
    meta-trained body carries over), the combined model adapts on the
    observations with the usual pseudo-label inner loss, and each
    observation lands in the argmax cluster of the head output. ``mode=
    "link"`` instead merges observations through pair-score agglomeration.
    When the requested cluster count matches the training head width,
    ``reuse_head`` keeps the trained head instead of re-initializing.

    Discovery defaults to a longer, hotter adaptation than the training
    inner loop: a fresh readout head starts uniform and needs saturated
    pair scores before the argmax is meaningful.

    Returns (ClusterAssignment, MamlClusterer).
    """
    from .metrics import ClusterAssignment  # local import, no cycle at module load

    if isinstance(observations, ObservationSet):
        ids, X = observations.ids, observations.features
    else:
        X = np.atleast_2d(np.asarray(observations, dtype=np.float64))
        ids = np.arange(len(X))
    if len(X) < 2:
        raise ConfigError("discovery needs at least two observations (no pairs exist)")
    if num_clusters < 1:
        raise ConfigError("num_clusters must be positive")

    head_config = state.model.with_head_width(num_clusters)
    if reuse_head:
        if num_clusters != state.model.head_width:
            raise ConfigError(
                f"reuse_head needs num_clusters == trained head width "
                f"({state.model.head_width}), got {num_clusters}"
            )
        params = state.params.copy()
    else:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 547]))
        arrays = state.params.to_dict()
        arrays.update(nets.init_head_params(head_config, rng))
        params = nets.ParameterVector.from_dict(
            arrays, order=[n for n, _ in state.params.layout]
        )
    work_state = MamlState(
        model=head_config, params=params, config=state.config
    )
    if adapt_steps is None:
        adapt_steps = DISCOVERY_ADAPT_STEPS
    if adapt_rate is None:
        adapt_rate = DISCOVERY_ADAPT_RATE
    adapted = inner_adapt(work_state, X, steps=adapt_steps, rate=adapt_rate)

    if mode == "argmax":
        z = nets.forward_embed(head_config, adapted, X)
        probs = nets.head_output(head_config, adapted, z)
        labels = np.argmax(probs, axis=1)
    elif mode == "link":
        labels = _link_clusters(head_config, adapted, X, num_clusters)
    else:
        raise ConfigError(f"unknown discovery mode {mode!r}")

    clusterer = MamlClusterer(
        model=head_config,
        params=adapted,
        mode=mode,
        _fit_features=X,
        _fit_clusters=labels,
    )
    assignment = ClusterAssignment(
        ids=np.asarray(ids), labels=labels, num_clusters=num_clusters
    )
    return assignment, clusterer


def _link_clusters(model_config, params, X, num_clusters):
    """Average-linkage agglomeration on pair scores down to num_clusters."""
    z = nets.forward_embed(model_config, params, X)
    probs = nets.head_output(model_config, params, z)
    sim = probs @ probs.T
    n = len(X)
    clusters = {i: [i] for i in range(n)}
    while len(clusters) > num_clusters:
        keys = sorted(clusters)
        best = None
        for a_pos, a in enumerate(keys):
            for b in keys[a_pos + 1 :]:
                s = float(np.mean(sim[np.ix_(clusters[a], clusters[b])]))
                if best is None or s > best[0]:
                    best = (s, a, b)
        _, a, b = best
        clusters[a] = clusters[a] + clusters.pop(b)
    labels = np.empty(n, dtype=np.int64)
    for new_id, key in enumerate(sorted(clusters)):
        labels[np.asarray(clusters[key])] = new_id
    return labels
