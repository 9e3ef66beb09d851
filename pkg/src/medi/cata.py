"""Clustering-rule-aware task sampler.

A shared extractor feeds several classifier heads whose first-layer weights
are pushed toward mutual orthogonality, so each head settles on a different
way of grouping the data. Examples then vote themselves into the view whose
head is most confident on their true label, and episodes are drawn inside a
single view with probability proportional to view size.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from . import nets
from .data import make_episode
from .errors import CataInfeasibleError, ConfigError, NumericError


@dataclass(frozen=True)
class CataConfig:
    num_views: int = 3
    tradeoff: float = 1.0 / 3.0
    steps: int = 50
    extractor_rate: float = 0.01
    head_rate: float = 0.001
    extractor_dims: tuple = ()  # hidden dims of the extractor MLP
    shared_dim: int = 32  # extractor output width
    head_hidden: int = 32  # width of each head's two hidden dense layers
    optimizer: str = "gd"  # "gd" follows the plain update; "adam" is optional

    def __post_init__(self):
        if self.num_views < 2:
            raise ConfigError(
                "num_views must be at least 2 (orthogonality penalty is "
                "undefined for a single view)"
            )
        if self.tradeoff < 0:
            raise ConfigError("tradeoff must be nonnegative")
        if self.optimizer not in ("gd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class MultiViewSamplerModel:
    config: CataConfig
    input_dim: int
    class_ids: np.ndarray  # known class id per head-output column
    extractor_params: nets.ParameterVector
    head_params: list  # one ParameterVector per view

    @property
    def num_views(self):
        return self.config.num_views

    def first_layer_weights(self):
        """Flattened first-dense-layer weight vector of each head."""
        return [hp.to_dict()["h0.w"].ravel() for hp in self.head_params]

    def class_index(self, labels):
        lookup = {int(c): i for i, c in enumerate(self.class_ids)}
        try:
            return np.asarray([lookup[int(y)] for y in labels], dtype=np.int64)
        except KeyError as exc:
            raise ConfigError(f"label {exc} outside the known classes") from exc


@dataclass
class ViewPartition:
    assignment: dict  # example id -> view index
    sizes: np.ndarray  # per-view counts

    def __post_init__(self):
        self.sizes = np.asarray(self.sizes, dtype=np.int64)
        if int(self.sizes.sum()) != len(self.assignment):
            raise ConfigError("view sizes must sum to the pool size")

    @property
    def num_views(self):
        return len(self.sizes)


def _extractor_config(config, input_dim):
    return nets.ModelConfig(
        input_dim=input_dim,
        hidden_dims=config.extractor_dims,
        embed_dim=config.shared_dim,
        head_width=2,  # extractor owns no head; width is a placeholder
    )


def _head_layout(config, num_classes):
    return (
        ("h0.w", (config.shared_dim, config.head_hidden)),
        ("h0.b", (config.head_hidden,)),
        ("h1.w", (config.head_hidden, config.head_hidden)),
        ("h1.b", (config.head_hidden,)),
        ("h2.w", (config.head_hidden, num_classes)),
        ("h2.b", (num_classes,)),
    )


def _init_head(config, num_classes, rng):
    arrays = {}
    for name, shape in _head_layout(config, num_classes):
        if name.endswith(".w"):
            bound = 1.0 / np.sqrt(shape[0])
            arrays[name] = rng.uniform(-bound, bound, size=shape)
        else:
            arrays[name] = np.zeros(shape)
    return nets.ParameterVector.from_dict(
        arrays, order=[n for n, _ in _head_layout(config, num_classes)]
    )


def init_sampler_model(config, input_dim, class_ids, seed):
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 101]))
    extractor = nets.init_params(_extractor_config(config, input_dim), rng)
    heads = [
        _init_head(config, len(class_ids), rng) for _ in range(config.num_views)
    ]
    return MultiViewSamplerModel(
        config=config,
        input_dim=input_dim,
        class_ids=np.asarray(sorted(class_ids), dtype=np.int64),
        extractor_params=extractor,
        head_params=heads,
    )


def _head_logits(params, shared):
    # tanh keeps narrow heads trainable everywhere (no dead half-spaces)
    h = ad.tanh(ad.add(ad.matmul(shared, params["h0.w"]), params["h0.b"]))
    h = ad.tanh(ad.add(ad.matmul(h, params["h1.w"]), params["h1.b"]))
    return ad.add(ad.matmul(h, params["h2.w"]), params["h2.b"])


def _sampler_loss_tensors(model, ext_t, head_ts, X, y_index):
    cfg = model.config
    n = X.shape[0]
    onehot = np.zeros((n, len(model.class_ids)))
    onehot[np.arange(n), y_index] = 1.0

    shared = nets.embed_tensors(
        _extractor_config(cfg, model.input_dim), ext_t, ad.Tensor(X)
    )
    ce_total = ad.Tensor(0.0)
    for ht in head_ts:
        logp = ad.log_softmax(_head_logits(ht, shared), axis=1)
        ce_total = ad.add(ce_total, ad.neg(ad.tsum(ad.mul(ad.Tensor(onehot), logp))))
    loss = ad.div(ce_total, ad.Tensor(float(n * cfg.num_views)))

    if cfg.num_views > 1:
        penalty = ad.Tensor(0.0)
        flats = [ad.reshape(ht["h0.w"], (-1,)) for ht in head_ts]
        for i in range(cfg.num_views):
            for j in range(i + 1, cfg.num_views):
                inner = ad.tsum(ad.mul(flats[i], flats[j]))
                penalty = ad.add(penalty, ad.absolute(inner))
        coef = 2.0 * cfg.tradeoff / (cfg.num_views * (cfg.num_views - 1))
        loss = ad.add(loss, ad.mul(ad.Tensor(coef), penalty))
    return loss


def sampler_loss(model, features, labels):
    """Mean cross-entropy over heads plus the weighted orthogonality penalty."""
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if X.shape[0] == 0:
        raise ConfigError("sampler loss needs a nonempty batch")
    y_index = model.class_index(labels)
    ext_t = nets.params_to_tensors(model.extractor_params, requires_grad=False)
    head_ts = [nets.params_to_tensors(hp, requires_grad=False) for hp in model.head_params]
    with ad.no_grad():
        out = _sampler_loss_tensors(model, ext_t, head_ts, X, y_index)
    value = float(out.data)
    if not np.isfinite(value):
        raise NumericError("sampler loss is non-finite")
    return value


def mean_abs_cross_inner(model):
    """Mean |<W_i, W_j>| over unordered head pairs."""
    flats = model.first_layer_weights()
    vals = [
        abs(float(flats[i] @ flats[j]))
        for i in range(len(flats))
        for j in range(i + 1, len(flats))
    ]
    return float(np.mean(vals))


def train_cata(split, config, seed):
    """Train the multi-view sampler on the known pool.

    Full-batch updates: the extractor moves at ``extractor_rate`` and every
    head at ``head_rate``, both from the same loss. Returns the model and
    the per-step loss trace.
    """
    pool = split.known_pool
    if len(pool) == 0:
        raise ConfigError("known pool is empty")
    model = init_sampler_model(config, pool.feature_dim, split.known_classes, seed)
    y_index = model.class_index(pool.labels)
    X = pool.features

    ext_opt = (
        nets.Adam(model.extractor_params.size, config.extractor_rate)
        if config.optimizer == "adam"
        else None
    )
    head_opts = (
        [nets.Adam(hp.size, config.head_rate) for hp in model.head_params]
        if config.optimizer == "adam"
        else None
    )

    trace = []
    for step in range(config.steps):
        ext_t = nets.params_to_tensors(model.extractor_params)
        head_ts = [nets.params_to_tensors(hp) for hp in model.head_params]
        loss = _sampler_loss_tensors(model, ext_t, head_ts, X, y_index)
        if not np.isfinite(loss.data).all():
            raise NumericError(f"sampler loss non-finite at step {step}")
        trace.append(float(loss.data))

        leaves, owners = [], []
        for name in ext_t:
            leaves.append(ext_t[name])
            owners.append(("ext", name))
        for vi, ht in enumerate(head_ts):
            for name in ht:
                leaves.append(ht[name])
                owners.append((vi, name))
        grads = ad.grad(loss, leaves)

        ext_arrays = model.extractor_params.to_dict()
        head_arrays = [hp.to_dict() for hp in model.head_params]
        ext_grad = {}
        head_grads = [dict() for _ in model.head_params]
        for (owner, name), g in zip(owners, grads):
            if owner == "ext":
                ext_grad[name] = g.data
            else:
                head_grads[owner][name] = g.data

        if config.optimizer == "gd":
            for name in ext_arrays:
                ext_arrays[name] = ext_arrays[name] - config.extractor_rate * ext_grad[name]
            for vi in range(config.num_views):
                for name in head_arrays[vi]:
                    head_arrays[vi][name] = (
                        head_arrays[vi][name] - config.head_rate * head_grads[vi][name]
                    )
            model.extractor_params = nets.ParameterVector.from_dict(
                ext_arrays, order=[n for n, _ in model.extractor_params.layout]
            )
            model.head_params = [
                nets.ParameterVector.from_dict(
                    head_arrays[vi], order=[n for n, _ in model.head_params[vi].layout]
                )
                for vi in range(config.num_views)
            ]
        else:
            ext_flat = np.concatenate([ext_grad[n].ravel() for n, _ in model.extractor_params.layout])
            model.extractor_params = nets.ParameterVector(
                ext_opt.step(model.extractor_params.values, ext_flat),
                model.extractor_params.layout,
            )
            for vi in range(config.num_views):
                flat = np.concatenate(
                    [head_grads[vi][n].ravel() for n, _ in model.head_params[vi].layout]
                )
                model.head_params[vi] = nets.ParameterVector(
                    head_opts[vi].step(model.head_params[vi].values, flat),
                    model.head_params[vi].layout,
                )
    return model, trace


def view_probabilities(model, features, labels):
    """P_i(y|x) for each view i: head probability at the true label."""
    X = np.atleast_2d(np.asarray(features, dtype=np.float64))
    y_index = model.class_index(labels)
    ext_t = nets.params_to_tensors(model.extractor_params, requires_grad=False)
    with ad.no_grad():
        shared = nets.embed_tensors(
            _extractor_config(model.config, model.input_dim), ext_t, ad.Tensor(X)
        )
        cols = []
        for hp in model.head_params:
            ht = nets.params_to_tensors(hp, requires_grad=False)
            probs = ad.softmax(_head_logits(ht, shared), axis=1).data
            cols.append(probs[np.arange(len(y_index)), y_index])
    return np.stack(cols, axis=1)  # (N, K)


def assign_views(model, pool):
    """Vote each example into the view most confident on its true label.

    Exact ties resolve to the lowest view index.
    """
    probs = view_probabilities(model, pool.features, pool.labels)
    votes = np.argmax(probs, axis=1)
    sizes = np.bincount(votes, minlength=model.num_views)
    assignment = {int(i): int(v) for i, v in zip(pool.ids, votes)}
    return ViewPartition(assignment=assignment, sizes=sizes)


def view_purity(partition, pool):
    """Best bijective agreement between views and ground-truth rules."""
    if pool.rules is None:
        raise ConfigError("pool carries no ground-truth rules")
    views = np.asarray([partition.assignment[int(i)] for i in pool.ids])
    n_views = partition.num_views
    n_rules = int(pool.rules.max()) + 1
    side = max(n_views, n_rules)
    table = np.zeros((side, side))
    for v, r in zip(views, pool.rules):
        table[v, r] += 1
    rows, cols = linear_sum_assignment(-table)
    return float(table[rows, cols].sum() / len(pool))


def view_dispersion(partition, pool):
    """Mean squared distance of examples to their view centroid.

    A partition that tracks a real clustering rule keeps each view
    feature-coherent, so lower is better. Label-free.
    """
    by_view = {}
    pos = {int(i): p for p, i in enumerate(pool.ids)}
    for ex_id, v in partition.assignment.items():
        by_view.setdefault(v, []).append(pos[ex_id])
    total = 0.0
    for idx in by_view.values():
        X = pool.features[np.asarray(idx)]
        total += float(((X - X.mean(axis=0)) ** 2).sum())
    return total / len(pool)


def train_cata_selected(split, config, seed, max_restarts=32, coherence_ratio=0.35):
    """Best-of-restarts sampler training with a coherence stop rule.

    Each restart trains from a different seeded initialization. A restart
    is accepted as soon as its partition's within-view dispersion drops
    below ``coherence_ratio`` of the pool's total dispersion (views are
    then feature-coherent, the label-free signature of a recovered rule);
    otherwise the lowest-dispersion restart wins. Deterministic per seed.

    Returns (model, partition, info).
    """
    if max_restarts < 1:
        raise ConfigError("max_restarts must be at least 1")
    pool = split.known_pool
    total = float(((pool.features - pool.features.mean(axis=0)) ** 2).sum()) / len(pool)
    threshold = coherence_ratio * total
    best = None
    tried = 0
    for r in range(max_restarts):
        tried += 1
        model, trace = train_cata(split, config, seed=int(seed) * 10_000 + r)
        partition = assign_views(model, pool)
        disp = view_dispersion(partition, pool)
        if best is None or disp < best[0]:
            best = (disp, r, model, partition, trace)
        if disp <= threshold:
            break
    disp, r, model, partition, trace = best
    info = {
        "dispersion": disp,
        "threshold": threshold,
        "restart": r,
        "restarts_run": tried,
        "trace": trace,
    }
    return model, partition, info


def _feasible_views(partition, pool, way, m, k):
    need = m + k
    by_id = {int(i): pos for pos, i in enumerate(pool.ids)}
    members = {v: [] for v in range(partition.num_views)}
    for ex_id, v in partition.assignment.items():
        members[v].append(by_id[ex_id])
    out = {}
    for v, idx in members.items():
        idx = np.asarray(sorted(idx), dtype=np.int64)
        if idx.size:
            counts = np.bincount(pool.labels[idx])
            eligible = int(np.sum(counts >= need))
        else:
            eligible = 0
        out[v] = {
            "size": int(idx.size),
            "eligible_classes": eligible,
            "indices": idx,
            "feasible": eligible >= way,
        }
    return out


def sample_task(partition, pool, way, m, k, rng, fallback=False):
    """Draw an episode from one view, view chosen with probability
    proportional to its size among feasible views.

    With ``fallback`` enabled an infeasible partition degrades to pool-wide
    sampling and the episode is tagged so results stay honest.
    """
    diag = _feasible_views(partition, pool, way, m, k)
    feasible = [v for v, d in diag.items() if d["feasible"]]
    if not feasible:
        if fallback:
            ep = make_episode(pool, way, m, k, rng)
            ep.fallback = True
            return ep
        raise CataInfeasibleError(
            way, m, k,
            {v: {"size": d["size"], "eligible_classes": d["eligible_classes"]}
             for v, d in diag.items()},
        )
    sizes = np.asarray([diag[v]["size"] for v in feasible], dtype=np.float64)
    probs = sizes / sizes.sum()
    view = int(rng.choice(np.asarray(feasible), p=probs))
    sub = pool.subset(diag[view]["indices"])
    ep = make_episode(sub, way, m, k, rng)
    ep.source_view = view
    return ep


def rule_recovery_config(input_dim, num_views=3, tradeoff=1.0 / 3.0):
    """Configuration calibrated for recovering latent rules on block data.

    Width-1 first layers make the orthogonality constraint bite on input
    directions, and tanh keeps narrow heads trainable everywhere.
    """
    return CataConfig(
        num_views=num_views,
        tradeoff=tradeoff,
        steps=400,
        extractor_rate=0.01,
        head_rate=0.003,
        extractor_dims=(),
        shared_dim=input_dim,
        head_hidden=1,
        optimizer="adam",
    )


def save_partition(partition, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for ex_id in sorted(partition.assignment):
            fh.write(f"{ex_id},{partition.assignment[ex_id]}\n")


def load_partition(path):
    assignment = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            ex_id, view = line.split(",")
            assignment[int(ex_id)] = int(view)
    n_views = max(assignment.values()) + 1 if assignment else 0
    sizes = np.zeros(n_views, dtype=np.int64)
    for v in assignment.values():
        sizes[v] += 1
    return ViewPartition(assignment=assignment, sizes=sizes)
