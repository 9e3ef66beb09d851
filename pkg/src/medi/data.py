"""Datasets, known/novel splits, episode construction, synthetic generators.

Novel-class data is sealed: training code only ever receives feature
arrays (``ObservationSet``), while the hidden ground-truth labels stay in
the split's private store and are reachable only through evaluation-side
accessors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InfeasibleError, InsufficientClassError


@dataclass(frozen=True)
class LabeledExample:
    id: int
    features: np.ndarray
    class_label: int


@dataclass
class LabeledPool:
    """Column-array store of labeled examples."""

    ids: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    rules: np.ndarray | None = None  # ground-truth clustering rule, if synthetic

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.rules is not None:
            self.rules = np.asarray(self.rules, dtype=np.int64)
        n = len(self.ids)
        if self.features.shape[0] != n or self.labels.shape[0] != n:
            raise ConfigError("pool columns disagree on example count")
        if not np.isfinite(self.features).all():
            raise ConfigError("pool features must be finite")
        if np.any(self.labels < 0):
            raise ConfigError("class labels must be nonnegative")
        if len(np.unique(self.ids)) != n:
            raise ConfigError("example ids must be unique")

    def __len__(self):
        return len(self.ids)

    @property
    def feature_dim(self):
        return self.features.shape[1]

    def classes(self):
        return np.unique(self.labels)

    def example(self, i):
        return LabeledExample(int(self.ids[i]), self.features[i], int(self.labels[i]))

    def subset(self, mask):
        return LabeledPool(
            self.ids[mask],
            self.features[mask],
            self.labels[mask],
            None if self.rules is None else self.rules[mask],
        )


@dataclass
class ObservationSet:
    """Unlabeled feature vectors. Carries no label channel by construction."""

    ids: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        self.features = np.asarray(self.features, dtype=np.float64)

    def __len__(self):
        return len(self.ids)


@dataclass
class Episode:
    """One inner task: per-class support and query sets."""

    classes: np.ndarray  # (way,)
    support_ids: np.ndarray  # (way, m)
    support_features: np.ndarray  # (way, m, D)
    support_labels: np.ndarray  # (way, m)
    query_ids: np.ndarray  # (way, k)
    query_features: np.ndarray  # (way, k, D)
    query_labels: np.ndarray  # (way, k)
    source_view: int | None = None
    fallback: bool = False

    @property
    def way(self):
        return len(self.classes)

    @property
    def m(self):
        return self.support_ids.shape[1]

    @property
    def k(self):
        return self.query_ids.shape[1]

    def support_matrix(self):
        return self.support_features.reshape(-1, self.support_features.shape[-1])

    def query_matrix(self):
        return self.query_features.reshape(-1, self.query_features.shape[-1])

    def validate(self):
        ids = np.concatenate([self.support_ids.ravel(), self.query_ids.ravel()])
        if len(np.unique(ids)) != ids.size:
            raise ConfigError("episode reuses an example id")
        if len(np.unique(self.classes)) != self.way:
            raise ConfigError("episode classes must be distinct")
        for row, cls in enumerate(self.classes):
            if not np.all(self.support_labels[row] == cls):
                raise ConfigError("support labels inconsistent with episode classes")
            if not np.all(self.query_labels[row] == cls):
                raise ConfigError("query labels inconsistent with episode classes")
        return self


def make_episode(pool, way, m, k, rng, eligible_classes=None):
    """Sample an N-way episode with disjoint m-support / k-query per class.

    Classes and examples are drawn uniformly without replacement.
    """
    if way < 1 or m < 1 or k < 0:
        raise ConfigError(f"invalid episode shape way={way}, m={m}, k={k}")
    classes = pool.classes() if eligible_classes is None else np.asarray(
        sorted(eligible_classes), dtype=np.int64
    )
    need = m + k
    if len(classes) < way:
        raise InfeasibleError(
            f"pool offers {len(classes)} classes, episode needs {way}"
        )
    counts = {int(c): int(np.sum(pool.labels == c)) for c in classes}
    usable = [c for c in classes if counts[int(c)] >= need]
    if len(usable) < way:
        short = [c for c in classes if counts[int(c)] < need]
        worst = min(short, key=lambda c: counts[int(c)])
        raise InsufficientClassError(int(worst), counts[int(worst)], need)
    chosen = rng.choice(np.asarray(usable, dtype=np.int64), size=way, replace=False)

    sup_ids, sup_x, sup_y = [], [], []
    qry_ids, qry_x, qry_y = [], [], []
    for c in chosen:
        idx = np.flatnonzero(pool.labels == c)
        picked = rng.choice(idx, size=need, replace=False)
        s, q = picked[:m], picked[m:]
        sup_ids.append(pool.ids[s])
        sup_x.append(pool.features[s])
        sup_y.append(pool.labels[s])
        qry_ids.append(pool.ids[q])
        qry_x.append(pool.features[q])
        qry_y.append(pool.labels[q])

    return Episode(
        classes=np.asarray(chosen, dtype=np.int64),
        support_ids=np.stack(sup_ids),
        support_features=np.stack(sup_x),
        support_labels=np.stack(sup_y),
        query_ids=np.stack(qry_ids),
        query_features=np.stack(qry_x),
        query_labels=np.stack(qry_y),
    ).validate()


# ---------------------------------------------------------------------------
# Known/novel splits
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitPolicy:
    known_classes: tuple
    novel_classes: tuple
    obsv_per_class: int
    normalize: bool = True
    novel_groups: tuple = ()  # ((group_name, (class, ...)), ...)

    def __post_init__(self):
        object.__setattr__(self, "known_classes", tuple(int(c) for c in self.known_classes))
        object.__setattr__(self, "novel_classes", tuple(int(c) for c in self.novel_classes))


def first_n_known_policy(pool, n_known, obsv_per_class):
    classes = [int(c) for c in pool.classes()]
    if n_known <= 0 or n_known >= len(classes):
        raise ConfigError(
            f"n_known={n_known} must split {len(classes)} classes into two nonempty sets"
        )
    return SplitPolicy(
        known_classes=tuple(classes[:n_known]),
        novel_classes=tuple(classes[n_known:]),
        obsv_per_class=obsv_per_class,
    )


def alphabet_policy(alphabet_map, known_alphabets, novel_alphabets, obsv_per_class):
    """Split by alphabet membership; novel alphabets become named groups."""
    known_alphabets = list(known_alphabets)
    novel_alphabets = list(novel_alphabets)
    overlap = set(known_alphabets) & set(novel_alphabets)
    if overlap:
        raise ConfigError(f"alphabets listed on both sides: {sorted(overlap)}")
    missing = [a for a in known_alphabets + novel_alphabets if a not in alphabet_map]
    if missing:
        raise ConfigError(f"unknown alphabets: {missing}")
    known = tuple(c for a in known_alphabets for c in alphabet_map[a])
    novel = tuple(c for a in novel_alphabets for c in alphabet_map[a])
    groups = tuple((str(a), tuple(alphabet_map[a])) for a in novel_alphabets)
    return SplitPolicy(
        known_classes=known,
        novel_classes=novel,
        obsv_per_class=obsv_per_class,
        novel_groups=groups,
    )


@dataclass
class NormStats:
    lo: np.ndarray
    hi: np.ndarray

    def apply(self, X):
        span = self.hi - self.lo
        span = np.where(span > 0, span, 1.0)
        return (X - self.lo) / span


def fit_norm_stats(X):
    return NormStats(X.min(axis=0), X.max(axis=0))


@dataclass
class NovelEvalEpisode:
    """A sealed evaluation draw: fit observations plus fresh test points."""

    classes: np.ndarray
    fit: ObservationSet
    eval: ObservationSet
    fit_labels: np.ndarray  # hidden truth, evaluation use only
    eval_labels: np.ndarray  # hidden truth, evaluation use only


@dataclass
class DatasetSplit:
    known_classes: np.ndarray
    novel_classes: np.ndarray
    known_pool: LabeledPool
    novel_observations: ObservationSet
    obsv_per_class: int
    novel_groups: dict = field(default_factory=dict)
    _novel_store: LabeledPool = None

    def __post_init__(self):
        self.known_classes = np.asarray(sorted(self.known_classes), dtype=np.int64)
        self.novel_classes = np.asarray(sorted(self.novel_classes), dtype=np.int64)
        if np.intersect1d(self.known_classes, self.novel_classes).size:
            raise ConfigError("known and novel class sets overlap")
        if not set(self.known_pool.labels.tolist()) <= set(self.known_classes.tolist()):
            raise ConfigError("known pool holds labels outside the known set")

    @property
    def num_known(self):
        return len(self.known_classes)

    @property
    def num_novel(self):
        return len(self.novel_classes)

    def evaluation_labels(self):
        """Hidden labels of the canonical observation set (evaluation only)."""
        order = {int(i): pos for pos, i in enumerate(self._novel_store.ids)}
        idx = [order[int(i)] for i in self.novel_observations.ids]
        return self._novel_store.labels[idx]

    def evaluation_rules(self):
        if self._novel_store.rules is None:
            return None
        order = {int(i): pos for pos, i in enumerate(self._novel_store.ids)}
        idx = [order[int(i)] for i in self.novel_observations.ids]
        return self._novel_store.rules[idx]

    def draw_novel_episode(self, way, obsv, eval_per_class, rng, classes=None):
        """Draw a fresh sealed evaluation episode from the novel store."""
        store = self._novel_store
        pool_classes = self.novel_classes if classes is None else np.asarray(
            sorted(classes), dtype=np.int64
        )
        if way > len(pool_classes):
            raise InfeasibleError(
                f"protocol needs {way} novel classes, only {len(pool_classes)} available"
            )
        need = obsv + eval_per_class
        counts = {int(c): int(np.sum(store.labels == c)) for c in pool_classes}
        lacking = [c for c in pool_classes if counts[int(c)] < need]
        if len(pool_classes) - len(lacking) < way:
            worst = min(lacking, key=lambda c: counts[int(c)])
            raise InfeasibleError(
                f"protocol infeasible: class {int(worst)} has {counts[int(worst)]} "
                f"novel examples, trial needs {need}"
            )
        usable = np.asarray([c for c in pool_classes if counts[int(c)] >= need])
        chosen = rng.choice(usable, size=way, replace=False)

        fit_idx, eval_idx = [], []
        for c in chosen:
            idx = np.flatnonzero(store.labels == c)
            picked = rng.choice(idx, size=need, replace=False)
            fit_idx.append(picked[:obsv])
            eval_idx.append(picked[obsv:])
        fit_idx = np.concatenate(fit_idx)
        eval_idx = np.concatenate(eval_idx)
        return NovelEvalEpisode(
            classes=np.asarray(chosen, dtype=np.int64),
            fit=ObservationSet(store.ids[fit_idx], store.features[fit_idx]),
            eval=ObservationSet(store.ids[eval_idx], store.features[eval_idx]),
            fit_labels=store.labels[fit_idx],
            eval_labels=store.labels[eval_idx],
        )


def split_known_novel(pool, policy):
    """Partition a labeled pool into a DatasetSplit honoring the policy.

    Normalization statistics come from the known pool only and are applied
    to novel features as-is, so novel data never leaks into scaling.
    """
    known = set(policy.known_classes)
    novel = set(policy.novel_classes)
    if known & novel:
        raise ConfigError(f"policy class sets overlap: {sorted(known & novel)}")
    present = set(int(c) for c in pool.classes())
    missing = (known | novel) - present
    if missing:
        raise ConfigError(f"policy names classes absent from dataset: {sorted(missing)}")
    if policy.obsv_per_class < 1:
        raise ConfigError("obsv_per_class must be at least 1")

    known_mask = np.isin(pool.labels, sorted(known))
    novel_mask = np.isin(pool.labels, sorted(novel))
    known_pool = pool.subset(known_mask)
    novel_store = pool.subset(novel_mask)

    for c in sorted(novel):
        have = int(np.sum(novel_store.labels == c))
        if have < policy.obsv_per_class:
            raise ConfigError(
                f"novel class {c} has {have} examples, policy requires "
                f"{policy.obsv_per_class} observations"
            )

    if policy.normalize:
        stats = fit_norm_stats(known_pool.features)
        known_pool = LabeledPool(
            known_pool.ids,
            stats.apply(known_pool.features),
            known_pool.labels,
            known_pool.rules,
        )
        novel_store = LabeledPool(
            novel_store.ids,
            stats.apply(novel_store.features),
            novel_store.labels,
            novel_store.rules,
        )

    # canonical observation draw: first m examples of each novel class in id order
    obs_idx = []
    for c in sorted(novel):
        idx = np.flatnonzero(novel_store.labels == c)
        idx = idx[np.argsort(novel_store.ids[idx])]
        obs_idx.append(idx[: policy.obsv_per_class])
    obs_idx = np.concatenate(obs_idx)

    return DatasetSplit(
        known_classes=np.asarray(sorted(known), dtype=np.int64),
        novel_classes=np.asarray(sorted(novel), dtype=np.int64),
        known_pool=known_pool,
        novel_observations=ObservationSet(
            novel_store.ids[obs_idx], novel_store.features[obs_idx]
        ),
        obsv_per_class=policy.obsv_per_class,
        novel_groups={name: np.asarray(cls, dtype=np.int64) for name, cls in policy.novel_groups},
        _novel_store=novel_store,
    )


# ---------------------------------------------------------------------------
# Synthetic multi-rule generator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticMultiRuleSpec:
    num_rules: int
    classes_per_rule: int
    feature_dim: int
    noise_scale: float
    samples_per_class: int
    # spread of the class signal inside its own block; independent of the
    # cross-block noise knob, and small against the centroid separation so
    # nearest-centroid classification stays exact
    within_class_scale: float = 0.08

    def __post_init__(self):
        if self.num_rules < 2:
            raise ConfigError("num_rules must be at least 2")
        if self.classes_per_rule < 1:
            raise ConfigError("classes_per_rule must be positive")
        if self.feature_dim < self.num_rules:
            raise ConfigError("feature_dim must give every rule at least one dimension")
        if self.noise_scale < 0:
            raise ConfigError("noise_scale must be nonnegative")
        if self.samples_per_class < 1:
            raise ConfigError("samples_per_class must be positive")
        if self.within_class_scale < 0:
            raise ConfigError("within_class_scale must be nonnegative")

    @property
    def block_dim(self):
        return self.feature_dim // self.num_rules

    def rule_slice(self, rule):
        start = rule * self.block_dim
        return slice(start, start + self.block_dim)

    @property
    def num_classes(self):
        return self.num_rules * self.classes_per_rule

    def class_of(self, rule, within):
        return rule * self.classes_per_rule + within

    def rule_of_class(self, label):
        return int(label) // self.classes_per_rule


def _separated_centroids(rng, count, dim, min_dist):
    """Uniform [0.1, 0.9] centroids with a minimum pairwise separation."""
    pts = []
    for _ in range(count):
        for _attempt in range(200):
            cand = rng.uniform(0.1, 0.9, size=dim)
            if all(np.linalg.norm(cand - p) >= min_dist for p in pts):
                pts.append(cand)
                break
        else:
            # relax: accept the last candidate rather than loop forever
            pts.append(rng.uniform(0.1, 0.9, size=dim))
    return np.asarray(pts)


def rule_centroids(spec, seed):
    """Per-rule class centroids; same values the generator uses."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 911]))
    min_dist = 0.35 * np.sqrt(spec.block_dim)
    return np.stack(
        [
            _separated_centroids(rng, spec.classes_per_rule, spec.block_dim, min_dist)
            for _ in range(spec.num_rules)
        ]
    )


def generate_multirule_pool(spec, seed):
    """Full labeled pool for a multi-rule dataset, rules recorded per example.

    Feature layout: one block per rule. An example's dominant-rule block is
    its class centroid plus within-class spread; every other block is
    zero-mean noise at the noise scale, so noise_scale=0 yields exact block
    structure with off-rule blocks identically zero.
    """
    centroids = rule_centroids(spec, seed)
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 13]))
    n = spec.num_classes * spec.samples_per_class
    X = rng.normal(0.0, spec.noise_scale, size=(n, spec.feature_dim))
    labels = np.empty(n, dtype=np.int64)
    rules = np.empty(n, dtype=np.int64)
    row = 0
    for r in range(spec.num_rules):
        blk = spec.rule_slice(r)
        for c in range(spec.classes_per_rule):
            for _ in range(spec.samples_per_class):
                # bounded spread keeps nearest-centroid classification exact
                X[row, blk] = centroids[r, c] + rng.uniform(
                    -spec.within_class_scale,
                    spec.within_class_scale,
                    size=spec.block_dim,
                )
                labels[row] = spec.class_of(r, c)
                rules[row] = r
                row += 1
    return LabeledPool(np.arange(n), X, labels, rules)


def generate_synthetic_multiview(spec, seed, novel_classes_per_rule=None, obsv_per_class=None):
    """Multi-rule dataset split into known and novel classes.

    By default the last ``classes_per_rule // 2`` classes of every rule
    (at least one) are novel, and every novel example lands in the store.
    Deterministic given ``seed``.
    """
    pool = generate_multirule_pool(spec, seed)
    if novel_classes_per_rule is None:
        novel_classes_per_rule = max(1, spec.classes_per_rule // 2)
    if not 0 < novel_classes_per_rule < spec.classes_per_rule:
        raise ConfigError(
            f"novel_classes_per_rule={novel_classes_per_rule} must be in "
            f"(0, {spec.classes_per_rule})"
        )
    split_at = spec.classes_per_rule - novel_classes_per_rule
    known, novel = [], []
    groups = []
    for r in range(spec.num_rules):
        rule_novel = []
        for c in range(spec.classes_per_rule):
            label = spec.class_of(r, c)
            if c < split_at:
                known.append(label)
            else:
                novel.append(label)
                rule_novel.append(label)
        groups.append((f"rule{r}", tuple(rule_novel)))
    policy = SplitPolicy(
        known_classes=tuple(known),
        novel_classes=tuple(novel),
        obsv_per_class=obsv_per_class or spec.samples_per_class,
        # novel tasks come from the same rule-coherent task distribution the
        # sampler trains on; groups let the protocol draw them that way
        novel_groups=tuple(groups),
    )
    return split_known_novel(pool, policy)


# ---------------------------------------------------------------------------
# Alphabet-style generator (handwritten-character corpus at desk scale)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AlphabetDatasetSpec:
    num_alphabets: int = 13
    chars_per_alphabet: int = 5
    samples_per_char: int = 30
    feature_dim: int = 64
    signal_dim: int = 12
    class_scale: float = 1.0
    within_scale: float = 0.12
    distractor_scale: float = 2.0

    def __post_init__(self):
        if self.signal_dim >= self.feature_dim:
            raise ConfigError("signal_dim must leave room for distractor dimensions")
        if min(self.num_alphabets, self.chars_per_alphabet, self.samples_per_char) < 1:
            raise ConfigError("alphabet dataset counts must be positive")


def generate_alphabet_pool(spec, seed):
    """Characters grouped into alphabets; class signal confined to a low-d
    block while high-variance distractor dimensions dominate raw distances.

    Returns (pool, alphabet_map) where alphabet_map names each alphabet's
    class ids.
    """
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 29]))
    n_classes = spec.num_alphabets * spec.chars_per_alphabet
    centroids = rng.normal(0.0, spec.class_scale, size=(n_classes, spec.signal_dim))
    n = n_classes * spec.samples_per_char
    X = np.empty((n, spec.feature_dim))
    labels = np.repeat(np.arange(n_classes), spec.samples_per_char)
    X[:, : spec.signal_dim] = centroids[labels] + rng.normal(
        0.0, spec.within_scale, size=(n, spec.signal_dim)
    )
    X[:, spec.signal_dim :] = rng.normal(
        0.0, spec.distractor_scale, size=(n, spec.feature_dim - spec.signal_dim)
    )
    alphabet_map = {
        f"alphabet{a:02d}": tuple(
            range(a * spec.chars_per_alphabet, (a + 1) * spec.chars_per_alphabet)
        )
        for a in range(spec.num_alphabets)
    }
    return LabeledPool(np.arange(n), X, labels), alphabet_map


def generate_alphabet_split(spec, seed, num_background, num_eval, obsv_per_class):
    """Background alphabets become known classes, evaluation alphabets novel."""
    if num_background + num_eval > spec.num_alphabets:
        raise ConfigError(
            f"{num_background}+{num_eval} alphabets requested, spec has "
            f"{spec.num_alphabets}"
        )
    pool, amap = generate_alphabet_pool(spec, seed)
    names = sorted(amap)
    policy = alphabet_policy(
        amap,
        names[:num_background],
        names[num_background : num_background + num_eval],
        obsv_per_class,
    )
    return split_known_novel(pool, policy)


# ---------------------------------------------------------------------------
# Columnar text serialization
# ---------------------------------------------------------------------------

def save_pool_text(pool, path):
    """One example per line: id, label, rule, comma-separated features."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for i in range(len(pool)):
            rule = -1 if pool.rules is None else int(pool.rules[i])
            feats = ",".join(repr(float(v)) for v in pool.features[i])
            fh.write(f"{int(pool.ids[i])},{int(pool.labels[i])},{rule},{feats}\n")


def load_pool_text(path):
    ids, labels, rules, feats = [], [], [], []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            ids.append(int(parts[0]))
            labels.append(int(parts[1]))
            rules.append(int(parts[2]))
            feats.append([float(v) for v in parts[3:]])
    rules_arr = np.asarray(rules)
    return LabeledPool(
        np.asarray(ids),
        np.asarray(feats),
        np.asarray(labels),
        None if np.all(rules_arr < 0) else rules_arr,
    )
