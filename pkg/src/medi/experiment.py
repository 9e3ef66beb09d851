"""Experiment configuration, orchestration, persistence, and reports.

Configs are TOML; results land in an append-only JSONL file (one record per
trial) so interrupted runs resume by run id. Every persisted number is
recomputable from the trial-level records.
"""

from __future__ import annotations

import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import cata, data, maml, metrics, nets, proto
from .errors import ConfigError

if sys.version_info >= (3, 11):  # pragma: no cover - version shim
    import tomllib
else:
    import tomli as tomllib

OUTPUT_ENV_VAR = "MEDI_OUT"

_STREAMS = {"data": 11, "init": 13, "sampler": 17, "trial": 19}


def stream_rng(master_seed, name):
    """Named substream so one component can be perturbed in isolation."""
    if name not in _STREAMS:
        raise ConfigError(f"unknown seed stream {name!r}")
    return np.random.default_rng(
        np.random.SeedSequence([int(master_seed), _STREAMS[name]])
    )


def stream_seed(master_seed, name):
    if name not in _STREAMS:
        raise ConfigError(f"unknown seed stream {name!r}")
    return int(
        np.random.SeedSequence([int(master_seed), _STREAMS[name]]).generate_state(1)[0]
    )


@dataclass(frozen=True)
class DatasetConfig:
    kind: str = "synthetic_multirule"  # or "alphabet", "file"
    # synthetic_multirule
    num_rules: int = 3
    classes_per_rule: int = 9
    feature_dim: int = 12
    noise_scale: float = 0.3
    samples_per_class: int = 20
    within_class_scale: float = 0.12
    novel_classes_per_rule: int = 5
    # alphabet
    num_alphabets: int = 13
    chars_per_alphabet: int = 5
    samples_per_char: int = 30
    signal_dim: int = 12
    distractor_scale: float = 2.0
    num_background: int = 10
    num_eval: int = 3
    # file
    path: str = ""
    n_known: int = 0
    # shared
    obsv_per_class: int = 5

    def __post_init__(self):
        if self.kind not in ("synthetic_multirule", "alphabet", "file"):
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        if self.kind == "file" and not self.path:
            raise ConfigError("file datasets need a path")


@dataclass(frozen=True)
class MethodConfig:
    name: str = "medi_pro"  # medi_pro | medi_maml | kmeans
    use_cata: bool = True
    # shared network
    hidden_dims: tuple = (24,)
    embed_dim: int = 8
    head_width: int = 3
    # episode shape used during training
    train_way: int = 2
    support_per_class: int = 2
    query_per_class: int = 3
    # medi_pro
    rate: float = 0.001
    steps: int = 60
    tasks: int = 300
    halve_every: int = 20
    optimizer: str = "adam"
    # medi_maml
    alpha: float = 0.001
    eta: float = 0.4
    inner_steps: int = 10
    meta_batch: int = 16
    episodes: int = 1000
    order: str = "second"
    topk: int = 0  # 0 -> default rule
    finetune_with_novel: bool = False
    discovery_mode: str = "argmax"
    # cata
    num_views: int = 3
    tradeoff: float = 1.0 / 3.0
    cata_restarts: int = 8
    # kmeans
    restarts: int = 10

    def __post_init__(self):
        if self.name not in ("medi_pro", "medi_maml", "kmeans"):
            raise ConfigError(f"unknown method {self.name!r}")
        object.__setattr__(self, "hidden_dims", tuple(int(d) for d in self.hidden_dims))


@dataclass(frozen=True)
class ProtocolConfig:
    way: int = 5
    obsv: int = 1
    trials: int = 15
    eval_per_class: int = 15
    group_mode: str = "per_group"

    def __post_init__(self):
        if self.way < 1 or self.obsv < 1 or self.trials < 1:
            raise ConfigError("protocol counts must be positive")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    method: MethodConfig = field(default_factory=MethodConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    seeds: tuple = (0, 1, 2, 3, 4)
    out_dir: str = ""

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("experiment needs at least one seed")
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))

    def semantic_dict(self):
        """All fields that affect results; output location excluded."""
        return {
            "dataset": asdict(self.dataset),
            "method": asdict(self.method),
            "protocol": asdict(self.protocol),
            "seeds": list(self.seeds),
        }

    def config_hash(self):
        canon = json.dumps(self.semantic_dict(), sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]

    def run_id(self):
        return f"{self.method.name}-{self.dataset.kind}-{self.config_hash()[:8]}"

    def resolve_out_dir(self):
        root = self.out_dir or os.environ.get(OUTPUT_ENV_VAR, "results")
        return Path(root)


def _dataclass_from_dict(cls, payload, section):
    valid = {f for f in cls.__dataclass_fields__}
    unknown = set(payload) - valid
    if unknown:
        raise ConfigError(f"unknown keys in [{section}]: {sorted(unknown)}")
    return cls(**payload)


def load_config(path):
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    known_sections = {"dataset", "method", "protocol", "seeds", "out_dir"}
    unknown = set(raw) - known_sections
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return ExperimentConfig(
        dataset=_dataclass_from_dict(DatasetConfig, raw.get("dataset", {}), "dataset"),
        method=_dataclass_from_dict(MethodConfig, raw.get("method", {}), "method"),
        protocol=_dataclass_from_dict(ProtocolConfig, raw.get("protocol", {}), "protocol"),
        seeds=tuple(raw.get("seeds", (0, 1, 2, 3, 4))),
        out_dir=raw.get("out_dir", ""),
    )


def build_split(dataset_config, master_seed):
    """Materialize the dataset split for one master seed."""
    d = dataset_config
    data_seed = stream_seed(master_seed, "data")
    if d.kind == "synthetic_multirule":
        spec = data.SyntheticMultiRuleSpec(
            num_rules=d.num_rules,
            classes_per_rule=d.classes_per_rule,
            feature_dim=d.feature_dim,
            noise_scale=d.noise_scale,
            samples_per_class=d.samples_per_class,
            within_class_scale=d.within_class_scale,
        )
        return data.generate_synthetic_multiview(
            spec, seed=data_seed, novel_classes_per_rule=d.novel_classes_per_rule
        )
    if d.kind == "alphabet":
        spec = data.AlphabetDatasetSpec(
            num_alphabets=d.num_alphabets,
            chars_per_alphabet=d.chars_per_alphabet,
            samples_per_char=d.samples_per_char,
            feature_dim=d.feature_dim,
            signal_dim=d.signal_dim,
            distractor_scale=d.distractor_scale,
        )
        return data.generate_alphabet_split(
            spec, seed=data_seed, num_background=d.num_background,
            num_eval=d.num_eval, obsv_per_class=d.obsv_per_class,
        )
    pool = data.load_pool_text(d.path)
    policy = data.first_n_known_policy(pool, d.n_known, d.obsv_per_class)
    return data.split_known_novel(pool, policy)


def build_sampler(split, method_config, master_seed):
    """Episode source: rule-aware sampling when enabled, else pool-wide.

    Returns (sampler, flags) where flags records the sampler pedigree.
    """
    pool = split.known_pool
    flags = {"use_cata": method_config.use_cata}
    if not method_config.use_cata:
        def sampler(way, m, k, rng):
            return data.make_episode(pool, way, m, k, rng)

        return sampler, flags

    ccfg = cata.rule_recovery_config(
        pool.feature_dim,
        num_views=method_config.num_views,
        tradeoff=method_config.tradeoff,
    )
    _, partition, info = cata.train_cata_selected(
        split, ccfg, seed=stream_seed(master_seed, "sampler"),
        max_restarts=method_config.cata_restarts,
    )
    flags["cata_dispersion"] = info["dispersion"]

    def sampler(way, m, k, rng):
        return cata.sample_task(partition, pool, way, m, k, rng, fallback=True)

    return sampler, flags


def build_method(split, method_config, master_seed):
    """Train (if needed) and wrap the discovery method for the protocol."""
    m = method_config
    if m.name == "kmeans":
        return metrics.KMeansMethod(restarts=m.restarts), {"use_cata": False}

    sampler, flags = build_sampler(split, m, master_seed)
    model_cfg = nets.ModelConfig(
        input_dim=split.known_pool.feature_dim,
        hidden_dims=m.hidden_dims,
        embed_dim=m.embed_dim,
        head_width=m.head_width,
    )
    init_seed = stream_seed(master_seed, "init")
    if m.name == "medi_pro":
        pcfg = proto.ProtoConfig(
            rate=m.rate, steps=m.steps, tasks=m.tasks, halve_every=m.halve_every,
            way=m.train_way, num_sampled_classes=m.train_way,
            support_per_class=m.support_per_class, query_per_class=m.query_per_class,
            optimizer=m.optimizer,
        )
        params, trace = proto.train_medi_pro(split, sampler, pcfg, model_cfg, init_seed)
        flags["final_loss"] = trace[-1] if trace else None
        return metrics.ProtoMethod(model_cfg, params), flags

    mcfg = maml.MamlConfig(
        inner_rate=m.alpha, meta_rate=m.eta, inner_steps=m.inner_steps,
        meta_batch=m.meta_batch, order=m.order,
        topk=(None if m.topk == 0 else m.topk), episodes=m.episodes,
        finetune_with_novel=m.finetune_with_novel,
        way=m.train_way, support_per_class=m.support_per_class,
        query_per_class=m.query_per_class,
    )
    state, trace, run_flags = maml.train_medi_maml(
        split, sampler, mcfg, model_cfg, init_seed
    )
    flags.update(run_flags)
    flags["final_loss"] = trace[-1] if trace else None
    return metrics.MamlMethod(state, mode=m.discovery_mode), flags


@dataclass
class RunRecord:
    run_id: str
    config_hash: str
    method: str
    dataset: str
    way: int
    obsv: int
    seeds: list
    accs: list  # one mean ACC per seed
    trial_accs: dict  # seed -> list of per-trial ACC
    mean: float
    std: float
    wall_time: float
    order_mode: str = ""
    fallback_used: bool = False
    use_cata: bool = True
    backend: str = ""

    def recompute(self):
        arr = np.asarray(self.accs)
        return float(arr.mean()), float(arr.std())


def _results_path(config):
    out = config.resolve_out_dir()
    out.mkdir(parents=True, exist_ok=True)
    return out / "results.jsonl"


def _load_done_trials(path, run_id):
    done = {}
    if not path.exists():
        return done
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if rec.get("run_id") == run_id and rec.get("kind") == "trial":
                done[(rec["seed"], rec["trial"])] = rec
    return done


def run_experiment(config):
    """Run every (seed, trial) cell, flushing each trial as one JSONL line.

    Replaying the same config and seeds reproduces trial ACCs bitwise;
    previously flushed trials are reused rather than recomputed.
    """
    from . import kernels

    start = time.time()
    run_id = config.run_id()
    results_path = _results_path(config)
    done = _load_done_trials(results_path, run_id)

    per_seed_means = []
    trial_accs = {}
    order_mode = ""
    fallback_used = False
    with open(results_path, "a") as sink:
        for master_seed in config.seeds:
            cached = [done.get((master_seed, t)) for t in range(config.protocol.trials)]
            if all(c is not None for c in cached):
                accs = [c["acc"] for c in cached]
                trial_accs[master_seed] = accs
                per_seed_means.append(float(np.mean(accs)))
                continue

            split = build_split(config.dataset, master_seed)
            method, flags = build_method(split, config.method, master_seed)
            order_mode = flags.get("order_mode", "")
            fallback_used = fallback_used or flags.get("fallback_used", False)
            summary = metrics.run_protocol(
                method,
                split,
                way=config.protocol.way,
                obsv=config.protocol.obsv,
                trials=config.protocol.trials,
                master_seed=stream_seed(master_seed, "trial"),
                eval_per_class=config.protocol.eval_per_class,
                group_mode=config.protocol.group_mode,
            )
            trial_accs[master_seed] = summary.accs
            per_seed_means.append(summary.mean)
            for rec in summary.records:
                line = {
                    "kind": "trial",
                    "run_id": run_id,
                    "config_hash": config.config_hash(),
                    "method": config.method.name,
                    "dataset": config.dataset.kind,
                    "way": config.protocol.way,
                    "obsv": config.protocol.obsv,
                    "seed": master_seed,
                    "trial": rec["trial"],
                    "acc": rec["acc"],
                    "group": rec["group"],
                    "backend": kernels.backend_name(),
                    "wall_time": summary.wall_time,
                }
                sink.write(json.dumps(line, sort_keys=True) + "\n")
                sink.flush()

    arr = np.asarray(per_seed_means)
    record = RunRecord(
        run_id=run_id,
        config_hash=config.config_hash(),
        method=config.method.name,
        dataset=config.dataset.kind,
        way=config.protocol.way,
        obsv=config.protocol.obsv,
        seeds=list(config.seeds),
        accs=[float(a) for a in per_seed_means],
        trial_accs={int(k): list(map(float, v)) for k, v in trial_accs.items()},
        mean=float(arr.mean()),
        std=float(arr.std()),
        wall_time=time.time() - start,
        order_mode=order_mode,
        fallback_used=fallback_used,
        use_cata=config.method.use_cata,
        backend=kernels.backend_name(),
    )
    with open(results_path, "a") as sink:
        payload = {"kind": "run", **{k: v for k, v in asdict(record).items()}}
        sink.write(json.dumps(payload, sort_keys=True) + "\n")
    return record


def run_ablation(config):
    """The same experiment with and without the rule-aware sampler."""
    if config.method.name == "kmeans":
        raise ConfigError("ablation applies to the meta-learners, not kmeans")
    with_cata = replace(config, method=replace(config.method, use_cata=True))
    without = replace(config, method=replace(config.method, use_cata=False))
    return run_experiment(with_cata), run_experiment(without)


def format_acc(mean, std):
    """Percent convention with a +- separator, e.g. 61.0+-0.5."""
    return f"{100 * mean:.1f}+-{100 * std:.1f}"


def emit_report(records, out_dir, style="bar"):
    """Bar chart per (dataset, way, obsv) plus a text table.

    Returns the list of files written. Records with non-finite ACC are
    rejected.
    """
    if not records:
        raise ConfigError("report needs at least one record")
    for rec in records:
        if not np.isfinite(rec.accs).all() or not np.isfinite([rec.mean, rec.std]).all():
            raise ConfigError(f"record {rec.run_id} carries non-finite ACC values")
    if style not in ("bar", "table"):
        raise ConfigError(f"unknown report style {style!r}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    suffix = "-".join(sorted({r.config_hash[:8] for r in records}))
    table_path = out / f"report-{suffix}.txt"
    with open(table_path, "w") as fh:
        fh.write(f"{'method':<12} {'dataset':<22} {'way':>4} {'obsv':>5} "
                 f"{'ACC (%)':>12} {'cata':>5}\n")
        for rec in sorted(records, key=lambda r: (r.dataset, r.way, r.obsv, r.method)):
            fh.write(
                f"{rec.method:<12} {rec.dataset:<22} {rec.way:>4} {rec.obsv:>5} "
                f"{format_acc(rec.mean, rec.std):>12} {str(rec.use_cata):>5}\n"
            )
    written.append(table_path)

    if style == "bar":
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        panels = {}
        for rec in records:
            panels.setdefault((rec.dataset, rec.way, rec.obsv), []).append(rec)
        for (dataset, way, obsv), group in sorted(panels.items()):
            fig, ax = plt.subplots(figsize=(1.6 + 1.1 * len(group), 3.2))
            names = [
                r.method + ("" if r.use_cata or r.method == "kmeans" else " (no sampler)")
                for r in group
            ]
            means = [100 * r.mean for r in group]
            stds = [100 * r.std for r in group]
            ax.bar(names, means, yerr=stds, capsize=4, color="#4878b0")
            ax.set_ylabel("ACC (%)")
            ax.set_title(f"{dataset}: {way}-way {obsv}-obsv")
            ax.set_ylim(0, 105)
            fig.tight_layout()
            hash_tag = group[0].config_hash[:8]
            png = out / f"acc-{dataset}-{way}way-{obsv}obsv-{hash_tag}.png"
            fig.savefig(png, dpi=120)
            plt.close(fig)
            written.append(png)
    return written
