"""Command-line harness.

Subcommands: synth-data, train-cata, train-maml, train-proto, evaluate,
bound, report. Global flags: --config, --seed, --out. The default output
root comes from the MEDI_OUT environment variable.

Exit codes: 0 success, 2 configuration error, 3 numeric error,
4 infeasible protocol.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import bounds, cata, data, experiment, maml, nets, proto
from .errors import ConfigError, InfeasibleError, MediError, NumericError


def _out_dir(args, config):
    if args.out:
        return Path(args.out)
    return config.resolve_out_dir() if config else Path(
        experiment.ExperimentConfig().resolve_out_dir()
    )


def _load_config(args):
    if args.config:
        cfg = experiment.load_config(args.config)
    else:
        cfg = experiment.ExperimentConfig()
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    if args.out:
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def _split_for(cfg, seed):
    return experiment.build_split(cfg.dataset, seed)


def cmd_synth_data(args):
    cfg = _load_config(args)
    seed = cfg.seeds[0]
    d = cfg.dataset
    if d.kind == "alphabet":
        spec = data.AlphabetDatasetSpec(
            num_alphabets=d.num_alphabets,
            chars_per_alphabet=d.chars_per_alphabet,
            samples_per_char=d.samples_per_char,
            feature_dim=d.feature_dim,
            signal_dim=d.signal_dim,
            distractor_scale=d.distractor_scale,
        )
        pool, _ = data.generate_alphabet_pool(
            spec, experiment.stream_seed(seed, "data")
        )
    else:
        spec = data.SyntheticMultiRuleSpec(
            num_rules=d.num_rules,
            classes_per_rule=d.classes_per_rule,
            feature_dim=d.feature_dim,
            noise_scale=d.noise_scale,
            samples_per_class=d.samples_per_class,
            within_class_scale=d.within_class_scale,
        )
        pool = data.generate_multirule_pool(spec, experiment.stream_seed(seed, "data"))
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"dataset-{d.kind}-seed{seed}.txt"
    data.save_pool_text(pool, path)
    print(f"wrote {len(pool)} examples ({len(pool.classes())} classes) to {path}")
    return 0


def cmd_train_cata(args):
    cfg = _load_config(args)
    seed = cfg.seeds[0]
    if args.dataset:
        # columnar text file; first half of its classes count as known
        pool = data.load_pool_text(args.dataset)
        n_known = max(1, len(pool.classes()) // 2)
        policy = data.first_n_known_policy(
            pool, n_known, cfg.dataset.obsv_per_class
        )
        split = data.split_known_novel(pool, policy)
    else:
        split = _split_for(cfg, seed)
    ccfg = cata.CataConfig(
        num_views=args.views,
        tradeoff=args.tradeoff,
        steps=args.steps,
        extractor_rate=args.extractor_rate,
        head_rate=args.head_rate,
        shared_dim=split.known_pool.feature_dim,
        extractor_dims=(),
        head_hidden=args.head_hidden,
        optimizer=args.optimizer,
    )
    model, trace = cata.train_cata(split, ccfg, seed)
    partition = cata.assign_views(model, split.known_pool)
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    cata.save_partition(partition, out / f"views-seed{seed}.txt")
    (out / f"cata-trace-seed{seed}.json").write_text(json.dumps(trace))
    print(
        f"trained sampler: {args.views} views, sizes {partition.sizes.tolist()}, "
        f"final loss {trace[-1]:.4f}" if trace else "trained sampler (0 steps)"
    )
    print(f"mean |Wi.Wj| = {cata.mean_abs_cross_inner(model):.4f}")
    return 0


def cmd_train_maml(args):
    cfg = _load_config(args)
    method = replace(
        cfg.method,
        name="medi_maml",
        alpha=args.alpha,
        eta=args.eta,
        inner_steps=args.inner_steps,
        meta_batch=args.meta_batch,
        episodes=args.episodes,
        order=args.order,
    )
    cfg = replace(cfg, method=method)
    seed = cfg.seeds[0]
    split = _split_for(cfg, seed)
    sampler, flags = experiment.build_sampler(split, cfg.method, seed)
    model_cfg = nets.ModelConfig(
        input_dim=split.known_pool.feature_dim,
        hidden_dims=cfg.method.hidden_dims,
        embed_dim=cfg.method.embed_dim,
        head_width=cfg.method.head_width,
    )
    mcfg = maml.MamlConfig(
        inner_rate=args.alpha, meta_rate=args.eta, inner_steps=args.inner_steps,
        meta_batch=args.meta_batch, episodes=args.episodes, order=args.order,
        topk=(None if cfg.method.topk == 0 else cfg.method.topk),
        way=cfg.method.train_way,
        support_per_class=cfg.method.support_per_class,
        query_per_class=cfg.method.query_per_class,
    )
    state, trace, run_flags = maml.train_medi_maml(
        split, sampler, mcfg, model_cfg, experiment.stream_seed(seed, "init")
    )
    out = _out_dir(args, cfg)
    nets.save_checkpoint(state.params, out / f"maml-seed{seed}")
    (out / f"maml-trace-seed{seed}.json").write_text(
        json.dumps({"trace": trace, "flags": {**flags, **run_flags}})
    )
    print(
        f"meta-trained on {args.episodes} episodes "
        f"(order={args.order}, fallback_used={run_flags['fallback_used']}); "
        f"outer loss {trace[0]:.4f} -> {trace[-1]:.4f}"
        if trace else "no episodes consumed"
    )
    return 0


def cmd_train_proto(args):
    cfg = _load_config(args)
    method = replace(
        cfg.method, name="medi_pro", rate=args.rate, steps=args.steps, tasks=args.tasks,
    )
    cfg = replace(cfg, method=method)
    seed = cfg.seeds[0]
    split = _split_for(cfg, seed)
    sampler, flags = experiment.build_sampler(split, cfg.method, seed)
    model_cfg = nets.ModelConfig(
        input_dim=split.known_pool.feature_dim,
        hidden_dims=cfg.method.hidden_dims,
        embed_dim=cfg.method.embed_dim,
        head_width=cfg.method.head_width,
    )
    pcfg = proto.ProtoConfig(
        rate=args.rate, steps=args.steps, tasks=args.tasks,
        halve_every=cfg.method.halve_every,
        way=max(cfg.method.train_way, args.ku),
        num_sampled_classes=args.ku,
        support_per_class=cfg.method.support_per_class,
        query_per_class=cfg.method.query_per_class,
    )
    params, trace = proto.train_medi_pro(
        split, sampler, pcfg, model_cfg, experiment.stream_seed(seed, "init")
    )
    out = _out_dir(args, cfg)
    nets.save_checkpoint(params, out / f"proto-seed{seed}")
    (out / f"proto-trace-seed{seed}.json").write_text(
        json.dumps({"trace": trace, "flags": flags})
    )
    if trace:
        print(f"trained embedding: loss {trace[0]:.4f} -> {trace[-1]:.4f}")
    else:
        print("no training steps ran")
    return 0


def cmd_evaluate(args):
    cfg = _load_config(args)
    if args.method:
        cfg = replace(cfg, method=replace(cfg.method, name=args.method))
    if args.ablation:
        with_rec, without_rec = experiment.run_ablation(cfg)
        for rec in (with_rec, without_rec):
            tag = "with sampler" if rec.use_cata else "without sampler"
            print(
                f"{rec.method} {tag}: ACC {experiment.format_acc(rec.mean, rec.std)} "
                f"({rec.way}-way {rec.obsv}-obsv, {len(rec.seeds)} seeds)"
            )
        return 0
    rec = experiment.run_experiment(cfg)
    print(
        f"{rec.method} on {rec.dataset}: ACC {experiment.format_acc(rec.mean, rec.std)} "
        f"({rec.way}-way {rec.obsv}-obsv, {len(rec.seeds)} seeds, run {rec.run_id})"
    )
    return 0


def cmd_bound(args):
    eps = bounds.stability_epsilon(args.n, args.beta, args.M, args.delta)
    print(f"epsilon({args.n}, {args.beta}) = {eps:.10f}")
    record = {
        "kind": "bound",
        "n": args.n,
        "beta": args.beta,
        "M": args.M,
        "delta": args.delta,
        "epsilon": eps,
    }
    cfg = _load_config(args)
    out = _out_dir(args, cfg)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "results.jsonl", "a") as fh:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
    return 0


def cmd_report(args):
    cfg = _load_config(args)
    results = Path(args.results) if args.results else _out_dir(args, cfg) / "results.jsonl"
    if not results.exists():
        raise ConfigError(f"no results file at {results}")
    records = []
    with open(results) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            payload = json.loads(line)
            if payload.get("kind") != "run":
                continue
            payload.pop("kind")
            payload["trial_accs"] = {
                int(k): v for k, v in payload.get("trial_accs", {}).items()
            }
            records.append(experiment.RunRecord(**payload))
    written = experiment.emit_report(records, _out_dir(args, cfg), style=args.style)
    for path in written:
        print(f"wrote {path}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="medi",
        description="Meta-discovery of novel classes from very limited data",
    )
    parser.add_argument("--config", default="", help="TOML experiment config")
    parser.add_argument("--seed", type=int, default=None, help="master seed override")
    parser.add_argument("--out", default="", help="output directory")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth-data", help="generate and save a synthetic dataset")

    p = sub.add_parser("train-cata", help="train the rule-aware task sampler")
    p.add_argument("--dataset", default="",
                   help="columnar text dataset file (overrides the config dataset)")
    p.add_argument("--views", type=int, default=3)
    p.add_argument("--tradeoff", type=float, default=1.0 / 3.0)
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--extractor-rate", type=float, default=0.01)
    p.add_argument("--head-rate", type=float, default=0.001)
    p.add_argument("--head-hidden", type=int, default=1)
    p.add_argument("--optimizer", choices=("gd", "adam"), default="gd")

    p = sub.add_parser("train-maml", help="meta-train the adaptation-based learner")
    p.add_argument("--alpha", type=float, default=0.001)
    p.add_argument("--eta", type=float, default=0.4)
    p.add_argument("--inner-steps", type=int, default=10)
    p.add_argument("--meta-batch", type=int, default=16)
    p.add_argument("--episodes", type=int, default=1000)
    p.add_argument("--order", choices=("second", "first"), default="second")

    p = sub.add_parser("train-proto", help="train the prototype-based learner")
    p.add_argument("--rate", type=float, default=0.001)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--tasks", type=int, default=1000)
    p.add_argument("--ku", type=int, default=5)

    p = sub.add_parser("evaluate", help="run the discovery protocol")
    p.add_argument("--method", choices=("medi_pro", "medi_maml", "kmeans"), default="")
    p.add_argument("--ablation", action="store_true",
                   help="run with and without the rule-aware sampler")

    p = sub.add_parser("bound", help="evaluate the stability bound slack")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--beta", type=float, required=True)
    p.add_argument("--M", type=float, required=True)
    p.add_argument("--delta", type=float, required=True)

    p = sub.add_parser("report", help="emit charts and tables from results")
    p.add_argument("--results", default="", help="path to results.jsonl")
    p.add_argument("--style", choices=("bar", "table"), default="bar")

    return parser


COMMANDS = {
    "synth-data": cmd_synth_data,
    "train-cata": cmd_train_cata,
    "train-maml": cmd_train_maml,
    "train-proto": cmd_train_proto,
    "evaluate": cmd_evaluate,
    "bound": cmd_bound,
    "report": cmd_report,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 3
    except InfeasibleError as exc:
        print(f"infeasible protocol: {exc}", file=sys.stderr)
        return 4
    except MediError as exc:  # any remaining package error is a config issue
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
