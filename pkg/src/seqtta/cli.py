"""Command-line surface binding the pipeline end to end.

Commands: prepare, train-backbone, run-tta, train-policy, evaluate, study,
config-dump.  Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import nn
from .augment import AugAction
from .backbones import Backbone, train_backbone
from .config import RunConfig, UsageError, load_config
from .data import (DataError, InteractionDataset, generate_synthetic, ingest,
                   k_core_filter, popularity_percentiles, split_leave_one_out)
from .engine import run_fixed_strategy
from .metrics import MetricsSummary, fmt, summary_table
from .policy import PolicyNet, run_adaptive, train_policy, write_training_log
from .study import group_by_cluster, group_by_length, per_group_operator_table


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit with code 1, not argparse's 2
        raise UsageError(message)


def _parse_set(values):
    overrides = []
    for item in values or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        overrides.append((key, value))
    return overrides


def _build_config(args):
    overrides = _parse_set(getattr(args, "set", None))
    cfg = load_config(getattr(args, "config", None), overrides)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None) is not None:
        cfg.out_dir = args.out
    if getattr(args, "threads", None) is not None:
        cfg.threads = args.threads
    cfg.resolve()
    return cfg


def _out_dir(cfg):
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write_resolved(out)
    return out


def _dataset_path(cfg, args):
    given = getattr(args, "data", None)
    return Path(given) if given else Path(cfg.out_dir) / "dataset.json"


def _load_dataset(cfg, args):
    path = _dataset_path(cfg, args)
    if not path.exists():
        raise DataError(f"dataset snapshot not found: {path} (run `prepare` first)")
    return InteractionDataset.load(path)


def _load_backbone(cfg, args):
    given = getattr(args, "backbone_path", None)
    path = Path(given) if given else Path(cfg.out_dir) / "backbone.ckpt"
    if not path.exists():
        raise DataError(f"backbone checkpoint not found: {path}")
    return Backbone.load(path)


def cmd_prepare(args):
    cfg = _build_config(args)
    out = _out_dir(cfg)
    if cfg.data.source == "file":
        ds = ingest(cfg.data.path, format=cfg.data.format)
    else:
        ds = generate_synthetic(cfg.data.synthetic)
    raw_users, raw_items = ds.num_users, ds.num_items
    ds = k_core_filter(ds, cfg.data.k_core)
    split = split_leave_one_out(ds)
    if not split.per_user:
        raise DataError("no users with >= 3 interactions after filtering")
    ds.save(out / "dataset.json")
    stats = {
        "users_raw": raw_users,
        "items_raw": raw_items,
        "users": ds.num_users,
        "items": ds.num_items,
        "interactions": int(sum(len(s) for s in ds.sequences)),
        "split_users": len(split.per_user),
        "short_users_dropped": split.dropped,
        "gen_stats": ds.gen_stats,
    }
    (out / "prepare_stats.json").write_text(
        json.dumps(stats, sort_keys=True, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {out / 'dataset.json'} ({ds.num_users} users, {ds.num_items} items, "
          f"{split.dropped} short users dropped)")
    return 0


def cmd_train_backbone(args):
    cfg = _build_config(args)
    out = _out_dir(cfg)
    ds = _load_dataset(cfg, args)
    split = split_leave_one_out(ds)
    cfg.backbone.rng_seed = cfg.seed
    bb = train_backbone(ds, split, cfg.backbone)
    bb.save(out / "backbone.ckpt")
    with open(out / "backbone_log.tsv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch\tloss\n")
        for epoch, loss in enumerate(bb.train_log):
            fh.write(f"{epoch}\t{fmt(loss)}\n")
    final = bb.train_log[-1] if bb.train_log else float("nan")
    print(f"wrote {out / 'backbone.ckpt'} (kind={bb.kind}, final loss {final:.4f})")
    return 0


def cmd_run_tta(args):
    cfg = _build_config(args)
    try:
        if args.action:
            actions = (AugAction.from_name(args.action),)
        elif cfg.tta.action not in (None, "adaptive"):
            actions = (AugAction.from_name(cfg.tta.action),)
        else:
            actions = cfg.resolve_actions()
    except ValueError as e:
        raise UsageError(str(e)) from None
    out = _out_dir(cfg)
    ds = _load_dataset(cfg, args)
    split = split_leave_one_out(ds)
    bb = _load_backbone(cfg, args)
    rows = []
    for action in actions:
        report = run_fixed_strategy(bb, ds, split, action, cfg.operators, cfg.tta,
                                    cfg.seed, which=cfg.eval_split,
                                    threads=cfg.threads)
        report.write(out / f"report_{action.value}.tsv")
        rows.append((action.value, report.summary))
    (out / "sweep_summary.tsv").write_text(summary_table(rows), encoding="utf-8")
    print(f"wrote {len(rows)} fixed-strategy reports to {out}")
    return 0


def cmd_train_policy(args):
    cfg = _build_config(args)
    out = _out_dir(cfg)
    ds = _load_dataset(cfg, args)
    split = split_leave_one_out(ds)
    bb = _load_backbone(cfg, args)
    actions = cfg.resolve_actions()
    pct = popularity_percentiles(ds)
    net, _, records = train_policy(bb, ds, split, actions, cfg.operators, cfg.tta,
                                   cfg.reward, cfg.ppo, cfg.seed, pct)
    net.save(out / "policy.ckpt", [a.value for a in actions],
             extra_meta={"reward": {"alpha": cfg.reward.alpha, "beta": cfg.reward.beta,
                                    "metric_k": cfg.reward.metric_k}})
    write_training_log(records, out / "policy_log.jsonl")
    last = records[-1] if records else {}
    print(f"wrote {out / 'policy.ckpt'} "
          f"(mean reward {last.get('mean_reward', float('nan')):.4f}, "
          f"entropy {last.get('entropy', float('nan')):.4f})")
    return 0


def _comparison_text(fixed_rows, adaptive_summary):
    labels = MetricsSummary.column_labels()
    lines = [summary_table(fixed_rows + [("adaptive", adaptive_summary)]).rstrip("\n")]
    base = dict(fixed_rows).get(AugAction.IDENTITY.value)
    best = {label: max(fixed_rows, key=lambda r: r[1].metric(label)) for label in labels}
    lines.append("# best_fixed\t" + "\t".join(best[label][0] for label in labels))

    def improve(reference):
        cells = []
        for label in labels:
            ref = reference(label)
            val = adaptive_summary.metric(label)
            cells.append(fmt((val - ref) / ref) if ref > 0 else "na")
        return cells

    if base is not None:
        lines.append("# improve_alpha\t" + "\t".join(improve(base.metric)))
    lines.append("# improve_beta\t" + "\t".join(
        improve(lambda label: best[label][1].metric(label))))
    return "\n".join(lines) + "\n"


def cmd_evaluate(args):
    cfg = _build_config(args)
    out = _out_dir(cfg)
    ds = _load_dataset(cfg, args)
    split = split_leave_one_out(ds)
    bb = _load_backbone(cfg, args)
    given = getattr(args, "policy_path", None)
    policy_path = Path(given) if given else Path(cfg.out_dir) / "policy.ckpt"
    if not policy_path.exists():
        raise DataError(f"policy checkpoint not found: {policy_path}")
    net, actions, _ = PolicyNet.load(policy_path)
    pct = popularity_percentiles(ds)

    fixed_rows = []
    for action in actions:
        report = run_fixed_strategy(bb, ds, split, action, cfg.operators, cfg.tta,
                                    cfg.seed, which=cfg.eval_split,
                                    threads=cfg.threads)
        fixed_rows.append((action.value, report.summary))
    adaptive = run_adaptive(bb, net, ds, split, actions, cfg.operators, cfg.tta,
                            cfg.seed, pct, which=cfg.eval_split,
                            threads=cfg.threads)
    adaptive.write(out / "adaptive_report.tsv")
    (out / "evaluate.tsv").write_text(
        _comparison_text(fixed_rows, adaptive.summary), encoding="utf-8")
    print(f"wrote {out / 'evaluate.tsv'}")
    return 0


def cmd_study(args):
    cfg = _build_config(args)
    out = _out_dir(cfg)
    ds = _load_dataset(cfg, args)
    split = split_leave_one_out(ds)
    bb = _load_backbone(cfg, args)
    actions = cfg.resolve_actions()
    modes = [args.group_mode] if args.group_mode != "both" else ["length", "cluster"]
    clusters = args.clusters or cfg.study.clusters
    written = []
    for mode in modes:
        if mode == "length":
            groups = group_by_length(ds, split.users(), cfg.study.thresholds)
            name = "study_length.tsv"
        else:
            embeddings = {u: bb.encode(split.per_user[u].prefix).mean(axis=0)
                          for u in split.users()}
            groups = group_by_cluster(ds, split.users(), embeddings, clusters,
                                      cfg.seed)
            name = f"study_cluster_k{clusters}.tsv"
            with open(out / f"clusters_k{clusters}.tsv", "w", encoding="utf-8",
                      newline="\n") as fh:
                for u in split.users():
                    fh.write(f"{ds.user_ids[u]}\t{groups[u]}\n")
        report = per_group_operator_table(bb, ds, split, groups, actions,
                                          cfg.operators, cfg.tta, cfg.seed,
                                          which=cfg.eval_split, threads=cfg.threads)
        report.write(out / name)
        written.append(name)
    print(f"wrote {', '.join(written)} to {out}")
    return 0


def cmd_config_dump(args):
    cfg = _build_config(args)
    sys.stdout.write(cfg.dump())
    return 0


def _add_common(p, with_data=False, with_backbone=False, with_policy=False):
    p.add_argument("--config", help="JSON run-config file")
    p.add_argument("--out", help="output directory (default $SEQTTA_OUT or ./runs)")
    p.add_argument("--seed", type=int, help="global seed override")
    p.add_argument("--threads", type=int, help="evaluation parallelism cap")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key, e.g. --set tta.m=5")
    if with_data:
        p.add_argument("--data", help="dataset snapshot path")
    if with_backbone:
        p.add_argument("--backbone-path", help="backbone checkpoint path")
    if with_policy:
        p.add_argument("--policy-path", help="policy checkpoint path")


def build_parser():
    parser = _Parser(prog="seqtta", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="ingest or synthesize, filter, split, snapshot")
    _add_common(p)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train-backbone", help="train a sequential recommender")
    _add_common(p, with_data=True)
    p.set_defaults(func=cmd_train_backbone)

    p = sub.add_parser("run-tta", help="fixed-strategy test-time augmentation")
    _add_common(p, with_data=True, with_backbone=True)
    p.add_argument("--action", help="single operator to run (default: sweep)")
    p.set_defaults(func=cmd_run_tta)

    p = sub.add_parser("train-policy", help="train the operator-selection policy")
    _add_common(p, with_data=True, with_backbone=True)
    p.set_defaults(func=cmd_train_policy)

    p = sub.add_parser("evaluate", help="adaptive-vs-fixed comparison report")
    _add_common(p, with_data=True, with_backbone=True, with_policy=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("study", help="group tables and the per-group oracle")
    _add_common(p, with_data=True, with_backbone=True)
    p.add_argument("--group-mode", choices=["length", "cluster", "both"],
                   default="length")
    p.add_argument("--clusters", type=int, help="cluster count for cluster mode")
    p.set_defaults(func=cmd_study)

    p = sub.add_parser("config-dump", help="print the fully resolved configuration")
    _add_common(p)
    p.set_defaults(func=cmd_config_dump)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 2
    except nn.NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
