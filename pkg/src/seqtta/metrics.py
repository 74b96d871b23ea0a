"""Top-K ranking metrics and report containers.

A target's rank is its 1-indexed position in the descending-score ordering of
the real item catalog, with exact ties broken by ascending item index.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

K_VALUES = (5, 10, 20)


def hr_at_k(rank, k):
    return 1.0 if rank <= k else 0.0


def ndcg_at_k(rank, k):
    if rank > k:
        return 0.0
    return 1.0 / np.log2(rank + 1.0)


def target_rank(scores, target, num_items):
    """Rank of `target` among items 1..num_items under descending score."""
    real = scores[1:num_items + 1]
    t = scores[target]
    higher = int(np.sum(real > t))
    tied_before = int(np.sum(real[:target - 1] == t))
    return 1 + higher + tied_before


@dataclass
class MetricsSummary:
    user_count: int
    hr: dict
    ndcg: dict

    def metric(self, name):
        """Look up a metric by table label, e.g. 'H@10' or 'N@5'."""
        kind, k = name.split("@")
        k = int(k)
        if kind == "H":
            return self.hr[k]
        if kind == "N":
            return self.ndcg[k]
        raise KeyError(f"unknown metric {name!r}")

    @staticmethod
    def column_labels():
        return [f"{kind}@{k}" for k in K_VALUES for kind in ("H", "N")]

    def columns(self):
        return [self.metric(label) for label in self.column_labels()]


def summarize(ranks):
    ranks = list(ranks)
    n = len(ranks)
    if n == 0:
        return MetricsSummary(0, {k: 0.0 for k in K_VALUES}, {k: 0.0 for k in K_VALUES})
    hr = {k: float(np.mean([hr_at_k(r, k) for r in ranks])) for k in K_VALUES}
    ndcg = {k: float(np.mean([ndcg_at_k(r, k) for r in ranks])) for k in K_VALUES}
    return MetricsSummary(n, hr, ndcg)


def combine_summaries(parts):
    """User-weighted combination of disjoint summaries (partition identity)."""
    parts = [p for p in parts if p.user_count > 0]
    total = sum(p.user_count for p in parts)
    if total == 0:
        return summarize([])
    hr = {k: sum(p.hr[k] * p.user_count for p in parts) / total for k in K_VALUES}
    ndcg = {k: sum(p.ndcg[k] * p.user_count for p in parts) / total for k in K_VALUES}
    return MetricsSummary(total, hr, ndcg)


def fmt(x):
    return f"{x:.6f}"


@dataclass
class RankingReport:
    """Per-user ranks under one strategy plus their aggregate summary."""

    rows: list  # (user_id, action_name, rank)
    summary: MetricsSummary

    def to_text(self):
        lines = ["user_id\taction\trank"]
        for user_id, action, rank in self.rows:
            lines.append(f"{user_id}\t{action}\t{rank}")
        lines.append("# summary")
        lines.append(f"# users\t{self.summary.user_count}")
        for label in MetricsSummary.column_labels():
            lines.append(f"# {label}\t{fmt(self.summary.metric(label))}")
        return "\n".join(lines) + "\n"

    def write(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_text())


def summary_table(rows, first_column="strategy"):
    """Fixed-format table: one row per (name, MetricsSummary)."""
    lines = ["\t".join([first_column, "users"] + MetricsSummary.column_labels())]
    for name, summary in rows:
        cells = [name, str(summary.user_count)] + [fmt(v) for v in summary.columns()]
        lines.append("\t".join(cells))
    return "\n".join(lines) + "\n"
