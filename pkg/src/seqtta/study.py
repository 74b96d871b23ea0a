"""Group-level operator study: stratify evaluation users by sequence length
or by k-means clusters of their behavior embeddings, score every fixed
operator per group, and assemble the per-group oracle upper bound.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .engine import per_user_ranks
from .augment import build_similarity_index
from .metrics import MetricsSummary, combine_summaries, fmt, summarize
from .rng import stream

LENGTH_GROUPS = ("short", "medium", "long")


@dataclass
class GroupSpec:
    mode: str = "length"          # "length" or "cluster"
    thresholds: tuple = (8, 20)   # short <= t0 < medium <= t1 < long
    clusters: int = 3
    seed: int = 0

    def validate(self):
        if self.mode not in ("length", "cluster"):
            raise ValueError(f"unknown grouping mode {self.mode!r}")
        lo, hi = self.thresholds
        if not lo < hi:
            raise ValueError("length thresholds must increase")
        if self.clusters < 2:
            raise ValueError("need at least 2 clusters")
        return self


def group_by_length(ds, users, thresholds=(8, 20)):
    """Bucket users by full-sequence length: short / medium / long."""
    lo, hi = thresholds
    groups = {}
    for u in users:
        n = len(ds.sequences[u])
        if n <= lo:
            groups[u] = "short"
        elif n <= hi:
            groups[u] = "medium"
        else:
            groups[u] = "long"
    return groups


def kmeans_cluster(X, k, seed, max_iter=300, tol=1e-6, return_history=False):
    """Plain Lloyd k-means with k-means++ seeding.

    Deterministic under the seed; an emptied cluster is re-seeded from the
    point currently farthest from its assigned centroid.  With
    return_history, also returns the within-cluster objective per iteration.
    """
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    if k > n:
        raise ValueError(f"k={k} exceeds {n} points")
    rng = stream(seed, "kmeans")

    centroids = np.empty((k, X.shape[1]))
    first = int(rng.integers(0, n))
    centroids[0] = X[first]
    d2 = np.sum((X - centroids[0]) ** 2, axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:
            centroids[c] = X[int(rng.integers(0, n))]
        else:
            r = rng.random() * total
            idx = int(np.searchsorted(np.cumsum(d2), r))
            idx = min(idx, n - 1)
            centroids[c] = X[idx]
        d2 = np.minimum(d2, np.sum((X - centroids[c]) ** 2, axis=1))

    labels = np.zeros(n, dtype=np.int64)
    history = []
    for _ in range(max_iter):
        dists = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        labels = dists.argmin(axis=1)
        history.append(float(dists[np.arange(n), labels].sum()))
        new_centroids = centroids.copy()
        for c in range(k):
            members = labels == c
            if members.any():
                new_centroids[c] = X[members].mean(axis=0)
            else:
                farthest = int(np.argmax(dists[np.arange(n), labels]))
                new_centroids[c] = X[farthest]
        shift = float(np.max(np.linalg.norm(new_centroids - centroids, axis=1)))
        centroids = new_centroids
        if shift < tol:
            break
    dists = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    labels = dists.argmin(axis=1)
    if return_history:
        return labels, centroids, history
    return labels, centroids


def group_by_cluster(ds, users, embeddings, k, seed):
    """Map users to 'c0'..'c{k-1}' via k-means over their state embeddings."""
    users = sorted(users)
    X = np.stack([embeddings[u] for u in users])
    labels, _ = kmeans_cluster(X, k, seed)
    return {u: f"c{int(c)}" for u, c in zip(users, labels)}


@dataclass
class GroupedReport:
    group_order: list
    group_users: dict                    # group -> sorted user list
    tables: dict                         # group -> {action_name: MetricsSummary}
    overall: dict = field(default_factory=dict)   # action_name -> MetricsSummary
    best: dict = field(default_factory=dict)      # group -> action_name
    selection_metric: str = "H@10"
    oracle: MetricsSummary = None

    def to_text(self):
        lines = ["group\taction\tusers\t" + "\t".join(MetricsSummary.column_labels())]
        for group in self.group_order:
            for action_name, summary in self.tables[group].items():
                cells = [group, action_name, str(summary.user_count)]
                cells += [fmt(v) for v in summary.columns()]
                lines.append("\t".join(cells))
        for action_name, summary in self.overall.items():
            cells = ["overall", action_name, str(summary.user_count)]
            cells += [fmt(v) for v in summary.columns()]
            lines.append("\t".join(cells))
        lines.append(f"# selection_metric\t{self.selection_metric}")
        for group in self.group_order:
            lines.append(f"# best[{group}]\t{self.best.get(group, '')}")
        if self.oracle is not None:
            cells = ["# oracle", str(self.oracle.user_count)]
            cells += [fmt(v) for v in self.oracle.columns()]
            lines.append("\t".join(cells))
        return "\n".join(lines) + "\n"

    def write(self, path):
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(self.to_text())


def per_group_operator_table(backbone, ds, split, groups, actions, params, cfg,
                             seed, which="test", threads=1,
                             selection_metric="H@10"):
    """Fixed-strategy metrics for every (group, action) pair.

    Ranks are computed once per action over all users (streams are keyed per
    user, so restriction to a group commutes with evaluation), then sliced.
    """
    users = split.users()
    missing = [u for u in users if u not in groups]
    if missing:
        raise ValueError(f"{len(missing)} evaluation users have no group")
    order = []
    for u in users:
        if groups[u] not in order:
            order.append(groups[u])
    if set(order) <= set(LENGTH_GROUPS):
        order = [g for g in LENGTH_GROUPS if g in order]
    group_users = {g: sorted(u for u in users if groups[u] == g) for g in order}

    index = build_similarity_index(backbone, params.similarity_top_k)
    tables = {g: {} for g in order}
    overall = {}
    for action in actions:
        ranks = per_user_ranks(backbone, ds, split, action, params, cfg, seed,
                               which=which, index=index, threads=threads)
        overall[action.value] = summarize(ranks[u] for u in users)
        for g in order:
            tables[g][action.value] = summarize(ranks[u] for u in group_users[g])

    report = GroupedReport(group_order=order, group_users=group_users,
                           tables=tables, overall=overall,
                           selection_metric=selection_metric)
    for g in order:
        best_action, best_value = None, -1.0
        for action in actions:
            value = tables[g][action.value].metric(selection_metric)
            if value > best_value:
                best_action, best_value = action.value, value
        report.best[g] = best_action
    report.oracle = oracle_report(report, selection_metric)
    return report


def oracle_report(grouped, selection_metric="H@10"):
    """Upper bound: give each group its best fixed operator, then combine."""
    parts = []
    for g in grouped.group_order:
        best_action, best_value = None, -1.0
        for action_name, summary in grouped.tables[g].items():
            value = summary.metric(selection_metric)
            if value > best_value:
                best_action, best_value = action_name, value
        parts.append(grouped.tables[g][best_action])
    return combine_summaries(parts)
