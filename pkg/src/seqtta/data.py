"""Interaction logs: ingestion, k-core filtering, leave-one-out splits,
and a synthetic multi-population generator for controlled experiments.

Item index conventions used everywhere downstream:
  0             padding (reserved, never scored)
  1..num_items  real items
  num_items+1   mask token
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import rankdata

from .rng import stream

PAD_IDX = 0
SNAPSHOT_VERSION = 1


class DataError(Exception):
    """Base class for dataset construction failures."""


class ParseError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


@dataclass
class Interaction:
    user_id: str
    item_id: str
    timestamp: int


@dataclass
class InteractionDataset:
    """Dense-indexed interaction sequences.

    sequences[u] is user u's chronological item-index list; indices are in
    [1, num_items].  user_ids / item_ids map dense indices back to the raw
    identifiers (item index i corresponds to item_ids[i - 1]).
    """

    user_ids: list
    item_ids: list
    sequences: list
    gen_stats: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def num_users(self):
        return len(self.user_ids)

    @property
    def num_items(self):
        return len(self.item_ids)

    @property
    def mask_idx(self):
        return self.num_items + 1

    def item_counts(self):
        """Interaction count per item, index-aligned (entry 0 unused)."""
        counts = np.zeros(self.num_items + 1, dtype=np.int64)
        for seq in self.sequences:
            np.add.at(counts, np.asarray(seq, dtype=np.int64), 1)
        return counts

    def validate(self):
        if self.num_users == 0 or self.num_items == 0:
            raise EmptyDatasetError("dataset has no users or no items")
        for u, seq in enumerate(self.sequences):
            if len(seq) == 0:
                raise DataError(f"user {self.user_ids[u]} has an empty sequence")
            arr = np.asarray(seq)
            if arr.min() < 1 or arr.max() > self.num_items:
                raise DataError(f"user {self.user_ids[u]} has out-of-range item indices")
        return self

    def save(self, path):
        """Write a versioned snapshot; byte-stable for identical datasets."""
        payload = {
            "format_version": SNAPSHOT_VERSION,
            "user_ids": list(self.user_ids),
            "item_ids": list(self.item_ids),
            "sequences": [list(map(int, s)) for s in self.sequences],
        }
        text = json.dumps(payload, sort_keys=True, separators=(",", ":"))
        Path(path).write_text(text + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        try:
            payload = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise DataError(f"unreadable dataset snapshot {path}: {e}") from e
        version = payload.get("format_version")
        if version != SNAPSHOT_VERSION:
            raise DataError(f"unsupported snapshot version {version!r}")
        return cls(
            user_ids=payload["user_ids"],
            item_ids=payload["item_ids"],
            sequences=payload["sequences"],
        ).validate()


@dataclass
class LooSplit:
    user: int
    prefix: list
    valid: int
    test: int


@dataclass
class SplitResult:
    per_user: dict
    dropped: int

    def users(self):
        return sorted(self.per_user)

    def input_sequence(self, user, which="test"):
        """Inference context for a split target.

        Test targets are predicted from prefix + validation item (the full
        known history); validation targets from the prefix alone.
        """
        s = self.per_user[user]
        if which == "test":
            return s.prefix + [s.valid]
        if which == "valid":
            return list(s.prefix)
        raise ValueError(f"unknown split target {which!r}")

    def target(self, user, which="test"):
        s = self.per_user[user]
        return s.test if which == "test" else s.valid


def _parse_row(fields, line_no):
    if len(fields) != 3:
        raise ParseError(f"line {line_no}: expected 3 fields, got {len(fields)}")
    user, item, ts = (f.strip() for f in fields)
    if not user or not item:
        raise ParseError(f"line {line_no}: empty user or item id")
    try:
        ts = int(ts)
    except ValueError:
        raise ParseError(f"line {line_no}: timestamp {ts!r} is not an integer") from None
    return user, item, ts


def ingest(path, format="auto"):
    """Read `user<sep>item<timestamp>` text into an InteractionDataset.

    Dense ids are assigned in first-seen file order; each user's sequence is
    sorted by timestamp with ties kept in input order.  A single leading
    header line is tolerated and skipped.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"input file not found: {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    rows = [(i + 1, ln) for i, ln in enumerate(lines) if ln.strip()]
    if not rows:
        raise EmptyDatasetError(f"input file {path} contains no interactions")

    if format == "auto":
        sep = "\t" if "\t" in rows[0][1] else ","
    elif format in ("tsv", "csv"):
        sep = "\t" if format == "tsv" else ","
    else:
        raise ValueError(f"unknown format {format!r}")

    interactions = []
    for pos, (line_no, ln) in enumerate(rows):
        fields = ln.split(sep)
        try:
            interactions.append(_parse_row(fields, line_no))
        except ParseError:
            # only the very first line may be a header
            if pos == 0 and len(rows) > 1:
                continue
            raise
    if not interactions:
        raise EmptyDatasetError(f"input file {path} contains no interactions")

    user_index, item_index = {}, {}
    user_ids, item_ids = [], []
    per_user = {}
    for order, (user, item, ts) in enumerate(interactions):
        if user not in user_index:
            user_index[user] = len(user_ids)
            user_ids.append(user)
            per_user[user_index[user]] = []
        if item not in item_index:
            item_index[item] = len(item_ids) + 1  # 1-based dense index
            item_ids.append(item)
        per_user[user_index[user]].append((ts, order, item_index[item]))

    sequences = []
    for u in range(len(user_ids)):
        events = sorted(per_user[u], key=lambda e: e[0])  # stable: ties keep input order
        sequences.append([item for _, _, item in events])
    return InteractionDataset(user_ids, item_ids, sequences).validate()


def k_core_filter(ds, k):
    """Iteratively drop users and items with < k interactions until fixpoint.

    Dense ids are reassigned, preserving the surviving users'/items' relative
    order so the operation is idempotent.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    seqs = {u: list(s) for u, s in enumerate(ds.sequences)}
    while True:
        item_counts = {}
        for s in seqs.values():
            for it in s:
                item_counts[it] = item_counts.get(it, 0) + 1
        bad_items = {it for it, c in item_counts.items() if c < k}
        changed = False
        if bad_items:
            for u in list(seqs):
                s = [it for it in seqs[u] if it not in bad_items]
                if len(s) != len(seqs[u]):
                    changed = True
                seqs[u] = s
        for u in list(seqs):
            if len(seqs[u]) < k:
                del seqs[u]
                changed = True
        if not changed:
            break
    if not seqs:
        raise EmptyDatasetError(f"{k}-core filtering removed every user")

    kept_users = sorted(seqs)
    kept_items = sorted({it for s in seqs.values() for it in s})
    item_remap = {old: new + 1 for new, old in enumerate(kept_items)}
    return InteractionDataset(
        user_ids=[ds.user_ids[u] for u in kept_users],
        item_ids=[ds.item_ids[old - 1] for old in kept_items],
        sequences=[[item_remap[it] for it in seqs[u]] for u in kept_users],
    ).validate()


def split_leave_one_out(ds):
    """Last item -> test target, second-to-last -> validation target.

    Users with fewer than 3 interactions cannot be split and are counted in
    SplitResult.dropped.
    """
    per_user, dropped = {}, 0
    for u, seq in enumerate(ds.sequences):
        if len(seq) < 3:
            dropped += 1
            continue
        per_user[u] = LooSplit(user=u, prefix=list(seq[:-2]), valid=seq[-2], test=seq[-1])
    return SplitResult(per_user=per_user, dropped=dropped)


def popularity_percentiles(ds):
    """Per-item popularity percentile in (0, 1], average-rank tie handling.

    Index-aligned with item ids; entries 0 (padding) and num_items+1 (mask)
    are 0 so the array can be indexed directly with any token.
    """
    counts = ds.item_counts()[1:]
    if counts.size == 0:
        raise EmptyDatasetError("cannot rank an empty item catalog")
    pct = rankdata(counts, method="average") / ds.num_items
    out = np.zeros(ds.num_items + 2, dtype=np.float64)
    out[1 : ds.num_items + 1] = pct
    return out


@dataclass
class PopulationSpec:
    """One synthetic behavior population.

    Sequences are walks over a Markov chain that puts `determinism` mass on a
    designated successor per item (drawn from transition_seed, or given
    explicitly through successor_map) and spreads the rest uniformly.  After
    the walk, each emitted item is replaced by a uniform random catalog item
    with probability noise_rate, then adjacent pairs are swapped with
    probability reorder_rate.
    """

    num_users: int
    transition_seed: int = 0
    noise_rate: float = 0.0
    reorder_rate: float = 0.0
    min_len: int = 5
    max_len: int = 15
    determinism: float = 0.9
    item_range: tuple = None   # (lo, hi) inclusive 1-based; defaults to full catalog
    successor_map: list = None  # explicit successor per item in item_range

    def validate(self, num_items):
        if not (0.0 <= self.noise_rate <= 1.0 and 0.0 <= self.reorder_rate <= 1.0):
            raise ValueError("noise_rate and reorder_rate must be in [0, 1]")
        if self.min_len < 3 or self.max_len < self.min_len:
            raise ValueError("need 3 <= min_len <= max_len")
        if not (0.0 <= self.determinism <= 1.0):
            raise ValueError("determinism must be in [0, 1]")
        lo, hi = self.item_range or (1, num_items)
        if not (1 <= lo <= hi <= num_items):
            raise ValueError(f"item_range {self.item_range} outside catalog")
        return self


@dataclass
class SyntheticSpec:
    populations: list
    num_items: int
    rng_seed: int = 0

    def validate(self):
        if self.num_items < 1 or not self.populations:
            raise ValueError("need at least one item and one population")
        for p in self.populations:
            p.validate(self.num_items)
        return self


def _population_successors(pop, lo, hi, seed):
    n = hi - lo + 1
    if pop.successor_map is not None:
        succ = list(pop.successor_map)
        if len(succ) != n:
            raise ValueError("successor_map length must match item_range size")
        return succ
    rng = stream(seed, "transition", pop.transition_seed)
    perm = rng.permutation(n)
    return [lo + int(perm[i]) for i in range(n)]


def generate_synthetic(spec):
    """Sample an InteractionDataset from a SyntheticSpec, reproducibly.

    gen_stats records how many emitted items the noise step replaced, which
    lets tests confirm the corruption rate empirically.
    """
    spec.validate()
    item_ids = [f"i{j}" for j in range(1, spec.num_items + 1)]
    user_ids, sequences = [], []
    replaced = emitted = 0

    for p_idx, pop in enumerate(spec.populations):
        lo, hi = pop.item_range or (1, spec.num_items)
        succ = _population_successors(pop, lo, hi, spec.rng_seed)
        n_local = hi - lo + 1
        for u in range(pop.num_users):
            rng = stream(spec.rng_seed, "pop", p_idx, "user", u)
            length = int(rng.integers(pop.min_len, pop.max_len + 1))
            seq = [lo + int(rng.integers(0, n_local))]
            for _ in range(length - 1):
                cur = seq[-1]
                if lo <= cur <= hi and rng.random() < pop.determinism:
                    seq.append(succ[cur - lo])
                else:
                    seq.append(lo + int(rng.integers(0, n_local)))
            if pop.noise_rate > 0:
                for t in range(length):
                    emitted += 1
                    if rng.random() < pop.noise_rate:
                        seq[t] = int(rng.integers(1, spec.num_items + 1))
                        replaced += 1
            else:
                emitted += length
            if pop.reorder_rate > 0:
                for t in range(length - 1):
                    if rng.random() < pop.reorder_rate:
                        seq[t], seq[t + 1] = seq[t + 1], seq[t]
            user_ids.append(f"p{p_idx}_u{u}")
            sequences.append(seq)

    ds = InteractionDataset(user_ids, item_ids, sequences,
                            gen_stats={"replaced": replaced, "emitted": emitted})
    return ds.validate()
