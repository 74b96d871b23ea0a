"""The nine-element augmentation action space.

Sequence-space operators rewrite the item-index sequence (Identity, Crop,
Reorder, Mask, Substitute, Insert, TMaskR); representation-space operators
perturb the embedding matrix instead (TNoise, TMaskB).

Shared count rule: an operator that selects items picks
max(1, floor(ratio * len)) positions, capped at len - 1 for the removal /
zeroing operators so the output is never empty.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np


class AugAction(enum.Enum):
    IDENTITY = "identity"
    CROP = "crop"
    REORDER = "reorder"
    MASK = "mask"
    SUBSTITUTE = "substitute"
    INSERT = "insert"
    TMASK_R = "tmask_r"
    TMASK_B = "tmask_b"
    TNOISE = "tnoise"

    @classmethod
    def from_name(cls, name):
        try:
            return cls(name.lower())
        except ValueError:
            raise ValueError(f"unknown action {name!r}; choose from "
                             f"{[a.value for a in cls]}") from None


SEQUENCE_ACTIONS = frozenset({
    AugAction.IDENTITY, AugAction.CROP, AugAction.REORDER, AugAction.MASK,
    AugAction.SUBSTITUTE, AugAction.INSERT, AugAction.TMASK_R,
})
REPRESENTATION_ACTIONS = frozenset({AugAction.TNOISE, AugAction.TMASK_B})

# canonical ordering: identity first, then the five item-level operators,
# then the masking/noise family
ALL_ACTIONS = (
    AugAction.IDENTITY, AugAction.CROP, AugAction.REORDER, AugAction.MASK,
    AugAction.SUBSTITUTE, AugAction.INSERT, AugAction.TMASK_R,
    AugAction.TMASK_B, AugAction.TNOISE,
)


def action_preset(size):
    """Nested action sets used by the action-space ablation.

    The base set of 5 item-level operators grows by TMaskR, TMaskB, then
    TNoise; identity is always included on top.
    """
    base = [AugAction.CROP, AugAction.REORDER, AugAction.MASK,
            AugAction.SUBSTITUTE, AugAction.INSERT]
    extra = [AugAction.TMASK_R, AugAction.TMASK_B, AugAction.TNOISE]
    if not 5 <= size <= 8:
        raise ValueError("preset size must be in 5..8")
    return tuple([AugAction.IDENTITY] + base + extra[:size - 5])


@dataclass
class OperatorParams:
    crop_ratio: float = 0.6
    reorder_ratio: float = 0.2
    mask_ratio: float = 0.3
    substitute_ratio: float = 0.3
    insert_ratio: float = 0.3
    tmask_ratio: float = 0.3
    noise_low: float = -0.1
    noise_high: float = 0.1
    similarity_top_k: int = 10

    def validate(self):
        for name in ("crop_ratio", "reorder_ratio", "mask_ratio",
                     "substitute_ratio", "insert_ratio", "tmask_ratio"):
            v = getattr(self, name)
            if not (0.0 < v <= 1.0):
                raise ValueError(f"{name} must be in (0, 1], got {v}")
        if self.noise_low > self.noise_high:
            raise ValueError("noise_low must be <= noise_high")
        if self.similarity_top_k < 1:
            raise ValueError("similarity_top_k must be >= 1")
        return self


@dataclass
class AugmentedView:
    """Either a rewritten item sequence or a perturbed representation matrix."""

    action: AugAction
    sequence: list = None
    matrix: np.ndarray = None
    stream_parts: tuple = ()
    warning: bool = False


class ItemSimilarityIndex:
    """Exact top-k cosine neighbors over the backbone's item embeddings."""

    def __init__(self, neighbors, k):
        self.neighbors = neighbors  # item index (1-based) -> list of item indices
        self.k = k

    def __getitem__(self, item):
        return self.neighbors[item]


def build_similarity_index(backbone, k):
    n = backbone.num_items
    k = min(k, n - 1) if n > 1 else 0
    E = backbone.store["E"][1:n + 1]
    norms = np.linalg.norm(E, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    N = E / safe[:, None]
    sims = N @ N.T
    np.fill_diagonal(sims, -np.inf)
    neighbors = {}
    for i in range(n):
        # descending similarity, ties broken by ascending item index
        order = np.lexsort((np.arange(n), -sims[i]))
        neighbors[i + 1] = [int(j) + 1 for j in order[:k]]
    return ItemSimilarityIndex(neighbors, k)


def _select_count(ratio, n, cap_below_n=False):
    count = max(1, int(np.floor(ratio * n)))
    if cap_below_n:
        count = min(count, n - 1)
    return count


def apply_crop(seq, ratio, rng):
    n = len(seq)
    length = _select_count(ratio, n)
    start = int(rng.integers(0, n - length + 1))
    return list(seq[start:start + length])


def apply_reorder(seq, ratio, rng):
    n = len(seq)
    length = _select_count(ratio, n)
    start = int(rng.integers(0, n - length + 1))
    out = list(seq)
    window = out[start:start + length]
    for i in range(length - 1, 0, -1):  # Fisher-Yates
        j = int(rng.integers(0, i + 1))
        window[i], window[j] = window[j], window[i]
    out[start:start + length] = window
    return out


def apply_mask(seq, ratio, mask_idx, rng):
    n = len(seq)
    count = _select_count(ratio, n)
    positions = rng.choice(n, size=count, replace=False)
    out = list(seq)
    for p in positions:
        out[p] = mask_idx
    return out


def apply_substitute(seq, ratio, index, rng):
    n = len(seq)
    count = _select_count(ratio, n)
    positions = rng.choice(n, size=count, replace=False)
    out = list(seq)
    for p in positions:
        options = index[out[p]]
        if options:
            out[p] = options[int(rng.integers(0, len(options)))]
    return out


def apply_insert(seq, ratio, index, rng, max_len=None):
    """Insert a correlated item after each selected position.

    The original order is preserved; if the result exceeds max_len the most
    recent items are kept, matching the backbones' truncation rule.
    """
    n = len(seq)
    count = _select_count(ratio, n)
    positions = set(int(p) for p in rng.choice(n, size=count, replace=False))
    out = []
    for i, item in enumerate(seq):
        out.append(item)
        if i in positions:
            options = index[item]
            if options:
                out.append(options[int(rng.integers(0, len(options)))])
    if max_len is not None and len(out) > max_len:
        out = out[-max_len:]
    return out


def apply_tmask_r(seq, ratio, rng):
    n = len(seq)
    if n < 2:
        return list(seq), True
    count = _select_count(ratio, n, cap_below_n=True)
    removed = set(int(p) for p in rng.choice(n, size=count, replace=False))
    return [v for i, v in enumerate(seq) if i not in removed], False


def apply_tnoise(E_rows, low, high, rng):
    return E_rows + rng.uniform(low, high, size=E_rows.shape)


def apply_tmask_b(E_rows, ratio, rng):
    n = E_rows.shape[0]
    if n < 2:
        return E_rows.copy(), True
    count = _select_count(ratio, n, cap_below_n=True)
    zeroed = rng.choice(n, size=count, replace=False)
    out = E_rows.copy()
    out[zeroed] = 0.0
    return out, False


def apply(seq, backbone, action, params, rng, index=None, stream_parts=()):
    """Dispatch one action on a sequence, producing an AugmentedView."""
    params.validate()
    if action is AugAction.IDENTITY:
        return AugmentedView(action, sequence=list(seq), stream_parts=stream_parts)
    if action in (AugAction.SUBSTITUTE, AugAction.INSERT) and index is None:
        raise ValueError(f"{action.value} requires a similarity index")

    if action is AugAction.CROP:
        out = apply_crop(seq, params.crop_ratio, rng)
    elif action is AugAction.REORDER:
        out = apply_reorder(seq, params.reorder_ratio, rng)
    elif action is AugAction.MASK:
        out = apply_mask(seq, params.mask_ratio, backbone.mask_idx, rng)
    elif action is AugAction.SUBSTITUTE:
        out = apply_substitute(seq, params.substitute_ratio, index, rng)
    elif action is AugAction.INSERT:
        out = apply_insert(seq, params.insert_ratio, index, rng,
                           max_len=backbone.cfg.max_len)
    elif action is AugAction.TMASK_R:
        out, warn = apply_tmask_r(seq, params.tmask_ratio, rng)
        return AugmentedView(action, sequence=out, stream_parts=stream_parts, warning=warn)
    elif action is AugAction.TNOISE:
        E_rows = backbone.embed(seq)
        out = apply_tnoise(E_rows, params.noise_low, params.noise_high, rng)
        return AugmentedView(action, matrix=out, stream_parts=stream_parts)
    elif action is AugAction.TMASK_B:
        E_rows = backbone.embed(seq)
        out, warn = apply_tmask_b(E_rows, params.tmask_ratio, rng)
        return AugmentedView(action, matrix=out, stream_parts=stream_parts, warning=warn)
    else:
        raise ValueError(f"unhandled action {action}")
    return AugmentedView(action, sequence=out, stream_parts=stream_parts)
