import numpy as np
import pytest

from seqtta.augment import (ALL_ACTIONS, AugAction, ItemSimilarityIndex,
                            OperatorParams, action_preset, apply, apply_crop,
                            apply_insert, apply_mask, apply_reorder,
                            apply_substitute, apply_tmask_b, apply_tmask_r,
                            apply_tnoise, build_similarity_index)
from seqtta.backbones import Backbone, BackboneConfig
from seqtta.rng import stream


class FakeRng:
    """Scripted stand-in for a numpy Generator; pops prescribed draws."""

    def __init__(self, integers=(), choices=(), randoms=()):
        self._integers = list(integers)
        self._choices = list(choices)
        self._randoms = list(randoms)

    def integers(self, low, high=None, size=None):
        assert size is None
        value = self._integers.pop(0)
        hi = low if high is None else high
        lo = 0 if high is None else low
        assert lo <= value < hi, f"scripted draw {value} outside [{lo}, {hi})"
        return value

    def choice(self, n, size=None, replace=True):
        picked = np.asarray(self._choices.pop(0))
        assert len(picked) == size
        return picked

    def random(self):
        return self._randoms.pop(0)


def make_backbone(num_items=10, d=8, seed=0):
    return Backbone(BackboneConfig(kind="attentive", embed_dim=d, max_len=20,
                                   rng_seed=seed), num_items)


# -- similarity index --------------------------------------------------------


def test_similarity_duplicate_rows_are_mutual_top1():
    bb = make_backbone(num_items=4)
    E = bb.store["E"]
    E[2] = E[1]
    idx = build_similarity_index(bb, 1)
    assert idx[1] == [2]
    assert idx[2] == [1]


def test_similarity_orthogonal_ties_break_by_index():
    bb = make_backbone(num_items=3, d=3)
    bb.store["E"][1:4] = np.eye(3)
    idx = build_similarity_index(bb, 2)
    assert idx[1] == [2, 3]
    assert idx[2] == [1, 3]
    assert idx[3] == [1, 2]


def test_similarity_matches_brute_force():
    bb = make_backbone(num_items=20, d=6, seed=4)
    E = bb.store["E"][1:21]
    idx = build_similarity_index(bb, 5)
    for i in range(20):
        sims = []
        for j in range(20):
            if i == j:
                continue
            c = E[i] @ E[j] / (np.linalg.norm(E[i]) * np.linalg.norm(E[j]))
            sims.append((-c, j + 1))
        expected = [j for _, j in sorted(sims)[:5]]
        assert idx[i + 1] == expected


def test_similarity_k_clamped():
    bb = make_backbone(num_items=4)
    idx = build_similarity_index(bb, 99)
    assert all(len(idx[i]) == 3 for i in range(1, 5))


# -- sequence-space operators -------------------------------------------------


def test_crop_full_ratio_returns_whole_sequence():
    s = [1, 2, 3, 4, 5]
    assert apply_crop(s, 1.0, FakeRng(integers=[0])) == s


def test_crop_fixed_draw():
    # |s|=10, ratio 0.5 -> L=5, scripted start 2 (0-based) = position 3 (1-based)
    s = list(range(1, 11))
    assert apply_crop(s, 0.5, FakeRng(integers=[2])) == [3, 4, 5, 6, 7]


def test_crop_always_contiguous_slice():
    for n in range(1, 9):
        s = list(range(1, n + 1))
        slices = {tuple(s[i:i + L]) for L in range(1, n + 1)
                  for i in range(n - L + 1)}
        for trial in range(200):
            out = tuple(apply_crop(s, 0.6, stream(0, "crop", n, trial)))
            assert out in slices


def test_reorder_window_one_is_identity():
    s = [4, 3, 2, 1]
    assert apply_reorder(s, 0.2, FakeRng(integers=[1])) == s  # W = max(1, 0) = 1


def test_reorder_is_permutation_and_outside_fixed():
    for n in range(2, 9):
        s = list(range(1, n + 1))
        W = max(1, int(0.5 * n))
        for trial in range(100):
            out = apply_reorder(s, 0.5, stream(1, "reorder", n, trial))
            assert sorted(out) == s
            # some window of length W contains every displaced position
            moved = [i for i in range(n) if out[i] != s[i]]
            if moved:
                assert moved[-1] - moved[0] < W


def test_mask_count_rules():
    mask_idx = 99
    seq = [1, 2, 3, 4, 5]
    # ratio so small the floor would be 0 -> still exactly one mask
    out = apply_mask(seq, 0.05, mask_idx, stream(2, "m"))
    assert sum(1 for v in out if v == mask_idx) == 1
    out = apply_mask(seq, 1.0, mask_idx, stream(2, "m2"))
    assert all(v == mask_idx for v in out)


def test_mask_preserves_unselected():
    seq = [5, 6, 7, 8]
    out = apply_mask(seq, 0.5, 99, FakeRng(choices=[[1, 3]]))
    assert out == [5, 99, 7, 99]


def test_substitute_uses_neighbor_lists():
    index = ItemSimilarityIndex({1: [2], 2: [1], 3: [4], 4: [3]}, k=1)
    seq = [1, 3, 1, 3]
    out = apply_substitute(seq, 0.5, index, FakeRng(choices=[[0, 1]],
                                                    integers=[0, 0]))
    assert out == [2, 4, 1, 3]
    assert len(out) == len(seq)


def test_substitute_twin_mapping_with_duplicate_embeddings():
    bb = make_backbone(num_items=4)
    E = bb.store["E"]
    E[2] = E[1]
    E[4] = E[3]
    index = build_similarity_index(bb, 1)
    out = apply_substitute([1, 3], 1.0, index, stream(3, "sub"))
    assert out == [2, 4]


def test_substitute_empty_neighbors_left_unchanged():
    index = ItemSimilarityIndex({1: []}, k=0)
    assert apply_substitute([1, 1], 1.0, index, FakeRng(choices=[[0, 1]])) == [1, 1]


def test_insert_properties():
    index = ItemSimilarityIndex({i: [i + 10] for i in range(1, 7)}, k=1)
    seq = [1, 2, 3, 4, 5, 6]
    for trial in range(50):
        out = apply_insert(seq, 0.3, index, stream(4, "ins", trial))
        assert len(out) == len(seq) + 1
        # original order preserved (subsequence test)
        it = iter(out)
        assert all(v in it for v in seq)
        inserted = [v for v in out if v > 10]
        assert len(inserted) == 1
        anchor_pos = out.index(inserted[0]) - 1
        assert inserted[0] == out[anchor_pos] + 10


def test_insert_truncates_past_max_len():
    index = ItemSimilarityIndex({i: [i] for i in range(1, 9)}, k=1)
    seq = list(range(1, 9))
    out = apply_insert(seq, 1.0, index, stream(5, "ins"), max_len=8)
    assert len(out) == 8
    assert out[-1] == 8  # most recent kept


def test_tmask_r_fixed_draws():
    # |s|=5, ratio 0.4 -> remove 2; scripted positions {1, 3} (0-based)
    out, warn = apply_tmask_r([10, 20, 30, 40, 50], 0.4, FakeRng(choices=[[1, 3]]))
    assert out == [10, 30, 50]
    assert not warn


def test_tmask_r_cap_keeps_survivor():
    for trial in range(30):
        out, _ = apply_tmask_r([1, 2, 3], 1.0, stream(6, "tmr", trial))
        assert len(out) == 1  # count capped at n-1


def test_tmask_r_single_item_identity_with_warning():
    out, warn = apply_tmask_r([7], 0.5, stream(7, "tmr"))
    assert out == [7] and warn


def test_tmask_r_outputs_are_subsequences():
    s = [1, 2, 3, 4, 5, 6]
    for trial in range(100):
        out, _ = apply_tmask_r(s, 0.3, stream(8, "tmr", trial))
        assert len(out) == 5
        it = iter(s)
        assert all(v in it for v in out)


def test_tnoise_degenerate_zero_interval():
    E = stream(9, "tn").normal(size=(4, 3))
    out = apply_tnoise(E, 0.0, 0.0, stream(9, "tn2"))
    assert np.array_equal(out, E)


def test_tnoise_bounds_and_mean():
    E = np.zeros((500, 200))
    out = apply_tnoise(E, -0.1, 0.3, stream(10, "tn"))
    eps = out - E
    assert eps.min() >= -0.1 and eps.max() <= 0.3
    # uniform(a, b): mean (a+b)/2, sd (b-a)/sqrt(12); n = 1e5 draws
    n = eps.size
    se = 0.4 / np.sqrt(12.0) / np.sqrt(n)
    assert abs(eps.mean() - 0.1) < 3 * se


def test_tmask_b_fixed_draws():
    E = np.arange(8, dtype=np.float64).reshape(4, 2) + 1.0
    out, warn = apply_tmask_b(E, 0.5, FakeRng(choices=[[1, 3]]))
    assert not warn
    assert np.allclose(out[[1, 3]], 0.0)
    assert np.array_equal(out[[0, 2]], E[[0, 2]])


def test_tmask_b_cap_and_single_row():
    E = stream(11, "tb").normal(size=(3, 4))
    for trial in range(30):
        out, _ = apply_tmask_b(E, 1.0, stream(11, "tb", trial))
        assert np.sum(np.all(out == 0.0, axis=1)) == 2  # one row survives
    single, warn = apply_tmask_b(E[:1], 0.5, stream(11, "tb1"))
    assert warn and np.array_equal(single, E[:1])


# -- dispatch ------------------------------------------------------------------


def test_apply_identity_returns_input():
    bb = make_backbone()
    view = apply([1, 2, 3], bb, AugAction.IDENTITY, OperatorParams(), stream(0, "id"))
    assert view.sequence == [1, 2, 3]
    assert view.matrix is None


def test_apply_deterministic_under_same_stream():
    bb = make_backbone()
    params = OperatorParams()
    index = build_similarity_index(bb, params.similarity_top_k)
    seq = [1, 2, 3, 4, 5, 6]
    for action in ALL_ACTIONS:
        v1 = apply(seq, bb, action, params, stream(3, action.value), index=index)
        v2 = apply(seq, bb, action, params, stream(3, action.value), index=index)
        if v1.sequence is not None:
            assert v1.sequence == v2.sequence
        else:
            assert np.array_equal(v1.matrix, v2.matrix)


def test_every_action_yields_encodable_view():
    bb = make_backbone()
    params = OperatorParams()
    index = build_similarity_index(bb, params.similarity_top_k)
    seq = [1, 2, 3, 4, 5]
    for action in ALL_ACTIONS:
        view = apply(seq, bb, action, params, stream(4, action.value), index=index)
        if view.matrix is not None:
            H = bb.encode_from(view.matrix)
        else:
            assert len(view.sequence) >= 1
            H = bb.encode(view.sequence)
        assert np.all(np.isfinite(H))


def test_action_presets_nest():
    assert len(action_preset(5)) == 6
    assert len(action_preset(8)) == 9
    assert action_preset(8) == ALL_ACTIONS[:1] + ALL_ACTIONS[1:]
    assert set(action_preset(6)) - set(action_preset(5)) == {AugAction.TMASK_R}


def test_operator_params_validation():
    with pytest.raises(ValueError):
        OperatorParams(crop_ratio=0.0).validate()
    with pytest.raises(ValueError):
        OperatorParams(noise_low=0.2, noise_high=0.1).validate()
