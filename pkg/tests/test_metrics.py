import numpy as np

from seqtta.metrics import (MetricsSummary, RankingReport, combine_summaries,
                            hr_at_k, ndcg_at_k, summarize, target_rank)
from seqtta.rng import stream


def test_hr_ndcg_closed_forms():
    assert hr_at_k(1, 10) == 1.0
    assert ndcg_at_k(1, 10) == 1.0
    assert np.isclose(ndcg_at_k(3, 10), 0.5)  # 1/log2(4)
    assert hr_at_k(11, 10) == 0.0
    assert ndcg_at_k(11, 10) == 0.0


def test_ndcg_never_exceeds_hr_and_monotone_in_k():
    for rank in range(1, 40):
        for k in (5, 10, 20):
            assert ndcg_at_k(rank, k) <= hr_at_k(rank, k)
        assert hr_at_k(rank, 5) <= hr_at_k(rank, 10) <= hr_at_k(rank, 20)
        assert ndcg_at_k(rank, 5) <= ndcg_at_k(rank, 10) <= ndcg_at_k(rank, 20)


def brute_force_rank(scores, target, num_items):
    """Oracle: sort (score desc, index asc) and locate the target."""
    order = sorted(range(1, num_items + 1), key=lambda i: (-scores[i], i))
    return order.index(target) + 1


def test_target_rank_matches_brute_force_with_ties():
    rng = stream(0, "ranks")
    num_items = 30
    for trial in range(200):
        scores = np.empty(num_items + 2)
        scores[:] = -np.inf
        vals = rng.integers(0, 8, size=num_items).astype(float)  # many ties
        scores[1:num_items + 1] = vals
        target = int(rng.integers(1, num_items + 1))
        assert target_rank(scores, target, num_items) == \
            brute_force_rank(scores, target, num_items)


def test_summarize_and_partition_identity():
    rng = stream(1, "ranks")
    ranks = [int(r) for r in rng.integers(1, 50, size=101)]
    whole = summarize(ranks)
    parts = [summarize(ranks[:40]), summarize(ranks[40:])]
    combined = combine_summaries(parts)
    assert combined.user_count == whole.user_count
    for label in MetricsSummary.column_labels():
        assert np.isclose(combined.metric(label), whole.metric(label))


def test_summarize_empty():
    s = summarize([])
    assert s.user_count == 0 and s.hr[10] == 0.0


def test_report_bytes_deterministic(tmp_path):
    rows = [("u1", "crop", 3), ("u2", "crop", 12)]
    report = RankingReport(rows=rows, summary=summarize([3, 12]))
    a, b = tmp_path / "a.tsv", tmp_path / "b.tsv"
    report.write(a)
    report.write(b)
    assert a.read_bytes() == b.read_bytes()
    text = a.read_text()
    assert "user_id\taction\trank" in text
    assert "# H@5" in text and "# N@20" in text
