import json
import math

import numpy as np
import pytest

from flexcode.evaluate import (
    EvalReport,
    format_sweep,
    ndcg_at_k,
    recall_at_k,
    score_rankings,
    write_report,
)


def brute_metrics(ranked, target, k):
    top = list(ranked)[:k]
    if target not in top:
        return 0, 0.0
    # ideal DCG with one relevant item is 1
    return 1, 1.0 / math.log2(top.index(target) + 2)


def test_rank_examples():
    assert ndcg_at_k([7, 8, 9], 9, 10) == 0.5  # rank 3: 1 / log2(4)
    assert ndcg_at_k([9, 8], 9, 10) == 1.0
    assert ndcg_at_k([1, 2, 9], 9, 2) == 0.0
    assert recall_at_k([1, 2, 9], 9, 3) == 1 and recall_at_k([1, 2, 9], 9, 2) == 0
    assert recall_at_k([], 3, 5) == 0
    with pytest.raises(ValueError):
        ndcg_at_k([1], 1, 0)
    with pytest.raises(ValueError):
        recall_at_k([1], 1, 0)


def test_fixture_matches_brute_force():
    rng = np.random.default_rng(0)
    rankings, targets = [], []
    for _ in range(1000):
        n = int(rng.integers(0, 30))
        rankings.append(rng.permutation(50)[:n].tolist())
        targets.append(int(rng.integers(0, 50)))
    head = set(range(10))
    rep = score_rankings(rankings, targets, head, ks=(5, 10))
    for k in (5, 10):
        rows = [brute_metrics(r, t, k) for r, t in zip(rankings, targets)]
        assert rep.overall[f"recall@{k}"] == pytest.approx(np.mean([r for r, _ in rows]), abs=1e-12)
        assert rep.overall[f"ndcg@{k}"] == pytest.approx(np.mean([n for _, n in rows]), abs=1e-12)
        hrows = [row for row, t in zip(rows, targets) if t in head]
        assert rep.head[f"ndcg@{k}"] == pytest.approx(np.mean([n for _, n in hrows]), abs=1e-12)


def test_random_ranking_monte_carlo():
    # a uniform random full ranking of n items gives recall@k = k / n
    rng = np.random.default_rng(1)
    n, k, users = 40, 10, 20000
    rankings = [rng.permutation(n).tolist() for _ in range(users)]
    targets = rng.integers(0, n, size=users).tolist()
    rep = score_rankings(rankings, targets, set(), ks=(k,))
    assert rep.overall[f"recall@{k}"] == pytest.approx(k / n, abs=0.01)
    expected_ndcg = sum(1 / math.log2(r + 1) for r in range(1, k + 1)) / n
    assert rep.overall[f"ndcg@{k}"] == pytest.approx(expected_ndcg, abs=0.01)


def test_head_tail_partition_of_users():
    rankings = [[1], [2], [3], [4]]
    targets = [1, 5, 3, 2]
    rep = score_rankings(rankings, targets, head={1, 2}, ks=(1,))
    assert (rep.num_users, rep.num_head_users, rep.num_tail_users) == (4, 2, 2)
    assert rep.head["recall@1"] == 0.5  # user 0 hits, user 3 misses
    assert rep.tail["recall@1"] == 0.5
    # the overall mean is the user-weighted mix of the parts
    assert rep.overall["ndcg@1"] == pytest.approx(0.5 * rep.head["ndcg@1"] + 0.5 * rep.tail["ndcg@1"])


def test_empty_part_reports_zero():
    rep = score_rankings([[1]], [1], head=set(), ks=(5,))
    assert rep.head == {"recall@5": 0.0, "ndcg@5": 0.0}
    assert rep.tail["recall@5"] == 1.0


def test_report_files_are_reproducible(tmp_path):
    rep = score_rankings([[1, 2], [3]], [2, 4], {1}, ks=(5, 10), label="full", seed=3, config_hash="abc")
    t1, j1 = write_report(rep, tmp_path / "a")
    t2, j2 = write_report(rep, tmp_path / "b")
    assert t1.read_bytes() == t2.read_bytes() and j1.read_bytes() == j2.read_bytes()
    data = json.loads(j1.read_text())
    assert data["config_hash"] == "abc" and "hits" not in data
    assert "overall.ndcg@10 = 0.31546487678572877" in t1.read_text()
    assert isinstance(rep, EvalReport)


def test_format_sweep():
    table = {"full": {3: 0.1, 4: 0.25}, "sid_only": {3: 0.05, 4: 0.125}}
    assert format_sweep(table) == "variant\tL=3\tL=4\nfull\t0.1000\t0.2500\nsid_only\t0.0500\t0.1250\n"
