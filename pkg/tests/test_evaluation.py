import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from rcar.errors import ConfigError, DataError
from rcar.evaluation import bidirectional_recall, diagnostics, five_fold_eval, gt_ranks, recall_at_k


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 12), st.integers(0, 10_000))
def test_ranks_match_sorting(n, seed):
    rng = np.random.default_rng(seed)
    S = rng.integers(0, 3, (n, n)).astype(float)
    gt = rng.integers(0, n, n)
    ranks = gt_ranks(S, [[g] for g in gt])
    for q in range(n):
        assert list(np.argsort(-S[q], kind="stable")).index(gt[q]) == ranks[q]


def test_multi_caption_hit_uses_best_caption():
    sims = np.array([[0.1, 0.9, 0.5, 0.2], [0.8, 0.0, 0.6, 0.7]])
    reports = bidirectional_recall(sims, [0, 0, 1, 1], ks=(1, 2))
    assert reports["image_to_text"].recalls == {1: 0.5, 2: 1.0}
    assert reports["text_to_image"].recalls == {1: 0.75, 2: 1.0}


def test_recall_errors():
    with pytest.raises(ConfigError):
        recall_at_k(np.zeros((2, 2)), [[0], [1]], ks=(3,))
    with pytest.raises(DataError):
        recall_at_k(np.zeros((2, 2)), [[0]], ks=(1,))


def test_five_fold_ignores_cross_fold_scores():
    rng = np.random.default_rng(0)
    S = rng.standard_normal((10, 20))
    for i in range(10):
        S[i, 2 * i] = 5.0
    res = five_fold_eval(S, captions_per_image=2, n_folds=5, ks=(1,))
    S2 = S.copy()
    S2[0:2, 4:20] = 100.0
    # folds of two images see only their own block, so cross-fold junk is invisible
    res2 = five_fold_eval(S2, captions_per_image=2, n_folds=5, ks=(1,))
    assert res.mean["image_to_text"].recalls == res2.mean["image_to_text"].recalls == {1: 1.0}
    assert res2.full["image_to_text"].recalls[1] < 1.0
    with pytest.raises(ConfigError):
        five_fold_eval(S[:9, :18], captions_per_image=2)


def test_diagnostics():
    pos = {"cosines": [np.array([[0.9, 0.8, np.nan]]), np.array([[0.95, 0.9, np.nan]])], "betas": [np.array([[0.5, 0.5, np.nan]])]}
    neg = {"cosines": [np.array([[0.1, 0.2, np.nan]]), np.array([[0.0, 0.1, np.nan]])], "betas": [np.array([[0.2, 0.8, np.nan]])]}
    out = diagnostics(pos, neg, [["concept", "filler"]])
    assert out.distances[0] == pytest.approx(0.7)
    assert out.distances[1] == pytest.approx(0.875)
    assert out.distances_by_tag[0] == pytest.approx({"concept": 0.8, "filler": 0.6})
    assert out.beta_by_tag["negative"][0] == {"concept": 0.2, "filler": 0.8}
    with pytest.raises(DataError):
        diagnostics({"cosines": []}, neg)
