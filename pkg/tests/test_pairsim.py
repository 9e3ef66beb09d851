import numpy as np
import pytest

from medi import pairsim
from medi.errors import ConfigError


def _brute_topk_set(z, topk):
    # full-sort oracle: magnitude descending, ties by lower index
    order = sorted(range(len(z)), key=lambda i: (-abs(z[i]), i))
    return set(order[:topk])


def test_identical_embeddings_are_similar():
    Z = np.array([[0.3, -0.7, 0.1], [0.3, -0.7, 0.1]])
    m = pairsim.ranking_similarity(Z, topk=2)
    assert m.s[0, 1] == 1 and m.s[1, 0] == 1


def test_worked_pair_with_matching_sets():
    Z = np.array([[0.9, 0.1, 0.5, 0.3], [0.8, 0.2, 0.6, 0.05]])
    assert _brute_topk_set(Z[0], 2) == {0, 2}
    assert _brute_topk_set(Z[1], 2) == {0, 2}
    m = pairsim.ranking_similarity(Z, topk=2)
    assert m.s[0, 1] == 1


def test_worked_pair_with_disjoint_sets():
    Z = np.array([[0.9, 0.1, 0.5, 0.3], [0.1, 0.9, 0.2, 0.8]])
    assert _brute_topk_set(Z[0], 2) == {0, 2}
    assert _brute_topk_set(Z[1], 2) == {1, 3}
    m = pairsim.ranking_similarity(Z, topk=2)
    assert m.s[0, 1] == 0


def test_ranking_matches_full_sort_oracle_fuzz():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(2, 8))
        h = int(rng.integers(3, 9))
        topk = int(rng.integers(1, h + 1))
        Z = rng.normal(size=(n, h))
        m = pairsim.ranking_similarity(Z, topk)
        for i in range(n):
            for j in range(n):
                expected = _brute_topk_set(Z[i], topk) == _brute_topk_set(Z[j], topk)
                assert m.s[i, j] == int(expected)


def test_ranking_symmetric_reflexive_fuzz():
    rng = np.random.default_rng(1)
    for _ in range(50):
        Z = rng.normal(size=(6, 7))
        s = pairsim.ranking_similarity(Z, topk=3).s
        assert np.array_equal(s, s.T)
        assert np.all(np.diag(s) == 1)


def test_ranking_invariant_to_common_permutation():
    rng = np.random.default_rng(2)
    for _ in range(30):
        Z = rng.normal(size=(5, 8))
        perm = rng.permutation(8)
        a = pairsim.ranking_similarity(Z, topk=3).s
        b = pairsim.ranking_similarity(Z[:, perm], topk=3).s
        assert np.array_equal(a, b)


def test_ranking_invariant_to_positive_rescaling():
    rng = np.random.default_rng(3)
    for _ in range(30):
        Z = rng.normal(size=(5, 6))
        scales = rng.uniform(0.01, 50.0, size=(5, 1))
        a = pairsim.ranking_similarity(Z, topk=2).s
        b = pairsim.ranking_similarity(Z * scales, topk=2).s
        assert np.array_equal(a, b)


def test_magnitude_ties_break_to_lower_index():
    Z = np.array([[1.0, 1.0, 0.5], [1.0, 0.2, 1.0]])
    sets = pairsim.topk_index_sets(Z, topk=1)
    assert sets[0, 0] == 0
    assert sets[1, 0] == 0


def test_ordered_mode_distinguishes_rank_order():
    Z = np.array([[0.9, 0.5, 0.0], [0.5, 0.9, 0.0]])
    unordered = pairsim.ranking_similarity(Z, topk=2).s
    ordered = pairsim.ranking_similarity(Z, topk=2, ordered=True).s
    assert unordered[0, 1] == 1  # same set {0, 1}
    assert ordered[0, 1] == 0  # different order (0,1) vs (1,0)


def test_topk_larger_than_width_rejected():
    with pytest.raises(ConfigError):
        pairsim.ranking_similarity(np.zeros((2, 3)), topk=4)


def test_default_topk_rule():
    assert pairsim.default_topk(64) == 10
    assert pairsim.default_topk(10) == 10
    assert pairsim.default_topk(9) == 4
    assert pairsim.default_topk(2) == 1


def test_pair_scores_one_hot_and_uniform_cases():
    one_hot = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    S = pairsim.pair_scores(one_hot)
    assert S[0, 1] == pytest.approx(1.0)
    assert S[0, 2] == pytest.approx(0.0)
    k = 5
    uniform = np.full((2, k), 1.0 / k)
    S = pairsim.pair_scores(uniform)
    assert S[0, 1] == pytest.approx(1.0 / k)  # inner-product oracle


def test_pair_scores_symmetric_bounded():
    rng = np.random.default_rng(4)
    logits = rng.normal(size=(6, 4))
    P = np.exp(logits)
    P /= P.sum(axis=1, keepdims=True)
    S = pairsim.pair_scores(P)
    assert np.allclose(S, S.T)
    assert np.all(S > 0.0)
    assert np.all(S <= 1.0 + 1e-12)


def test_bce_perfect_agreement_is_near_zero():
    s = np.array([[1, 0], [0, 1]], dtype=np.uint8)
    scores = s.astype(float)
    loss = pairsim.pair_bce_loss(scores, s)
    assert loss <= 2.0 * abs(np.log(1.0 - pairsim.CLAMP_EPS)) + 1e-12


def test_bce_all_half_scores_equals_log_two():
    rng = np.random.default_rng(5)
    for _ in range(10):
        n = int(rng.integers(2, 6))
        labels = rng.integers(0, 2, size=(n, n)).astype(np.uint8)
        loss = pairsim.pair_bce_loss(np.full((n, n), 0.5), labels)
        assert loss == pytest.approx(np.log(2.0), abs=1e-12)


def test_bce_matches_scalar_oracle():
    rng = np.random.default_rng(6)
    for _ in range(100):
        n = 2
        scores = rng.uniform(0.05, 0.95, size=(n, n))
        labels = rng.integers(0, 2, size=(n, n)).astype(np.uint8)
        # independent scalar-by-scalar oracle
        total = 0.0
        for i in range(n):
            for j in range(n):
                p = min(max(scores[i, j], pairsim.CLAMP_EPS), 1 - pairsim.CLAMP_EPS)
                total += labels[i, j] * np.log(p) + (1 - labels[i, j]) * np.log(1 - p)
        oracle = -total / n ** 2
        assert pairsim.pair_bce_loss(scores, labels) == pytest.approx(oracle, abs=1e-12)


def test_bce_minimized_at_labels_as_scores():
    rng = np.random.default_rng(7)
    for _ in range(25):
        n = int(rng.integers(2, 5))
        labels = rng.integers(0, 2, size=(n, n)).astype(np.uint8)
        base = pairsim.pair_bce_loss(labels.astype(float), labels)
        perturbed = np.clip(
            labels.astype(float) + rng.uniform(-0.3, 0.3, size=(n, n)), 0.0, 1.0
        )
        assert base <= pairsim.pair_bce_loss(perturbed, labels) + 1e-12


def test_bce_nonnegative_fuzz():
    rng = np.random.default_rng(8)
    for _ in range(50):
        n = int(rng.integers(2, 7))
        scores = rng.uniform(0.0, 1.0, size=(n, n))
        labels = rng.integers(0, 2, size=(n, n)).astype(np.uint8)
        assert pairsim.pair_bce_loss(scores, labels) >= 0.0
