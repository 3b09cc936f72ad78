import itertools
import math

import numpy as np
import pytest

from tdcm.metrics import ContingencyTable, acc, ari, contingency, evaluate, hungarian, nmi


def _nmi_oracle(counts):
    counts = np.asarray(counts, dtype=float)
    n = counts.sum()
    rows, cols = counts.sum(axis=1), counts.sum(axis=0)
    mi = 0.0
    for i in range(counts.shape[0]):
        for j in range(counts.shape[1]):
            if counts[i, j] > 0:
                mi += counts[i, j] / n * math.log(n * counts[i, j] / (rows[i] * cols[j]))
    h = lambda m: -sum(x / n * math.log(x / n) for x in m if x > 0)
    return mi / math.sqrt(h(rows) * h(cols))


def _ari_oracle(counts):
    c2 = lambda x: x * (x - 1) / 2
    counts = np.asarray(counts)
    n = counts.sum()
    index = sum(c2(x) for x in counts.flat)
    a = sum(c2(x) for x in counts.sum(axis=1))
    b = sum(c2(x) for x in counts.sum(axis=0))
    expected = a * b / c2(n)
    return (index - expected) / ((a + b) / 2 - expected)


def _acc_oracle(pred, true):
    kp, kt = max(pred) + 1, max(true) + 1
    size = max(kp, kt)
    best = 0
    for perm in itertools.permutations(range(size)):
        best = max(best, sum(perm[p] == t for p, t in zip(pred, true)))
    return best / len(pred)


def test_contingency_examples():
    np.testing.assert_array_equal(contingency([0, 1, 2], [0, 1, 2]).counts, np.eye(3))
    np.testing.assert_array_equal(contingency([1, 1, 1], [0, 1, 2]).counts, [[0, 0, 0], [1, 1, 1]])
    np.testing.assert_array_equal(contingency([0, 0, 1, 1], [0, 1, 0, 1]).counts, np.ones((2, 2)))
    with pytest.raises(ValueError):
        contingency([0, 1], [0])


def test_nmi_examples():
    assert nmi(contingency([0, 0, 1, 1], [1, 1, 0, 0])) == 1.0
    assert nmi(ContingencyTable(np.ones((2, 2), dtype=int))) == 0.0
    value = nmi(ContingencyTable(np.array([[5, 1], [1, 5]])))
    assert value == pytest.approx(_nmi_oracle([[5, 1], [1, 5]]), abs=1e-9)
    # by hand: MI = (10/12) ln(5/3) + (2/12) ln(1/3), both entropies ln 2
    mi = 10 / 12 * math.log(5 / 3) + 2 / 12 * math.log(1 / 3)
    assert value == pytest.approx(mi / math.log(2), abs=1e-12)


def test_nmi_degenerate():
    assert nmi(contingency([0, 0, 0], [0, 0, 0])) == 1.0
    assert nmi(contingency([0, 0, 0], [0, 1, 2])) == 0.0


def test_ari_examples():
    assert ari(contingency([0, 0, 1, 1], [0, 0, 1, 1])) == 1.0
    assert ari(contingency([1, 1, 0, 0], [0, 0, 1, 1])) == 1.0
    assert ari(ContingencyTable(np.ones((2, 2), dtype=int))) == pytest.approx(_ari_oracle(np.ones((2, 2))), abs=1e-12)
    # all-ones 2x2 by hand: index 0, a = b = 2, expected 4/6, max 2 -> (0 - 2/3)/(2 - 2/3)
    assert ari(ContingencyTable(np.ones((2, 2), dtype=int))) == pytest.approx(-0.5, abs=1e-12)


STORED_TABLES = [
    [[5, 1], [1, 5]],
    [[3, 0, 1], [2, 4, 0]],
    [[10, 2, 0], [0, 7, 3], [1, 0, 9]],
    [[1, 2], [3, 4], [5, 6]],
    [[20, 1, 1, 0], [0, 0, 15, 2]],
]


@pytest.mark.parametrize("counts", STORED_TABLES)
def test_nmi_ari_match_direct_formulas(counts):
    table = ContingencyTable(np.array(counts))
    assert abs(nmi(table) - _nmi_oracle(counts)) <= 1e-9
    assert abs(ari(table) - _ari_oracle(counts)) <= 1e-9


def test_acc_examples():
    assert acc([0, 1, 2, 1], [0, 1, 2, 1]) == 1.0
    assert acc([2, 0, 1, 0], [0, 1, 2, 1]) == 1.0
    assert acc([0, 0, 1, 1, 1], [1, 1, 0, 0, 2]) == pytest.approx(0.8)


def test_hungarian_examples():
    cost = np.ones((3, 3)) - np.eye(3)
    assert sorted(hungarian(cost)) == [(0, 0), (1, 1), (2, 2)]
    assert hungarian([[7.0]]) == [(0, 0)]
    assert len(hungarian(np.zeros((2, 4)))) == 2


def test_hungarian_matches_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(200):
        m, n = rng.integers(1, 8, size=2)
        cost = rng.integers(0, 20, size=(m, n)).astype(float)
        got = sum(cost[r, c] for r, c in hungarian(cost))
        size = max(m, n)
        padded = np.zeros((size, size))
        padded[:m, :n] = cost
        if size <= 7:
            best = min(sum(padded[i, p[i]] for i in range(size)) for p in itertools.permutations(range(size)))
            assert got == best


def test_acc_matches_exhaustive_bijections():
    rng = np.random.default_rng(1)
    for _ in range(1000):
        n = int(rng.integers(1, 11))
        pred = rng.integers(0, 3, size=n)
        true = rng.integers(0, 3, size=n)
        assert acc(pred, true) == pytest.approx(_acc_oracle(list(pred), list(true)), abs=1e-12)


def test_metrics_invariant_under_relabeling():
    rng = np.random.default_rng(2)
    for _ in range(50):
        pred, true = rng.integers(0, 4, size=30), rng.integers(0, 3, size=30)
        base = evaluate(pred, true)
        p2 = rng.permutation(4)[pred]
        t2 = rng.permutation(3)[true]
        other = evaluate(p2, t2)
        assert other.nmi == pytest.approx(base.nmi, abs=1e-12)
        assert other.ari == pytest.approx(base.ari, abs=1e-12)
        assert other.acc == base.acc


def test_acc_at_least_majority_and_ranges():
    rng = np.random.default_rng(3)
    for _ in range(100):
        pred, true = rng.integers(0, 3, size=20), rng.integers(0, 3, size=20)
        r = evaluate(pred, true)
        assert r.acc >= contingency(pred, true).counts.max() / 20 - 1e-12
        assert 0 <= r.nmi <= 1 and 0 <= r.acc <= 1 and -1 <= r.ari <= 1
