import numpy as np
import pytest

from diffumin.errors import UndefinedMetricError, ZeroBaselineError
from diffumin.metrics import auc, average_ranks, format_percent, rela_impr

from reference_cells import TOLERANCE_PP, cells


def pairwise_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def test_auc_hand_example():
    assert auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == pytest.approx(0.75, abs=1e-15)


def test_auc_all_ties():
    assert auc([0.3] * 6, [0, 1, 0, 1, 1, 0]) == 0.5


def test_auc_separated():
    assert auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert auc([0.9, 0.8, 0.2, 0.1], [0, 0, 1, 1]) == 0.0


def test_auc_single_class_undefined():
    with pytest.raises(UndefinedMetricError):
        auc([0.1, 0.2], [1, 1])
    with pytest.raises(UndefinedMetricError):
        auc([0.1, 0.2], [0, 0])


def test_auc_matches_pairwise_oracle_on_random_ties():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(2, 65))
        labels = rng.integers(0, 2, n)
        labels[0], labels[1] = 0, 1
        scores = rng.integers(0, max(2, n // 3), n) / 7.0
        assert abs(auc(scores, labels) - pairwise_auc(scores, labels)) <= 1e-12


def test_average_ranks_ties():
    assert average_ranks([3.0, 1.0, 3.0, 2.0]).tolist() == [3.5, 1.0, 3.5, 2.0]


def test_rela_impr_examples():
    assert format_percent(rela_impr(0.6841, 0.6740)) == "5.80%"
    assert format_percent(rela_impr(0.6282, 0.6125)) == "13.96%"
    assert rela_impr(0.61, 0.61) == 0.0


def test_rela_impr_zero_baseline():
    with pytest.raises(ZeroBaselineError):
        rela_impr(0.6, 0.5)
    with pytest.raises(ZeroDivisionError):
        rela_impr(0.6, 0.5)


@pytest.mark.parametrize("name,col,value,base,printed", list(cells()))
def test_published_relative_improvements(name, col, value, base, printed):
    recomputed = round(rela_impr(value, base), 2)
    assert abs(recomputed - printed) <= TOLERANCE_PP
