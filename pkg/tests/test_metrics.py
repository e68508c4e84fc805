import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fseb.metrics import (
    GridSpec,
    PredictionSet,
    auroc_from_entropy,
    ece,
    ece_bins,
    evaluate,
    far_field_entropy_gap,
    nll_and_accuracy,
    predictive_entropy,
    selective_curve_and_auc,
)

from oracles import loop_ece, loop_entropy, loop_nll_acc, pairwise_auroc, threshold_sweep_auc


def random_set(seed, n=50, k=4):
    rng = np.random.default_rng(seed)
    p = rng.dirichlet(np.full(k, 0.7), size=n)
    return PredictionSet(p, rng.integers(0, k, size=n))


def test_prediction_set_validation():
    with pytest.raises(ValueError):
        PredictionSet(np.array([[0.6, 0.6]]))
    with pytest.raises(ValueError):
        PredictionSet(np.array([[1.2, -0.2]]))
    with pytest.raises(ValueError):
        PredictionSet(np.array([[0.5, 0.5]]), np.array([2]))
    with pytest.raises(ValueError):
        nll_and_accuracy(PredictionSet(np.array([[0.5, 0.5]])))


def test_nll_accuracy_examples():
    nll, acc = nll_and_accuracy(PredictionSet(np.eye(3), np.arange(3)))
    assert (nll, acc) == (0.0, 1.0)
    nll, _ = nll_and_accuracy(PredictionSet(np.full((4, 10), 0.1), np.arange(4)))
    assert nll == pytest.approx(math.log(10), rel=1e-15)
    # a tie goes to the lowest index
    _, acc = nll_and_accuracy(PredictionSet(np.array([[0.5, 0.5]]), np.array([0])))
    assert acc == 1.0


@pytest.mark.parametrize("seed", range(5))
def test_nll_accuracy_oracle(seed):
    s = random_set(seed)
    nll, acc = nll_and_accuracy(s)
    o_nll, o_acc = loop_nll_acc(s.probabilities, s.labels)
    assert abs(nll - o_nll) < 1e-12 and acc == o_acc


def test_ece_examples():
    assert ece(PredictionSet(np.eye(2), np.arange(2))) == 0.0
    p = np.tile([0.8, 0.2], (4, 1))
    assert ece(PredictionSet(p, np.array([0, 0, 1, 1]))) == pytest.approx(0.3, abs=1e-15)


def test_ece_bins_are_right_closed():
    table = ece_bins(PredictionSet(np.array([[0.5, 0.5], [0.9, 0.1]]), np.array([0, 0])), m_bins=2)
    assert [row["count"] for row in table] == [1, 1]
    assert table[0]["upper"] == 0.5 and table[0]["confidence"] == 0.5
    with pytest.raises(ValueError):
        ece(PredictionSet(np.eye(2), np.arange(2)), m_bins=0)


@pytest.mark.parametrize("seed", range(5))
def test_ece_oracle(seed):
    s = random_set(seed)
    assert abs(ece(s, 10) - loop_ece(s.probabilities, s.labels, 10)) < 1e-12


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), m=st.integers(1, 30))
def test_ece_in_unit_interval(seed, m):
    assert 0.0 <= ece(random_set(seed, n=20), m) <= 1.0


def test_entropy_examples():
    np.testing.assert_array_equal(predictive_entropy(np.eye(3)), 0.0)
    assert predictive_entropy(np.full((1, 4), 0.25))[0] == pytest.approx(math.log(4), rel=1e-15)
    row = np.random.default_rng(0).dirichlet(np.ones(5))
    assert abs(predictive_entropy(row[None])[0] - loop_entropy(row)) < 1e-14


def test_selective_examples():
    curve, auc = selective_curve_and_auc(PredictionSet(np.eye(3), np.arange(3)))
    assert np.all(curve == 1.0) and auc == 1.0
    p = np.array([[0.9, 0.1], [0.6, 0.4]])
    curve, auc = selective_curve_and_auc(PredictionSet(p, np.array([0, 1])))
    assert curve.tolist() == [1.0, 0.5] and auc == 0.75


def test_selective_ties_keep_lower_index_first():
    p = np.array([[0.7, 0.3], [0.7, 0.3], [0.6, 0.4]])
    curve, _ = selective_curve_and_auc(PredictionSet(p, np.array([1, 0, 0])))
    assert curve.tolist() == [0.0, 0.5, 2 / 3]


@pytest.mark.parametrize("seed", range(5))
def test_selective_oracle(seed):
    s = random_set(seed, n=100)
    curve, auc = selective_curve_and_auc(s)
    o_curve, o_auc = threshold_sweep_auc(s.probabilities, s.labels)
    np.testing.assert_allclose(curve, o_curve, rtol=0, atol=1e-12)
    assert abs(auc - o_auc) < 1e-12
    assert curve[-1] == nll_and_accuracy(s)[1]


def test_auroc_examples():
    assert auroc_from_entropy([0.1, 0.2], [0.5, 0.9, 1.0]) == 1.0
    assert auroc_from_entropy([0.3, 0.3, 0.7], [0.7, 0.3, 0.3]) == 0.5
    with pytest.raises(ValueError):
        auroc_from_entropy([], [1.0])


@pytest.mark.parametrize("seed", range(5))
def test_auroc_oracle(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random(50).round(1), rng.random(50).round(1) + 0.1  # rounding forces ties
    assert abs(auroc_from_entropy(a, b) - pairwise_auroc(a, b)) < 1e-12


@settings(max_examples=50, deadline=None)
@given(a=st.lists(st.floats(0, 3), min_size=1, max_size=30), b=st.lists(st.floats(0, 3), min_size=1, max_size=30))
def test_auroc_antisymmetry(a, b):
    assert abs(auroc_from_entropy(a, b) + auroc_from_entropy(b, a) - 1.0) < 1e-12


def test_metrics_are_order_insensitive():
    s = random_set(3, n=40)
    perm = np.random.default_rng(0).permutation(40)
    t = PredictionSet(s.probabilities[perm], s.labels[perm])
    assert ece(s) == pytest.approx(ece(t), abs=1e-15)
    assert nll_and_accuracy(s)[1] == nll_and_accuracy(t)[1]
    assert selective_curve_and_auc(s)[1] == pytest.approx(selective_curve_and_auc(t)[1], abs=1e-15)


def test_far_field_examples():
    train = np.array([[0.0, 0.0], [1.0, 1.0]])
    inside = GridSpec((0.0, 0.0), (1.0, 1.0), (3, 3))
    uniform = lambda x: np.full((len(x), 3), 1 / 3)
    far, near = far_field_entropy_gap(uniform, train, inside, radius=10.0)
    assert far is None and near == pytest.approx(math.log(3), rel=1e-15)
    wide = GridSpec((-5.0, -5.0), (5.0, 5.0), (11, 11))
    far, near = far_field_entropy_gap(uniform, train, wide, radius=1.5)
    assert far == pytest.approx(math.log(3), rel=1e-15) and near == pytest.approx(math.log(3), rel=1e-15)


def test_far_field_split_by_distance():
    train = np.zeros((1, 2))
    grid = GridSpec((-3.0, 0.0), (3.0, 0.0), (7, 1))
    # entropy grows with distance from the origin
    model = lambda x: np.column_stack([1 - np.abs(x[:, 0]) / 6, np.abs(x[:, 0]) / 6])
    far, near = far_field_entropy_gap(model, train, grid, radius=1.5)
    ent = predictive_entropy(model(grid.points()))
    xs = grid.points()[:, 0]
    assert far == pytest.approx(ent[np.abs(xs) > 1.5].mean(), rel=1e-15)
    assert near == pytest.approx(ent[np.abs(xs) <= 1.5].mean(), rel=1e-15)


def test_grid_points_order():
    pts = GridSpec((0.0, 10.0), (1.0, 11.0), (2, 2)).points()
    assert pts.tolist() == [[0.0, 10.0], [0.0, 11.0], [1.0, 10.0], [1.0, 11.0]]


def test_evaluate_report():
    s = random_set(1, n=30, k=3)
    ood = np.full((10, 3), 1 / 3)
    r = evaluate(s, ood)
    assert r.ood_auroc == auroc_from_entropy(predictive_entropy(s), predictive_entropy(ood))
    assert set(r.scalars()) == {"accuracy", "nll", "ece", "sel_pred_auc", "ood_auroc"}
    assert len(r.bin_table) == 15 and len(r.curve_points) == 30
    assert evaluate(s).ood_auroc is None
