"""Predictive-uncertainty metrics: NLL, accuracy, ECE, selective prediction,
predictive entropy and entropy-threshold OOD AUROC.

All functions are pure. Natural logarithms throughout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import rankdata

DEFAULT_BINS = 15


@dataclass
class PredictionSet:
    probabilities: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float64)
        if p.ndim != 2 or p.shape[1] < 1:
            raise ValueError(f"probabilities must be N x K, got shape {p.shape}")
        if np.any(p < 0) or not np.allclose(p.sum(axis=1), 1.0, rtol=0, atol=1e-9):
            raise ValueError("rows must be nonnegative and sum to 1")
        self.probabilities = p
        if self.labels is not None:
            y = np.asarray(self.labels, dtype=np.int64)
            if y.shape != (len(p),) or (y.size and (y.min() < 0 or y.max() >= p.shape[1])):
                raise ValueError("labels must be a length-N vector of class indices")
            self.labels = y

    def __len__(self) -> int:
        return len(self.probabilities)

    def _need_labels(self) -> np.ndarray:
        if self.labels is None:
            raise ValueError("this metric needs labels")
        return self.labels


@dataclass
class MetricsReport:
    accuracy: float
    nll: float
    ece: float
    sel_pred_auc: float
    ood_auroc: float | None = None
    bin_table: list[dict] = field(default_factory=list)
    curve_points: list[float] = field(default_factory=list)

    def scalars(self) -> dict[str, float]:
        out = {"accuracy": self.accuracy, "nll": self.nll, "ece": self.ece, "sel_pred_auc": self.sel_pred_auc}
        if self.ood_auroc is not None:
            out["ood_auroc"] = self.ood_auroc
        return out


def _as_set(preds) -> PredictionSet:
    return preds if isinstance(preds, PredictionSet) else PredictionSet(*preds)


def nll_and_accuracy(preds: PredictionSet) -> tuple[float, float]:
    preds = _as_set(preds)
    y = preds._need_labels()
    p_true = preds.probabilities[np.arange(len(y)), y]
    with np.errstate(divide="ignore"):
        nll = float(np.mean(-np.log(p_true)))
    # argmax returns the lowest index on ties
    acc = float(np.mean(np.argmax(preds.probabilities, axis=1) == y))
    return nll, acc


def ece_bins(preds: PredictionSet, m_bins: int = DEFAULT_BINS) -> list[dict]:
    """Per-bin count, mean confidence and accuracy over right-closed bins of (0, 1]."""
    preds = _as_set(preds)
    if m_bins < 1:
        raise ValueError("m_bins must be >= 1")
    y = preds._need_labels()
    conf = preds.probabilities.max(axis=1)
    correct = np.argmax(preds.probabilities, axis=1) == y
    edges = np.linspace(0.0, 1.0, m_bins + 1)
    idx = np.clip(np.searchsorted(edges, conf, side="left") - 1, 0, m_bins - 1)
    table = []
    for b in range(m_bins):
        mask = idx == b
        n = int(mask.sum())
        table.append({
            "lower": float(edges[b]),
            "upper": float(edges[b + 1]),
            "count": n,
            "confidence": float(conf[mask].mean()) if n else None,
            "accuracy": float(correct[mask].mean()) if n else None,
        })
    return table


def ece(preds: PredictionSet, m_bins: int = DEFAULT_BINS) -> float:
    preds = _as_set(preds)
    n = len(preds)
    total = 0.0
    for row in ece_bins(preds, m_bins):
        if row["count"]:
            total += row["count"] / n * abs(row["accuracy"] - row["confidence"])
    return total


def predictive_entropy(preds) -> np.ndarray:
    p = preds.probabilities if isinstance(preds, PredictionSet) else np.asarray(preds, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=-1)


def selective_curve_and_auc(preds: PredictionSet) -> tuple[np.ndarray, float]:
    """Accuracy on the ``c`` most confident samples for ``c = 1..N``.

    Confidence is the maximum probability; ties keep the lower index first.
    The area is the mean accuracy over the uniform coverage grid.
    """
    preds = _as_set(preds)
    y = preds._need_labels()
    if len(y) == 0:
        raise ValueError("empty prediction set")
    score = preds.probabilities.max(axis=1)
    correct = (np.argmax(preds.probabilities, axis=1) == y).astype(np.float64)
    order = np.lexsort((np.arange(len(score)), -score))
    curve = np.cumsum(correct[order]) / np.arange(1, len(y) + 1)
    return curve, float(curve.mean())


def auroc_from_entropy(entropy_in, entropy_out) -> float:
    """P(out > in) + P(out == in) / 2 for random in/out pairs (rank-sum form)."""
    a = np.asarray(entropy_in, dtype=np.float64).ravel()
    b = np.asarray(entropy_out, dtype=np.float64).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("both entropy sets must be non-empty")
    ranks = rankdata(np.concatenate([a, b]))
    u = ranks[a.size:].sum() - b.size * (b.size + 1) / 2.0
    return float(u / (a.size * b.size))


@dataclass(frozen=True)
class GridSpec:
    low: tuple[float, ...]
    high: tuple[float, ...]
    resolution: tuple[int, ...]

    def points(self) -> np.ndarray:
        axes = [np.linspace(lo, hi, int(n)) for lo, hi, n in zip(self.low, self.high, self.resolution)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.column_stack([m.ravel() for m in mesh])


def far_field_entropy_gap(model, train_inputs, grid_spec: GridSpec, radius: float = 1.5):
    """Mean predictive entropy on grid points farther than ``radius`` from all
    training inputs (``far``) and on the rest (``near``).

    ``model`` is a callable mapping inputs to probabilities. An empty group
    is reported as ``None``.
    """
    grid = grid_spec.points()
    train_inputs = np.asarray(train_inputs, dtype=np.float64)
    dist, _ = cKDTree(train_inputs).query(grid)
    far = dist > radius
    ent = predictive_entropy(model(grid))
    mean_far = float(ent[far].mean()) if far.any() else None
    mean_near = float(ent[~far].mean()) if (~far).any() else None
    return mean_far, mean_near


def evaluate(preds: PredictionSet, ood_probabilities=None, m_bins: int = DEFAULT_BINS) -> MetricsReport:
    preds = _as_set(preds)
    nll, acc = nll_and_accuracy(preds)
    curve, auc = selective_curve_and_auc(preds)
    ood = None
    if ood_probabilities is not None:
        ood = auroc_from_entropy(predictive_entropy(preds), predictive_entropy(np.asarray(ood_probabilities)))
    return MetricsReport(
        accuracy=acc,
        nll=nll,
        ece=ece(preds, m_bins),
        sel_pred_auc=auc,
        ood_auroc=ood,
        bin_table=ece_bins(preds, m_bins),
        curve_points=curve.tolist(),
    )
