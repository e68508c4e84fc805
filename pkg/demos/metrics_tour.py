"""The metric suite on hand-made prediction sets.

    python3 demos/metrics_tour.py
"""

import numpy as np

from fseb.metrics import (
    PredictionSet,
    auroc_from_entropy,
    ece_bins,
    evaluate,
    predictive_entropy,
    selective_curve_and_auc,
)

# %% an overconfident classifier: always 0.9 sure, right 60% of the time
rng = np.random.default_rng(0)
labels = rng.integers(0, 2, size=200)
pred = np.where(rng.random(200) < 0.6, labels, 1 - labels)
probs = np.where(pred[:, None] == np.arange(2), 0.9, 0.1)
over = PredictionSet(probs, labels)
report = evaluate(over, m_bins=10)
print(f"accuracy {report.accuracy:.3f}  ECE {report.ece:.3f}  NLL {report.nll:.3f}")
# every sample falls in the (0.8, 0.9] bin, so ECE is |accuracy - 0.9|
print([row for row in ece_bins(over, 10) if row["count"]])

# %% selective prediction: informative confidences raise accuracy at low coverage
conf = np.where(pred == labels, rng.uniform(0.7, 1.0, 200), rng.uniform(0.5, 0.8, 200))
informative = PredictionSet(np.where(pred[:, None] == np.arange(2), conf[:, None], 1 - conf[:, None]), labels)
curve, auc = selective_curve_and_auc(informative)
print(f"accuracy at 10% coverage {curve[19]:.3f}, at full coverage {curve[-1]:.3f}, area {auc:.3f}")

# %% OOD detection by entropy threshold
in_dist = rng.dirichlet([8.0, 1.0], size=300)
shifted = rng.dirichlet([2.0, 2.0], size=300)
print(f"OOD AUROC {auroc_from_entropy(predictive_entropy(in_dist), predictive_entropy(shifted)):.3f}")
