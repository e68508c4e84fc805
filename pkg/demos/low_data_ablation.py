"""Data-fraction ablation on noisy Two Moons with an OOD blob set.

For each training fraction the script runs PS-MAP and FS-EB over five seeds
and reports entropy-threshold OOD AUROC against two shifted Gaussian blobs.

    python3 demos/low_data_ablation.py

The same sweep from the shell:

    fseb ablate demos/configs/low_data_fseb.json --axis data-fraction --values 0.1,0.5,1.0
"""

import csv
from pathlib import Path

from fseb import experiment

here = Path(__file__).resolve().parent
fractions = ["0.1", "0.5", "1.0"]

tables = {}
for name in ("low_data_psmap", "low_data_fseb"):
    print(f"ablating {name} ...")
    tables[name] = experiment.ablate(here / "configs" / f"{name}.json", "data-fraction", fractions)

# %% one line per fraction
rows = {name: list(csv.DictReader(path.open())) for name, path in tables.items()}
print(f"{'fraction':>8}  {'PS-MAP AUROC':>14}  {'FS-EB AUROC':>14}")
for ps, eb in zip(rows["low_data_psmap"], rows["low_data_fseb"]):
    print(f"{ps['data-fraction']:>8}  {float(ps['ood_auroc_mean']):14.3f}  {float(eb['ood_auroc_mean']):14.3f}")
