"""The evaluation metrics on hand-crafted predictions.

Five numbers per dataset: structure measure, enhanced-alignment measure,
dependency-weighted F-measure, mean absolute error, balanced error rate.
"""

import numpy as np

from sideseg import ber, e_measure, evaluate_pairs, mae, s_measure, weighted_fbeta

rng = np.random.default_rng(0)
gt = np.zeros((16, 16))
gt[4:12, 5:13] = 1.0

cases = {
    "perfect": gt.copy(),
    "inverted": 1.0 - gt,
    "uniform 0.5": np.full((16, 16), 0.5),
    "noisy correct": np.clip(gt + 0.2 * rng.standard_normal((16, 16)), 0, 1),
    "shifted blob": np.roll(gt, (2, 2), axis=(0, 1)),
}

print(f"{'case':<16}{'S':>8}{'E':>8}{'wFb':>8}{'MAE':>8}{'BER':>8}")
for name, pred in cases.items():
    print(f"{name:<16}{s_measure(pred, gt):>8.3f}{e_measure(pred, gt):>8.3f}"
          f"{weighted_fbeta(pred, gt):>8.3f}{mae(pred, gt):>8.3f}{ber(pred, gt):>8.2f}")

# dataset-level aggregation: per-image means, BER over the pooled confusion matrix
pairs = [(f"img{i}", np.clip(gt + 0.3 * rng.standard_normal((16, 16)), 0, 1), gt)
         for i in range(5)]
report = evaluate_pairs(pairs)
print("\naggregate over 5 noisy images:")
print(report.table())
