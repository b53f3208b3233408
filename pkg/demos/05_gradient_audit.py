"""Audit every trainable gradient against central finite differences.

Runs on the float64 tiny configuration so the comparison is meaningful at
h = 1e-5. Batch norm stays in eval mode during the audit.
"""

import time

import sideseg as ss

model = ss.build(ss.tiny_config())
sample = ss.generate_synthetic(1, (32, 32), seed=0)[0]
print("trainable parameters under audit:", ss.count_parameters(model.store, "trainable"))

for loss in ("bce_iou", "bbce"):
    t0 = time.time()
    report = ss.grad_check(ss.build(ss.tiny_config()), loss, sample, tolerance=1e-4)
    verdict = "passed" if report.passed else f"FAILED: {report.failures()}"
    print(f"\nloss {loss}: {verdict} ({time.time() - t0:.0f}s)")
    rows = sorted(report.groups.items(), key=lambda kv: -kv[1][0])[:5]
    for name, (rel, abs_err, ok) in rows:
        print(f"  {name:<40} max_rel {rel:.2e}  max_abs {abs_err:.2e}")
