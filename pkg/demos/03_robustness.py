"""Failure levels and sorted curves for two made-up methods."""
import numpy as np

from nsarm.evaluation import ScoreTable, failure_counts, sorted_curve

print(failure_counts([1.0, 0.9, 0.8, 0.7]))

g = np.random.default_rng(0)
table = ScoreTable()
for i in range(100):
    # "steady" has a narrow spread, "erratic" the same mean with a wide one
    table.add(f"img{i:03d}", "steady", "musiq", float(np.clip(g.normal(65, 3), 0, 100)))
    table.add(f"img{i:03d}", "erratic", "musiq", float(np.clip(g.normal(65, 12), 0, 100)))

for ds in table.datasets():
    scores = table.scores(ds, "musiq")
    fc = failure_counts(scores)
    curve = sorted_curve(table, ds, ["musiq"])
    print(f"{ds:8s} var {np.var(scores):6.1f}  deficient {fc.deficient:3d}  poor {fc.poor:3d}  collapse {fc.collapse:3d}  "
          f"worst three {[round(s, 3) for _, _, s in curve[-3:]]}")
