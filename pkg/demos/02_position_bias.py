"""Measuring position bias of a pairwise judge.

The same pairs are judged twice, once as stored and once with the candidates
swapped. A judge that ignores presentation order scores the same both ways.
"""

import numpy as np

from autorubric.evaluator import bias_ablation, format_bias_table
from autorubric.judge import Gateway, OracleBackend, OracleConfig
from autorubric.preference import synthetic_feature_dataset
from autorubric.rubrics import RubricRecord, Status, flat_rubric

weights = (1.0, 0.5, -0.3, 2.0)
pairs = synthetic_feature_dataset(300, weights, np.random.default_rng(1))
rubric = flat_rubric([RubricRecord("r-all", "demo", "- overall quality of the output", Status.VERIFIED)])

# %% Sweep the oracle's bias knob. With probability position_bias the judge
# simply picks whatever is shown first.
rows = []
for bias in (0.0, 0.2, 0.5, 1.0):
    judge = Gateway(OracleBackend(OracleConfig(weights, position_bias=bias, seed=7)))
    rows.append((f"position_bias={bias}", bias_ablation(pairs, rubric, judge)))
print(format_bias_table(rows))

# %% At full bias the two orders are mirror images: forward plus reverse
# accuracy is exactly one, and delta is fixed by the label balance alone.
full = rows[-1][1]
print("forward + reverse =", full.forward_acc + full.reverse_acc)
