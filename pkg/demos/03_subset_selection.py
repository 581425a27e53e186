"""Choosing which rubrics to keep.

Greedy forward selection adds one rubric at a time, always the one that makes
the judge agree with the most tuning labels. On small pools it can be checked
against brute-force enumeration. The cardinality sweep then shows how
accuracy responds to the number of rubrics in context.
"""

import numpy as np

from autorubric.evaluator import cardinality_sweep, exhaustive_select, format_sweep_table, greedy_select
from autorubric.judge import Gateway, OracleBackend, OracleConfig
from autorubric.preference import axis_decided_dataset
from autorubric.rubrics import PipelineConfig, run_pipeline

judge = Gateway(OracleBackend(OracleConfig((1.0, 1.0, 1.0, 1.0), seed=1)))

# %% One seed pair per axis yields one verified rubric per axis.
store = run_pipeline(axis_decided_dataset(4, 4, np.random.default_rng(100)), PipelineConfig(), judge)
for rec in store.verified:
    print(rec.rubric_id, rec.text)

# %% Every tuning pair is decided by a single axis, so a judge that only sees
# some of the axes falls back to a coin flip on the rest.
tuning = axis_decided_dataset(40, 4, np.random.default_rng(3), label_noise=0.1)
trace = greedy_select(store.verified, tuning, 2, judge)
print("greedy:", trace.selected, "correct after each step:", trace.objective_by_step)
print("exhaustive:", exhaustive_select(store.verified, tuning, 2, judge))

# %% More rubrics, more of the deciding axes covered.
eval_set = axis_decided_dataset(200, 4, np.random.default_rng(5))
print(format_sweep_table(cardinality_sweep(eval_set, store, [1, 2, 3, 4], judge)))
