"""Verified rubrics from preference pairs.

Walks a small synthetic dataset through generation, verification and
refinement with the offline oracle backend, then consolidates the surviving
rubrics into one structured judging block.
"""

import numpy as np

from autorubric.judge import Gateway, OracleBackend, OracleConfig
from autorubric.preference import axis_decided_dataset
from autorubric.rubrics import PipelineConfig, run_pipeline, structure_rubrics

# %% Each pair differs on exactly one of four quality axes. A quarter of the
# labels are flipped, so some pairs contradict the oracle's own judgment.
pairs = axis_decided_dataset(12, 4, np.random.default_rng(0), label_noise=0.25)
for p in list(pairs)[:3]:
    print(p.id, p.prompt, "->", p.label.value)

# %% The oracle writes one criterion per axis on which the preferred candidate
# scores higher, and verifies a rubric by judging the pair with only that
# rubric in context. Noisy labels can never be reproduced, so those rubrics
# are refined up to T_max times and then discarded.
backend = Gateway(OracleBackend(OracleConfig((1.0, 1.0, 1.0, 1.0), seed=0)))
store = run_pipeline(pairs, PipelineConfig(t_max=5), backend)
print(store.stats)

for rec in store.records[:4]:
    print(f"{rec.rubric_id}: {rec.status.value} after {rec.attempts} refinements")
    print("   ", rec.text.replace("\n", "\n    "))

# %% Structuring groups the verified criteria into named dimensions. Every
# criterion keeps a pointer to the rubric it came from.
structured = structure_rubrics(store, backend)
print(structured.rendered)
print("provenance:", structured.provenance)
