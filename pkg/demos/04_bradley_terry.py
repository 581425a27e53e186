"""The scalar-reward baseline.

A linear Bradley-Terry model learns one number per candidate from the same
preference pairs the rubric pipeline consumes.
"""

import math

import numpy as np

from autorubric.bt import BTTrainConfig, bt_probability, pairwise_accuracy, train_bt
from autorubric.gradcheck import bt_gradient_error
from autorubric.preference import synthetic_feature_dataset

# %% The preference probability only depends on the reward gap.
print(bt_probability(math.log(3), 0.0), bt_probability(10 + math.log(3), 10.0))

# %% Hand-derived gradient against central differences.
rng = np.random.default_rng(0)
print("worst relative gradient error:", max(bt_gradient_error(rng) for _ in range(20)))

# %% Fit on separable data and watch the loss fall from ln 2.
w_true = np.array([1.5, -2.0, 0.5, 1.0, -0.7])
train = synthetic_feature_dataset(200, w_true, np.random.default_rng(17))
held_out = synthetic_feature_dataset(200, w_true, np.random.default_rng(18), label_noise=0.1)
result = train_bt(train, BTTrainConfig(learning_rate=0.1, epochs=500, l2=1e-3))
for epoch in (0, 10, 100, 499):
    print(f"epoch {epoch:3d}  loss {result.loss_curve[epoch]:.4f}")
print("train accuracy", pairwise_accuracy(result.model, train))
print("held-out accuracy (10% label noise)", pairwise_accuracy(result.model, held_out))
w = result.model.weights
print("cosine to the true weights", float(w @ w_true / np.linalg.norm(w) / np.linalg.norm(w_true)))
