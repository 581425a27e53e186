"""Linear Bradley-Terry reward model trained with full-batch gradient descent."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .preference import Candidate, PreferenceDataset


class BTError(RuntimeError):
    pass


@dataclass
class BTRewardModel:
    weights: np.ndarray
    bias: float = 0.0

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=float)
        if not np.all(np.isfinite(self.weights)) or not math.isfinite(self.bias):
            raise BTError("non-finite model parameters")

    @classmethod
    def zeros(cls, d: int) -> "BTRewardModel":
        return cls(np.zeros(d), 0.0)

    @property
    def dim(self) -> int:
        return self.weights.shape[0]


@dataclass(frozen=True)
class BTTrainConfig:
    learning_rate: float = 0.1
    epochs: int = 500
    l2: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0 or self.l2 < 0:
            raise ValueError("epochs and l2 must be non-negative")


@dataclass
class BTGradient:
    weights: np.ndarray
    bias: float

    def flat(self) -> np.ndarray:
        return np.append(self.weights, self.bias)


def reward(model: BTRewardModel, candidate: Candidate) -> float:
    f = candidate.feature_vector
    if f is None or len(f) != model.dim:
        raise BTError(f"dimension mismatch: model d={model.dim}, candidate {candidate.id!r} has {None if f is None else len(f)}")
    return float(model.weights @ np.asarray(f)) + model.bias


def log_sigmoid(z):
    """log(sigmoid(z)), stable for large |z|."""
    return -np.logaddexp(0.0, -np.asarray(z, dtype=float))


def sigmoid(z):
    z = np.asarray(z, dtype=float)
    return np.exp(log_sigmoid(z))


def bt_probability(r_plus: float, r_minus: float) -> float:
    """P(plus preferred) = exp(r+) / (exp(r+) + exp(r-)) = sigmoid(r+ - r-)."""
    z = r_plus - r_minus
    # pick the branch that keeps exp() bounded so both tails keep full precision
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def _feature_diffs(model: BTRewardModel, dataset: PreferenceDataset) -> np.ndarray:
    if len(dataset) == 0:
        raise BTError("empty dataset")
    rows = []
    for pair in dataset:
        if pair.label is None:
            raise BTError(f"pair {pair.id!r} is unlabeled")
        fp, fm = pair.preferred.feature_vector, pair.dispreferred.feature_vector
        if fp is None or fm is None or len(fp) != model.dim or len(fm) != model.dim:
            raise BTError(f"dimension mismatch in pair {pair.id!r}: model d={model.dim}")
        rows.append(np.subtract(fp, fm))
    return np.asarray(rows)


def bt_loss(model: BTRewardModel, dataset: PreferenceDataset, l2: float = 0.0) -> float:
    diffs = _feature_diffs(model, dataset)
    margins = diffs @ model.weights
    return float(-np.mean(log_sigmoid(margins)) + 0.5 * l2 * model.weights @ model.weights)


def bt_grad(model: BTRewardModel, dataset: PreferenceDataset, l2: float = 0.0) -> BTGradient:
    """Gradient of :func:`bt_loss`. The bias cancels in every margin, so its gradient is 0."""
    diffs = _feature_diffs(model, dataset)
    margins = diffs @ model.weights
    coeff = sigmoid(-margins)  # 1 - sigmoid(margin)
    gw = -(coeff[:, None] * diffs).mean(axis=0) + l2 * model.weights
    return BTGradient(gw, 0.0)


def pairwise_accuracy(model: BTRewardModel, dataset: PreferenceDataset) -> float:
    margins = _feature_diffs(model, dataset) @ model.weights
    return float(np.mean(margins > 0))


@dataclass
class BTTrainResult:
    model: BTRewardModel
    loss_curve: list[float] = field(default_factory=list)


def train_bt(dataset: PreferenceDataset, cfg: BTTrainConfig) -> BTTrainResult:
    """Full-batch gradient descent from zero. ``loss_curve[e]`` is the loss after epoch e."""
    first = dataset[0] if len(dataset) else None
    if first is None:
        raise BTError("empty dataset")
    d = len(first.first.feature_vector or ())
    model = BTRewardModel.zeros(d)
    curve = []
    for epoch in range(cfg.epochs):
        g = bt_grad(model, dataset, cfg.l2)
        with np.errstate(over="ignore", invalid="ignore"):
            weights = model.weights - cfg.learning_rate * g.weights
        if not np.all(np.isfinite(weights)):
            raise BTError(f"training diverged at epoch {epoch}: non-finite weights")
        model = BTRewardModel(weights, model.bias - cfg.learning_rate * g.bias)
        loss = bt_loss(model, dataset, cfg.l2)
        if not math.isfinite(loss):
            raise BTError(f"training diverged at epoch {epoch}")
        curve.append(loss)
    if not curve:
        curve = [bt_loss(model, dataset, cfg.l2)]
    return BTTrainResult(model, curve)


def save_model(model: BTRewardModel, cfg: BTTrainConfig, path: str | Path) -> None:
    record = {
        "dimension": model.dim,
        "weights": [float(w) for w in model.weights],
        "bias": model.bias,
        "l2": cfg.l2,
        "seed": cfg.seed,
    }
    Path(path).write_text(json.dumps(record) + "\n", encoding="utf-8", newline="\n")


def load_model(path: str | Path) -> BTRewardModel:
    record = json.loads(Path(path).read_text(encoding="utf-8"))
    if len(record["weights"]) != record["dimension"]:
        raise BTError("model record dimension does not match its weights")
    return BTRewardModel(np.asarray(record["weights"]), float(record["bias"]))


def write_loss_curve(curve, path: str | Path) -> None:
    lines = [json.dumps({"epoch": i, "loss": float(v)}) for i, v in enumerate(curve)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
