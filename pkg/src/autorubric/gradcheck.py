"""Central finite-difference checks for the hand-derived gradients."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from . import bt, rpo
from .preference import PreferenceDataset, synthetic_feature_dataset


def central_difference(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    x = np.array(x, dtype=float)
    out = np.empty_like(x)
    for i in range(x.size):
        old = x.flat[i]
        x.flat[i] = old + h
        up = f(x)
        x.flat[i] = old - h
        down = f(x)
        x.flat[i] = old
        out.flat[i] = (up - down) / (2 * h)
    return out


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def random_policy(T: int, d: int, sigma: float, rng, scale: float = 0.3) -> rpo.GaussianChainPolicy:
    return rpo.GaussianChainPolicy(
        np.eye(d)[None] + scale * rng.standard_normal((T, d, d)),
        scale * rng.standard_normal((T, d)),
        scale * rng.standard_normal((T, d, d)),
        sigma,
    )


def perturbed(policy: rpo.GaussianChainPolicy, rng, scale: float) -> rpo.GaussianChainPolicy:
    theta = policy.flat()
    return policy.with_flat(theta + scale * rng.standard_normal(theta.shape))


def random_rpo_instance(cfg: rpo.RPOConfig, rng, batch_size: int = 2, kink_margin: float = 1e-4):
    """Random (policy, old, ref, batch) with ratios kept away from the clip kinks.

    The clipped objective is not differentiable where a ratio sits exactly on
    1 +/- eps, so draws landing within `kink_margin` of a kink are redrawn.
    """
    while True:
        old = random_policy(cfg.T, cfg.d, cfg.sigma, rng)
        policy = perturbed(old, rng, 0.05)
        ref = perturbed(old, rng, 0.1)
        batch = []
        for _ in range(batch_size):
            g = rng.uniform(-1, 1, cfg.d)
            a = rpo.sample_trajectory(old, g, rng)
            b = rpo.sample_trajectory(old, g, rng)
            adv = rpo.assign_advantages(rpo.Label.FIRST if rng.random() < 0.5 else rpo.Label.SECOND, cfg)
            batch.append(rpo.BatchItem(a, b, *adv))
        X, Xp, G, _ = rpo._stack(batch)
        mu, mu_old = rpo._means(policy, X, G), rpo._means(old, X, G)
        ratio = np.exp((np.sum((Xp - mu_old) ** 2, -1) - np.sum((Xp - mu) ** 2, -1)) / (2 * cfg.sigma ** 2))
        gap = np.minimum(np.abs(ratio - (1 - cfg.clip_eps)), np.abs(ratio - (1 + cfg.clip_eps)))
        if gap.min() > kink_margin:
            return policy, old, ref, batch


def rpo_gradient_error(cfg: rpo.RPOConfig, rng, h: float = 1e-5) -> float:
    policy, old, ref, batch = random_rpo_instance(cfg, rng)
    analytic = rpo.rpo_objective(policy, old, ref, batch, cfg).grad.flat()
    numeric = central_difference(lambda th: rpo.rpo_objective(policy.with_flat(th), old, ref, batch, cfg).loss, policy.flat(), h)
    return relative_error(analytic, numeric)


def bt_gradient_error(rng, d: int = 4, n: int = 20, l2: float = 0.1, h: float = 1e-5) -> float:
    data = synthetic_feature_dataset(n, rng.standard_normal(d), rng, label_noise=0.2)
    model = bt.BTRewardModel(rng.standard_normal(d), float(rng.standard_normal()))
    analytic = bt.bt_grad(model, data, l2).flat()

    def loss(theta):
        return bt.bt_loss(bt.BTRewardModel(theta[:-1], float(theta[-1])), data, l2)

    numeric = central_difference(loss, np.append(model.weights, model.bias), h)
    return relative_error(analytic, numeric)


def finite_diff_check(cfg: rpo.RPOConfig | None = None, trials: int = 50, seed: int = 0) -> float:
    """Worst relative gradient error over random RPO (d=2, T=3 by default) and BT instances."""
    cfg = cfg or rpo.RPOConfig(T=3, d=2)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        worst = max(worst, rpo_gradient_error(cfg, rng), bt_gradient_error(rng))
    return worst
