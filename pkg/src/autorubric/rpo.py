"""Rubric Policy Optimization on a multi-step affine-Gaussian chain policy.

The policy generates ``x_T -> x_{T-1} -> ... -> x_0`` with

    x_{t-1} = W_t x_t + b_t + U_t g + sigma * eps_t,    eps_t ~ N(0, I),

where ``g`` is the prompt's target vector. Every per-step quantity the
clipped objective needs (log-density, importance ratio, KL to the reference
policy) is closed form, and the objective's gradient is derived by hand.

Per iteration, two trajectories are sampled per prompt from the snapshot
policy, a pairwise judge picks a winner, the winner gets advantage ``+lam``
and the loser ``-gamma`` at every step, and one gradient step is taken on

    loss = -mean_traj[ mean_t min(r_t A, clip(r_t, 1-eps, 1+eps) A) - beta * KL_traj ].
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Protocol, Sequence

import numpy as np

from .judge import Label, Order, Verdict
from .preference import Candidate, PreferenceDataset, PreferencePair

logger = logging.getLogger(__name__)

_LOG_2PI = math.log(2 * math.pi)


class RPOError(RuntimeError):
    pass


@dataclass
class GaussianChainPolicy:
    """Parameters are indexed by step: ``W[t-1]`` drives the move out of ``x_t``."""

    W: np.ndarray  # (T, d, d)
    b: np.ndarray  # (T, d)
    U: np.ndarray  # (T, d, d) prompt conditioning
    sigma: float

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        self.b = np.asarray(self.b, dtype=float)
        self.U = np.asarray(self.U, dtype=float)
        T, d = self.b.shape
        if self.W.shape != (T, d, d) or self.U.shape != (T, d, d):
            raise ValueError("inconsistent parameter shapes")
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")

    @classmethod
    def identity(cls, T: int, d: int, sigma: float) -> "GaussianChainPolicy":
        return cls(np.tile(np.eye(d), (T, 1, 1)), np.zeros((T, d)), np.zeros((T, d, d)), sigma)

    @property
    def T(self) -> int:
        return self.b.shape[0]

    @property
    def d(self) -> int:
        return self.b.shape[1]

    def mean(self, t: int, x_t: np.ndarray, g: np.ndarray) -> np.ndarray:
        i = t - 1
        return self.W[i] @ x_t + self.b[i] + self.U[i] @ g

    def copy(self) -> "GaussianChainPolicy":
        return GaussianChainPolicy(self.W.copy(), self.b.copy(), self.U.copy(), self.sigma)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.W.ravel(), self.b.ravel(), self.U.ravel()])

    def with_flat(self, theta: np.ndarray) -> "GaussianChainPolicy":
        T, d = self.T, self.d
        nW, nb = T * d * d, T * d
        return GaussianChainPolicy(
            theta[:nW].reshape(T, d, d),
            theta[nW:nW + nb].reshape(T, d),
            theta[nW + nb:].reshape(T, d, d),
            self.sigma,
        )

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.flat())))


@dataclass(frozen=True)
class Trajectory:
    """``states[k]`` is ``x_{T-k}``: states[0] = x_T, states[-1] = x_0."""

    prompt: np.ndarray
    states: np.ndarray  # (T+1, d)
    per_step_logprob: np.ndarray  # (T,), entry k is log pi(x_{T-k-1} | x_{T-k})

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def transition(self, t: int) -> tuple[np.ndarray, np.ndarray]:
        """(x_t, x_{t-1})."""
        k = self.states.shape[0] - 1 - t
        return self.states[k], self.states[k + 1]


@dataclass(frozen=True)
class RPOConfig:
    iterations: int = 500
    batch_size: int = 32
    lam: float = 1.0
    gamma: float = 0.1
    clip_eps: float = 0.2
    kl_beta: float = 0.01
    learning_rate: float = 0.05
    T: int = 8
    d: int = 2
    sigma: float = 0.3
    grad_clip: float | None = 1.0
    inner_epochs: int = 1
    prompt_scale: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.clip_eps < 1:
            raise ValueError("clip_eps must lie in (0, 1)")
        if self.lam <= 0 or self.gamma <= 0:
            raise ValueError("lam and gamma must be positive")
        if self.kl_beta < 0 or self.learning_rate <= 0 or self.sigma <= 0:
            raise ValueError("kl_beta >= 0, learning_rate > 0, sigma > 0 required")
        if min(self.T, self.d, self.batch_size, self.inner_epochs) < 1 or self.iterations < 0:
            raise ValueError("T, d, batch_size, inner_epochs must be >= 1")


# -- per-step quantities ---------------------------------------------------------


def step_log_prob(policy: GaussianChainPolicy, x_t, x_prev, t: int, g) -> float:
    diff = np.asarray(x_prev) - policy.mean(t, np.asarray(x_t), np.asarray(g))
    s2 = policy.sigma ** 2
    return float(-0.5 * diff @ diff / s2 - 0.5 * policy.d * (_LOG_2PI + math.log(s2)))


def sample_trajectory(policy: GaussianChainPolicy, g, rng: np.random.Generator) -> Trajectory:
    g = np.asarray(g, dtype=float)
    if g.shape != (policy.d,):
        raise ValueError(f"prompt vector has shape {g.shape}, policy d={policy.d}")
    T = policy.T
    states = np.empty((T + 1, policy.d))
    states[0] = rng.standard_normal(policy.d)
    logp = np.empty(T)
    for k in range(T):
        t = T - k
        states[k + 1] = policy.mean(t, states[k], g) + policy.sigma * rng.standard_normal(policy.d)
        logp[k] = step_log_prob(policy, states[k], states[k + 1], t, g)
    return Trajectory(g, states, logp)


def importance_ratio(policy: GaussianChainPolicy, old_policy: GaussianChainPolicy, traj: Trajectory, t: int) -> float:
    x_t, x_prev = traj.transition(t)
    return math.exp(step_log_prob(policy, x_t, x_prev, t, traj.prompt) - step_log_prob(old_policy, x_t, x_prev, t, traj.prompt))


def kl_step(policy: GaussianChainPolicy, ref: GaussianChainPolicy, x_t, t: int, g) -> float:
    """KL between the two step distributions at ``x_t`` (same isotropic sigma)."""
    if policy.sigma != ref.sigma:
        raise ValueError("kl_step assumes a shared sigma")
    diff = policy.mean(t, np.asarray(x_t), np.asarray(g)) - ref.mean(t, np.asarray(x_t), np.asarray(g))
    return float(diff @ diff / (2 * policy.sigma ** 2))


def trajectory_kl(policy: GaussianChainPolicy, ref: GaussianChainPolicy, traj: Trajectory) -> float:
    T = policy.T
    return float(np.mean([kl_step(policy, ref, traj.transition(t)[0], t, traj.prompt) for t in range(T, 0, -1)]))


def assign_advantages(verdict: Verdict | Label, cfg: RPOConfig) -> tuple[float, float]:
    """(A_first, A_second): winner +lam, loser -gamma."""
    preferred = verdict.preferred if isinstance(verdict, Verdict) else verdict
    if preferred is Label.FIRST:
        return cfg.lam, -cfg.gamma
    return -cfg.gamma, cfg.lam


# -- objective ---------------------------------------------------------------------


@dataclass(frozen=True)
class BatchItem:
    first: Trajectory
    second: Trajectory
    adv_first: float
    adv_second: float


@dataclass
class ObjectiveResult:
    loss: float
    grad: GaussianChainPolicy  # gradient of the loss, same layout as the policy
    surrogate: float
    mean_kl: float
    clip_fraction: float


def _stack(batch: Sequence[BatchItem]):
    trajs = [tr for item in batch for tr in (item.first, item.second)]
    adv = np.array([a for item in batch for a in (item.adv_first, item.adv_second)], dtype=float)
    S = np.stack([tr.states for tr in trajs])  # (N, T+1, d)
    G = np.stack([tr.prompt for tr in trajs])  # (N, d)
    return S[:, :-1], S[:, 1:], G, adv


def _means(policy: GaussianChainPolicy, X, G):
    # transition k uses parameter index T-1-k
    T = policy.T
    idx = np.arange(T - 1, -1, -1)
    W, b, U = policy.W[idx], policy.b[idx], policy.U[idx]
    return np.einsum("kij,nkj->nki", W, X) + b[None] + np.einsum("kij,nj->nki", U, G)


# overflow surfaces as the explicit non-finite check below rather than a warning
@np.errstate(over="ignore", invalid="ignore")
def rpo_objective(
    policy: GaussianChainPolicy,
    old_policy: GaussianChainPolicy,
    ref_policy: GaussianChainPolicy,
    batch: Sequence[BatchItem],
    cfg: RPOConfig,
) -> ObjectiveResult:
    """Negated clipped surrogate with KL penalty, and its exact gradient."""
    if not batch:
        raise RPOError("empty batch")
    X, Xp, G, A = _stack(batch)
    N, T, _ = X.shape
    s2 = policy.sigma ** 2
    mu = _means(policy, X, G)
    mu_old = _means(old_policy, X, G)
    mu_ref = _means(ref_policy, X, G)

    r_new = Xp - mu
    r_old = Xp - mu_old
    # normalizers cancel in the ratio
    log_ratio = (-0.5 * np.sum(r_new ** 2, axis=-1) + 0.5 * np.sum(r_old ** 2, axis=-1)) / s2
    ratio = np.exp(log_ratio)  # (N, T)
    Ab = A[:, None]
    unclipped = ratio * Ab
    clipped = np.clip(ratio, 1 - cfg.clip_eps, 1 + cfg.clip_eps) * Ab
    term = np.minimum(unclipped, clipped)
    dmu_ref = mu - mu_ref
    kl = np.sum(dmu_ref ** 2, axis=-1) / (2 * s2)  # (N, T)

    surrogate = term.mean(axis=1)
    kl_traj = kl.mean(axis=1)
    objective = float(np.mean(surrogate - cfg.kl_beta * kl_traj))
    if not math.isfinite(objective):
        bad = np.argwhere(~np.isfinite(term))
        raise RPOError(f"non-finite objective (first bad trajectory/step: {bad[:1].tolist()})")

    # d term / d ratio is A on the unclipped branch, 0 where the clipped product is chosen
    dterm_dratio = np.where(unclipped <= clipped, Ab, 0.0)
    dratio_dmu = ratio[..., None] * r_new / s2
    dobj_dmu = (dterm_dratio[..., None] * dratio_dmu - cfg.kl_beta * dmu_ref / s2) / (N * T)
    dloss_dmu = -dobj_dmu  # (N, T, d)

    gW = np.einsum("nki,nkj->kij", dloss_dmu, X)
    gb = dloss_dmu.sum(axis=0)
    gU = np.einsum("nki,nj->kij", dloss_dmu, G)
    # map transition index k back to parameter index T-1-k
    grad = GaussianChainPolicy(gW[::-1], gb[::-1], gU[::-1], policy.sigma)

    clip_frac = float(np.mean(unclipped > clipped))
    return ObjectiveResult(-objective, grad, float(surrogate.mean()), float(kl_traj.mean()), clip_frac)


# -- judges -------------------------------------------------------------------------


class TrajectoryJudge(Protocol):
    def __call__(self, g: np.ndarray, first: Trajectory, second: Trajectory, tag: str) -> Label: ...


def closeness_features(g: np.ndarray, x0: np.ndarray) -> tuple[float, ...]:
    """Per-axis closeness to the target (higher is better)."""
    return tuple(float(v) for v in -np.abs(np.asarray(x0) - np.asarray(g)))


class ClosenessOracleJudge:
    """Each coordinate is one rubric criterion (closer to target wins it);
    the majority of criteria decides, total distance breaks ties."""

    backend_id = "closeness-oracle"

    def __call__(self, g, first: Trajectory, second: Trajectory, tag: str = "") -> Label:
        d1 = np.abs(first.final - g)
        d2 = np.abs(second.final - g)
        votes = int(np.sum(d1 < d2)) - int(np.sum(d2 < d1))
        if votes > 0:
            return Label.FIRST
        if votes < 0:
            return Label.SECOND
        return Label.FIRST if np.linalg.norm(d1) <= np.linalg.norm(d2) else Label.SECOND


class GatewayTrajectoryJudge:
    """Asks a gateway backend for a rubric-conditioned verdict on two final states.

    ``rubric_for_prompt`` supplies the rubric per prompt; by default the fixed
    structured rubric is retrieved for every prompt.
    """

    def __init__(self, backend, rubric, rubric_for_prompt: Callable | None = None):
        from .judge import as_gateway

        self.gateway = as_gateway(backend)
        self.rubric = rubric
        self.rubric_for_prompt = rubric_for_prompt or (lambda g: self.rubric)
        self.backend_id = self.gateway.backend_id

    def __call__(self, g, first: Trajectory, second: Trajectory, tag: str = "") -> Label:
        from .evaluator import judge_pair

        target = ", ".join(f"{v:.6g}" for v in g)
        pair = PreferencePair(
            id=tag or "rpo",
            prompt=f"Produce an output whose coordinates match the target ({target}).",
            first=Candidate("traj-1", feature_vector=closeness_features(g, first.final)),
            second=Candidate("traj-2", feature_vector=closeness_features(g, second.final)),
        )
        return judge_pair(pair, self.rubric_for_prompt(g), Order.FORWARD, self.gateway).preferred


# -- prompts --------------------------------------------------------------------------


def prompt_vector(prompt: str, d: int, scale: float = 1.0) -> np.ndarray:
    """Deterministic target vector embedded from prompt text."""
    seed = int.from_bytes(hashlib.sha256(prompt.encode("utf-8")).digest()[:8], "little")
    return np.random.default_rng(seed).uniform(-scale, scale, size=d)


class PromptSampler:
    """Uniform prompt sampler over a dataset's prompts, or synthetic uniform targets."""

    def __init__(self, d: int, scale: float = 1.0, dataset: PreferenceDataset | None = None):
        self.d = d
        self.scale = scale
        self.targets = None
        if dataset is not None:
            prompts = sorted({p.prompt for p in dataset})
            if not prompts:
                raise RPOError("prompt dataset is empty")
            self.targets = np.stack([prompt_vector(p, d, scale) for p in prompts])

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        if self.targets is None:
            return rng.uniform(-self.scale, self.scale, size=(n, self.d))
        return self.targets[rng.integers(0, len(self.targets), size=n)]


# -- training -------------------------------------------------------------------------


@dataclass
class IterationMetrics:
    iteration: int
    mean_final_distance: float
    mean_kl: float
    win_rate_vs_ref: float
    loss: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainerState:
    policy: GaussianChainPolicy
    old_policy: GaussianChainPolicy
    ref_policy: GaussianChainPolicy
    metrics: list[IterationMetrics] = field(default_factory=list)


def _clip_grad(grad: GaussianChainPolicy, max_norm: float | None) -> np.ndarray:
    flat = grad.flat()
    if max_norm is not None:
        norm = float(np.linalg.norm(flat))
        if norm > max_norm:
            flat = flat * (max_norm / norm)
    return flat


def collect_batch(policy, prompts, judge, cfg, rng, iteration: int = 0) -> list[BatchItem]:
    batch = []
    for j, g in enumerate(prompts):
        a = sample_trajectory(policy, g, rng)
        b = sample_trajectory(policy, g, rng)
        winner = judge(g, a, b, f"rpo-{iteration}-{j}")
        adv_a, adv_b = assign_advantages(winner, cfg)
        batch.append(BatchItem(a, b, adv_a, adv_b))
    return batch


def win_rate(policy, other, prompts, judge, rng, tag: str = "eval") -> float:
    """Fraction of prompts where a sample from `policy` beats one from `other`."""
    wins = 0
    for j, g in enumerate(prompts):
        a = sample_trajectory(policy, g, rng)
        b = sample_trajectory(other, g, rng)
        wins += judge(g, a, b, f"{tag}-{j}") is Label.FIRST
    return wins / len(prompts)


def mean_final_distance(policy, prompts, rng) -> float:
    return float(np.mean([np.linalg.norm(sample_trajectory(policy, g, rng).final - g) for g in prompts]))


def rpo_train(
    cfg: RPOConfig,
    prompt_source: PreferenceDataset | PromptSampler | None = None,
    judge: TrajectoryJudge | None = None,
    *,
    policy: GaussianChainPolicy | None = None,
    metrics_every: int = 1,
) -> TrainerState:
    sampler = prompt_source if isinstance(prompt_source, PromptSampler) else PromptSampler(cfg.d, cfg.prompt_scale, prompt_source)
    judge = judge or ClosenessOracleJudge()
    policy = (policy or GaussianChainPolicy.identity(cfg.T, cfg.d, cfg.sigma)).copy()
    state = TrainerState(policy, policy.copy(), policy.copy())
    rng = np.random.default_rng([cfg.seed, 0])
    metrics_rng = np.random.default_rng([cfg.seed, 1])

    for it in range(cfg.iterations):
        state.old_policy = state.policy.copy()
        prompts = sampler.sample(rng, cfg.batch_size)
        batch = collect_batch(state.old_policy, prompts, judge, cfg, rng, it)
        for _ in range(cfg.inner_epochs):
            res = rpo_objective(state.policy, state.old_policy, state.ref_policy, batch, cfg)
            step = _clip_grad(res.grad, cfg.grad_clip)
            new = state.policy.with_flat(state.policy.flat() - cfg.learning_rate * step)
            if not new.is_finite():
                raise RPOError(f"policy diverged at iteration {it}")
            state.policy = new
        if metrics_every and (it % metrics_every == 0 or it == cfg.iterations - 1):
            finals = [np.linalg.norm(tr.final - tr.prompt) for item in batch for tr in (item.first, item.second)]
            wr = win_rate(state.policy, state.ref_policy, prompts, judge, metrics_rng, f"metric-{it}")
            state.metrics.append(IterationMetrics(it, float(np.mean(finals)), res.mean_kl, wr, res.loss))
    return state


# -- checkpoints and logs ---------------------------------------------------------


def save_policy(policy: GaussianChainPolicy, path: str | Path, seed: int = 0) -> None:
    record = {
        "T": policy.T,
        "d": policy.d,
        "sigma": policy.sigma,
        "seed": seed,
        "W": policy.W.tolist(),
        "b": policy.b.tolist(),
        "U": policy.U.tolist(),
    }
    Path(path).write_text(json.dumps(record) + "\n", encoding="utf-8", newline="\n")


def load_policy(path: str | Path) -> GaussianChainPolicy:
    rec = json.loads(Path(path).read_text(encoding="utf-8"))
    pol = GaussianChainPolicy(np.array(rec["W"]), np.array(rec["b"]), np.array(rec["U"]), float(rec["sigma"]))
    if (pol.T, pol.d) != (rec["T"], rec["d"]):
        raise RPOError("checkpoint header does not match parameter shapes")
    return pol


def write_metrics(metrics: Sequence[IterationMetrics], path: str | Path) -> None:
    lines = [json.dumps(m.to_dict()) for m in metrics]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")
