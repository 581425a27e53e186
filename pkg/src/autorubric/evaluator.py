"""Rubric-conditioned pairwise evaluation and the ablation harnesses built on it."""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import prompts
from .judge import JudgeError, Label, Order, TextPart, VerdictParseError, Verdict, as_gateway, make_tag, parse_verdict
from .preference import PreferenceDataset, PreferencePair, swap_pair
from .rubrics import RubricRecord, RubricStore, StructuredRubric, flat_rubric, structure_rubrics

logger = logging.getLogger(__name__)


class EvaluationError(RuntimeError):
    pass


@dataclass(frozen=True)
class EvalProtocol:
    orders: tuple[Order, ...] = (Order.FORWARD, Order.REVERSE)
    cardinality_k: int = 5
    bootstrap_resamples: int = 1000
    seed: int = 0

    def __post_init__(self):
        if self.cardinality_k < 1:
            raise ValueError("cardinality_k must be >= 1")
        if self.bootstrap_resamples < 0:
            raise ValueError("bootstrap_resamples must be >= 0")
        object.__setattr__(self, "orders", tuple(Order(o) for o in self.orders))
        if not self.orders:
            raise ValueError("at least one order is required")

    @classmethod
    def forward_only(cls, **kw) -> "EvalProtocol":
        return cls(orders=(Order.FORWARD,), **kw)


@dataclass(frozen=True)
class Judgment:
    pair_id: str
    order: Order
    verdict: Label | None
    correct: bool
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "pair_id": self.pair_id,
            "order": self.order.value,
            "verdict": self.verdict.value if self.verdict is not None else None,
            "correct": self.correct,
            "error": self.error,
        }


@dataclass(frozen=True)
class EvalReport:
    accuracy: float
    accuracy_std: float
    per_pair: tuple[Judgment, ...]
    judged: int
    errored: int
    correct: int
    accuracy_ci: tuple[float, float] | None = None

    def order_counts(self, order: Order) -> tuple[int, int]:
        """(correct, judged) restricted to one presentation order."""
        rows = [j for j in self.per_pair if j.order is order and j.error is None]
        return sum(j.correct for j in rows), len(rows)

    def summary(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "accuracy_std": self.accuracy_std,
            "accuracy_ci": list(self.accuracy_ci) if self.accuracy_ci else None,
            "correct": self.correct,
            "judged": self.judged,
            "errored": self.errored,
        }


@dataclass(frozen=True)
class BiasReport:
    forward_acc: float
    reverse_acc: float
    avg: float
    delta: float

    @classmethod
    def from_counts(cls, fwd_correct: int, fwd_judged: int, rev_correct: int, rev_judged: int) -> "BiasReport":
        if fwd_judged == 0 or rev_judged == 0:
            raise EvaluationError("both orders need at least one successful judgment")
        f = Fraction(fwd_correct, fwd_judged)
        r = Fraction(rev_correct, rev_judged)
        return cls(float(f), float(r), float((f + r) / 2), float(f - r))

    @classmethod
    def from_accuracies(cls, forward_acc: float, reverse_acc: float) -> "BiasReport":
        # decimal-exact arithmetic so table values like 84.5/49.9 give 67.2/34.6
        f = Fraction(str(forward_acc))
        r = Fraction(str(reverse_acc))
        return cls(float(f), float(r), float((f + r) / 2), float(f - r))

    def percent(self) -> dict:
        return {k: float(Fraction(str(getattr(self, k))) * 100) for k in ("forward_acc", "reverse_acc", "avg", "delta")}


def judge_pair(pair: PreferencePair, rubric: StructuredRubric | None, order: Order, backend, *, guide: str = "") -> Verdict:
    """Judge one pair in the given presentation order.

    The returned verdict is mapped back to the pair's own (unswapped)
    coordinates. ``rubric=None`` judges without a rubric (direct baseline).
    """
    if rubric is not None and not rubric.rendered.strip():
        raise EvaluationError("empty rubric")
    gw = as_gateway(backend)
    shown = pair if order is Order.FORWARD else swap_pair(pair)
    system = prompts.template("judge") + (rubric.rendered if rubric is not None else "(none)\n")
    if guide:
        system += "\nReference judgments:\n" + guide.rstrip() + "\n"
    req = gw.request(system, prompts.pair_parts(shown.prompt, shown.first, shown.second), make_tag("judge", pair.id, order))
    v = parse_verdict(gw.chat_complete(req).text)
    if order is Order.REVERSE:
        return Verdict(v.preferred.flipped(), v.rationale, v.raw)
    return v


def _judge_all(dataset, rubric, orders, backend, guide) -> list[Judgment]:
    gw = as_gateway(backend)
    jobs = [(p, o) for p in dataset for o in orders]

    def one(job):
        pair, order = job
        try:
            v = judge_pair(pair, rubric, order, gw, guide=guide)
        except (JudgeError, VerdictParseError) as exc:
            logger.warning("judgment %s/%s errored: %s", pair.id, order.value, exc)
            return Judgment(pair.id, order, None, False, error=f"{type(exc).__name__}: {exc}")
        return Judgment(pair.id, order, v.preferred, v.preferred is pair.label)

    return gw.map(one, jobs)


def bootstrap_accuracy(
    per_pair: Sequence[Judgment], resamples: int, seed: int
) -> tuple[float, tuple[float, float]]:
    """Pair-level bootstrap: std and 95% percentile interval of accuracy."""
    groups: dict[str, list[int]] = {}
    for j in per_pair:
        if j.error is None:
            g = groups.setdefault(j.pair_id, [0, 0])
            g[0] += int(j.correct)
            g[1] += 1
    if resamples == 0 or not groups:
        return 0.0, None
    counts = np.array(list(groups.values()), dtype=float)
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(counts), size=(resamples, len(counts)))
    correct = counts[idx, 0].sum(axis=1)
    judged = counts[idx, 1].sum(axis=1)
    acc = correct / judged
    lo, hi = np.percentile(acc, [2.5, 97.5])
    return float(acc.std(ddof=1)) if resamples > 1 else 0.0, (float(lo), float(hi))


def evaluate_dataset(
    dataset: PreferenceDataset,
    rubric: StructuredRubric | None,
    protocol: EvalProtocol,
    backend,
    *,
    guide: str = "",
) -> EvalReport:
    if len(dataset) == 0:
        raise EvaluationError("empty dataset")
    unlabeled = [p.id for p in dataset if p.label is None]
    if unlabeled:
        raise EvaluationError(f"evaluation needs labeled pairs; unlabeled: {unlabeled[:5]}")
    per_pair = _judge_all(dataset, rubric, protocol.orders, backend, guide)
    ok = [j for j in per_pair if j.error is None]
    if not ok:
        raise EvaluationError(f"all {len(per_pair)} judgments errored; first: {per_pair[0].error}")
    correct = sum(j.correct for j in ok)
    std, ci = bootstrap_accuracy(per_pair, protocol.bootstrap_resamples, protocol.seed)
    return EvalReport(
        accuracy=correct / len(ok),
        accuracy_std=std,
        per_pair=tuple(per_pair),
        judged=len(ok),
        errored=len(per_pair) - len(ok),
        correct=correct,
        accuracy_ci=ci,
    )


def bias_ablation(dataset: PreferenceDataset, rubric: StructuredRubric | None, backend, *, guide: str = "") -> BiasReport:
    report = evaluate_dataset(dataset, rubric, EvalProtocol(bootstrap_resamples=0), backend, guide=guide)
    return bias_from_report(report)


def bias_from_report(report: EvalReport) -> BiasReport:
    fc, fj = report.order_counts(Order.FORWARD)
    rc, rj = report.order_counts(Order.REVERSE)
    return BiasReport.from_counts(fc, fj, rc, rj)


def format_bias_table(rows: Iterable[tuple[str, BiasReport]]) -> str:
    lines = [f"{'Method':<24}{'Forward':>9}{'Reverse':>9}{'Avg':>9}{'Δ':>9}"]
    for name, rep in rows:
        p = rep.percent()
        lines.append(
            f"{name:<24}{p['forward_acc']:>9.1f}{p['reverse_acc']:>9.1f}{p['avg']:>9.1f}{p['delta']:>9.1f}"
        )
    return "\n".join(lines) + "\n"


# -- subset selection -------------------------------------------------------------


@dataclass(frozen=True)
class SelectionTrace:
    selected: tuple[str, ...]
    objective_by_step: tuple[int, ...]


def subset_objective(records: Sequence[RubricRecord], tuning_set: PreferenceDataset, backend) -> int:
    """Number of tuning pairs judged correctly (forward order) under the combined rubric."""
    rubric = flat_rubric(records)
    judgments = _judge_all(tuning_set, rubric, (Order.FORWARD,), backend, "")
    return sum(j.correct for j in judgments if j.error is None)


def greedy_select(candidates: Sequence[RubricRecord], tuning_set: PreferenceDataset, k: int, backend) -> SelectionTrace:
    """Greedy forward selection of `k` rubrics maximizing the correct-judgment count.

    Ties go to the lower rubric_id. Exactly `k` rubrics are always selected.
    """
    pool = sorted(candidates, key=lambda r: r.rubric_id)
    if len(pool) < k:
        raise EvaluationError(f"need at least {k} verified candidates, have {len(pool)}")
    chosen: list[RubricRecord] = []
    trace: list[int] = []
    for _ in range(k):
        best = None
        best_val = -1
        for rec in pool:
            if rec in chosen:
                continue
            val = subset_objective(chosen + [rec], tuning_set, backend)
            if val > best_val:  # strict: earlier (lower id) wins ties
                best, best_val = rec, val
        chosen.append(best)
        trace.append(best_val)
    return SelectionTrace(tuple(r.rubric_id for r in chosen), tuple(trace))


def exhaustive_select(candidates: Sequence[RubricRecord], tuning_set: PreferenceDataset, k: int, backend) -> tuple[tuple[str, ...], int]:
    """Best size-`k` subset by full enumeration. Reference for small instances."""
    pool = sorted(candidates, key=lambda r: r.rubric_id)
    best_ids, best_val = (), -1
    for combo in itertools.combinations(pool, k):
        val = subset_objective(list(combo), tuning_set, backend)
        if val > best_val:
            best_ids, best_val = tuple(r.rubric_id for r in combo), val
    return best_ids, best_val


def select_rubric_subset(
    candidates: RubricStore | Sequence[RubricRecord],
    tuning_set: PreferenceDataset,
    k: int,
    backend,
    *,
    structure_backend=None,
) -> StructuredRubric:
    if not tuning_set.labeled:
        raise EvaluationError("tuning set must be labeled")
    verified = candidates.verified if isinstance(candidates, RubricStore) else list(candidates)
    trace = greedy_select(verified, tuning_set, k, backend)
    winners = [r for r in verified if r.rubric_id in set(trace.selected)]
    logger.info("selected %s (objective by step %s)", trace.selected, trace.objective_by_step)
    return structure_rubrics(winners, structure_backend or backend)


@dataclass(frozen=True)
class SweepPoint:
    k: int
    accuracy: float
    provenance: tuple[str, ...]


def cardinality_sweep(
    dataset: PreferenceDataset,
    store: RubricStore,
    ks: Sequence[int],
    backend,
    *,
    seed: int = 0,
) -> list[SweepPoint]:
    if not ks:
        raise EvaluationError("no cardinalities given")
    if len(store.verified) < max(ks):
        raise EvaluationError(f"store has {len(store.verified)} verified rubrics, sweep needs {max(ks)}")
    out = []
    for k in ks:
        rubric = select_rubric_subset(store, dataset, k, backend)
        report = evaluate_dataset(dataset, rubric, EvalProtocol(bootstrap_resamples=0, seed=seed), backend)
        out.append(SweepPoint(k, report.accuracy, rubric.provenance))
    return out


def format_sweep_table(points: Sequence[SweepPoint]) -> str:
    lines = [f"{'K':>4}{'Accuracy':>11}"]
    lines += [f"{p.k:>4}{100 * p.accuracy:>11.1f}" for p in points]
    return "\n".join(lines) + "\n"


# -- export -------------------------------------------------------------------------


def write_report(report: EvalReport, path: str | Path) -> None:
    rows = [json.dumps(j.to_dict(), separators=(",", ":")) for j in report.per_pair]
    rows.append(json.dumps({"summary": report.summary()}, separators=(",", ":")))
    Path(path).write_text("\n".join(rows) + "\n", encoding="utf-8", newline="\n")
