import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from autorubric.evaluator import (
    BiasReport,
    EvalProtocol,
    EvaluationError,
    bias_ablation,
    cardinality_sweep,
    evaluate_dataset,
    exhaustive_select,
    format_bias_table,
    greedy_select,
    judge_pair,
    select_rubric_subset,
    subset_objective,
    write_report,
)
from autorubric.judge import Gateway, Order, RetriesExhausted, ScriptedBackend, parse_tag
from autorubric.preference import Label, PreferenceDataset, axis_decided_dataset, synthetic_feature_dataset
from autorubric.rubrics import PipelineConfig, RubricRecord, RubricStore, Status, flat_rubric, run_pipeline

from conftest import WEIGHTS, feature_pair, no_sleep, oracle_gateway

RUBRIC = flat_rubric([RubricRecord("r1", "p", "- overall quality", Status.VERIFIED)])


def axis_record(k, rid=None):
    return RubricRecord(rid or f"r{k}", f"p{k}", f"- [axis={k}] attribute {k} is rendered well", Status.VERIFIED)


def labeled_pairs(n, labels=None):
    labels = labels or [Label.FIRST] * n
    return PreferenceDataset(tuple(feature_pair(f"p{i:04d}", (1.0,), (0.0,), labels[i]) for i in range(n)))


def correctness_backend(dataset, correct_ids, orders=(Order.FORWARD, Order.REVERSE)):
    """Replies with the label (in presentation coordinates) for pairs in correct_ids, the opposite otherwise."""
    by_id = {p.id: p for p in dataset}

    def reply(req):
        _, pid, order = parse_tag(req.request_tag)
        label = by_id[pid].label if pid in correct_ids else by_id[pid].label.flipped()
        shown = label if order is Order.FORWARD else label.flipped()
        return f"VERDICT: {shown.value.upper()}"

    return Gateway(ScriptedBackend(reply), sleep=no_sleep)


# -- judge_pair -------------------------------------------------------------------


def test_reverse_verdict_is_canonicalized():
    pair = feature_pair("ab", (1.0,), (0.0,))
    backend = ScriptedBackend({"judge:ab:reverse": "B looks worse\nVERDICT: SECOND"})
    assert judge_pair(pair, RUBRIC, Order.REVERSE, backend).preferred is Label.FIRST
    # the swapped pair was actually shown: candidate B in slot 1
    assert "Candidate 1 features: [0.0]" in backend.calls[0].user_text


def test_judge_prompt_contains_rubric():
    backend = ScriptedBackend(default="VERDICT: FIRST")
    judge_pair(feature_pair("x", (1.0,), (0.0,)), RUBRIC, Order.FORWARD, backend)
    assert RUBRIC.rendered in backend.calls[0].system_text


def test_empty_rubric_rejected():
    from autorubric.rubrics import StructuredRubric

    with pytest.raises(Exception):
        judge_pair(feature_pair("x", (1.0,), (0.0,)), StructuredRubric((), ()), Order.FORWARD, ScriptedBackend())


def test_unbiased_oracle_same_verdict_both_orders():
    gw = oracle_gateway()
    for p in synthetic_feature_dataset(20, WEIGHTS, np.random.default_rng(3)):
        assert judge_pair(p, RUBRIC, Order.FORWARD, gw).preferred is judge_pair(p, RUBRIC, Order.REVERSE, gw).preferred


def test_full_position_bias_flips_canonical_verdict():
    gw = oracle_gateway(position_bias=1.0)
    p = feature_pair("x", (0.0, 0.0, 0.0, 0.0), (1.0, 1.0, 1.0, 1.0))
    assert judge_pair(p, RUBRIC, Order.FORWARD, gw).preferred is Label.FIRST
    assert judge_pair(p, RUBRIC, Order.REVERSE, gw).preferred is Label.SECOND


# -- evaluate_dataset ---------------------------------------------------------------


def test_perfect_oracle_accuracy_one():
    ds = synthetic_feature_dataset(40, WEIGHTS, np.random.default_rng(1))
    rep = evaluate_dataset(ds, RUBRIC, EvalProtocol(bootstrap_resamples=100), oracle_gateway())
    assert rep.accuracy == 1.0 and rep.judged == 80 and rep.errored == 0


def test_counting_671_of_1000():
    ds = labeled_pairs(1000)
    correct = {p.id for p in list(ds)[:671]}
    rep = evaluate_dataset(ds, RUBRIC, EvalProtocol.forward_only(bootstrap_resamples=0), correctness_backend(ds, correct))
    assert rep.accuracy == 0.671
    assert rep.correct == 671 and rep.judged == 1000


def test_bootstrap_std_matches_binomial():
    ds = labeled_pairs(1000)
    rng = np.random.default_rng(0)
    correct = {p.id for p in rng.permutation(list(ds))[:700]}
    rep = evaluate_dataset(ds, RUBRIC, EvalProtocol.forward_only(bootstrap_resamples=1000, seed=11), correctness_backend(ds, correct))
    assert rep.accuracy == 0.7
    assert abs(rep.accuracy_std - math.sqrt(0.7 * 0.3 / 1000)) <= 0.003
    lo, hi = rep.accuracy_ci
    assert lo < 0.7 < hi


def test_bootstrap_bit_reproducible():
    ds = labeled_pairs(200)
    correct = {p.id for p in list(ds)[::3]}
    b = correctness_backend(ds, correct)
    r1 = evaluate_dataset(ds, RUBRIC, EvalProtocol(bootstrap_resamples=300, seed=4), b)
    r2 = evaluate_dataset(ds, RUBRIC, EvalProtocol(bootstrap_resamples=300, seed=4), b)
    assert r1 == r2


def test_errored_judgments_excluded():
    ds = labeled_pairs(10)
    good = correctness_backend(ds, {p.id for p in ds})

    def reply(req):
        if parse_tag(req.request_tag)[1] in ("p0000", "p0001"):
            return "I refuse to decide"
        return good.backend.send(req)

    rep = evaluate_dataset(ds, RUBRIC, EvalProtocol.forward_only(bootstrap_resamples=0), ScriptedBackend(reply))
    assert rep.errored == 2 and rep.judged == 8 and rep.accuracy == 1.0
    assert rep.judged + rep.errored == 10
    bad = [j for j in rep.per_pair if j.error]
    assert all("VerdictParseError" in j.error and j.verdict is None for j in bad)


def test_all_errored_aborts():
    ds = labeled_pairs(3)
    gw = Gateway(ScriptedBackend(default=RetriesExhausted("down")), sleep=no_sleep)
    with pytest.raises(EvaluationError, match="all 6 judgments errored"):
        evaluate_dataset(ds, RUBRIC, EvalProtocol(), gw)


def test_unlabeled_rejected():
    from dataclasses import replace

    ds = PreferenceDataset((replace(labeled_pairs(1)[0], label=None),))
    with pytest.raises(EvaluationError, match="labeled"):
        evaluate_dataset(ds, RUBRIC, EvalProtocol(), oracle_gateway())


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.floats(0, 0.5))
def test_accuracy_permutation_invariant(seed, noise):
    ds = synthetic_feature_dataset(25, WEIGHTS, np.random.default_rng(seed))
    gw = oracle_gateway(noise_rate=noise, seed=seed, position_bias=0.2)
    perm = np.random.default_rng(seed + 1).permutation(len(ds))
    shuffled = PreferenceDataset(tuple(ds[i] for i in perm))
    proto = EvalProtocol(bootstrap_resamples=50, seed=3)
    a = evaluate_dataset(ds, RUBRIC, proto, gw)
    b = evaluate_dataset(shuffled, RUBRIC, proto, gw)
    assert a.accuracy == b.accuracy and a.correct == b.correct


def test_write_report(tmp_path):
    ds = labeled_pairs(3)
    rep = evaluate_dataset(ds, RUBRIC, EvalProtocol(bootstrap_resamples=0), oracle_gateway((1.0,)))
    write_report(rep, tmp_path / "r.jsonl")
    lines = (tmp_path / "r.jsonl").read_text().splitlines()
    assert len(lines) == 7 and '"summary"' in lines[-1]


# -- bias ---------------------------------------------------------------------------


@pytest.mark.parametrize("fwd, rev, avg, delta", [(84.5, 49.9, 67.2, 34.6), (88.7, 56.1, 72.4, 32.6)])
def test_bias_table_arithmetic(fwd, rev, avg, delta):
    p = BiasReport.from_accuracies(fwd / 100, rev / 100).percent()
    assert (p["avg"], p["delta"]) == (avg, delta)


def test_bias_from_per_pair_fixture():
    ds = labeled_pairs(1000)
    fwd_ok = {p.id for p in list(ds)[:845]}
    rev_ok = {p.id for p in list(ds)[:499]}
    by_id = {p.id: p for p in ds}

    def reply(req):
        _, pid, order = parse_tag(req.request_tag)
        ok = pid in (fwd_ok if order is Order.FORWARD else rev_ok)
        label = by_id[pid].label if ok else by_id[pid].label.flipped()
        shown = label if order is Order.FORWARD else label.flipped()
        return f"VERDICT: {shown.value}"

    p = bias_ablation(ds, RUBRIC, ScriptedBackend(reply)).percent()
    assert p == {"forward_acc": 84.5, "reverse_acc": 49.9, "avg": 67.2, "delta": 34.6}


def test_unbiased_oracle_zero_delta():
    ds = synthetic_feature_dataset(30, WEIGHTS, np.random.default_rng(0))
    # a misaligned unbiased oracle is often wrong, but equally wrong in both orders
    rep = bias_ablation(ds, RUBRIC, oracle_gateway((1.0, -1.0, 0.0, 0.2)))
    assert rep.forward_acc < 1.0
    assert rep.delta == 0.0


def brute_force_bias(labels):
    """Enumerate (pair, order) cells for a judge that always picks the first slot."""
    fwd = rev = 0
    for lab in labels:
        for order in Order:
            shown_first = Label.FIRST if order is Order.FORWARD else Label.SECOND
            hit = shown_first is lab
            if order is Order.FORWARD:
                fwd += hit
            else:
                rev += hit
    return fwd / len(labels), rev / len(labels)


@pytest.mark.parametrize("n_first", [10, 0, 7, 20])
def test_full_position_bias_matches_brute_force(n_first):
    rng = np.random.default_rng(n_first)
    labels = [Label.FIRST] * n_first + [Label.SECOND] * (20 - n_first)
    labels = [labels[i] for i in rng.permutation(20)]
    ds = PreferenceDataset(tuple(feature_pair(f"q{i}", rng.normal(size=4), rng.normal(size=4), lab) for i, lab in enumerate(labels)))
    rep = bias_ablation(ds, RUBRIC, oracle_gateway(position_bias=1.0))
    f, r = brute_force_bias(labels)
    assert (rep.forward_acc, rep.reverse_acc) == (f, r)
    assert rep.forward_acc + rep.reverse_acc == 1.0
    # delta = 2*forward - 1, evaluated exactly before rounding to float
    assert rep.delta == float(2 * Fraction(n_first, 20) - 1)


def test_bias_table_format():
    table = format_bias_table([("rubric", BiasReport.from_accuracies(0.845, 0.499))])
    assert table.splitlines()[1].split() == ["rubric", "84.5", "49.9", "67.2", "34.6"]


# -- subset selection ---------------------------------------------------------------


def counts_fixture(counts, n=10):
    """One axis per candidate; axis k alone gets counts[k] of the n pairs right."""
    d = len(counts)
    pairs = []
    for i in range(n):
        f1 = [1.0 if i < c else 0.0 for c in counts]
        f2 = [0.0 if i < c else 1.0 for c in counts]
        pairs.append(feature_pair(f"t{i:02d}", f1, f2, Label.FIRST))
    return PreferenceDataset(tuple(pairs)), [axis_record(k) for k in range(d)], oracle_gateway((1.0,) * d)


def test_per_rubric_counts_fixture():
    ds, cands, gw = counts_fixture((7, 9, 4))
    assert [subset_objective([c], ds, gw) for c in cands] == [7, 9, 4]


def test_k1_selects_argmax():
    ds, cands, gw = counts_fixture((7, 9, 4))
    assert greedy_select(cands, ds, 1, gw).selected == ("r1",)
    sr = select_rubric_subset(RubricStore.from_records(cands), ds, 1, gw)
    assert sr.provenance == ("r1",)


def test_tie_goes_to_lower_id():
    ds, cands, gw = counts_fixture((5, 8, 8))
    assert greedy_select(list(reversed(cands)), ds, 1, gw).selected == ("r1",)


def test_insufficient_candidates():
    ds, cands, gw = counts_fixture((5, 8))
    with pytest.raises(EvaluationError, match="at least 3"):
        greedy_select(cands, ds, 3, gw)


def axis_selection_instance(seed, n_cand, n_pairs=12):
    rng = np.random.default_rng(seed)
    ds = axis_decided_dataset(n_pairs, n_cand, rng, label_noise=0.35)
    weights = tuple(float(w) for w in rng.choice([-1.0, 1.0], size=n_cand))
    return ds, [axis_record(k) for k in range(n_cand)], oracle_gateway(weights, seed=seed)


def test_greedy_matches_exhaustive_k2_of_4():
    ds, cands, gw = axis_selection_instance(0, 4)
    trace = greedy_select(cands, ds, 2, gw)
    ids, val = exhaustive_select(cands, ds, 2, gw)
    assert trace.objective_by_step[-1] == val
    assert sorted(trace.selected) == list(ids)


@pytest.mark.parametrize("seed", range(8))
def test_greedy_objective_non_decreasing(seed):
    # holds when no rubric hurts: the oracle weights agree with the labels on every axis
    cands = [axis_record(k) for k in range(5)]
    gw = oracle_gateway((1.0,) * 5, seed=seed)
    clean = axis_decided_dataset(15, 5, np.random.default_rng(seed))
    trace = greedy_select(cands, clean, 4, gw)
    assert list(trace.objective_by_step) == sorted(trace.objective_by_step)


# -- cardinality sweep -------------------------------------------------------------------


def four_axis_store(gw):
    seeds = axis_decided_dataset(4, 4, np.random.default_rng(100), name="seed-pairs")
    return run_pipeline(seeds, PipelineConfig(), gw)


def test_pipeline_yields_one_rubric_per_axis():
    gw = oracle_gateway((1.0,) * 4)
    store = four_axis_store(gw)
    assert [r.text for r in store.verified] == [f"- [axis={k}] The output shows a high level of quality attribute {k}." for k in range(4)]


def test_cardinality_monotone_fixture():
    gw = oracle_gateway((1.0,) * 4, seed=1)
    store = four_axis_store(gw)
    ds = axis_decided_dataset(200, 4, np.random.default_rng(5))
    pts = cardinality_sweep(ds, store, [1, 2, 4, 4], gw)
    acc = [p.accuracy for p in pts]
    assert acc[2] == acc[3] == 1.0
    assert acc[2] - acc[0] >= 0.15
    assert acc == sorted(acc)
    assert len(pts[0].provenance) == 1 and len(pts[2].provenance) == 4


def test_sweep_needs_enough_rubrics():
    gw = oracle_gateway((1.0,) * 4)
    with pytest.raises(EvaluationError, match="needs 5"):
        cardinality_sweep(labeled_pairs(2), four_axis_store(gw), [5], gw)
