import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from una_lab import oracle
from una_lab.config import BETA_GRID
from una_lab.errors import DimensionMismatch, NonFiniteTilt, NonPositiveDenominator, NonPositiveInput, VocabMismatch
from una_lab.oracle import TabularInstance
from una_lab.policy import TabularPolicy, Vocab


@st.composite
def positive_pairs(draw, low=0.1, high=10.0):
    n = draw(st.integers(1, 8))
    values = st.floats(min_value=low, max_value=high)
    return (
        np.array(draw(st.lists(values, min_size=n, max_size=n))),
        np.array(draw(st.lists(values, min_size=n, max_size=n))),
    )


@given(positive_pairs())
def test_log_sum_inequality(pair):
    a, b = pair
    holds, slack, _ = oracle.check_log_sum_inequality(a, b)
    assert holds and slack >= -oracle.SLACK_TOL


@given(positive_pairs(), st.floats(0.1, 5.0))
def test_log_sum_equality_when_proportional(pair, c):
    _, b = pair
    _, slack, equal = oracle.check_log_sum_inequality(c * b, b)
    assert equal
    assert abs(slack) <= oracle.EQUALITY_SLACK


def test_log_sum_zero_numerators():
    holds, slack, _ = oracle.check_log_sum_inequality([0.0, 2.0], [1.0, 1.0])
    assert holds
    assert slack == pytest.approx(2 * math.log(2) - 2 * math.log(1.0), abs=1e-12)


def test_log_sum_errors():
    with pytest.raises(DimensionMismatch):
        oracle.check_log_sum_inequality([1.0, 2.0], [1.0])
    with pytest.raises(NonPositiveDenominator):
        oracle.check_log_sum_inequality([1.0, 2.0], [1.0, 0.0])
    with pytest.raises(NonPositiveInput):
        oracle.check_log_sum_inequality([-1.0, 2.0], [1.0, 1.0])


def test_jensen_two_points():
    holds, slack = oracle.check_jensen([1.0, 1.0], [1.0, math.e])
    mean = (1.0 + math.e) / 2.0
    assert holds
    assert slack == pytest.approx(math.e / 2.0 - mean * math.log(mean), abs=1e-12)
    assert slack == pytest.approx(0.2062, abs=1e-3)


@given(positive_pairs())
def test_jensen_holds(pair):
    w, x = pair
    holds, slack = oracle.check_jensen(w, x)
    assert holds


def test_two_response_closed_form():
    inst = TabularInstance(Vocab(2, 1), np.zeros((1, 2)), np.array([[1.0, 0.0]]), 1.0)
    probs = np.exp(oracle.optimal_log_probs(inst))[0]
    assert probs[0] == pytest.approx(math.e / (math.e + 1.0), abs=1e-12)
    assert probs[1] == pytest.approx(1.0 / (math.e + 1.0), abs=1e-12)
    best = oracle.evaluate_objective(inst, oracle.optimal_policy_closed_form(inst))
    assert best == pytest.approx(math.log(math.e + 1.0) - math.log(2.0), abs=1e-12)
    assert oracle.upper_bound(inst) == pytest.approx(best, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), beta=st.sampled_from([0.1, 0.5, 1.0, 3.0]), scale=st.floats(0.0, 3.0))
def test_no_policy_beats_the_tilt(seed, beta, scale):
    inst = TabularInstance.random(seed, n_prompts=3, n_responses=6, beta=beta)
    other = TabularPolicy.random(inst.vocab, 3, seed + 1, scale=scale)
    assert oracle.evaluate_objective(inst, other) <= oracle.upper_bound(inst) + 1e-10


def test_tilt_reaches_upper_bound():
    stats = oracle.sweep_tilt_optimality(range(5), n_policies=50)
    assert stats["worst_margin"] >= -1e-10
    assert stats["worst_bound_error"] <= 1e-10
    assert stats["betas"] == list(BETA_GRID)
    single = oracle.sweep_tilt_optimality(range(5), n_policies=50, betas=[3.0])
    assert single["worst_margin"] >= stats["worst_margin"]


def test_shift_equivalence():
    assert oracle.sweep_shift_equivalence(range(10)) <= 1e-12


def test_grid_search_matches_closed_form():
    assert oracle.sweep_grid_search(range(5)) <= 1e-3


def test_recovered_gap_at_tilt():
    inst = TabularInstance.random(4, n_prompts=4, n_responses=16, beta=0.1)
    report = oracle.recovered_reward_gap(inst, oracle.optimal_policy_closed_form(inst))
    assert report.max_deviation.max() <= 1e-9
    assert np.allclose(report.means, inst.beta * report.log_partition, atol=1e-9)
    assert np.allclose(report.lambda_estimate, report.partition, rtol=1e-8)


def test_recovered_gap_varies_away_from_tilt():
    inst = TabularInstance.random(4, n_prompts=2, n_responses=4, beta=1.0)
    report = oracle.recovered_reward_gap(inst, inst.ref.clone())
    assert report.max_deviation.max() > 1e-3


def test_tilt_overflow():
    inst = TabularInstance(Vocab(2, 1), np.zeros((1, 2)), np.array([[1.0, 0.0]]), 1e-310)
    with pytest.raises(NonFiniteTilt):
        oracle.optimal_log_probs(inst)


def test_objective_needs_matching_policy():
    inst = TabularInstance.random(0, n_prompts=2, n_responses=4)
    with pytest.raises(VocabMismatch):
        oracle.evaluate_objective(inst, TabularPolicy.uniform(Vocab(5, 1), 2))


def test_instance_json(tmp_path):
    inst = TabularInstance.random(7, n_prompts=2, n_responses=4, beta=0.3)
    path = str(tmp_path / "instance.json")
    inst.save(path)
    back = TabularInstance.load(path)
    assert back.vocab == inst.vocab and back.beta == inst.beta
    assert np.array_equal(back.rewards, inst.rewards)
    assert np.array_equal(back.ref_logits, inst.ref_logits)


def test_finite_differences():
    p = np.array([0.3, -1.2, 2.0])
    grad = oracle.finite_diff_grad(lambda q: float(np.sum(q ** 2) + q[0] * q[1]), p)
    assert np.allclose(grad, [2 * 0.3 - 1.2, 2 * -1.2 + 0.3, 4.0], atol=1e-8)
    assert oracle.relative_error(grad, grad) == 0.0
