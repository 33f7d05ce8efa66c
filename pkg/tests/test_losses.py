import math

import pytest
import torch
from hypothesis import given, settings, strategies as st

from una_lab.config import BETA_GRID
from una_lab.errors import EmptyBatch, NonFrozenReference, WrongFeedbackKind
from una_lab.losses import (
    CompareAs, DifferenceLoss, loss_dpo, loss_una_binary, loss_una_online, loss_una_pair, loss_una_score,
)
from una_lab.policy import Prompt, Response, TabularPolicy, Vocab, apply_gradient
from una_lab.records import FeedbackRecord, Label
from una_lab.reward import ExplicitRewardModel, sigmoid
from una_lab.verify import _random_pair, equivalence_trial, gradient_cases, gradient_error, random_batches

PAIRS = [
    FeedbackRecord.pairwise(0, [1], [2]),
    FeedbackRecord.pairwise(1, [3], []),
    FeedbackRecord.pairwise(1, [2], [1]),
]


@pytest.fixture
def policies():
    vocab = Vocab(4, 1)
    ref = TabularPolicy.uniform(vocab, 2, frozen=True)
    return ref.clone(), ref


def test_pairwise_losses_at_reference(policies):
    pi, ref = policies
    assert loss_dpo(pi, ref, 0.1, PAIRS).value == pytest.approx(math.log(2.0), rel=1e-12)
    assert loss_una_pair(pi, ref, 0.1, PAIRS).value == pytest.approx(math.log(2.0), rel=1e-12)
    assert loss_una_pair(pi, ref, 0.1, PAIRS, shaped=False).value == 0.0


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 100_000))
def test_dpo_matches_shaped_pair(seed):
    value_gap, grad_gap = equivalence_trial(seed)
    assert value_gap <= 1e-12
    assert grad_gap <= 1e-10


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 1000), beta=st.sampled_from(BETA_GRID))
def test_unshaped_pair_is_negative_margin(seed, beta):
    vocab = Vocab(4, 1)
    pi = TabularPolicy.random(vocab, 2, seed)
    ref = TabularPolicy.random(vocab, 2, seed + 1, frozen=True)
    result = loss_una_pair(pi, ref, beta, PAIRS, shaped=False)
    r = beta * (pi.log_prob_table() - ref.log_prob_table())
    margins = [r[x.x.id, pi.response_index(x.y_w)] - r[x.x.id, pi.response_index(x.y_l)] for x in PAIRS]
    assert result.value == pytest.approx(-sum(m.item() for m in margins) / 3, rel=1e-12, abs=1e-15)


@pytest.mark.parametrize("kind", ["tabular", "parametric"])
@pytest.mark.parametrize("loss", [
    "dpo", "una_pair_shaped", "una_pair_unshaped", "una_binary_mse", "una_binary_bce", "una_score",
    "una_online_score", "una_online_score_bce", "una_online_reward", "una_online_reward_offset",
])
def test_gradients_match_finite_differences(kind, loss):
    for seed in (0, 1):
        pi, ref = _random_pair(seed, kind)
        case = gradient_cases(pi, ref, 1.0, random_batches(pi, seed))[loss]
        assert gradient_error(case, pi) < 1e-4


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(2, 12), data=st.data())
def test_losses_are_batch_means(seed, n, data):
    pi, ref = _random_pair(seed, "parametric" if seed % 2 else "tabular")
    whole = random_batches(pi, seed, n)
    k = data.draw(st.integers(1, n - 1))
    head = {name: batch[:k] for name, batch in whole.items()}
    tail = {name: batch[k:] for name, batch in whole.items()}
    cases = [gradient_cases(pi, ref, 0.5, b) for b in (whole, head, tail)]
    for name, loss in cases[0].items():
        full, a, b = loss(pi), cases[1][name](pi), cases[2][name](pi)
        assert full.value == pytest.approx((k * a.value + (n - k) * b.value) / n, rel=0, abs=1e-9)
        assert torch.allclose(full.grad, (k * a.grad + (n - k) * b.grad) / n, rtol=0, atol=1e-9)


def test_binary_losses_at_reference(policies):
    pi, ref = policies
    batch = [FeedbackRecord.binary(0, [1], Label.desired), FeedbackRecord.binary(1, [2], Label.undesired)]
    assert loss_una_binary(pi, ref, 0.1, batch, DifferenceLoss.mse).value == pytest.approx(0.25)
    assert loss_una_binary(pi, ref, 0.1, batch, DifferenceLoss.bce).value == pytest.approx(math.log(2.0))


def test_binary_bce_saturated_scores_stay_finite():
    vocab = Vocab(4, 1)
    ref = TabularPolicy.uniform(vocab, 1, frozen=True)
    pi = TabularPolicy.from_logits(vocab, [[-400.0, 0.0, 0.0, 400.0]])
    batch = [FeedbackRecord.binary(0, [], Label.desired), FeedbackRecord.binary(0, [3], Label.undesired)]
    result = loss_una_binary(pi, ref, 3.0, batch, DifferenceLoss.bce)
    assert math.isfinite(result.value)
    assert torch.isfinite(result.grad).all()


def test_score_loss(policies):
    pi, ref = policies
    assert loss_una_score(pi, ref, 0.1, [FeedbackRecord.scalar(0, [1], 3.0)]).value == 0.0
    assert loss_una_score(pi, ref, 0.1, [FeedbackRecord.scalar(0, [1], 5.0)]).value == pytest.approx(0.25)


def test_online_comparisons(policies):
    pi, ref = policies
    rm = ExplicitRewardModel.from_function(lambda p, y: 1.0, 2, pi.vocab)
    sampled = [(Prompt(0), Response.of([1])), (Prompt(1), Response.of([]))]
    reward = loss_una_online(pi, ref, 0.1, rm, sampled, CompareAs.reward_mse)
    assert reward.value == pytest.approx(1.0)
    score = loss_una_online(pi, ref, 0.1, rm, sampled, CompareAs.score_mse)
    s_phi = sigmoid(torch.tensor(1.0, dtype=torch.float64)).item()
    assert score.value == pytest.approx((0.5 - s_phi) ** 2)
    shifted = loss_una_online(pi, ref, 0.1, rm, sampled, CompareAs.reward_mse, offset=1.0)
    assert shifted.value == pytest.approx(0.0, abs=1e-15)
    bce = loss_una_online(pi, ref, 0.1, rm, sampled, CompareAs.score_bce)
    assert bce.value == pytest.approx(math.log(2.0))


def test_descent_step_lowers_dpo_loss():
    pi, ref = _random_pair(4, "tabular")
    batch = random_batches(pi, 4)["pairwise"]
    before = loss_dpo(pi, ref, 0.5, batch)
    after = loss_dpo(apply_gradient(pi, before.grad, 0.05), ref, 0.5, batch)
    assert after.value < before.value


def test_loss_errors(policies):
    pi, ref = policies
    with pytest.raises(EmptyBatch):
        loss_dpo(pi, ref, 0.1, [])
    with pytest.raises(WrongFeedbackKind):
        loss_una_score(pi, ref, 0.1, PAIRS)
    with pytest.raises(WrongFeedbackKind):
        loss_una_binary(pi, ref, 0.1, [FeedbackRecord.scalar(0, [1], 2.0)])
    with pytest.raises(NonFrozenReference):
        loss_una_pair(pi, pi, 0.1, PAIRS)
