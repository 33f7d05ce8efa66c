import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from una_lab import oracle
from una_lab.config import LossKind, PGEstimator
from una_lab.errors import FrozenPolicy, KindMismatch, NonFrozenReference, NonTrainableModel
from una_lab.losses import CompareAs
from una_lab.policy import Prompt, TabularPolicy, Vocab
from una_lab.records import FeedbackRecord
from una_lab.reward import ExplicitRewardModel
from una_lab.synthetic import (
    binary_feedback, prefer_token_reward, realizable_reward, realizable_scores, separable_pairwise,
    separable_preferences, swap_labels,
)
from una_lab.trainer import (
    CSV_HEADER, Minibatches, cap_gradient, gradient_estimate_variance, train_offline, train_online_una,
    train_policy_gradient_baseline, train_reward_model,
)

from conftest import make_config


def _strictly_increasing(values):
    return all(b > a for a, b in zip(values, values[1:]))


def test_minibatches_cover_each_epoch():
    batches = Minibatches(10, 3, seed=4)
    seen = []
    for _ in range(4):
        idx = batches.next().tolist()
        assert idx == sorted(idx)
        seen.extend(idx)
    assert sorted(seen) == list(range(10))
    assert Minibatches(5, 8, seed=0).next().tolist() == [0, 1, 2, 3, 4]


def test_cap_gradient():
    g = torch.tensor([3.0, 4.0], dtype=torch.float64)
    assert torch.allclose(cap_gradient(g, 1.0), torch.tensor([0.6, 0.8], dtype=torch.float64))
    assert torch.equal(cap_gradient(g, 10.0), g)
    assert torch.equal(cap_gradient(g, None), g)


def test_gradient_estimate_variance():
    g = torch.ones(3, dtype=torch.float64)
    assert gradient_estimate_variance([g, g, g]) == 0.0
    assert gradient_estimate_variance([g, -g]) == pytest.approx(6.0)


@pytest.mark.parametrize("seed", range(10))
def test_exact_objective_ascent_recovers_tilt(seed):
    beta = 0.1 if seed % 2 == 0 else 1.0
    inst = oracle.TabularInstance.random(seed, n_prompts=4, n_responses=16, beta=beta, reward_scale=beta)
    cfg = make_config(
        loss_kind=LossKind.pg_baseline, pg_estimator=PGEstimator.exact, beta=beta,
        step_size=3.0 / beta, steps=5000, eval_every=5000,
    )
    report = train_policy_gradient_baseline(inst.ref.clone(), inst.ref, cfg, inst.prompts, inst.reward_table)
    trained = report.policy.log_prob_table().numpy()
    assert oracle.total_variation(trained, oracle.optimal_log_probs(inst)).max() <= 1e-3
    assert oracle.recovered_reward_gap(inst, report.policy).max_deviation.max() <= 1e-3
    assert report.final.objective == pytest.approx(oracle.upper_bound(inst), abs=1e-6)


def test_dpo_separates_pairs(vocab, uniform_ref):
    cfg = make_config(loss_kind=LossKind.dpo, beta=0.1, step_size=5.0, steps=2000)
    report = train_offline(uniform_ref.clone(), uniform_ref, cfg, separable_pairwise())
    assert report.records[0].margin == 0.0
    assert report.final.margin > 2.0
    assert report.final.loss < report.records[0].loss


def test_dpo_rewards_move_monotonically(vocab):
    ref = TabularPolicy.uniform(vocab, 1, frozen=True)
    data = [FeedbackRecord.pairwise(0, [1], [2])]
    cfg = make_config(loss_kind=LossKind.dpo, beta=0.1, step_size=0.5, steps=500, eval_every=50)
    report = train_offline(ref.clone(), ref, cfg, data)
    assert len(report.records) == 11
    assert _strictly_increasing(report.column("mean_r_theta_w"))
    assert _strictly_increasing([-v for v in report.column("mean_r_theta_l")])


def test_all_desired_binary_raises_scores(uniform_ref):
    cfg = make_config(loss_kind=LossKind.una_binary_mse, beta=0.1, step_size=1.0, steps=200, eval_every=20)
    report = train_offline(uniform_ref.clone(), uniform_ref, cfg, binary_feedback(all_desired=True))
    assert _strictly_increasing(report.column("mean_s_theta_w"))
    assert all(math.isnan(v) for v in report.column("mean_s_theta_l"))


@pytest.mark.parametrize("loss_kind", [LossKind.una_binary_mse, LossKind.una_binary_bce])
def test_binary_feedback_separates_scores(uniform_ref, loss_kind):
    data = binary_feedback()
    cfg = make_config(loss_kind=loss_kind, beta=3.0, step_size=1.0, steps=2000)
    final = train_offline(uniform_ref.clone(), uniform_ref, cfg, data).final
    assert final.mean_s_theta_w > 0.9
    assert final.mean_s_theta_l < 0.1

    for beta in (0.01, 0.03):
        final = train_offline(uniform_ref.clone(), uniform_ref, replace(cfg, beta=beta), data).final
        assert final.mean_s_theta_w > 0.5 > final.mean_s_theta_l


def test_score_distillation_reaches_zero_loss():
    records, ref, target = realizable_scores(beta=1.0)
    cfg = make_config(loss_kind=LossKind.una_score, beta=1.0, step_size=10.0, steps=2000)
    report = train_offline(ref.clone(), ref, cfg, records)
    assert report.final.loss < 1e-6


def test_offline_tracks_explicit_reward(uniform_ref):
    rm = ExplicitRewardModel.from_function(lambda p, y: float(y.content == (1,)), 4, uniform_ref.vocab)
    data = [FeedbackRecord.pairwise(p, [1], [2]) for p in range(4)]
    cfg = make_config(loss_kind=LossKind.una_pair_shaped, beta=0.1, step_size=5.0, steps=200)
    report = train_offline(uniform_ref.clone(), uniform_ref, cfg, data, rm)
    assert report.records[0].mean_explicit_reward == pytest.approx(0.25)
    assert report.final.mean_explicit_reward > 0.25
    assert report.final.objective == pytest.approx(report.final.mean_explicit_reward - 0.1 * report.final.kl)


def test_offline_kind_checks(uniform_ref):
    cfg = make_config(loss_kind=LossKind.una_score, steps=1)
    with pytest.raises(KindMismatch, match="kind mismatch"):
        train_offline(uniform_ref.clone(), uniform_ref, cfg, separable_pairwise())
    with pytest.raises(KindMismatch):
        train_offline(uniform_ref.clone(), uniform_ref, replace(cfg, loss_kind=LossKind.pg_baseline), [])
    cfg = replace(cfg, loss_kind=LossKind.dpo)
    with pytest.raises(FrozenPolicy):
        train_offline(uniform_ref, uniform_ref, cfg, separable_pairwise())
    with pytest.raises(NonFrozenReference):
        train_offline(uniform_ref.clone(), uniform_ref.clone(), cfg, separable_pairwise())


def test_zero_step_size_keeps_policy(uniform_ref):
    cfg = make_config(loss_kind=LossKind.dpo, step_size=0.0, steps=5, eval_every=1)
    report = train_offline(uniform_ref.clone(), uniform_ref, cfg, separable_pairwise())
    assert torch.equal(report.policy.params, uniform_ref.params)
    assert report.column("kl") == [0.0] * 6


def test_offline_runs_are_reproducible(tmp_path, uniform_ref):
    cfg = make_config(loss_kind=LossKind.dpo, beta=0.1, step_size=1.0, steps=100, batch_size=2, eval_every=10)
    paths = []
    for name in ("a.csv", "b.csv"):
        report = train_offline(uniform_ref.clone(), uniform_ref, cfg, separable_pairwise())
        report.write_csv(str(tmp_path / name))
        paths.append(tmp_path / name)
    assert paths[0].read_bytes() == paths[1].read_bytes()
    assert paths[0].read_text().splitlines()[0] == ",".join(CSV_HEADER)


def test_constant_reward_keeps_reference():
    vocab = Vocab(4, 1)
    ref = TabularPolicy.random(vocab, 2, seed=1, scale=0.5, frozen=True)
    rm = ExplicitRewardModel.from_function(lambda p, y: 1.0, 2, vocab)
    cfg = make_config(
        loss_kind=LossKind.una_online_reward, compare_as=CompareAs.reward_mse,
        beta=0.3, step_size=0.2, steps=3000, batch_size=256, eval_every=1000,
    )
    pi0 = TabularPolicy.random(vocab, 2, seed=3, scale=0.5)
    report = train_online_una(pi0, ref, cfg, [Prompt(0), Prompt(1)], rm)
    assert report.records[0].kl > 0.01
    assert report.final.kl < 1e-3


def test_online_reward_matching_reaches_tilt():
    ref, rm, target = realizable_reward(beta=1.0)
    cfg = make_config(
        loss_kind=LossKind.una_online_reward, compare_as=CompareAs.reward_mse,
        beta=1.0, step_size=0.1, steps=500, batch_size=64,
    )
    report = train_online_una(ref.clone(), ref, cfg, [Prompt(0), Prompt(1)], rm)
    tv = oracle.total_variation(report.policy.log_prob_table().numpy(), target.log_prob_table().numpy())
    assert tv.max() < 0.01
    assert report.final.loss < 1e-4 < report.records[0].loss


def test_online_gap_window_means_decrease():
    ref, rm, _ = realizable_reward(beta=1.0)
    cfg = make_config(
        loss_kind=LossKind.una_online_reward, compare_as=CompareAs.reward_mse,
        beta=1.0, step_size=0.1, steps=999, batch_size=64, eval_every=1,
    )
    report = train_online_una(ref.clone(), ref, cfg, [Prompt(0), Prompt(1)], rm)
    losses = np.array([r.loss for r in report.records])
    assert len(losses) == 1000
    windows = losses.reshape(-1, 50).mean(axis=1)
    assert np.all(windows[1:] <= windows[:-1] * 1.02 + 1e-12)
    assert windows[-1] < 0.01 * windows[0]


def test_offset_tracks_reward_gap():
    vocab = Vocab(4, 1)
    ref = TabularPolicy.uniform(vocab, 2, frozen=True)
    rm = ExplicitRewardModel.from_function(lambda p, y: 1.0, 2, vocab)
    cfg = make_config(
        loss_kind=LossKind.una_online_reward, compare_as=CompareAs.reward_mse, offset_ema=0.9,
        beta=0.3, step_size=0.2, steps=500, batch_size=128,
    )
    report = train_online_una(ref.clone(), ref, cfg, [Prompt(0), Prompt(1)], rm)
    assert report.offset == pytest.approx(1.0, abs=0.05)
    assert report.final.loss < 0.01


def _prefer_token_setup():
    vocab = Vocab(5, 2)
    ref = TabularPolicy.random(vocab, 4, seed=11, scale=0.3, frozen=True)
    rm = prefer_token_reward()
    inst = oracle.TabularInstance(vocab, ref.params.view(4, -1).numpy(), rm.reward_matrix(4, vocab).numpy(), 0.3)
    return ref, rm, inst, [Prompt(i) for i in range(4)]


def test_online_una_against_policy_gradient(tmp_path):
    ref, rm, inst, prompts = _prefer_token_setup()
    common = dict(beta=0.3, steps=3000, batch_size=256, eval_every=500, variance_seeds=32, seed=0)
    una = train_online_una(ref.clone(), ref, make_config(
        loss_kind=LossKind.una_online_reward, compare_as=CompareAs.reward_mse, offset_ema=0.9,
        step_size=20.0, **common,
    ), prompts, rm)
    pg = train_policy_gradient_baseline(ref.clone(), ref, make_config(
        loss_kind=LossKind.pg_baseline, pg_estimator=PGEstimator.sampled, step_size=2.0, **common,
    ), prompts, rm)

    tilt = oracle.optimal_log_probs(inst)
    assert oracle.total_variation(una.policy.log_prob_table().numpy(), tilt).max() < 0.05
    assert pg.final.objective == pytest.approx(oracle.upper_bound(inst), abs=0.05)
    assert una.grad_variance < pg.grad_variance

    una.write_csv(str(tmp_path / "una.csv"))
    pg.write_csv(str(tmp_path / "pg.csv"))
    una_rows = (tmp_path / "una.csv").read_text().splitlines()
    pg_rows = (tmp_path / "pg.csv").read_text().splitlines()
    assert una_rows[0] == pg_rows[0]
    assert [r.split(",")[0] for r in una_rows] == [r.split(",")[0] for r in pg_rows]


def test_online_score_matching_raises_reward():
    ref, rm, _, prompts = _prefer_token_setup()
    cfg = make_config(
        loss_kind=LossKind.una_online_score, compare_as=CompareAs.score_mse,
        beta=0.3, step_size=20.0, steps=2000, batch_size=256, eval_every=500,
    )
    report = train_online_una(ref.clone(), ref, cfg, prompts, rm)
    assert report.final.mean_explicit_reward > report.records[0].mean_explicit_reward + 0.2


def test_online_compare_follows_loss_kind():
    vocab = Vocab(4, 1)
    ref = TabularPolicy.uniform(vocab, 1, frozen=True)
    rm = ExplicitRewardModel.from_function(lambda p, y: 0.0, 1, vocab)
    cfg = make_config(loss_kind=LossKind.una_online_reward, compare_as=CompareAs.score_mse, steps=1)
    with pytest.warns(UserWarning):
        train_online_una(ref.clone(), ref, cfg, [Prompt(0)], rm)
    with pytest.raises(KindMismatch):
        train_online_una(ref.clone(), ref, replace(cfg, loss_kind=LossKind.dpo), [Prompt(0)], rm)
    with pytest.raises(KindMismatch):
        train_policy_gradient_baseline(ref.clone(), ref, cfg, [Prompt(0)], rm)
    with pytest.raises(KindMismatch):
        train_online_una(ref.clone(), ref, replace(cfg, loss_kind=LossKind.pg_baseline), [Prompt(0)], rm)


def test_reward_model_learns_separable_preferences():
    records, _ = separable_preferences(768, seed=7)
    train, held_out = records[:512], records[512:]
    vocab = Vocab(8, 3)
    cfg = make_config(loss_kind=LossKind.rm_bt, step_size=1.0, steps=3000, batch_size=512, eval_every=500)
    rm, report = train_reward_model(ExplicitRewardModel.trainable(4, vocab), cfg, train)
    assert report.final.accuracy >= 0.95
    assert math.isnan(report.final.kl)

    margins = [float(rm.reward(r.x, r.y_w) - rm.reward(r.x, r.y_l)) for r in held_out]
    assert np.mean(np.array(margins) > 0) >= 0.9

    swapped, _ = train_reward_model(ExplicitRewardModel.trainable(4, vocab), cfg, swap_labels(train))
    assert torch.allclose(swapped.params, -rm.params, atol=1e-6)
    swapped_margins = [float(swapped.reward(r.x, r.y_w) - swapped.reward(r.x, r.y_l)) for r in held_out]
    assert np.allclose(swapped_margins, -np.array(margins), atol=1e-6)


def test_reward_model_checks(vocab):
    cfg = make_config(loss_kind=LossKind.rm_bt, steps=1)
    table = ExplicitRewardModel.from_function(lambda p, y: 0.0, 1, vocab)
    with pytest.raises(NonTrainableModel):
        train_reward_model(table, cfg, separable_pairwise(n_prompts=1))
    with pytest.raises(KindMismatch):
        train_reward_model(ExplicitRewardModel.trainable(4, vocab), cfg, binary_feedback())
