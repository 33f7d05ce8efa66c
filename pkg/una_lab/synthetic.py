"""Seeded synthetic feedback instances."""
from typing import List, Tuple

import numpy as np
import torch

from .policy import Policy, ResponseSpace, TabularPolicy, Vocab
from .records import FeedbackRecord, Label
from .reward import ExplicitRewardModel, ScoreBounds
from .utils import make_rng


def _distinct_pair(rng: np.random.Generator, n: int) -> Tuple[int, int]:
    a, b = rng.choice(n, size=2, replace=False)
    return int(a), int(b)


def separable_pairwise(seed: int = 3, n_prompts: int = 4, vocab: Vocab = Vocab(4, 1)) -> List[FeedbackRecord]:
    """One (chosen, rejected) pair of distinct responses per prompt ("separable-4")."""
    rng = make_rng(seed, "separable-pairwise")
    space = ResponseSpace.enumerate(vocab)
    records = []
    for p in range(n_prompts):
        w, l = _distinct_pair(rng, len(space))
        records.append(FeedbackRecord.pairwise(p, space.responses[w], space.responses[l]))
    return records


def binary_feedback(
    seed: int = 5, n_prompts: int = 4, vocab: Vocab = Vocab(4, 1), all_desired: bool = False,
) -> List[FeedbackRecord]:
    """Per prompt a desired and an undesired response, or only the desired one."""
    rng = make_rng(seed, "binary")
    space = ResponseSpace.enumerate(vocab)
    records = []
    for p in range(n_prompts):
        d, u = _distinct_pair(rng, len(space))
        records.append(FeedbackRecord.binary(p, space.responses[d], Label.desired))
        if not all_desired:
            records.append(FeedbackRecord.binary(p, space.responses[u], Label.undesired))
    return records


def realizable_scores(
    seed: int = 13,
    n_prompts: int = 4,
    vocab: Vocab = Vocab(4, 1),
    beta: float = 1.0,
    bounds: ScoreBounds = ScoreBounds(),
    spread: float = 0.5,
    ref: Policy = None,
) -> Tuple[List[FeedbackRecord], Policy, Policy]:
    """Scores of every (prompt, response) pair under a target policy near ``ref``.

    The raw score of (x, y) is the affine image of sigmoid(beta * log(target / ref)),
    so the scalar loss reaches zero exactly at the target. Returns (records, ref, target).
    """
    rng = make_rng(seed, "scores")
    space = ResponseSpace.enumerate(vocab)
    if ref is None:
        ref = TabularPolicy.random(vocab, n_prompts, seed, scale=0.5, frozen=True)
    ref_logits = ref.log_prob_table().numpy()
    target_logits = ref_logits + rng.uniform(-spread, spread, size=ref_logits.shape)
    target = TabularPolicy.from_logits(vocab, target_logits)
    ratio = (target.log_prob_table() - ref.log_prob_table()).numpy()
    s = 1.0 / (1.0 + np.exp(-beta * ratio))
    raw = bounds.min_raw + s * (bounds.max_raw - bounds.min_raw)
    records = [
        FeedbackRecord.scalar(p, y, float(raw[p, i]))
        for p in range(n_prompts) for i, y in enumerate(space.responses)
    ]
    return records, ref, target


def prefer_token_reward(n_prompts: int = 4, vocab: Vocab = Vocab(5, 2), token: int = 3) -> ExplicitRewardModel:
    """Reward 1 for responses containing ``token``, else 0."""
    return ExplicitRewardModel.from_function(
        lambda p, y: 1.0 if token in y.content else 0.0, n_prompts, vocab,
    )


def realizable_reward(
    seed: int = 21, n_prompts: int = 2, vocab: Vocab = Vocab(4, 1), beta: float = 1.0, spread: float = 0.5,
) -> Tuple[Policy, ExplicitRewardModel, Policy]:
    """Reference and reward with r = beta * log(target / ref), so that log Z(x) = 0.

    Returns (ref, rm, target).
    """
    ref = TabularPolicy.random(vocab, n_prompts, seed, scale=0.5, frozen=True)
    rng = make_rng(seed, "realizable-reward")
    target_logits = ref.log_prob_table().numpy() + rng.normal(0.0, spread, size=(n_prompts, ref.n_responses))
    target = TabularPolicy.from_logits(vocab, target_logits)
    rewards = beta * (target.log_prob_table() - ref.log_prob_table()).numpy()
    return ref, ExplicitRewardModel.from_matrix(rewards, vocab), target


def separable_preferences(
    n_pairs: int = 512,
    seed: int = 7,
    n_prompts: int = 4,
    vocab: Vocab = Vocab(8, 3),
    margin: float = 1.0,
) -> Tuple[List[FeedbackRecord], torch.Tensor]:
    """Pairs ordered by a hidden linear reward over prompt-by-token-count features.

    Pairs whose hidden margin is below ``margin`` are discarded, so the set is
    linearly separable with room to spare. Returns (records, hidden weights).
    """
    rng = make_rng(seed, "preferences")
    space = ResponseSpace.enumerate(vocab)
    weights = rng.normal(0.0, 1.0, size=(n_prompts, vocab.size))
    counts = np.zeros((len(space), vocab.size))
    for i, y in enumerate(space.responses):
        for t in y.tokens:
            counts[i, t] += 1.0
    records = []
    while len(records) < n_pairs:
        p = int(rng.integers(0, n_prompts))
        a, b = _distinct_pair(rng, len(space))
        m = float((counts[a] - counts[b]) @ weights[p])
        if abs(m) < margin:
            continue
        w, l = (a, b) if m > 0 else (b, a)
        records.append(FeedbackRecord.pairwise(p, space.responses[w], space.responses[l]))
    return records, torch.from_numpy(weights.reshape(-1))


def swap_labels(records: List[FeedbackRecord]) -> List[FeedbackRecord]:
    return [FeedbackRecord.pairwise(r.x, r.y_l, r.y_w) for r in records]


INSTANCES = ("separable-4", "binary", "scalar", "prefer-token-3", "bt-separable")
