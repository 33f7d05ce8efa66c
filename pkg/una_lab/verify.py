"""Property suites run by ``una-lab verify``.

Each check returns one or more ``PropertyResult`` rows. Checks run on a thread
pool capped by ``UNA_LAB_THREADS``; results are merged in check order, so the
printed table does not depend on scheduling.
"""
import json
import logging
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
import torch

from . import oracle
from .losses import (
    DifferenceLoss, CompareAs, loss_dpo, loss_una_binary, loss_una_online, loss_una_pair, loss_una_score,
)
from .policy import ParametricPolicy, Prompt, TabularPolicy, Vocab
from .records import FeedbackRecord, Label
from .reward import Beta, ExplicitRewardModel, ScoreBounds, rm_loss
from .config import BETA_GRID
from .utils import make_rng

logger = logging.getLogger(__name__)

GRAD_TOL = 1e-4
EQUIV_VALUE_TOL = 1e-12
EQUIV_GRAD_TOL = 1e-10


@dataclass
class PropertyResult:
    name: str
    observed: float
    threshold: float
    passed: bool
    replay: Optional[dict] = field(default=None, repr=False)

    def row(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{self.name:<48} {self.observed:>12.4e} {self.threshold:>10.1e}  {status}"


def _at_most(name: str, observed: float, threshold: float, replay: Optional[dict] = None) -> PropertyResult:
    passed = math.isfinite(observed) and observed <= threshold
    return PropertyResult(name, observed, threshold, passed, None if passed else replay)


def _at_least(name: str, observed: float, threshold: float, replay: Optional[dict] = None) -> PropertyResult:
    passed = math.isfinite(observed) and observed >= threshold
    return PropertyResult(name, observed, threshold, passed, None if passed else replay)


# proofs

def check_log_sum(seed: int) -> List[PropertyResult]:
    stats = oracle.sweep_log_sum(seed)
    replay = {"sweep": "log_sum", "seed": seed, **stats}
    return [
        _at_least("log-sum inequality worst slack", stats["worst_slack"], -oracle.SLACK_TOL, replay),
        _at_most("log-sum equality iff proportional (errors)", stats["equality_errors"], 0, replay),
    ]


def check_jensen(seed: int) -> List[PropertyResult]:
    stats = oracle.sweep_jensen(seed + 2)
    return [_at_least("jensen x log x worst slack", stats["worst_slack"], -oracle.SLACK_TOL,
                      {"sweep": "jensen", "seed": seed + 2, **stats})]


def check_upper_bound(seed: int) -> List[PropertyResult]:
    stats = oracle.sweep_tilt_optimality(range(seed, seed + 50))
    replay = {"sweep": "tilt_optimality", "seeds": [seed, seed + 50], **stats}
    return [
        _at_least("objective <= objective at tilt (worst margin)", stats["worst_margin"], -1e-10, replay),
        _at_most("objective at tilt = beta E[log Z]", stats["worst_bound_error"], 1e-10, replay),
    ]


# oracle

def check_closed_form(seed: int) -> List[PropertyResult]:
    inst = oracle.TabularInstance(Vocab(2, 1), np.zeros((1, 2)), np.array([[1.0, 0.0]]), 1.0)
    probs = np.exp(oracle.optimal_log_probs(inst))[0]
    e = math.e
    err = max(abs(probs[0] - e / (e + 1)), abs(probs[1] - 1 / (e + 1)))
    value_err = abs(oracle.evaluate_objective(inst, oracle.optimal_policy_closed_form(inst))
                    - (math.log(e + 1) - math.log(2)))
    return [
        _at_most("two-response tilt probabilities", err, 1e-12, inst.to_json()),
        _at_most("two-response optimum value", value_err, 1e-12, inst.to_json()),
    ]


def check_shift_equivalence(seed: int) -> List[PropertyResult]:
    worst = oracle.sweep_shift_equivalence(range(seed, seed + 20))
    return [_at_most("tilt invariant to per-prompt reward shift", worst, 1e-12, {"seeds": [seed, seed + 20]})]


def check_grid_search(seed: int) -> List[PropertyResult]:
    worst = oracle.sweep_grid_search(range(seed, seed + 10))
    return [_at_most("grid maximizer matches closed form", worst, 1e-3, {"seeds": [seed, seed + 10]})]


def check_recovered_gap(seed: int) -> List[PropertyResult]:
    worst = oracle.sweep_recovered_gap(range(seed, seed + 10))
    return [_at_most("recovered reward constant at tilt", worst, 1e-9, {"seeds": [seed, seed + 10]})]


# losses

def _random_pair(seed: int, kind: str):
    if kind == "tabular":
        vocab = Vocab(4, 2)
        pi = TabularPolicy.random(vocab, 3, seed, scale=1.0)
        ref = TabularPolicy.random(vocab, 3, seed + 1000, scale=1.0, frozen=True)
    else:
        vocab = Vocab(4, 2)
        pi = ParametricPolicy.random(vocab, 3, seed, scale=0.5, hidden=3, bias=True)
        ref = ParametricPolicy.random(vocab, 3, seed + 1000, scale=0.5, hidden=3, bias=True, frozen=True)
    return pi, ref


def random_batches(pi, seed: int, n: int = 8) -> Dict[str, list]:
    rng = make_rng(seed, "batch")
    space = pi.space.responses

    def pick():
        return int(rng.integers(0, pi.n_prompts)), space[int(rng.integers(0, len(space)))]

    pairwise, binary, scalar, sampled = [], [], [], []
    while len(pairwise) < n:
        x, a = pick()
        b = space[int(rng.integers(0, len(space)))]
        if a != b:
            pairwise.append(FeedbackRecord.pairwise(x, a, b))
    for i in range(n):
        x, y = pick()
        binary.append(FeedbackRecord.binary(x, y, Label.desired if i % 2 == 0 else Label.undesired))
        x, y = pick()
        scalar.append(FeedbackRecord.scalar(x, y, float(rng.uniform(1.0, 5.0))))
        sampled.append((Prompt(pick()[0]), pick()[1]))
    return {"pairwise": pairwise, "binary": binary, "scalar": scalar, "sampled": sampled}


def gradient_cases(pi, ref, beta: Beta, batches: Dict[str, list]) -> Dict[str, Callable]:
    rm = ExplicitRewardModel.from_function(
        lambda p, y: float(np.sin(1.0 + p + 0.7 * sum(y.tokens))), pi.n_prompts, pi.vocab,
    )
    return {
        "dpo": lambda q: loss_dpo(q, ref, beta, batches["pairwise"]),
        "una_pair_shaped": lambda q: loss_una_pair(q, ref, beta, batches["pairwise"], shaped=True),
        "una_pair_unshaped": lambda q: loss_una_pair(q, ref, beta, batches["pairwise"], shaped=False),
        "una_binary_mse": lambda q: loss_una_binary(q, ref, beta, batches["binary"], DifferenceLoss.mse),
        "una_binary_bce": lambda q: loss_una_binary(q, ref, beta, batches["binary"], DifferenceLoss.bce),
        "una_score": lambda q: loss_una_score(q, ref, beta, batches["scalar"], ScoreBounds()),
        "una_online_score": lambda q: loss_una_online(q, ref, beta, rm, batches["sampled"], CompareAs.score_mse),
        "una_online_score_bce": lambda q: loss_una_online(q, ref, beta, rm, batches["sampled"], CompareAs.score_bce),
        "una_online_reward": lambda q: loss_una_online(q, ref, beta, rm, batches["sampled"], CompareAs.reward_mse),
        "una_online_reward_offset": lambda q: loss_una_online(
            q, ref, beta, rm, batches["sampled"], CompareAs.reward_mse, offset=0.25,
        ),
    }


def gradient_error(loss: Callable, pi) -> float:
    analytic = loss(pi).grad.numpy()
    numeric = oracle.finite_diff_grad(lambda p: loss(pi.with_params(torch.from_numpy(p))).value, pi.params)
    return oracle.relative_error(analytic, numeric)


def check_gradients(seed: int, n_seeds: int = 5) -> List[PropertyResult]:
    results = []
    beta = Beta(1.0)
    for kind in ("tabular", "parametric"):
        worst: Dict[str, float] = {}
        for s in range(seed, seed + n_seeds):
            pi, ref = _random_pair(s, kind)
            cases = gradient_cases(pi, ref, beta, random_batches(pi, s))
            for name, loss in cases.items():
                worst[name] = max(worst.get(name, 0.0), gradient_error(loss, pi))
        for name, err in worst.items():
            results.append(_at_most(f"grad {name} [{kind}]", err, GRAD_TOL,
                                    {"kind": kind, "loss": name, "seeds": [seed, seed + n_seeds]}))

    rm_worst = 0.0
    for s in range(seed, seed + n_seeds):
        vocab = Vocab(4, 2)
        rm = ExplicitRewardModel.trainable(3, vocab, make_rng(s, "rm").normal(0.0, 1.0, size=3 * vocab.size))
        batch = random_batches(TabularPolicy(vocab, 3), s)["pairwise"]
        analytic = rm_loss(rm, batch).grad.numpy()
        numeric = oracle.finite_diff_grad(lambda p: rm_loss(rm.with_params(torch.from_numpy(p)), batch).value, rm.params)
        rm_worst = max(rm_worst, oracle.relative_error(analytic, numeric))
    results.append(_at_most("grad rm_loss", rm_worst, GRAD_TOL, {"loss": "rm_loss", "seeds": [seed, seed + n_seeds]}))
    return results


def equivalence_trial(seed: int):
    rng = make_rng(seed, "equivalence")
    vocab = Vocab(4, 2)
    pi = TabularPolicy.random(vocab, 3, seed, scale=float(rng.uniform(0.1, 3.0)))
    ref = TabularPolicy.random(vocab, 3, seed + 5000, scale=float(rng.uniform(0.1, 3.0)), frozen=True)
    beta = Beta(float(BETA_GRID[int(rng.integers(0, len(BETA_GRID)))]))
    batch = random_batches(pi, seed, n=int(rng.integers(1, 17)))["pairwise"]
    a = loss_dpo(pi, ref, beta, batch)
    b = loss_una_pair(pi, ref, beta, batch, shaped=True)
    return abs(a.value - b.value), float((a.grad - b.grad).abs().max())


def check_equivalence(seed: int, n: int = 100) -> List[PropertyResult]:
    value_worst, grad_worst = 0.0, 0.0
    for s in range(seed, seed + n):
        dv, dg = equivalence_trial(s)
        value_worst, grad_worst = max(value_worst, dv), max(grad_worst, dg)
    replay = {"seeds": [seed, seed + n]}
    return [
        _at_most("dpo vs shaped una-pair |loss diff|", value_worst, EQUIV_VALUE_TOL, replay),
        _at_most("dpo vs shaped una-pair max |grad diff|", grad_worst, EQUIV_GRAD_TOL, replay),
    ]


SUITES: Dict[str, List[Callable[[int], List[PropertyResult]]]] = {
    "proofs": [check_log_sum, check_jensen, check_upper_bound],
    "oracle": [check_closed_form, check_shift_equivalence, check_grid_search, check_recovered_gap],
    "gradients": [check_gradients],
    "equivalence": [check_equivalence],
}
SUITES["all"] = SUITES["proofs"] + SUITES["oracle"] + SUITES["gradients"] + SUITES["equivalence"]


def thread_count() -> int:
    value = os.environ.get("UNA_LAB_THREADS")
    default = min(4, os.cpu_count() or 1)
    if value is None:
        return default
    try:
        n = int(value)
        if n < 1:
            raise ValueError
        return n
    except ValueError:
        warnings.warn(f"ignoring invalid UNA_LAB_THREADS={value!r}; using {default} threads")
        return default


def run_suite(suite: str, seed: int, threads: Optional[int] = None) -> List[PropertyResult]:
    checks = SUITES[suite]
    logger.info("suite %s: %d checks, seed %d", suite, len(checks), seed)
    with ThreadPoolExecutor(max_workers=threads or thread_count()) as pool:
        chunks = list(pool.map(lambda check: check(seed), checks))
    return [r for chunk in chunks for r in chunk]


def write_replays(results: List[PropertyResult], out_dir: str, suite: str, seed: int) -> List[str]:
    paths = []
    for i, r in enumerate(results):
        if r.passed:
            continue
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, f"replay-{suite}-{seed}-{i}.json")
        with open(path, "w") as f:
            json.dump({"property": r.name, "observed": r.observed, "threshold": r.threshold,
                       "case": r.replay}, f, indent=1, default=float)
        paths.append(path)
    return paths
