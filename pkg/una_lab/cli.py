import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from typing import Dict, List, Optional, Sequence

from .config import BETA_GRID, ONLINE_KINDS, Convert, LossKind, TrainConfig, load_config, to_dict, to_dotlist
from .data import Dataset, dump_records, ingest, read_bytes
from .errors import ConfigError, MissingArtifact, ParseError, SchemaError, UnaError
from .policy import Prompt, TabularPolicy, Vocab, build_policy, save_checkpoint
from .records import binarize, scalarize
from .reward import ExplicitRewardModel, ScoreBounds
from .synthetic import (
    INSTANCES, binary_feedback, prefer_token_reward, realizable_scores, separable_pairwise, separable_preferences,
)
from .trainer import CSV_HEADER, ONLINE_TRAINERS, train_offline, train_reward_model
from .utils import blob_hash
from .verify import SUITES, run_suite, write_replays

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
METRICS = "metrics.csv"
CHECKPOINT = "policy.bin"
REWARD_MODEL = "reward_model.json"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    config: dict
    dataset_hash: Optional[str]
    data_blob: Optional[str]
    seed: int
    started_at: str
    finished_at: Optional[str] = None
    artifacts: Dict[str, str] = field(default_factory=dict)

    def write(self, out_dir: str):
        with open(os.path.join(out_dir, MANIFEST), "w") as f:
            json.dump(asdict(self), f, indent=1, sort_keys=True)

    def finalize(self, out_dir: str):
        for name, path in self.artifacts.items():
            if not os.path.exists(os.path.join(out_dir, path)):
                raise MissingArtifact(f"artifact {name} ({path}) was not written")
        self.finished_at = _now()
        self.write(out_dir)


def _guard(fn, *args, **kwargs) -> int:
    try:
        return fn(*args, **kwargs)
    except UnaError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


def _infer_prompts(cfg: TrainConfig, dataset: Optional[Dataset], rm: Optional[ExplicitRewardModel]) -> int:
    if cfg.n_prompts > 0:
        return cfg.n_prompts
    if dataset is not None:
        return max(dataset.prompt_ids) + 1
    if rm is not None and rm.kind == "table" and rm.table:
        return max(p for p, _ in rm.table) + 1
    raise ConfigError("n_prompts is 0 and cannot be inferred without data or a reward table")


def run_training(cfg: TrainConfig, data_path: Optional[str], out_dir: str) -> int:
    kind = LossKind(cfg.loss_kind)
    bounds = ScoreBounds(cfg.min_raw, cfg.max_raw)
    dataset = ingest(data_path, bounds) if data_path else None
    if dataset is None and kind not in ONLINE_KINDS:
        raise ConfigError(f"loss_kind {kind.value} needs --data")
    records = list(dataset.records) if dataset is not None else []
    if Convert(cfg.convert) == Convert.binarize:
        records = binarize(records)
    elif Convert(cfg.convert) == Convert.scalarize:
        records = scalarize(records)

    rm = None
    if cfg.reward_path is not None:
        if not os.path.isfile(cfg.reward_path):
            raise MissingArtifact(f"reward table {cfg.reward_path} not found")
        rm = ExplicitRewardModel.load_json(cfg.reward_path)
    if kind in ONLINE_KINDS and rm is None:
        raise ConfigError(f"loss_kind {kind.value} needs reward_path")

    vocab = Vocab(cfg.vocab_size, cfg.max_len)
    n_prompts = _infer_prompts(cfg, dataset, rm)

    os.makedirs(out_dir, exist_ok=True)
    manifest = RunManifest(
        config=to_dict(cfg),
        dataset_hash=dataset.content_hash if dataset is not None else None,
        data_blob=blob_hash(read_bytes(data_path)) if data_path else None,
        seed=cfg.seed,
        started_at=_now(),
        artifacts={"metrics": METRICS},
    )
    manifest.write(out_dir)

    if kind == LossKind.rm_bt:
        rm_trained, report = train_reward_model(ExplicitRewardModel.trainable(n_prompts, vocab), cfg, records)
        rm_trained.save_json(os.path.join(out_dir, REWARD_MODEL))
        manifest.artifacts["reward_model"] = REWARD_MODEL
    else:
        ref = build_policy(
            cfg.policy_kind.value, vocab, n_prompts, seed=cfg.ref_seed, scale=cfg.ref_scale,
            hidden=cfg.hidden, bias=cfg.bias, frozen=True,
        )
        pi0 = ref.clone()
        if kind in ONLINE_KINDS:
            ids = dataset.prompt_ids if dataset is not None else range(n_prompts)
            report = ONLINE_TRAINERS[kind](pi0, ref, cfg, [Prompt(i) for i in ids], rm)
        else:
            report = train_offline(pi0, ref, cfg, records, rm)
        report.checkpoint = save_checkpoint(report.policy, os.path.join(out_dir, CHECKPOINT))
        manifest.artifacts["checkpoint"] = CHECKPOINT
        manifest.artifacts["checkpoint_mirror"] = os.path.splitext(CHECKPOINT)[0] + ".json"

    report.write_csv(os.path.join(out_dir, METRICS))
    manifest.finalize(out_dir)
    logger.info("run written to %s (%s)", out_dir, ", ".join(sorted(manifest.artifacts)))
    final = report.final
    print(f"{kind.value}: {len(report.records)} evals, final loss {final.loss:.6g}, kl {final.kl:.6g} -> {out_dir}")
    return 0


def cmd_train(
    config_path: Optional[str], data_path: Optional[str], out_dir: str,
    overrides: Sequence[str] = (), seed: Optional[int] = None,
) -> int:
    def run():
        cfg = load_config(config_path, overrides)
        if seed is not None:
            cfg.seed = seed
        return run_training(cfg.validate(), data_path, out_dir)
    return _guard(run)


def print_defaults() -> int:
    for line in to_dotlist(TrainConfig()):
        print(line)
    return 0


def cmd_verify(suite: str, seed: int = 17, out_dir: str = "verify-replay", threads: Optional[int] = None) -> int:
    def run():
        if suite not in SUITES:
            raise ConfigError(f"unknown suite {suite!r}; choose from {', '.join(SUITES)}")
        results = run_suite(suite, seed, threads)
        print(f"{'property':<48} {'observed':>12} {'threshold':>10}  status")
        for r in results:
            print(r.row())
        for path in write_replays(results, out_dir, suite, seed):
            print(f"replay: {path}")
        failed = sum(not r.passed for r in results)
        print(f"{suite}: {len(results) - failed}/{len(results)} properties passed")
        return 1 if failed else 0
    return _guard(run)


def read_metrics(run_dir: str) -> List[Dict[str, float]]:
    with open(os.path.join(run_dir, METRICS)) as f:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(f)]


def summarize(run_dir: str) -> dict:
    manifest_path = os.path.join(run_dir, MANIFEST)
    if not os.path.isfile(manifest_path) or not os.path.isfile(os.path.join(run_dir, METRICS)):
        raise MissingArtifact(f"{run_dir} has no {MANIFEST} and {METRICS}")
    try:
        with open(manifest_path, encoding="utf-8") as f:
            summary = json.load(f)
        rows = read_metrics(run_dir)
    except (ValueError, TypeError) as e:
        raise ParseError(f"{run_dir} is not a readable run directory: {e}")
    if not isinstance(summary, dict):
        raise SchemaError("manifest", f"{manifest_path} must hold a JSON object")
    if not rows:
        raise MissingArtifact(f"{run_dir}/{METRICS} has no rows")
    missing = [c for c in CSV_HEADER if c not in rows[0]]
    if missing:
        raise SchemaError(missing[0], f"missing from {run_dir}/{METRICS}")
    first, last = rows[0], rows[-1]
    summary.update({
        "run_dir": run_dir,
        "n_evals": len(rows),
        "final_step": int(last["step"]),
        "final_loss": last["loss"],
        "final_kl": last["kl"],
        "final_mean_explicit_reward": last["mean_explicit_reward"],
        "margin_start": first["mean_r_theta_w"] - first["mean_r_theta_l"],
        "margin_end": last["mean_r_theta_w"] - last["mean_r_theta_l"],
    })
    return summary


def _long_rows(rows: List[Dict[str, float]]):
    for row in rows:
        for metric in CSV_HEADER[1:]:
            yield int(row["step"]), metric, row[metric]


def cmd_report(run_dirs: Sequence[str], out_dir: Optional[str] = None) -> int:
    def run():
        summaries = []
        for run_dir in run_dirs:
            summary = summarize(run_dir)
            with open(os.path.join(run_dir, "report.json"), "w") as f:
                json.dump(summary, f, indent=1, sort_keys=True)
            with open(os.path.join(run_dir, "metrics_long.csv"), "w", newline="") as f:
                writer = csv.writer(f, lineterminator="\n")
                writer.writerow(["step", "metric", "value"])
                writer.writerows(_long_rows(read_metrics(run_dir)))
            summaries.append(summary)
            print(f"{run_dir}: final loss {summary['final_loss']:.6g}, kl {summary['final_kl']:.6g}")

        if len(run_dirs) > 1 or out_dir is not None:
            target = out_dir or "."
            os.makedirs(target, exist_ok=True)
            ordered = sorted(summaries, key=lambda s: (s["config"]["beta"], s["run_dir"]))
            with open(os.path.join(target, "comparison.csv"), "w", newline="") as f:
                writer = csv.writer(f, lineterminator="\n")
                writer.writerow(["beta", "run", "step", "metric", "value"])
                for s in ordered:
                    for step, metric, value in _long_rows(read_metrics(s["run_dir"])):
                        writer.writerow([s["config"]["beta"], os.path.basename(os.path.normpath(s["run_dir"])),
                                         step, metric, value])
        return 0
    return _guard(run)


def cmd_sweep(
    config_path: str, data_path: Optional[str], out_dir: str, betas: Sequence[float] = BETA_GRID,
    overrides: Sequence[str] = (), seed: Optional[int] = None,
) -> int:
    run_dirs = []
    for beta in betas:
        run_dir = os.path.join(out_dir, f"beta={beta}")
        code = cmd_train(config_path, data_path, run_dir, list(overrides) + [f"beta={beta}"], seed)
        if code != 0:
            return code
        run_dirs.append(run_dir)
    return cmd_report(run_dirs, out_dir)


def cmd_generate(instance: str, out_dir: str, seed: Optional[int] = None) -> int:
    def run():
        os.makedirs(out_dir, exist_ok=True)
        kwargs = {} if seed is None else {"seed": seed}
        data = os.path.join(out_dir, "data.jsonl")
        if instance == "separable-4":
            dump_records(separable_pairwise(**kwargs), data)
        elif instance == "binary":
            dump_records(binary_feedback(**kwargs), data)
        elif instance == "scalar":
            vocab = Vocab(4, 1)
            records, _, _ = realizable_scores(vocab=vocab, ref=TabularPolicy.uniform(vocab, 4, frozen=True), **kwargs)
            dump_records(records, data)
        elif instance == "prefer-token-3":
            prefer_token_reward().save_json(os.path.join(out_dir, "reward.json"))
        elif instance == "bt-separable":
            records, _ = separable_preferences(**kwargs)
            dump_records(records, data)
        else:
            raise ConfigError(f"unknown instance {instance!r}; choose from {', '.join(INSTANCES)}")
        print(f"{instance} -> {out_dir}")
        return 0
    return _guard(run)


def parse_args(argv=None):
    parser = argparse.ArgumentParser(prog="una-lab")
    parser.add_argument("--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="train a policy or reward model; trailing key=value pairs override the config")
    train.add_argument("--config", default=None)
    train.add_argument("--data", default=None)
    train.add_argument("--out", default=None)
    train.add_argument("--seed", type=int, default=None)
    train.add_argument("--print-defaults", action="store_true")

    verify = sub.add_parser("verify", help="run a property suite")
    verify.add_argument("--suite", default="all", choices=list(SUITES))
    verify.add_argument("--seed", type=int, default=17)
    verify.add_argument("--out", default="verify-replay")

    report = sub.add_parser("report", help="summarize run directories")
    report.add_argument("run_dirs", nargs="+")
    report.add_argument("--out", default=None)

    sweep = sub.add_parser("sweep", help="train once per beta and compare")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--data", default=None)
    sweep.add_argument("--out", required=True)
    sweep.add_argument("--betas", default=",".join(str(b) for b in BETA_GRID))
    sweep.add_argument("--seed", type=int, default=None)

    generate = sub.add_parser("generate", help="write a synthetic instance")
    generate.add_argument("--instance", required=True, choices=list(INSTANCES))
    generate.add_argument("--out", required=True)
    generate.add_argument("--seed", type=int, default=None)

    args, extra_args = parser.parse_known_args(argv)
    if extra_args and args.command not in ("train", "sweep"):
        parser.error(f"unrecognized arguments: {' '.join(extra_args)}")
    return args, extra_args


def main(argv=None) -> int:
    args, extra_args = parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    if args.command == "train":
        if args.print_defaults:
            return print_defaults()
        if args.out is None:
            print("error: --out is required", file=sys.stderr)
            return 2
        return cmd_train(args.config, args.data, args.out, extra_args, args.seed)
    if args.command == "verify":
        return cmd_verify(args.suite, args.seed, args.out)
    if args.command == "report":
        return cmd_report(args.run_dirs, args.out)
    if args.command == "sweep":
        try:
            betas = [float(b) for b in args.betas.split(",") if b.strip()]
        except ValueError:
            print(f"error: --betas must be a comma-separated list of numbers, got {args.betas!r}", file=sys.stderr)
            return 2
        return cmd_sweep(args.config, args.data, args.out, betas, extra_args, args.seed)
    return cmd_generate(args.instance, args.out, args.seed)


if __name__ == "__main__":
    sys.exit(main())
