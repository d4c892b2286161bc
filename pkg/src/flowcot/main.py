"""
Command-line entry point.

Subcommands:
- gen: generate the dataset and the demonstration corpus
- fit: fit the prior and the label-aware posterior model
- decode: compare decoding arms
- train: flow-reward RL from the fitted prior
- eval: budget sweep, pass@k scaling and posterior-quality trend
- verify: run the identity suite
"""

from __future__ import annotations

import argparse
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Sequence

from pydantic import BaseModel, ConfigDict, ValidationError

from flowcot.config import RunConfig, load_run_config, split_instances
from flowcot.decode import DecodeConfig, FlowModels
from flowcot.evaluation import (
    SUMMARY_HEADER,
    budget_sweep,
    compare_arms,
    format_summary,
    passk_scaling,
    quality_trend,
    transition_counts,
)
from flowcot.flow import posterior_training_corpus
from flowcot.models.fitting import fit_mle
from flowcot.models.model_factory import PolicyFactory
from flowcot.rl import CURVE_HEADER, TrainRecord, train
from flowcot.tasks.corpus import read_corpus, read_dataset, synthesize_corpus, write_corpus, write_dataset
from flowcot.tasks.task_factory import TaskFactory
from flowcot.utils.utils import (
    DivergenceError,
    FlowCotError,
    canonical_json,
    ensure_writable,
    env_or_default,
    print_section_title,
    write_csv,
    write_jsonl,
)
from flowcot.verify import run_identity_suite

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_DIVERGED = 3

DATASET = "dataset.jsonl"
CORPUS = "corpus.jsonl"
PRIOR = "prior.json"
POSTERIOR = "posterior.json"


class RunRecord(BaseModel):
    """
    Provenance of one subcommand invocation.

    ``outputs`` maps each written file name to its record count: data rows
    for JSONL and CSV files (meta lines excluded), one for a model file.
    """

    model_config = ConfigDict(frozen=True)

    run_id: str
    timestamp: str
    subcommand: str
    config: dict[str, Any]
    outputs: dict[str, int]
    summary: dict[str, Any]


def _write_run_record(config: RunConfig, subcommand: str, outputs: dict[Path, int], summary: dict[str, Any]) -> None:
    """Write `run_<subcommand>.json`; it is provenance and is always replaced."""
    record = RunRecord(
        run_id=config.run_id,
        timestamp=datetime.now(timezone.utc).isoformat(),
        subcommand=subcommand,
        config=config.model_dump(mode="json"),
        outputs={p.name: count for p, count in outputs.items()},
        summary=summary,
    )
    path = config.output_dir / f"run_{subcommand}.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(record.model_dump_json(indent=2), encoding="utf-8")


def _load_config(args: argparse.Namespace) -> RunConfig:
    return load_run_config(
        args.config,
        {
            "seed": args.seed,
            "out_dir": str(args.out_dir) if args.out_dir is not None else None,
            "jobs": args.jobs,
        },
    )


def _progress(args: argparse.Namespace) -> bool:
    return not args.quiet and sys.stderr.isatty()


def _models(config: RunConfig) -> FlowModels:
    out = config.output_dir
    prior = PolicyFactory.load(out / PRIOR)
    posterior = PolicyFactory.load(out / POSTERIOR)
    return FlowModels(prior, posterior, max_trajectories=config.oracle.max_trajectories, seed=config.seed)


# --- subcommands -------------------------------------------------------------


def cmd_gen(args: argparse.Namespace) -> int:
    config = _load_config(args)
    task = TaskFactory.create(config.task)
    out = config.output_dir
    dataset_path = ensure_writable(out / DATASET, force=args.force)
    corpus_path = ensure_writable(out / CORPUS, force=args.force)

    instances = task.generate(config.n_instances)
    corpus = synthesize_corpus(
        task, instances, config.task.filler_rate, config.seed, repeats=config.model.corpus_repeats
    )
    n_instances = write_dataset(dataset_path, instances)
    n_corpus = write_corpus(corpus_path, corpus)
    logger.info("Wrote %d instances to %s and %d demonstrations to %s", n_instances, dataset_path, n_corpus, corpus_path)
    print(f"{n_instances} instances, {n_corpus} demonstrations -> {out}")
    _write_run_record(
        config,
        "gen",
        {dataset_path: n_instances, corpus_path: n_corpus},
        {"n_instances": n_instances, "n_demonstrations": n_corpus},
    )
    return EXIT_OK


def cmd_fit(args: argparse.Namespace) -> int:
    config = _load_config(args)
    task = TaskFactory.create(config.task)
    out = config.output_dir
    prior_path = ensure_writable(out / PRIOR, force=args.force)
    posterior_path = ensure_writable(out / POSTERIOR, force=args.force)

    corpus = read_corpus(out / CORPUS)
    prior = fit_mle(corpus, task.vocab, alpha=config.model.alpha, order=config.model.order)

    posterior_source = corpus
    if config.model.posterior_filler_rate is not None:
        posterior_source = synthesize_corpus(
            task,
            read_dataset(out / DATASET),
            config.model.posterior_filler_rate,
            config.seed,
            repeats=config.model.corpus_repeats,
        )
    posterior = fit_mle(
        posterior_training_corpus(posterior_source, task.vocab),
        task.vocab,
        alpha=config.model.alpha,
        order=config.model.order,
        label_aware=True,
    )
    PolicyFactory.save(prior, prior_path)
    PolicyFactory.save(posterior, posterior_path)
    print(f"prior -> {prior_path}\nposterior -> {posterior_path}")
    _write_run_record(
        config,
        "fit",
        {prior_path: 1, posterior_path: 1},
        {"n_demonstrations": len(corpus), "n_parameters": prior.n_parameters},
    )
    return EXIT_OK


def cmd_decode(args: argparse.Namespace) -> int:
    config = _load_config(args)
    task = TaskFactory.create(config.task)
    out = config.output_dir
    outputs = [out / name for name in ("runs.jsonl", "summary.csv", "transitions.jsonl", "profiles.jsonl")]
    for path in outputs:
        ensure_writable(path, force=args.force)

    instances = read_dataset(out / DATASET)
    models = _models(config)
    comparison = compare_arms(
        instances, config.arms(), models, task, jobs=config.jobs, show_progress=_progress(args)
    )

    meta = config.meta()
    runs_path, summary_path, transitions_path, profiles_path = outputs
    counts: dict[Path, int] = {}
    counts[runs_path] = write_jsonl(
        runs_path,
        (row.model_dump() for rows in comparison.rows.values() for row in rows),
        meta=meta,
    )
    counts[summary_path] = write_csv(
        summary_path, SUMMARY_HEADER, (s.to_row() for s in comparison.summaries), meta=meta
    )
    counts[transitions_path] = write_jsonl(
        transitions_path,
        (record.to_dict() for records in comparison.transitions.values() for record in records),
        meta=meta,
    )
    counts[profiles_path] = write_jsonl(
        profiles_path,
        (
            {"arm": arm, **result.profile.to_dict()}
            for arm, results in comparison.results.items()
            for result in results
            if result.profile is not None
        ),
        meta=meta,
    )

    print_section_title(f"Decoding arms ({len(instances)} instances)")
    print(format_summary(comparison.summaries))
    baseline = config.decode.arms[0].name
    for arm, records in comparison.transitions.items():
        print(f"{baseline} -> {arm}: {transition_counts(records)}")

    _write_run_record(
        config,
        "decode",
        counts,
        {s.arm: s.model_dump() for s in comparison.summaries},
    )
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = _load_config(args)
    task = TaskFactory.create(config.task)
    out = config.output_dir
    curve_path = ensure_writable(out / "curve.csv", force=args.force)
    policy_path = ensure_writable(out / "policy.json", force=args.force)
    checkpoint_dir = out / "checkpoints"

    instances = read_dataset(out / DATASET)
    train_instances, heldout = split_instances(instances, config.heldout_fraction)
    policy = PolicyFactory.load(out / PRIOR)
    every = config.train.checkpoint_every

    def on_step(record: TrainRecord, current) -> None:
        if every and record.step % every == 0:
            PolicyFactory.save(current, checkpoint_dir / f"step_{record.step:05d}.json")

    try:
        result = train(
            policy, task, config.train, train_instances, heldout, on_step=on_step, show_progress=_progress(args)
        )
    except DivergenceError as exc:
        write_csv(curve_path, CURVE_HEADER, (r.to_row() for r in exc.records))
        print(
            f"Divergence guard: {exc} (gate={exc.gate}, step={exc.step}, max|theta|={exc.magnitude:.3g})",
            file=sys.stderr,
        )
        return EXIT_DIVERGED

    n_rows = write_csv(curve_path, CURVE_HEADER, (r.to_row() for r in result.records))
    PolicyFactory.save(result.policy, policy_path)

    print_section_title(f"Training ({config.train.reward_mode.value}, {config.train.gate.value} gate)")
    if result.records:
        last = result.records[-1]
        print(f"step {last.step}: pass@1={last.pass1:.3f} length={last.length_mean:.2f} reward={last.reward_mean:.4f}")
    else:
        print("no steps run")
    _write_run_record(
        config,
        "train",
        {curve_path: n_rows, policy_path: 1},
        result.records[-1].model_dump() if result.records else {},
    )
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    config = _load_config(args)
    task = TaskFactory.create(config.task)
    out = config.output_dir
    sweep_path = ensure_writable(out / "sweep.jsonl", force=args.force)
    passk_path = ensure_writable(out / "passk.jsonl", force=args.force)
    quality_path = ensure_writable(out / "quality.jsonl", force=args.force)

    instances = read_dataset(out / DATASET)
    models = _models(config)
    section = config.decode
    meta = config.meta()

    sweep = budget_sweep(
        instances, section.budgets, config.arms(section.sweep_arms), models, task, jobs=config.jobs
    )
    n_sweep = write_jsonl(sweep_path, (row.model_dump() for row in sweep.rows), meta={**meta, "slopes": sweep.slopes})

    passk = passk_scaling(
        instances,
        config.arms(section.passk_arms),
        models,
        task,
        n_samples=section.passk_samples,
        ks=section.passk_ks,
        seed=config.seed,
    )
    n_passk = write_jsonl(passk_path, (row.model_dump() for row in passk), meta=meta)

    guided = [a.decode for a in config.arms() if a.decode.strategy.guided]
    baseline = guided[0] if guided else DecodeConfig(horizon=config.task.horizon, seed=config.seed)
    quality = quality_trend(
        instances,
        section.quality_modes,
        models,
        task,
        baseline,
        n_states=section.quality_states,
        seed=config.seed,
        jobs=config.jobs,
    )
    n_quality = write_jsonl(quality_path, (row.model_dump() for row in quality), meta=meta)

    print_section_title("Budget sweep")
    for row in sweep.rows:
        print(f"{row.arm:<20} T_max={row.budget:<4} pass@1={row.pass1:.3f} mean_len={row.mean_len:.2f}")
    print(f"length slopes: {canonical_json(sweep.slopes)}")
    print_section_title("pass@k")
    for row in passk:
        print(f"{row.arm:<20} k={row.k:<4} {row.pass_at_k:.3f}")
    print_section_title("Posterior quality")
    for row in quality:
        print(f"{row.mode:<14} KL={row.mean_kl:.4f} pass@1={row.pass1:.3f}")
    _write_run_record(
        config,
        "eval",
        {sweep_path: n_sweep, passk_path: n_passk, quality_path: n_quality},
        {"slopes": sweep.slopes, "quality": {row.mode: row.mean_kl for row in quality}},
    )
    return EXIT_OK


def cmd_verify(args: argparse.Namespace) -> int:
    seed = args.seed if args.seed is not None else 0
    results = run_identity_suite(
        seed,
        checkpoints=[Path(p) for p in args.checkpoint],
        dump_path=args.dump_oracle,
        show_progress=_progress(args),
    )
    print_section_title("Identity suite")
    for result in results:
        print(result.describe())
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"{len(failed)} check(s) failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_ERROR
    print(f"all {len(results)} checks passed")
    return EXIT_OK


# --- parser ------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", type=Path, default=None, help="JSON run configuration")
    shared.add_argument("--seed", type=int, default=None, help="Root seed (overrides the config)")
    shared.add_argument("--out-dir", type=Path, default=None, help="Output directory (default: $FLOWCOT_OUT_DIR or ./runs)")
    shared.add_argument("--jobs", type=int, default=None, help="Worker threads for rollouts")
    shared.add_argument("--force", action="store_true", help="Overwrite existing outputs")
    shared.add_argument("--log-level", default=None, help="Logging level (default: $FLOWCOT_LOG_LEVEL or INFO)")
    shared.add_argument("--quiet", action="store_true", help="Disable progress bars")

    parser = argparse.ArgumentParser(prog="flowcot", description="Token flow velocity, flow decoding and flow-reward RL.")
    sub = parser.add_subparsers(dest="command", required=True)

    commands: dict[str, tuple[Callable[[argparse.Namespace], int], str]] = {
        "gen": (cmd_gen, "Generate the dataset and demonstration corpus"),
        "fit": (cmd_fit, "Fit the prior and posterior models"),
        "decode": (cmd_decode, "Compare decoding arms"),
        "train": (cmd_train, "Flow-reward RL from the fitted prior"),
        "eval": (cmd_eval, "Budget sweep, pass@k scaling and posterior-quality trend"),
        "verify": (cmd_verify, "Run the identity suite"),
    }
    for name, (handler, help_text) in commands.items():
        command = sub.add_parser(name, parents=[shared], help=help_text)
        command.set_defaults(handler=handler)
        if name == "verify":
            command.add_argument("--checkpoint", action="append", default=[], help="Checkpoint to check (repeatable)")
            command.add_argument("--dump-oracle", type=Path, default=None, help="Write checked oracle quantities as JSON")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = (args.log_level or env_or_default("FLOWCOT_LOG_LEVEL", "INFO")).upper()
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")

    try:
        return args.handler(args)
    except DivergenceError as exc:
        print(f"Divergence guard: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (FlowCotError, OSError, ValidationError, ValueError) as exc:
        logger.debug("Command %s failed", args.command, exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
