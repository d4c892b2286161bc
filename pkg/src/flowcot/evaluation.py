"""
Metrics and paired analyses over decoding arms.
"""

from __future__ import annotations

import logging
import math
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable, Iterable, Sequence, TypeVar

import numpy as np
from pydantic import BaseModel, ConfigDict
from scipy.special import gammaln
from tqdm import tqdm

from flowcot.decode import DecodeConfig, DecodeStrategy, FlowModels, RolloutResult, rollout
from flowcot.flow import PosteriorMode, posterior_quality, sample_states
from flowcot.tasks.task_base import TaskFamily, TaskInstance
from flowcot.utils.utils import fsum_mean, rng_for

logger = logging.getLogger(__name__)

EXACT_PASS_AT_K_LIMIT = 64

T = TypeVar("T")
R = TypeVar("R")


# --- pass@k ------------------------------------------------------------------


def _check_pass_args(n: int, c: int, k: int) -> None:
    if not 0 <= c <= n:
        raise ValueError(f"Need 0 <= c <= n, got n={n}, c={c}")
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    if k > n:
        raise ValueError(f"k={k} exceeds the number of samples n={n}")


def pass_at_k_fraction(n: int, c: int, k: int) -> Fraction:
    """Exact ``1 - C(n-c, k) / C(n, k)`` as a rational."""
    _check_pass_args(n, c, k)
    return 1 - Fraction(math.comb(n - c, k), math.comb(n, k))


def pass_at_k(n: int, c: int, k: int) -> float:
    """
    Unbiased pass@k from ``n`` samples with ``c`` correct.

    Rational arithmetic up to n = 64, log-gamma beyond.

    Raises
    ------
    ValueError
        If ``k > n`` or the counts are inconsistent.
    """
    _check_pass_args(n, c, k)
    if n - c < k:
        return 1.0
    if n <= EXACT_PASS_AT_K_LIMIT:
        return float(pass_at_k_fraction(n, c, k))
    log_ratio = gammaln(n - c + 1) - gammaln(n - c - k + 1) - gammaln(n + 1) + gammaln(n - k + 1)
    return float(1.0 - math.exp(log_ratio))


# --- arms --------------------------------------------------------------------


class Arm(BaseModel):
    """A named decoding configuration."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str
    decode: DecodeConfig


def _parallel_map(fn: Callable[[T], R], items: Sequence[T], jobs: int, desc: str, show_progress: bool) -> list[R]:
    # map keeps input order, so outputs are identical for any worker count
    if jobs <= 1:
        return [fn(item) for item in tqdm(items, desc=desc, disable=not show_progress)]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(tqdm(pool.map(fn, items), total=len(items), desc=desc, disable=not show_progress))


class ArmSummary(BaseModel):
    model_config = ConfigDict(frozen=True)

    arm: str
    n: int
    pass1: float
    mean_len: float
    median_len: float

    def to_row(self) -> list[Any]:
        return [self.arm, self.n, self.pass1, self.mean_len, self.median_len]


SUMMARY_HEADER = ["arm", "n", "pass1", "mean_len", "median_len"]


class RunRow(BaseModel):
    """One rollout of one arm, as written to the runs file."""

    model_config = ConfigDict(frozen=True)

    arm: str
    instance_id: str
    thought: list[int]
    answer: int
    correct: bool
    length: int
    terminated: bool
    mean_pfp: float | None = None


class TransitionRecord(BaseModel):
    """Correctness of one instance under the baseline arm and a guided arm."""

    model_config = ConfigDict(frozen=True)

    instance_id: str
    arm: str
    baseline_correct: bool
    flow_correct: bool
    compression_rate: float
    mean_pfp: float | None

    @property
    def kind(self) -> str:
        before = "C" if self.baseline_correct else "W"
        after = "C" if self.flow_correct else "W"
        return f"{before}->{after}"

    def to_dict(self) -> dict[str, Any]:
        return {**self.model_dump(), "kind": self.kind}


def summarize_arm(name: str, rows: Sequence[RunRow]) -> ArmSummary:
    lengths = [row.length for row in rows]
    return ArmSummary(
        arm=name,
        n=len(rows),
        pass1=fsum_mean(1.0 if row.correct else 0.0 for row in rows),
        mean_len=fsum_mean(float(x) for x in lengths),
        median_len=float(statistics.median(lengths)) if lengths else float("nan"),
    )


def classify_transitions(baseline: Sequence[RunRow], guided: Sequence[RunRow]) -> list[TransitionRecord]:
    """
    Pair rows by instance and classify W->C, C->W, C->C and W->W.

    Raises
    ------
    ValueError
        If the two runs cover different instances.
    """
    by_id = {row.instance_id: row for row in baseline}
    if set(by_id) != {row.instance_id for row in guided} or len(by_id) != len(guided):
        raise ValueError("Transition classification needs both arms on the same instance set")
    records = []
    for row in guided:
        base = by_id[row.instance_id]
        compression = 1.0 - row.length / base.length if base.length else 0.0
        records.append(
            TransitionRecord(
                instance_id=row.instance_id,
                arm=row.arm,
                baseline_correct=base.correct,
                flow_correct=row.correct,
                compression_rate=compression,
                mean_pfp=row.mean_pfp,
            )
        )
    return records


def transition_counts(records: Iterable[TransitionRecord]) -> dict[str, int]:
    counts = {"W->C": 0, "C->W": 0, "C->C": 0, "W->W": 0}
    for record in records:
        counts[record.kind] += 1
    return counts


@dataclass(slots=True)
class Comparison:
    summaries: list[ArmSummary]
    rows: dict[str, list[RunRow]]
    results: dict[str, list[RolloutResult]]
    transitions: dict[str, list[TransitionRecord]] = field(default_factory=dict)


def run_arm(
    arm: Arm,
    instances: Sequence[TaskInstance],
    models: FlowModels,
    task: TaskFamily,
    *,
    jobs: int = 1,
    show_progress: bool = False,
) -> tuple[list[RolloutResult], list[RunRow]]:
    results = _parallel_map(lambda inst: models.run(inst, arm.decode), instances, jobs, arm.name, show_progress)
    rows = [
        RunRow(
            arm=arm.name,
            instance_id=instance.id,
            thought=list(result.trajectory.tokens),
            answer=result.trajectory.answer,
            correct=task.verify_answer(instance, result.trajectory.answer),
            length=result.trajectory.length,
            terminated=result.trajectory.terminated,
            mean_pfp=None if result.profile is None else result.profile.mean_pfp,
        )
        for instance, result in zip(instances, results)
    ]
    return results, rows


def compare_arms(
    instances: Sequence[TaskInstance],
    arms: Sequence[Arm],
    models: FlowModels,
    task: TaskFamily,
    *,
    jobs: int = 1,
    show_progress: bool = False,
) -> Comparison:
    """
    Run every arm on every instance and compare them against the first arm.

    Parameters
    ----------
    instances : Sequence[TaskInstance]
        Shared instance set.
    arms : Sequence[Arm]
        At least two arms; the first is the baseline of the transitions.
    models : FlowModels
        Prior, posterior and oracles.
    task : TaskFamily
        Verifier.
    jobs : int, default=1
        Worker threads per arm.
    show_progress : bool, default=False
        Show tqdm progress bars.

    Returns
    -------
    Comparison
        Per-arm summaries, rows and transition records keyed by arm name.
    """
    if len(arms) < 2:
        raise ValueError("compare_arms needs at least two arms")
    names = [arm.name for arm in arms]
    if len(set(names)) != len(names):
        raise ValueError(f"Arm names must be unique, got {names}")

    comparison = Comparison(summaries=[], rows={}, results={})
    for arm in arms:
        results, rows = run_arm(arm, instances, models, task, jobs=jobs, show_progress=show_progress)
        comparison.results[arm.name] = results
        comparison.rows[arm.name] = rows
        comparison.summaries.append(summarize_arm(arm.name, rows))
        logger.info("Arm %s: %s", arm.name, comparison.summaries[-1].model_dump())

    baseline = comparison.rows[arms[0].name]
    for arm in arms[1:]:
        comparison.transitions[arm.name] = classify_transitions(baseline, comparison.rows[arm.name])
    return comparison


# --- sweeps and trends -------------------------------------------------------


class SweepRow(BaseModel):
    model_config = ConfigDict(frozen=True)

    arm: str
    budget: int
    pass1: float
    mean_len: float


@dataclass(slots=True)
class SweepResult:
    rows: list[SweepRow]
    slopes: dict[str, float]

    def lengths(self, arm: str) -> list[float]:
        return [row.mean_len for row in self.rows if row.arm == arm]


def budget_sweep(
    instances: Sequence[TaskInstance],
    budgets: Sequence[int],
    arms: Sequence[Arm],
    models: FlowModels,
    task: TaskFamily,
    *,
    jobs: int = 1,
    show_progress: bool = False,
) -> SweepResult:
    """
    Accuracy and mean length per (arm, horizon).

    The saturation diagnostic is the least-squares slope of each arm's mean
    length against the budget.

    Raises
    ------
    ValueError
        If the budgets are not strictly increasing.
    """
    budgets = [int(b) for b in budgets]
    if not budgets or any(b2 <= b1 for b1, b2 in zip(budgets, budgets[1:])):
        raise ValueError(f"Budgets must be strictly increasing, got {budgets}")

    rows = []
    slopes = {}
    for arm in arms:
        lengths = []
        for budget in budgets:
            scaled = Arm(name=arm.name, decode=arm.decode.model_copy(update={"horizon": budget}))
            _, arm_rows = run_arm(scaled, instances, models, task, jobs=jobs, show_progress=show_progress)
            summary = summarize_arm(arm.name, arm_rows)
            rows.append(SweepRow(arm=arm.name, budget=budget, pass1=summary.pass1, mean_len=summary.mean_len))
            lengths.append(summary.mean_len)
        slopes[arm.name] = float(np.polyfit(budgets, lengths, 1)[0]) if len(budgets) > 1 else 0.0
    return SweepResult(rows=rows, slopes=slopes)


class PassAtKRow(BaseModel):
    model_config = ConfigDict(frozen=True)

    arm: str
    k: int
    pass_at_k: float


def passk_scaling(
    instances: Sequence[TaskInstance],
    arms: Sequence[Arm],
    models: FlowModels,
    task: TaskFamily,
    *,
    n_samples: int,
    ks: Sequence[int],
    seed: int = 0,
) -> list[PassAtKRow]:
    """
    Mean pass@k over instances for each arm and each ``k``.

    Sample ``j`` of an instance uses the stream ``("passk", instance.id, j)``
    for every arm.
    """
    if any(k > n_samples for k in ks):
        raise ValueError(f"Every k must be <= n_samples={n_samples}, got {list(ks)}")
    rows = []
    for arm in arms:
        correct_counts = []
        for instance in instances:
            context = models.context_for(instance, arm.decode.horizon) if arm.decode.strategy.guided else None
            correct = 0
            for j in range(n_samples):
                result = rollout(
                    models.prior, instance, arm.decode, context=context, rng=rng_for(seed, "passk", instance.id, j)
                )
                correct += task.verify_answer(instance, result.trajectory.answer)
            correct_counts.append(correct)
        for k in ks:
            value = fsum_mean(pass_at_k(n_samples, c, k) for c in correct_counts)
            rows.append(PassAtKRow(arm=arm.name, k=int(k), pass_at_k=value))
    return rows


class QualityRow(BaseModel):
    model_config = ConfigDict(frozen=True)

    mode: str
    mean_kl: float
    pass1: float
    mean_len: float


def quality_trend(
    instances: Sequence[TaskInstance],
    modes: Sequence[PosteriorMode],
    models: FlowModels,
    task: TaskFamily,
    base: DecodeConfig,
    *,
    n_states: int = 500,
    seed: int = 0,
    jobs: int = 1,
) -> list[QualityRow]:
    """
    Posterior-quality divergence next to downstream flow decoding accuracy, per mode.

    Every mode is scored on the same sampled states and decoded with ``base``
    (switched to ``flow_greedy`` with that mode).
    """
    oracle = models.oracle(base.horizon)
    states = sample_states(models.prior, instances, n_states, base.horizon, rng_for(seed, "quality_states"))
    rows = []
    for mode in modes:
        quality = posterior_quality(
            models.prior, models.posterior, mode, instances, oracle, seed=models.seed, states=states
        )
        arm = Arm(
            name=f"flow_{mode.value}",
            decode=DecodeConfig.model_validate(
                {**base.model_dump(), "strategy": DecodeStrategy.FLOW_GREEDY, "posterior_mode": mode}
            ),
        )
        _, arm_rows = run_arm(arm, instances, models, task, jobs=jobs)
        summary = summarize_arm(arm.name, arm_rows)
        rows.append(QualityRow(mode=mode.value, mean_kl=quality.mean_kl, pass1=summary.pass1, mean_len=summary.mean_len))
    return rows


def format_summary(summaries: Sequence[ArmSummary]) -> str:
    """Plain-text table of arm summaries."""
    width = max([len("arm")] + [len(s.arm) for s in summaries])
    lines = [f"{'arm':<{width}}  {'n':>5}  {'pass@1':>7}  {'mean_len':>8}  {'median':>6}"]
    for s in summaries:
        lines.append(f"{s.arm:<{width}}  {s.n:>5}  {s.pass1:>7.3f}  {s.mean_len:>8.2f}  {s.median_len:>6.1f}")
    return "\n".join(lines)
