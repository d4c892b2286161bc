"""
Identity suite run by ``flowcot verify``.

Each check measures a worst-case error on shipped reference policies and
compares it with a fixed tolerance.
"""

from __future__ import annotations

import dataclasses
import itertools
import json
import logging
import math
from dataclasses import dataclass
from functools import cached_property
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
from scipy.special import logsumexp
from tqdm import tqdm

from flowcot.decode import DecodeConfig, DecodeStrategy, rollout
from flowcot.evaluation import pass_at_k_fraction
from flowcot.flow import AnswerContext, PosteriorMode, profile, sample_states
from flowcot.models.fitting import fit_mle
from flowcot.models.linear import FeatureSpec, LinearSoftmaxPolicy
from flowcot.models.model_base import CondSeqModel, State
from flowcot.models.model_factory import PolicyFactory
from flowcot.models.tabular import TabularPolicy
from flowcot.oracle import EnumerationBudget, EnumerationOracle
from flowcot.rl import GradientCheck, estimator_consistency, gradient_check
from flowcot.tasks.corpus import synthesize_corpus
from flowcot.tasks.modular_chain import ModularChainTask
from flowcot.tasks.task_base import TaskFamilyConfig, TaskInstance
from flowcot.utils.utils import NORMALIZATION_TOL, FlowCotError, rng_for

logger = logging.getLogger(__name__)

N_STATES = 200
N_TRAJECTORIES = 500
N_ESTIMATOR_SAMPLES = 100_000


@dataclass(frozen=True, slots=True)
class CheckResult:
    name: str
    measured: float
    tolerance: float
    passed: bool

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def describe(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name:<28} measured={self.measured:.3e}  tolerance={self.tolerance:.1e}"


def _check(name: str, measured: float, tolerance: float) -> CheckResult:
    passed = bool(np.isfinite(measured)) and measured <= tolerance
    return CheckResult(name, float(measured), tolerance, passed)


@dataclass(slots=True)
class ReferenceSet:
    """
    Policies the identities are checked on.

    ``policies`` are tabular (a corpus fit and a random one) on a small
    modular chain task; ``linear`` is a policy with a few dozen parameters on
    a tiny task, used by the gradient checks.
    """

    task: ModularChainTask
    instances: list[TaskInstance]
    policies: list[tuple[str, TabularPolicy]]
    tiny_task: ModularChainTask
    tiny_instance: TaskInstance
    linear: LinearSoftmaxPolicy

    @property
    def budget(self) -> EnumerationBudget:
        return EnumerationBudget(self.task.horizon)

    @property
    def tiny_budget(self) -> EnumerationBudget:
        return EnumerationBudget(self.tiny_task.horizon)


def reference_set(seed: int = 0) -> ReferenceSet:
    """Build the reference policies deterministically from ``seed``."""
    task = ModularChainTask(TaskFamilyConfig(modulus=3, chain_length=(1, 2), filler_count=1, horizon=5, seed=seed))
    instances = task.generate(40)
    corpus = synthesize_corpus(task, instances, rate=0.5, seed=seed, repeats=5)
    fitted = fit_mle(corpus, task.vocab, alpha=0.1, order=2)
    random = TabularPolicy.random(task.vocab, 2, rng_for(seed, "verify", "tabular"), scale=1.0)

    tiny_task = ModularChainTask(TaskFamilyConfig(modulus=2, chain_length=(1, 1), filler_count=1, horizon=3, seed=seed))
    features = FeatureSpec(order=1, bias=False)
    linear = LinearSoftmaxPolicy.random(tiny_task.vocab, features, rng_for(seed, "verify", "linear"), scale=0.5)
    return ReferenceSet(
        task=task,
        instances=instances,
        policies=[("fitted", fitted), ("random", random)],
        tiny_task=tiny_task,
        tiny_instance=tiny_task.make_instance(0, [1]),
        linear=linear,
    )


def _states(ref: ReferenceSet, policy: CondSeqModel, name: str, n: int) -> list[tuple[TaskInstance, State]]:
    return sample_states(policy, ref.instances, n, ref.task.horizon, rng_for(0, "verify_states", name))


class IdentitySuite:
    """
    Runs the checks on a :class:`ReferenceSet` and collects an optional oracle dump.
    """

    def __init__(self, ref: ReferenceSet, *, dump: bool = False) -> None:
        self.ref = ref
        self.dump: list[dict[str, Any]] | None = [] if dump else None
        per_policy = N_STATES // len(ref.policies)
        self._oracles = {name: EnumerationOracle(policy, ref.budget) for name, policy in ref.policies}
        self._states = {name: _states(ref, policy, name, per_policy) for name, policy in ref.policies}

    def _each_state(self):
        for name, policy in self.ref.policies:
            for instance, state in self._states[name]:
                yield name, policy, self._oracles[name], instance, state

    def expected_velocity_identity(self) -> CheckResult:
        worst = 0.0
        for _, _, oracle, instance, state in self._each_state():
            ev = oracle.expected_velocity(state, instance.gold_answer)
            worst = max(worst, abs(ev.expected - ev.neg_kl))
        return _check("expected_velocity_is_neg_kl", worst, 1e-9)

    def velocity_signs(self) -> CheckResult:
        worst = -math.inf
        for _, _, oracle, instance, state in self._each_state():
            ev = oracle.expected_velocity(state, instance.gold_answer)
            _, v_flow = oracle.max_velocity(state, instance.gold_answer)
            worst = max(worst, ev.neg_kl, -v_flow, ev.neg_kl - v_flow)
        return _check("velocity_signs", max(worst, 0.0), 1e-12)

    def bayes_forms_agree(self) -> CheckResult:
        worst = 0.0
        for name, policy, oracle, instance, state in self._each_state():
            answer = instance.gold_answer
            prior = policy.next_token_logprobs(state)
            delta = oracle.velocities(state, answer)
            support = np.isfinite(prior)
            ratio = oracle.exact_bayes_posterior(state, answer)[support] - prior[support]
            worst = max(worst, float(np.max(np.abs(delta[support] - ratio))))
            if self.dump is not None:
                self.dump.append(
                    {
                        "policy": name,
                        "instance": instance.id,
                        "query": list(state.query),
                        "thought": list(state.thought),
                        "log_marginal": oracle.marginal_answer_logprob(state, answer),
                        "velocity": [float(v) if np.isfinite(v) else None for v in delta],
                    }
                )
        return _check("difficulty_delta_vs_bayes", worst, 1e-9)

    def total_probability(self) -> CheckResult:
        worst = 0.0
        for _, policy, oracle, instance, state in self._each_state():
            answer = instance.gold_answer
            joint = policy.next_token_logprobs(state) + oracle.continuation_logprobs(state, answer)
            worst = max(worst, abs(float(logsumexp(joint)) - oracle.marginal_answer_logprob(state, answer)))
        return _check("total_probability", worst, 1e-9)

    def telescoping(self) -> CheckResult:
        worst = 0.0
        per_policy = N_TRAJECTORIES // len(self.ref.policies)
        config = DecodeConfig(strategy=DecodeStrategy.STANDARD_SAMPLE, horizon=self.ref.task.horizon)
        for name, policy in self.ref.policies:
            oracle = self._oracles[name]
            rng = rng_for(0, "verify_trajectories", name)
            for i in range(per_policy):
                instance = self.ref.instances[i % len(self.ref.instances)]
                trajectory = rollout(policy, instance, config, rng=rng).trajectory
                prof = profile(policy, trajectory, PosteriorMode.EXACT_BAYES, AnswerContext(instance, oracle=oracle))
                endpoint = -prof.difficulties[-1] + prof.difficulties[0]
                worst = max(worst, abs(prof.total_flow - endpoint))
        return _check("telescoping", worst, 1e-9)

    @cached_property
    def _gradient(self) -> GradientCheck:
        return gradient_check(self.ref.linear, self.ref.tiny_instance, self.ref.tiny_budget)

    def gradient_decomposition(self) -> list[CheckResult]:
        check = self._gradient
        return [
            _check("gradient_vs_finite_diff", check.fd_error, 1e-4),
            _check("gradient_direct_vs_terms", check.path_error, 1e-9),
        ]

    def stop_gradient(self) -> CheckResult:
        # frozen-baseline differences must fit far better than moving-baseline ones
        check = self._gradient
        return _check("stop_gradient", check.fd_error / max(check.moving_baseline_error, 1e-300), 1e-2)

    def estimator(self) -> CheckResult:
        report = estimator_consistency(
            self.ref.linear,
            self.ref.tiny_instance,
            self.ref.tiny_budget,
            N_ESTIMATOR_SAMPLES,
            rng_for(0, "verify_estimator"),
        )
        return _check("estimator_consistency", report.worst_ratio, 1.0)

    def pass_at_k(self) -> CheckResult:
        mismatches = 0
        for n in range(1, 9):
            for c in range(n + 1):
                outcomes = [True] * c + [False] * (n - c)
                for k in range(1, n + 1):
                    subsets = list(itertools.combinations(outcomes, k))
                    brute = Fraction(sum(any(s) for s in subsets), len(subsets))
                    mismatches += brute != pass_at_k_fraction(n, c, k)
        return _check("pass_at_k_brute_force", float(mismatches), 0.0)

    def normalization(self) -> CheckResult:
        worst = 0.0
        for _, policy, _, _, state in self._each_state():
            worst = max(worst, normalization_error(policy, state))
        return _check("model_normalization", worst, NORMALIZATION_TOL)

    def determinism(self) -> CheckResult:
        again = reference_set(0)
        diffs = [
            float(np.max(np.abs(a.parameters() - b.parameters())))
            for (_, a), (_, b) in zip(self.ref.policies, again.policies)
        ]
        diffs.append(float(np.max(np.abs(self.ref.linear.parameters() - again.linear.parameters()))))
        return _check("seeded_determinism", max(diffs), 0.0)


def normalization_error(policy: CondSeqModel, state: State) -> float:
    """Distance of both heads' total probability from 1 (``nan`` on non-finite output)."""
    nxt = np.asarray(policy.next_token_logprobs(state))
    ans = np.asarray(policy.answer_logprobs(state, force=True))
    if np.any(np.isnan(nxt)) or np.any(np.isnan(ans)):
        return float("nan")
    return max(abs(float(np.exp(nxt).sum()) - 1.0), abs(float(np.exp(ans).sum()) - 1.0))


def checkpoint_check(path: Path) -> CheckResult:
    """Finite parameters and normalized heads on a few states of the checkpoint's vocabulary."""
    name = f"checkpoint:{Path(path).name}"
    try:
        policy = PolicyFactory.load(path)
    except (FlowCotError, FileNotFoundError) as exc:
        logger.error("Cannot load %s: %s", path, exc)
        return CheckResult(name, float("nan"), NORMALIZATION_TOL, False)
    if not np.all(np.isfinite(policy.parameters())):
        return CheckResult(name, float("nan"), NORMALIZATION_TOL, False)
    vocab = policy.vocab
    content = [t for t in vocab.emit_ids if t != vocab.end_id]
    states = [State((t,)) for t in content] + [State((t,), (vocab.end_id,)) for t in content]
    worst = max(normalization_error(policy, state) for state in states)
    return _check(name, worst, NORMALIZATION_TOL)


def run_identity_suite(
    seed: int = 0,
    *,
    checkpoints: Sequence[Path] = (),
    dump_path: Path | None = None,
    show_progress: bool = False,
) -> list[CheckResult]:
    """
    Run every identity check, plus one check per supplied checkpoint.

    A check that raises is reported as failed.
    """
    suite = IdentitySuite(reference_set(seed), dump=dump_path is not None)
    steps: list[tuple[str, Callable[[], CheckResult | list[CheckResult]]]] = [
        ("expected_velocity_is_neg_kl", suite.expected_velocity_identity),
        ("velocity_signs", suite.velocity_signs),
        ("difficulty_delta_vs_bayes", suite.bayes_forms_agree),
        ("telescoping", suite.telescoping),
        ("total_probability", suite.total_probability),
        ("gradient_decomposition", suite.gradient_decomposition),
        ("stop_gradient", suite.stop_gradient),
        ("estimator_consistency", suite.estimator),
        ("pass_at_k_brute_force", suite.pass_at_k),
        ("model_normalization", suite.normalization),
        ("seeded_determinism", suite.determinism),
    ]
    steps += [(f"checkpoint:{Path(p).name}", lambda p=p: checkpoint_check(Path(p))) for p in checkpoints]

    results: list[CheckResult] = []
    for name, fn in tqdm(steps, desc="verify", disable=not show_progress):
        try:
            outcome = fn()
        except (FlowCotError, ValueError, ArithmeticError) as exc:
            logger.error("Check %s raised: %s", name, exc)
            outcome = CheckResult(name, float("nan"), 0.0, False)
        results.extend(outcome if isinstance(outcome, list) else [outcome])

    if dump_path is not None:
        dump_path = Path(dump_path)
        dump_path.parent.mkdir(parents=True, exist_ok=True)
        dump_path.write_text(
            json.dumps({"states": suite.dump, "checks": [r.to_dict() for r in results]}, allow_nan=True),
            encoding="utf-8",
        )
        logger.info("Wrote oracle dump to %s", dump_path)
    return results
