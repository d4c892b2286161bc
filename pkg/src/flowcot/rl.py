"""
Flow-reward reinforcement learning.

The update for one prompt and ``G`` sampled thoughts is::

    term_a = mean_g  A_g * sum_t grad log pi(s_t)
    term_b = mean_g  M_g * (grad log p(y|x,s) + sum_k w_k grad log pi(s_k))

with group-normalized advantages ``A``, quality gate ``M`` and time
weights ``w_k = (k-1)/T``. ``outcome_sparse`` replaces the reward with the
0/1 verifier outcome and drops ``term_b``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Literal, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from flowcot.decode import DecodeConfig, DecodeStrategy, rollout
from flowcot.models.model_base import CondSeqModel, DifferentiablePolicy, State, Trajectory
from flowcot.oracle import (
    EnumerationBudget,
    EnumerationOracle,
    enumerate_paths,
    exact_objective_and_gradient,
    surrogate_objective,
)
from flowcot.tasks.task_base import TaskFamily, TaskInstance
from flowcot.utils.utils import (
    LOG_FLOOR,
    ConfigurationError,
    DivergenceError,
    clamp_log,
    fsum_mean,
    relative_error,
    rng_for,
)

logger = logging.getLogger(__name__)

ADVANTAGE_STD_FLOOR = 1e-8


class GateKind(str, Enum):
    RELU_RELATIVE = "relu_relative"
    BINARY_RELATIVE = "binary_relative"
    RATIO = "ratio"
    ABSOLUTE = "absolute"


class RewardMode(str, Enum):
    FLOW_DENSE = "flow_dense"
    OUTCOME_SPARSE = "outcome_sparse"


RewardBackend = Literal["oracle", "forced"]


@dataclass(frozen=True, slots=True)
class FlowReward:
    """
    Telescoping flow reward of one trajectory.

    ``baseline[i]`` holds ``log p(y | I_i)`` for ``i = 0..T-1``; these are
    stop-gradient terms and no update reads them.
    """

    per_step: tuple[float, ...]
    baseline: tuple[float, ...]
    terminal: float
    total: float
    clamped: bool = False


def _prefixes(trajectory: Trajectory) -> list[State]:
    states = [State(trajectory.state.query)]
    for token in trajectory.state.thought:
        states.append(states[-1].extend(token))
    return states


def global_reward(
    model: CondSeqModel,
    trajectory: Trajectory,
    instance: TaskInstance,
    *,
    backend: RewardBackend = "oracle",
    oracle: EnumerationOracle | None = None,
) -> FlowReward:
    """
    Per-step velocities ``log p(y|I_i) - log p(y|I_{i-1})`` and their sum.

    Parameters
    ----------
    model : CondSeqModel
        Policy the answer likelihoods are read from.
    trajectory : Trajectory
        Scored rollout.
    instance : TaskInstance
        Supplies ``y``.
    backend : {"oracle", "forced"}, default="oracle"
        ``"oracle"`` uses exact marginals; ``"forced"`` answers immediately
        at every prefix.
    oracle : EnumerationOracle | None
        Required by the oracle backend.

    Returns
    -------
    FlowReward
        Likelihoods below :data:`LOG_FLOOR` are clamped and flagged.
    """
    answer = instance.gold_answer
    states = _prefixes(trajectory)

    if backend == "oracle":
        if oracle is None:
            raise ConfigurationError("The oracle reward backend needs an oracle")
        raw = [oracle.marginal_answer_logprob(s, answer) for s in states]
    elif backend == "forced":
        raw = [model.answer_logprob(s, answer, force=True) for s in states]
    else:
        raise ValueError(f"Unknown reward backend: {backend}")

    clamped_any = False
    values = []
    for value in raw:
        value, clamped = clamp_log(value)
        values.append(value)
        clamped_any |= clamped
    if clamped_any:
        logger.warning("Answer likelihood clamped at %.0f for instance %s", LOG_FLOOR, instance.id)

    per_step = tuple(values[i] - values[i - 1] for i in range(1, len(values)))
    return FlowReward(
        per_step=per_step,
        baseline=tuple(values[:-1]),
        terminal=values[-1],
        total=math.fsum(per_step),
        clamped=clamped_any,
    )


def group_advantage(rewards: Sequence[float]) -> np.ndarray:
    """
    ``(R - mean) / std`` with the population std floored at 1e-8.

    Examples
    --------
    >>> group_advantage([1.0, -1.0]).tolist()
    [1.0, -1.0]
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    if rewards.size < 2:
        raise ValueError("Group-relative advantages need at least 2 rewards")
    if np.all(rewards == rewards[0]):
        return np.zeros_like(rewards)
    return (rewards - rewards.mean()) / max(float(rewards.std()), ADVANTAGE_STD_FLOOR)


def quality_gate(log_p_answer: float, mu: float, kind: GateKind | str) -> float:
    """
    Trajectory-level multiplier on the flow term.

    relu_relative: ``max(0, log p - mu)``; binary_relative: ``1[log p > mu]``;
    ratio: ``exp(log p - mu)`` (unbounded); absolute: ``exp(log p)``.
    """
    kind = GateKind(kind)
    if kind is GateKind.RELU_RELATIVE:
        return max(0.0, log_p_answer - mu)
    if kind is GateKind.BINARY_RELATIVE:
        return 1.0 if log_p_answer > mu else 0.0
    with np.errstate(over="ignore"):
        if kind is GateKind.RATIO:
            return float(np.exp(log_p_answer - mu))
        return float(np.exp(log_p_answer))


def time_weights(length: int) -> np.ndarray:
    """``w_k = (k-1)/T`` for ``k = 1..T``."""
    if length < 0:
        raise ValueError(f"length must be >= 0, got {length}")
    if length == 0:
        return np.zeros(0)
    return np.arange(length, dtype=np.float64) / length


class TrainConfig(BaseModel):
    """
    Flow-RL training configuration.

    The desk-scale learning rate default is 1.0; :meth:`llm_preset` gives
    the large-model setting. ``reward_backend`` only affects the reported
    reward: the update reads terminal answer likelihoods alone.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    group_size: int = Field(8, ge=2)
    prompts_per_batch: int = Field(8, ge=1)
    learning_rate: float = Field(1.0, ge=0.0)
    steps: int = Field(50, ge=0)
    temperature: float = Field(1.0, gt=0.0)
    gate: GateKind = GateKind.RELU_RELATIVE
    reward_mode: RewardMode = RewardMode.FLOW_DENSE
    reward_backend: RewardBackend = "forced"
    scale_answer_term: bool = False
    divergence_threshold: float = Field(1e6, gt=0.0)
    eval_every: int = Field(1, ge=1)
    checkpoint_every: int = Field(0, ge=0)
    seed: int = Field(0, ge=0)

    @classmethod
    def llm_preset(cls, **overrides: Any) -> "TrainConfig":
        """Large-model settings: 8 responses per prompt, learning rate 1e-6."""
        return cls(**{"group_size": 8, "learning_rate": 1e-6, **overrides})


@dataclass(slots=True)
class ScoredRollout:
    """
    A rollout with everything the update reads, plus the reward it reports.

    ``target`` is the gold answer the rollout was scored against and
    ``terminal_logprob`` is ``log p(target | x, s)``.
    """

    trajectory: Trajectory
    target: int
    terminal_logprob: float
    reward: FlowReward
    correct: bool


@dataclass(slots=True)
class FlowGradient:
    """
    One update direction.

    ``gates``, ``mu`` and ``advantages`` are per prompt; ``weights`` holds the
    time weights of each rollout in prompt order.
    """

    term_a: np.ndarray
    term_b: np.ndarray
    gates: list[np.ndarray] = field(default_factory=list)
    mu: list[float] = field(default_factory=list)
    advantages: list[np.ndarray] = field(default_factory=list)
    weights: list[np.ndarray] = field(default_factory=list)

    @property
    def total(self) -> np.ndarray:
        return self.term_a + self.term_b

    @property
    def gate_mean(self) -> float:
        if not self.gates:
            return 0.0
        return fsum_mean(float(g) for group in self.gates for g in group)


def _step_gradients(policy: DifferentiablePolicy, trajectory: Trajectory) -> list[np.ndarray]:
    states = _prefixes(trajectory)
    return [policy.grad_log_next(states[k], token) for k, token in enumerate(trajectory.state.thought)]


def flow_update(
    policy: DifferentiablePolicy,
    groups: Sequence[Sequence[ScoredRollout]],
    config: TrainConfig,
) -> FlowGradient:
    """
    Combine scored groups into Term A and Term B.

    Both terms are averaged over the rollouts of a prompt, then over
    prompts. Advantages come from the terminal answer log-likelihood
    (flow_dense) or the verifier outcome (outcome_sparse); ``mu`` is the
    group mean of the terminal log-likelihoods. Stored baseline terms are
    never read.
    """
    n_params = policy.n_parameters
    result = FlowGradient(term_a=np.zeros(n_params), term_b=np.zeros(n_params))
    flow_dense = config.reward_mode is RewardMode.FLOW_DENSE

    for group in groups:
        terminal = np.array([r.terminal_logprob for r in group])
        if flow_dense:
            advantages = group_advantage(terminal)
        else:
            advantages = group_advantage([1.0 if r.correct else 0.0 for r in group])
        mu = float(terminal.mean())
        gates = np.zeros(len(group))

        group_a = np.zeros(n_params)
        group_b = np.zeros(n_params)
        for g, scored in enumerate(group):
            trajectory = scored.trajectory
            step_grads = _step_gradients(policy, trajectory)
            weights = time_weights(len(step_grads))
            result.weights.append(weights)

            if advantages[g] != 0.0:
                score = np.sum(step_grads, axis=0) if step_grads else np.zeros(n_params)
                if not flow_dense:
                    # the sampled answer is part of the response in the outcome baseline
                    score = score + policy.grad_log_answer(trajectory.state, trajectory.answer, force=True)
                group_a += advantages[g] * score

            if not flow_dense:
                continue
            gates[g] = quality_gate(scored.terminal_logprob, mu, config.gate)
            if gates[g] == 0.0:
                continue
            answer_scale = 1.0 / len(step_grads) if config.scale_answer_term and step_grads else 1.0
            flow = answer_scale * policy.grad_log_answer(trajectory.state, scored.target, force=True)
            for w, grad in zip(weights, step_grads):
                if w:
                    flow = flow + w * grad
            group_b += gates[g] * flow

        result.term_a += group_a / len(group)
        result.term_b += group_b / len(group)
        result.advantages.append(advantages)
        result.gates.append(gates)
        result.mu.append(mu)

    if groups:
        result.term_a /= len(groups)
        result.term_b /= len(groups)
    return result


def score_rollouts(
    policy: DifferentiablePolicy,
    task: TaskFamily,
    instance: TaskInstance,
    config: TrainConfig,
    rng: np.random.Generator,
    *,
    oracle: EnumerationOracle | None = None,
) -> list[ScoredRollout]:
    """Sample ``G`` thoughts for one prompt at the rollout temperature and score them."""
    decode_config = DecodeConfig(
        strategy=DecodeStrategy.STANDARD_SAMPLE,
        temperature=config.temperature,
        horizon=task.horizon,
        seed=config.seed,
    )
    scored = []
    for _ in range(config.group_size):
        trajectory = rollout(policy, instance, decode_config, rng=rng).trajectory
        scored.append(
            ScoredRollout(
                trajectory=trajectory,
                target=instance.gold_answer,
                terminal_logprob=policy.answer_logprob(trajectory.state, instance.gold_answer, force=True),
                reward=global_reward(policy, trajectory, instance, backend=config.reward_backend, oracle=oracle),
                correct=task.verify_answer(instance, trajectory.answer),
            )
        )
    return scored


@dataclass(slots=True)
class StepResult:
    policy: DifferentiablePolicy
    gradient: FlowGradient
    groups: list[list[ScoredRollout]]

    @property
    def reward_mean(self) -> float:
        return fsum_mean(r.reward.total for group in self.groups for r in group)


def apply_update(
    policy: DifferentiablePolicy,
    gradient: FlowGradient,
    config: TrainConfig,
    *,
    step: int = 0,
) -> DifferentiablePolicy:
    """
    Gradient ascent ``theta + lr * (term_a + term_b)`` with the divergence guard.

    A zero learning rate returns ``policy`` itself.

    Raises
    ------
    DivergenceError
        If any parameter is non-finite or exceeds ``config.divergence_threshold``
        in magnitude.
    """
    if config.learning_rate == 0.0:
        return policy
    with np.errstate(over="ignore", invalid="ignore"):
        theta = policy.parameters() + config.learning_rate * gradient.total
    finite = bool(np.all(np.isfinite(theta)))
    magnitude = float(np.max(np.abs(theta))) if finite else math.inf
    if not finite or magnitude > config.divergence_threshold:
        raise DivergenceError(
            f"{config.gate.value} gate blow-up at step {step}: max |theta| = {magnitude:.3g}",
            step=step,
            gate=config.gate.value,
            magnitude=magnitude,
        )
    return policy.with_parameters(theta)


def flow_gradient_step(
    policy: DifferentiablePolicy,
    task: TaskFamily,
    instances: Sequence[TaskInstance],
    config: TrainConfig,
    *,
    step: int = 0,
    oracle: EnumerationOracle | None = None,
) -> StepResult:
    """
    Roll out, score, and take one ascent step.

    Each prompt gets its own stream ``("train", step, instance.id)`` under
    ``config.seed``, so runs that differ only in gate or reward mode see the
    same randomness at step 0.
    """
    groups = [
        score_rollouts(policy, task, instance, config, rng_for(config.seed, "train", step, instance.id), oracle=oracle)
        for instance in instances
    ]
    gradient = flow_update(policy, groups, config)
    updated = apply_update(policy, gradient, config, step=step)
    return StepResult(policy=updated, gradient=gradient, groups=groups)


def greedy_evaluation(
    policy: CondSeqModel,
    task: TaskFamily,
    instances: Sequence[TaskInstance],
) -> tuple[float, float]:
    """Pass@1 and mean thought length of greedy decoding."""
    config = DecodeConfig(strategy=DecodeStrategy.STANDARD_GREEDY, horizon=task.horizon)
    correct, lengths = [], []
    for instance in instances:
        trajectory = rollout(policy, instance, config).trajectory
        correct.append(1.0 if task.verify_answer(instance, trajectory.answer) else 0.0)
        lengths.append(float(trajectory.length))
    return fsum_mean(correct), fsum_mean(lengths)


class TrainRecord(BaseModel):
    """One row of the training curve."""

    model_config = ConfigDict(frozen=True)

    step: int
    reward_mean: float
    pass1: float
    length_mean: float
    gate_mean: float
    term_a_norm: float
    term_b_norm: float

    def to_row(self) -> list[Any]:
        return [getattr(self, name) for name in CURVE_HEADER]


CURVE_HEADER = ["step", "reward_mean", "pass1", "length_mean", "gate_mean", "term_a_norm", "term_b_norm"]


@dataclass(slots=True)
class TrainResult:
    policy: DifferentiablePolicy
    records: list[TrainRecord]


def train(
    policy: DifferentiablePolicy,
    task: TaskFamily,
    config: TrainConfig,
    train_instances: Sequence[TaskInstance],
    heldout: Sequence[TaskInstance],
    *,
    on_step: Callable[[TrainRecord, DifferentiablePolicy], None] | None = None,
    show_progress: bool = False,
) -> TrainResult:
    """
    Run ``config.steps`` flow-RL steps.

    Every step draws ``prompts_per_batch`` prompts from ``train_instances``,
    updates the policy and records the mean reward, held-out greedy pass@1
    and length, the mean gate and the norms of both terms.

    Parameters
    ----------
    policy : DifferentiablePolicy
        Initial policy.
    task : TaskFamily
        Verifier and horizon.
    config : TrainConfig
        Hyperparameters.
    train_instances, heldout : Sequence[TaskInstance]
        Training prompts and evaluation set.
    on_step : callable, optional
        Called with each record and the updated policy.
    show_progress : bool, default=False
        Show a tqdm progress bar.

    Returns
    -------
    TrainResult
        Final policy and the curve.

    Raises
    ------
    DivergenceError
        With the records completed before the blow-up.
    """
    if not train_instances:
        raise ValueError("train needs at least one training instance")
    records: list[TrainRecord] = []
    pass1, length_mean = greedy_evaluation(policy, task, heldout) if heldout else (float("nan"), float("nan"))
    oracle = None
    batch_size = min(config.prompts_per_batch, len(train_instances))

    for step in tqdm(range(1, config.steps + 1), desc="train", disable=not show_progress):
        picks = rng_for(config.seed, "batch", step).choice(len(train_instances), size=batch_size, replace=False)
        batch = [train_instances[int(i)] for i in sorted(picks)]
        if config.reward_backend == "oracle":
            oracle = EnumerationOracle(policy, EnumerationBudget(task.horizon))
        try:
            result = flow_gradient_step(policy, task, batch, config, step=step, oracle=oracle)
        except DivergenceError as exc:
            logger.warning("Divergence guard tripped at step %d (%s gate)", step, config.gate.value)
            raise DivergenceError(
                str(exc), step=exc.step, gate=exc.gate, magnitude=exc.magnitude, records=records
            ) from exc
        policy = result.policy

        if heldout and (step % config.eval_every == 0 or step == config.steps):
            pass1, length_mean = greedy_evaluation(policy, task, heldout)
        record = TrainRecord(
            step=step,
            reward_mean=result.reward_mean,
            pass1=pass1,
            length_mean=length_mean,
            gate_mean=result.gradient.gate_mean,
            term_a_norm=float(np.linalg.norm(result.gradient.term_a)),
            term_b_norm=float(np.linalg.norm(result.gradient.term_b)),
        )
        records.append(record)
        logger.debug("step %d: %s", step, record.model_dump())
        if on_step is not None:
            on_step(record, policy)

    return TrainResult(policy=policy, records=records)


# --- estimator checks against the oracle -------------------------------------


def importance_weighted_flow_estimate(
    policy: DifferentiablePolicy,
    instance: TaskInstance,
    thought: Sequence[int],
    terminated: bool,
    oracle: EnumerationOracle,
) -> np.ndarray:
    """
    Single-sample flow estimate before the gate substitution.

    ``sum_i M_i (sum_{k>i} grad log pi(s_k) + grad log p(y|x,s))`` with exact
    weights ``M_i = p(y|x,s) / p(y|I_i)``; its expectation is
    ``sum_i grad log p(y|I_i)``.
    """
    answer = instance.gold_answer
    states = [State(instance.query)]
    for token in thought:
        states.append(states[-1].extend(token))
    log_marginals = [oracle.marginal_answer_logprob(s, answer) for s in states]
    step_grads = [policy.grad_log_next(states[k], token) for k, token in enumerate(thought)]
    grad_answer = policy.grad_log_answer(states[-1], answer, force=not terminated)

    estimate = np.zeros(policy.n_parameters)
    tail = np.zeros(policy.n_parameters)
    for i in range(len(states) - 1, 0, -1):
        estimate += math.exp(log_marginals[-1] - log_marginals[i]) * (tail + grad_answer)
        tail = tail + step_grads[i - 1]
    return estimate


@dataclass(frozen=True, slots=True)
class ConsistencyReport:
    """
    Sampled flow estimate against the exact marginal-gradient sum.

    Coordinate ``j`` passes when its error is within the larger of
    ``relative_tolerance * |exact_j|``, ``z * stderr_j`` and ``atol``.
    ``stderr`` is the exact standard error of the sample mean, so coordinates
    with a near-zero gradient are held to their sampling noise instead of
    a vanishing relative bound.
    """

    estimate: np.ndarray
    exact: np.ndarray
    stderr: np.ndarray
    relative_tolerance: float
    z: float
    atol: float

    @property
    def errors(self) -> np.ndarray:
        return np.abs(self.estimate - self.exact)

    @property
    def tolerance(self) -> np.ndarray:
        return np.maximum(np.maximum(self.relative_tolerance * np.abs(self.exact), self.z * self.stderr), self.atol)

    @property
    def worst_ratio(self) -> float:
        """Largest error-to-tolerance ratio; at most 1 when every coordinate passes."""
        return float(np.max(self.errors / self.tolerance, initial=0.0))

    @property
    def max_relative_error(self) -> float:
        nonzero = np.abs(self.exact) > self.atol
        if not nonzero.any():
            return 0.0
        return float(np.max(self.errors[nonzero] / np.abs(self.exact[nonzero])))

    @property
    def n_failing(self) -> int:
        return int(np.count_nonzero(self.errors > self.tolerance))

    @property
    def passed(self) -> bool:
        return self.n_failing == 0


def estimator_consistency(
    policy: DifferentiablePolicy,
    instance: TaskInstance,
    budget: EnumerationBudget,
    n_samples: int,
    rng: np.random.Generator,
    *,
    relative_tolerance: float = 0.05,
    z: float = 4.0,
    atol: float = 1e-10,
) -> ConsistencyReport:
    """
    Mean of ``n_samples`` single-sample estimates against ``sum_i grad log p(y|I_i)``.

    Trajectories are drawn from the enumerated trajectory distribution; the
    reference is the oracle's marginal-gradient recursion, not the importance
    weighted sum. Each coordinate is checked on its own, see
    :class:`ConsistencyReport`.
    """
    paths = enumerate_paths(policy, State(instance.query), budget)
    probs = np.exp([path.log_prob for path in paths])
    probs = probs / probs.sum()
    counts = np.bincount(rng.choice(len(paths), size=n_samples, p=probs), minlength=len(paths))

    oracle = EnumerationOracle(policy, budget)
    singles = np.stack(
        [importance_weighted_flow_estimate(policy, instance, p.tokens, p.terminated, oracle) for p in paths]
    )
    estimate = counts @ singles / n_samples
    mean = probs @ singles
    variance = probs @ (singles - mean) ** 2

    exact = exact_objective_and_gradient(policy, instance, budget).flow_marginal
    return ConsistencyReport(
        estimate=estimate,
        exact=exact,
        stderr=np.sqrt(variance / n_samples),
        relative_tolerance=relative_tolerance,
        z=z,
        atol=atol,
    )


@dataclass(frozen=True, slots=True)
class GradientCheck:
    finite_difference: np.ndarray
    moving_baseline: np.ndarray
    direct: np.ndarray
    decomposed: np.ndarray
    fd_error: float
    moving_baseline_error: float
    path_error: float


def gradient_check(
    policy: DifferentiablePolicy,
    instance: TaskInstance,
    budget: EnumerationBudget,
    *,
    eps: float = 1e-5,
) -> GradientCheck:
    """
    Compare Term A + Term B with central differences of the stop-gradient objective.

    Returns the worst per-coordinate relative error of the decomposed
    gradient against finite differences and against the direct gradient.
    ``moving_baseline`` differentiates the same objective with the baselines
    recomputed at every perturbed policy; the decomposed gradient must match
    the frozen-baseline differences and not these.
    """
    exact = exact_objective_and_gradient(policy, instance, budget)
    baseline = EnumerationOracle(policy, budget)
    theta = policy.parameters()
    fd = np.zeros_like(theta)
    moving = np.zeros_like(theta)
    for j in range(theta.size):
        bump = np.zeros_like(theta)
        bump[j] = eps
        upper_policy = policy.with_parameters(theta + bump)
        lower_policy = policy.with_parameters(theta - bump)
        upper = surrogate_objective(upper_policy, instance, budget, baseline)
        lower = surrogate_objective(lower_policy, instance, budget, baseline)
        fd[j] = (upper - lower) / (2 * eps)
        upper = surrogate_objective(upper_policy, instance, budget, EnumerationOracle(upper_policy, budget))
        lower = surrogate_objective(lower_policy, instance, budget, EnumerationOracle(lower_policy, budget))
        moving[j] = (upper - lower) / (2 * eps)
    decomposed = exact.decomposed
    return GradientCheck(
        finite_difference=fd,
        moving_baseline=moving,
        direct=exact.direct,
        decomposed=decomposed,
        fd_error=float(np.max(relative_error(decomposed, fd))),
        moving_baseline_error=float(np.max(relative_error(decomposed, moving))),
        path_error=float(np.max(relative_error(decomposed, exact.direct))),
    )
