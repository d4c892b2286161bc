"""
Exact enumeration ground truth.

Every quantity here is computed by summing over all continuations of a
state up to the horizon, in log domain, with memoisation on the model's
context key and the remaining horizon. Monte Carlo is offered only as a
cross-check path.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Hashable, Iterable, Sequence

import numpy as np
from scipy.special import logsumexp

from flowcot.models.model_base import CondSeqModel, DifferentiablePolicy, State
from flowcot.tasks.task_base import TaskInstance
from flowcot.utils.utils import (
    LOG_FLOOR,
    BudgetExceededError,
    StateError,
    ZeroProbabilityConditioningError,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True, slots=True)
class EnumerationBudget:
    """
    Limits for exact enumeration.

    Parameters
    ----------
    horizon : int
        ``T_max``: the thought is force-terminated after this many tokens.
    max_trajectories : int, default=10**6
        Cap on enumerated trajectories (objective enumeration) and on
        memoised (context, remaining) nodes (marginals).
    """

    horizon: int
    max_trajectories: int = 10**6

    def __post_init__(self) -> None:
        if self.horizon < 0:
            raise ValueError(f"horizon must be >= 0, got {self.horizon}")
        if self.max_trajectories < 1:
            raise ValueError(f"max_trajectories must be >= 1, got {self.max_trajectories}")

    def remaining(self, state: State) -> int:
        remaining = self.horizon - state.step_index
        if remaining < 0:
            raise StateError(f"State has {state.step_index} thought tokens, beyond the horizon {self.horizon}")
        return remaining


@dataclass(frozen=True, slots=True)
class ExpectedVelocity:
    """Expected velocity under the prior, computed along two independent paths."""

    expected: float
    neg_kl: float

    @property
    def kl(self) -> float:
        return -self.neg_kl


@dataclass(frozen=True, slots=True)
class MonteCarloEstimate:
    """Sampled estimate of ``p(y | I)`` with its standard error (probability scale)."""

    probability: float
    stderr: float
    n_samples: int


class EnumerationOracle:
    """
    Exact answer marginals and posteriors for one model.

    The memo maps ``(model.context_key(state), remaining horizon)`` to the
    vector of answer log-marginals, so one oracle can serve every state and
    answer of a run. Memo entries are pure functions of their key, which
    keeps concurrent readers consistent.

    Parameters
    ----------
    model : CondSeqModel
        The prior policy.
    budget : EnumerationBudget
        Horizon and node cap.
    """

    def __init__(self, model: CondSeqModel, budget: EnumerationBudget) -> None:
        self._model = model
        self._budget = budget
        self._vocab = model.vocab
        self._memo: dict[tuple[Hashable, int], np.ndarray] = {}

    @property
    def model(self) -> CondSeqModel:
        return self._model

    @property
    def budget(self) -> EnumerationBudget:
        return self._budget

    # --- marginals ---------------------------------------------------------

    def answer_marginals(self, state: State) -> np.ndarray:
        """Log ``p(a | I)`` for every answer ``a`` in the answer block."""
        return self._marginals(state, self._budget.remaining(state))

    def marginal_answer_logprob(self, state: State, answer: int) -> float:
        """
        Exact ``log p(answer | state)`` marginalised over all continuations.

        Terminal states read the answer head directly; states at the horizon
        answer immediately (forced head).

        Raises
        ------
        BudgetExceededError
            If the memo would grow past ``budget.max_trajectories`` nodes.
        """
        return float(self.answer_marginals(state)[self._vocab.answer_index(answer)])

    def _marginals(self, state: State, remaining: int) -> np.ndarray:
        key = (self._model.context_key(state), remaining)
        cached = self._memo.get(key)
        if cached is not None:
            return cached

        if self._vocab.is_terminal(state):
            value = np.array(self._model.answer_logprobs(state), dtype=np.float64)
        elif remaining == 0:
            value = np.array(self._model.answer_logprobs(state, force=True), dtype=np.float64)
        else:
            value = logsumexp(self._joint_rows(state, remaining), axis=0)

        if len(self._memo) >= self._budget.max_trajectories:
            required = sum(self._vocab.n_emit**depth for depth in range(self._budget.horizon + 1))
            raise BudgetExceededError(
                f"Exact marginalisation needs more than {self._budget.max_trajectories} nodes "
                f"(worst case {required})",
                required=required,
            )
        value.setflags(write=False)
        self._memo[key] = value
        return value

    def _joint_rows(self, state: State, remaining: int) -> np.ndarray:
        """Rows ``log pi(t | I) + log p(a | I, t)`` in token-id order."""
        prior = self._model.next_token_logprobs(state)
        rows = [
            prior[token] + self._marginals(state.extend(token), remaining - 1)
            for token in self._vocab.emit_ids
            if prior[token] > -np.inf
        ]
        return np.stack(rows)

    def continuation_logprobs(self, state: State, answer: int) -> np.ndarray:
        """
        ``log p(answer | I, t)`` for every next token ``t``.

        Entries for tokens the prior never emits are ``-inf``.
        """
        remaining = self._budget.remaining(state)
        self._require_open(state, remaining)
        column = self._vocab.answer_index(answer)
        prior = self._model.next_token_logprobs(state)
        out = np.full(self._vocab.size, -np.inf)
        for token in self._vocab.emit_ids:
            if prior[token] > -np.inf:
                out[token] = self._marginals(state.extend(token), remaining - 1)[column]
        return out

    def _require_open(self, state: State, remaining: int) -> None:
        if self._vocab.is_terminal(state) or remaining == 0:
            raise StateError("The state has no next token: it is terminal or at the horizon")

    # --- posterior and velocities ------------------------------------------

    def exact_bayes_posterior(self, state: State, answer: int) -> np.ndarray:
        """
        ``log p(t | I, y) = log pi(t | I) + log p(y | I, t) - log p(y | I)``.

        Raises
        ------
        ZeroProbabilityConditioningError
            If ``p(y | I)`` is below the clamp floor.
        """
        continuation = self.continuation_logprobs(state, answer)
        marginal = self.marginal_answer_logprob(state, answer)
        if not marginal > LOG_FLOOR:
            raise ZeroProbabilityConditioningError(
                f"zero-probability conditioning: log p(y|I) = {marginal} for answer "
                f"{self._vocab.describe(answer)}"
            )
        prior = self._model.next_token_logprobs(state)
        return prior + continuation - marginal

    def velocities(self, state: State, answer: int) -> np.ndarray:
        """
        Difficulty-delta velocity ``log p(y | I, t) - log p(y | I)`` per token.

        Tokens the prior cannot emit get ``-inf``.
        """
        continuation = self.continuation_logprobs(state, answer)
        return continuation - self.marginal_answer_logprob(state, answer)

    def expected_velocity(self, state: State, answer: int) -> ExpectedVelocity:
        """
        ``E_prior[v]`` and ``-KL(prior || posterior)``, computed independently.

        The first sums prior-weighted difficulty deltas, the second compares
        the prior with :meth:`exact_bayes_posterior`.
        """
        prior = self._model.next_token_logprobs(state)
        support = np.isfinite(prior)
        weights = np.exp(prior[support])
        deltas = self.velocities(state, answer)[support]
        posterior = self.exact_bayes_posterior(state, answer)[support]
        expected = math.fsum(weights * deltas)
        kl = math.fsum(weights * (prior[support] - posterior))
        return ExpectedVelocity(expected=expected, neg_kl=-kl)

    def max_velocity(
        self,
        state: State,
        answer: int,
        candidates: Iterable[int] | None = None,
    ) -> tuple[int, float]:
        """
        Best token by difficulty-delta velocity; ties go to the lowest id.

        Parameters
        ----------
        candidates : Iterable[int] | None
            Restriction of the search; ``None`` means every token the prior
            can emit.

        Raises
        ------
        ValueError
            If the candidate set is empty.
        """
        velocities = self.velocities(state, answer)
        if candidates is None:
            pool = [t for t in self._vocab.emit_ids if np.isfinite(velocities[t])]
        else:
            pool = sorted(set(int(t) for t in candidates))
        if not pool:
            raise ValueError("max_velocity needs a non-empty candidate set")
        best = pool[0]
        for token in pool[1:]:
            if velocities[token] > velocities[best]:
                best = token
        return best, float(velocities[best])

    # --- Monte Carlo cross-check -------------------------------------------

    def monte_carlo_answer_logprob(
        self,
        state: State,
        answer: int,
        n_samples: int,
        rng: np.random.Generator,
    ) -> MonteCarloEstimate:
        """
        Probability-weighted sampling estimate of ``p(answer | state)``.

        Each sample rolls the prior forward to end-of-thought or the horizon
        and scores the answer head's probability of ``answer``; the mean is
        unbiased for the exact marginal.
        """
        if n_samples < 2:
            raise ValueError("Monte Carlo needs at least 2 samples")
        emit = np.array(self._vocab.emit_ids)
        column = self._vocab.answer_index(answer)
        values = np.empty(n_samples)
        for i in range(n_samples):
            current = state
            while not self._vocab.is_terminal(current) and current.step_index < self._budget.horizon:
                probs = np.exp(self._model.next_token_logprobs(current)[emit])
                current = current.extend(int(emit[rng.choice(emit.size, p=probs / probs.sum())]))
            terminal = self._vocab.is_terminal(current)
            values[i] = math.exp(self._model.answer_logprobs(current, force=not terminal)[column])
        return MonteCarloEstimate(
            probability=float(values.mean()),
            stderr=float(values.std(ddof=1) / math.sqrt(n_samples)),
            n_samples=n_samples,
        )


# --- trajectory enumeration and the exact RL objective -----------------------


@dataclass(frozen=True, slots=True)
class EnumeratedPath:
    """One complete thought with its probability under the enumerating policy."""

    tokens: tuple[int, ...]
    log_prob: float
    terminated: bool


def enumerate_paths(model: CondSeqModel, state: State, budget: EnumerationBudget) -> list[EnumeratedPath]:
    """
    Every thought continuation of ``state`` with non-zero probability.

    Paths end at end-of-thought or at the horizon and are listed in
    depth-first token-id order.

    Raises
    ------
    BudgetExceededError
        If ``n_emit ** remaining`` exceeds ``budget.max_trajectories``.
    """
    vocab = model.vocab
    remaining = budget.remaining(state)
    required = vocab.n_emit**remaining
    if required > budget.max_trajectories:
        raise BudgetExceededError(
            f"Enumerating {vocab.n_emit}^{remaining} = {required} trajectories exceeds the budget "
            f"of {budget.max_trajectories}",
            required=required,
        )

    paths: list[EnumeratedPath] = []

    def visit(current: State, log_prob: float) -> None:
        if vocab.is_terminal(current):
            paths.append(EnumeratedPath(current.thought[state.step_index :], log_prob, True))
            return
        if current.step_index >= budget.horizon:
            paths.append(EnumeratedPath(current.thought[state.step_index :], log_prob, False))
            return
        prior = model.next_token_logprobs(current)
        for token in vocab.emit_ids:
            if prior[token] > -np.inf:
                visit(current.extend(token), log_prob + float(prior[token]))

    visit(state, 0.0)
    return paths


@dataclass(frozen=True, slots=True)
class ExactGradient:
    """
    Exact objective and its gradient along two independent routes.

    Attributes
    ----------
    objective : float
        ``J = sum_traj pi(traj) * R_global(traj)``.
    direct : np.ndarray
        Gradient from differentiating the enumerated sum, with answer
        marginals differentiated through their own recursion.
    term_a : np.ndarray
        ``sum_traj pi * grad log pi(traj) * (R - J)``.
    term_b : np.ndarray
        ``sum_traj pi * sum_i M_i (sum_{k>i} grad log pi(s_k) + grad log p(y|x,s))``
        with exact importance weights ``M_i = p(y|x,s) / p(y|I_i)``.
    flow_marginal : np.ndarray
        ``sum_traj pi * sum_i grad log p(y|I_i)`` from the marginal recursion;
        equal to ``term_b``, computed without importance weights.
    n_trajectories : int
        Number of enumerated trajectories.
    """

    objective: float
    direct: np.ndarray
    term_a: np.ndarray
    term_b: np.ndarray
    flow_marginal: np.ndarray
    n_trajectories: int

    @property
    def decomposed(self) -> np.ndarray:
        return self.term_a + self.term_b


class _MarginalGradient:
    """Probability-domain recursion for ``p(y | I)`` and its parameter gradient."""

    def __init__(self, policy: DifferentiablePolicy, answer: int, budget: EnumerationBudget) -> None:
        self._policy = policy
        self._answer = answer
        self._budget = budget
        self._memo: dict[tuple[Hashable, int], tuple[float, np.ndarray]] = {}

    def log_gradient(self, state: State) -> np.ndarray:
        probability, gradient = self._value(state, self._budget.remaining(state))
        return gradient / probability

    def _value(self, state: State, remaining: int) -> tuple[float, np.ndarray]:
        key = (self._policy.context_key(state), remaining)
        cached = self._memo.get(key)
        if cached is not None:
            return cached
        policy, vocab = self._policy, self._policy.vocab
        if vocab.is_terminal(state) or remaining == 0:
            force = not vocab.is_terminal(state)
            probability = math.exp(policy.answer_logprob(state, self._answer, force=force))
            gradient = probability * policy.grad_log_answer(state, self._answer, force=force)
        else:
            prior = policy.next_token_logprobs(state)
            probability = 0.0
            gradient = np.zeros(policy.n_parameters)
            for token in vocab.emit_ids:
                if prior[token] == -np.inf:
                    continue
                step = math.exp(prior[token])
                child_p, child_g = self._value(state.extend(token), remaining - 1)
                probability += step * child_p
                gradient += step * child_p * policy.grad_log_next(state, token) + step * child_g
        self._memo[key] = (probability, gradient)
        return probability, gradient


def _prefix_states(start: State, tokens: Sequence[int]) -> list[State]:
    states = [start]
    for token in tokens:
        states.append(states[-1].extend(token))
    return states


def surrogate_objective(
    policy: CondSeqModel,
    instance: TaskInstance,
    budget: EnumerationBudget,
    baseline: EnumerationOracle,
) -> float:
    """
    ``sum_traj pi(traj) * sum_i (log p(y|I_i) - b(I_{i-1}))`` with ``b`` frozen.

    ``baseline`` supplies the stop-gradient terms ``b`` (an oracle on the
    unperturbed policy), so finite differences of this function recover the
    gradient the update rule is meant to follow.
    """
    oracle = EnumerationOracle(policy, budget)
    start = State(instance.query)
    total = []
    for path in enumerate_paths(policy, start, budget):
        states = _prefix_states(start, path.tokens)
        reward = math.fsum(
            oracle.marginal_answer_logprob(states[i], instance.gold_answer)
            - baseline.marginal_answer_logprob(states[i - 1], instance.gold_answer)
            for i in range(1, len(states))
        )
        total.append(math.exp(path.log_prob) * reward)
    return math.fsum(total)


def exact_objective_and_gradient(
    policy: DifferentiablePolicy,
    instance: TaskInstance,
    budget: EnumerationBudget,
) -> ExactGradient:
    """
    Enumerate every trajectory of ``instance`` and differentiate ``J`` exactly.

    Parameters
    ----------
    policy : DifferentiablePolicy
        Policy with analytic log-gradients.
    instance : TaskInstance
        The prompt and its gold answer.
    budget : EnumerationBudget
        Horizon and trajectory cap.

    Returns
    -------
    ExactGradient
        Objective, direct gradient, and the Term A / Term B decomposition.

    Raises
    ------
    BudgetExceededError
        If the trajectory count exceeds the budget.
    """
    answer = instance.gold_answer
    oracle = EnumerationOracle(policy, budget)
    marginal_grad = _MarginalGradient(policy, answer, budget)
    start = State(instance.query)
    paths = enumerate_paths(policy, start, budget)

    records = []
    for path in paths:
        states = _prefix_states(start, path.tokens)
        log_marginals = np.array([oracle.marginal_answer_logprob(s, answer) for s in states])
        step_grads = [policy.grad_log_next(states[k - 1], path.tokens[k - 1]) for k in range(1, len(states))]
        records.append((path, states, log_marginals, step_grads))

    weights = [math.exp(path.log_prob) for path, *_ in records]
    rewards = [float(lm[-1] - lm[0]) for _, _, lm, _ in records]
    objective = math.fsum(w * r for w, r in zip(weights, rewards))

    n_params = policy.n_parameters
    direct = np.zeros(n_params)
    term_a = np.zeros(n_params)
    term_b = np.zeros(n_params)
    flow_marginal = np.zeros(n_params)
    for weight, reward, (path, states, log_marginals, step_grads) in zip(weights, rewards, records):
        grad_log_pi = np.sum(step_grads, axis=0) if step_grads else np.zeros(n_params)
        terminal = states[-1]
        grad_answer = policy.grad_log_answer(terminal, answer, force=not path.terminated)

        flow_direct = np.zeros(n_params)
        for i in range(1, len(states)):
            flow_direct += marginal_grad.log_gradient(states[i])
        direct += weight * (grad_log_pi * reward + flow_direct)
        flow_marginal += weight * flow_direct

        term_a += weight * grad_log_pi * (reward - objective)

        # suffix sums of step gradients: tail[i] = sum_{k > i} grad log pi(s_k)
        tail = np.zeros(n_params)
        flow_weighted = np.zeros(n_params)
        for i in range(len(states) - 1, 0, -1):
            importance = math.exp(log_marginals[-1] - log_marginals[i])
            flow_weighted += importance * (tail + grad_answer)
            tail = tail + step_grads[i - 1]
        term_b += weight * flow_weighted

    logger.debug("Enumerated %d trajectories for instance %s", len(paths), instance.id)
    return ExactGradient(
        objective=objective,
        direct=direct,
        term_a=term_a,
        term_b=term_b,
        flow_marginal=flow_marginal,
        n_trajectories=len(paths),
    )
