"""
Greedy flow decoding and its baselines.

Strategies:
- ``standard_greedy``: argmax of the prior
- ``standard_sample``: temperature sampling from the prior
- ``flow_greedy``: argmax of velocity over a candidate set
- ``posterior_only``: argmax of the posterior over a candidate set
"""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from flowcot.flow import (
    AnswerContext,
    PosteriorMode,
    VelocityProfile,
    posterior_logprobs,
    velocity_vector,
)
from flowcot.models.model_base import CondSeqModel, State, Trajectory
from flowcot.oracle import EnumerationBudget, EnumerationOracle
from flowcot.tasks.task_base import TaskInstance
from flowcot.utils.utils import (
    LOG_FLOOR,
    ConfigurationError,
    ZeroProbabilityConditioningError,
    log_normalize,
    rng_for,
)

logger = logging.getLogger(__name__)

DEFAULT_TOP_P = 0.95


class DecodeStrategy(str, Enum):
    STANDARD_GREEDY = "standard_greedy"
    STANDARD_SAMPLE = "standard_sample"
    FLOW_GREEDY = "flow_greedy"
    POSTERIOR_ONLY = "posterior_only"

    @property
    def guided(self) -> bool:
        return self in (DecodeStrategy.FLOW_GREEDY, DecodeStrategy.POSTERIOR_ONLY)


@dataclass(frozen=True, slots=True)
class CandidateRule:
    """One of ``tau`` (log-prob threshold), ``top_p`` or ``top_k``."""

    kind: str
    value: float

    def __post_init__(self) -> None:
        if self.kind not in ("tau", "top_p", "top_k"):
            raise ValueError(f"Unknown candidate rule: {self.kind}")


class DecodeConfig(BaseModel):
    """
    Configuration of one decoding arm.

    Attributes
    ----------
    strategy : DecodeStrategy
        Decoding strategy.
    tau, top_p, top_k : float | int | None
        Candidate rule for the guided strategies; exactly one may be set, and
        ``top_p=0.95`` is used when none is.
    temperature : float
        Sampling temperature (``standard_sample``).
    posterior_mode : PosteriorMode
        Posterior used by the guided strategies.
    horizon : int
        ``T_max``.
    seed : int
        Root of the rollout randomness.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    strategy: DecodeStrategy = DecodeStrategy.FLOW_GREEDY
    tau: float | None = None
    top_p: float | None = Field(None, gt=0.0, le=1.0)
    top_k: int | None = Field(None, ge=1)
    temperature: float = Field(1.0, gt=0.0)
    posterior_mode: PosteriorMode = PosteriorMode.LATENT_LABEL
    horizon: int = Field(16, ge=1)
    seed: int = Field(0, ge=0)

    @model_validator(mode="before")
    @classmethod
    def _default_rule(cls, data: Any) -> Any:
        if isinstance(data, dict):
            strategy = DecodeStrategy(data.get("strategy", DecodeStrategy.FLOW_GREEDY))
            rules = [data.get(name) for name in ("tau", "top_p", "top_k")]
            if strategy.guided and all(rule is None for rule in rules):
                data = {**data, "top_p": DEFAULT_TOP_P}
        return data

    @model_validator(mode="after")
    def _one_rule(self) -> "DecodeConfig":
        active = [name for name in ("tau", "top_p", "top_k") if getattr(self, name) is not None]
        if self.strategy.guided and len(active) != 1:
            raise ValueError(f"{self.strategy.value} needs exactly one candidate rule, got {active}")
        return self

    @property
    def candidate_rule(self) -> CandidateRule | None:
        for name in ("tau", "top_p", "top_k"):
            value = getattr(self, name)
            if value is not None:
                return CandidateRule(name, float(value))
        return None


def _by_prior(prior: np.ndarray, ids: np.ndarray) -> list[int]:
    # descending probability, ties by lowest id
    return sorted((int(t) for t in ids), key=lambda t: (-prior[t], t))


def candidate_set(prior_logprobs: np.ndarray, rule: CandidateRule | None) -> tuple[int, ...]:
    """
    Tokens eligible for guided decoding, in id order.

    Tokens with zero prior probability are never candidates. ``top_p`` keeps
    the smallest probability-descending prefix whose mass reaches ``p``. When
    the rule empties the set, the prior argmax is returned alone.

    Examples
    --------
    With prior ``(0.5, 0.3, 0.15, 0.05)`` and ``top_p=0.8`` the result is
    ``(0, 1)``.
    """
    prior = np.asarray(prior_logprobs, dtype=np.float64)
    support = np.flatnonzero(np.isfinite(prior))
    if support.size == 0:
        raise ValueError("The prior puts no mass on any token")
    ranked = _by_prior(prior, support)

    if rule is None:
        chosen = ranked
    elif rule.kind == "tau":
        chosen = [t for t in ranked if prior[t] > rule.value]
    elif rule.kind == "top_k":
        chosen = ranked[: int(rule.value)]
    else:
        mass = np.cumsum(np.exp(prior[ranked]))
        cut = int(np.searchsorted(mass, rule.value - 1e-12, side="left")) + 1
        chosen = ranked[: min(cut, len(ranked))]

    if not chosen:
        chosen = ranked[:1]
    return tuple(sorted(chosen))


@dataclass(frozen=True, slots=True)
class StepDiagnostics:
    token: int
    prior_logprob: float
    candidates: tuple[int, ...] = ()
    scores: tuple[float, ...] = ()
    velocity: float | None = None
    clamped: bool = False


def _argmax_lowest(candidates: tuple[int, ...], scores: np.ndarray) -> int:
    best = candidates[0]
    for token in candidates[1:]:
        if scores[token] > scores[best]:
            best = token
    return best


def decode_step(
    prior: CondSeqModel,
    state: State,
    config: DecodeConfig,
    *,
    context: AnswerContext | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[int, StepDiagnostics]:
    """
    Choose the next thought token.

    Parameters
    ----------
    prior : CondSeqModel
        The prior policy.
    state : State
        Open state to extend.
    config : DecodeConfig
        Strategy and candidate rule.
    context : AnswerContext | None
        Required by the guided strategies.
    rng : np.random.Generator | None
        Required by ``standard_sample``.

    Returns
    -------
    tuple[int, StepDiagnostics]
        The token and per-candidate scores (velocities for ``flow_greedy``,
        posterior log-probs for ``posterior_only``).
    """
    lp = np.asarray(prior.next_token_logprobs(state), dtype=np.float64)
    strategy = config.strategy

    if strategy is DecodeStrategy.STANDARD_GREEDY:
        token = int(np.argmax(lp))
        return token, StepDiagnostics(token, float(lp[token]))

    if strategy is DecodeStrategy.STANDARD_SAMPLE:
        if rng is None:
            raise ValueError("standard_sample needs a random generator")
        support = np.flatnonzero(np.isfinite(lp))
        probs = np.exp(log_normalize(lp[support] / config.temperature))
        token = int(support[rng.choice(support.size, p=probs / probs.sum())])
        return token, StepDiagnostics(token, float(lp[token]))

    if context is None:
        raise ConfigurationError(f"{strategy.value} needs an answer context")
    candidates = candidate_set(lp, config.candidate_rule)
    try:
        velocities, clamped = velocity_vector(prior, state, config.posterior_mode, context)
        if strategy is DecodeStrategy.FLOW_GREEDY:
            scores = velocities
        else:
            scores = np.asarray(posterior_logprobs(state, config.posterior_mode, context), dtype=np.float64)
    except ZeroProbabilityConditioningError as exc:
        # the posterior equals the prior when the label cannot be reached
        logger.warning("Falling back to the prior at %s: %s", state.thought, exc)
        clamped = lp < LOG_FLOOR
        velocities = np.zeros_like(lp)
        scores = velocities if strategy is DecodeStrategy.FLOW_GREEDY else lp
    token = _argmax_lowest(candidates, scores)
    return token, StepDiagnostics(
        token=token,
        prior_logprob=float(lp[token]),
        candidates=candidates,
        scores=tuple(float(scores[t]) for t in candidates),
        velocity=float(velocities[token]),
        clamped=bool(clamped[token]),
    )


@dataclass(slots=True)
class RolloutResult:
    trajectory: Trajectory
    profile: VelocityProfile | None
    steps: list[StepDiagnostics] = field(default_factory=list)


def rollout(
    prior: CondSeqModel,
    instance: TaskInstance,
    config: DecodeConfig,
    *,
    context: AnswerContext | None = None,
    rng: np.random.Generator | None = None,
) -> RolloutResult:
    """
    Decode a thought until end-of-thought or the horizon, then read the answer.

    The answer comes from the prior's answer head: argmax, or a temperature
    sample for ``standard_sample``. Stored log-probs are the prior's, whatever
    the strategy. Without ``rng`` the stream ``("rollout", instance.id)``
    under ``config.seed`` is used, so arms compared on the same instance see
    the same randomness.

    Returns
    -------
    RolloutResult
        Trajectory (``terminated=False`` on a horizon cutoff), the velocity
        profile of the chosen tokens for guided strategies, and step
        diagnostics.
    """
    vocab = prior.vocab
    if rng is None:
        rng = rng_for(config.seed, "rollout", instance.id)

    state = State(instance.query)
    steps: list[StepDiagnostics] = []
    while not vocab.is_terminal(state) and state.step_index < config.horizon:
        token, diagnostics = decode_step(prior, state, config, context=context, rng=rng)
        steps.append(diagnostics)
        state = state.extend(token)

    terminated = vocab.is_terminal(state)
    if not terminated:
        logger.debug("Rollout of %s hit the horizon %d", instance.id, config.horizon)

    head = np.asarray(prior.answer_logprobs(state, force=not terminated), dtype=np.float64)
    if config.strategy is DecodeStrategy.STANDARD_SAMPLE:
        probs = np.exp(log_normalize(head / config.temperature))
        answer = vocab.answer_ids[int(rng.choice(head.size, p=probs / probs.sum()))]
    else:
        answer = vocab.answer_ids[int(np.argmax(head))]

    trajectory = Trajectory(
        state=state,
        answer=answer,
        log_probs=tuple(step.prior_logprob for step in steps),
        terminated=terminated,
        instance_id=instance.id,
    )

    profile = None
    if config.strategy.guided:
        profile = VelocityProfile(
            instance_id=instance.id,
            tokens=state.thought,
            roles=tuple(vocab.role(t).value for t in state.thought),
            velocities=tuple(step.velocity for step in steps),
            n_clamped=sum(step.clamped for step in steps),
        )
    return RolloutResult(trajectory=trajectory, profile=profile, steps=steps)


class FlowModels:
    """
    The models a decoding run reads: prior, optional posterior and per-horizon oracles.

    Parameters
    ----------
    prior : CondSeqModel
        Prior policy.
    posterior : CondSeqModel | None
        Label-aware model for the label posterior modes.
    max_trajectories : int, default=10**6
        Oracle node cap.
    seed : int, default=0
        Seed of random-label draws.
    """

    def __init__(
        self,
        prior: CondSeqModel,
        posterior: CondSeqModel | None = None,
        *,
        max_trajectories: int = 10**6,
        seed: int = 0,
    ) -> None:
        if posterior is not None and posterior.vocab != prior.vocab:
            raise ConfigurationError("Prior and posterior models use different vocabularies")
        self.prior = prior
        self.posterior = posterior
        self.max_trajectories = max_trajectories
        self.seed = seed
        self._oracles: dict[int, EnumerationOracle] = {}
        self._lock = threading.Lock()

    def oracle(self, horizon: int) -> EnumerationOracle:
        with self._lock:
            oracle = self._oracles.get(horizon)
            if oracle is None:
                oracle = EnumerationOracle(self.prior, EnumerationBudget(horizon, self.max_trajectories))
                self._oracles[horizon] = oracle
            return oracle

    def context_for(self, instance: TaskInstance, horizon: int) -> AnswerContext:
        return AnswerContext(instance, self.posterior, self.oracle(horizon), self.seed)

    def run(self, instance: TaskInstance, config: DecodeConfig) -> RolloutResult:
        """Roll out one arm on one instance."""
        context = self.context_for(instance, config.horizon) if config.strategy.guided else None
        return rollout(self.prior, instance, config, context=context)
