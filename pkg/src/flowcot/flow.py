"""
Token velocity and the posterior approximations it is measured against.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Sequence

import numpy as np

from flowcot.models.model_base import CondSeqModel, Role, State, Trajectory, Vocabulary
from flowcot.oracle import EnumerationOracle
from flowcot.tasks.task_base import TaskInstance
from flowcot.utils.utils import (
    LOG_FLOOR,
    ConfigurationError,
    ZeroProbabilityConditioningError,
    clamp_log,
    fsum_mean,
    rng_for,
)

logger = logging.getLogger(__name__)


class PosteriorMode(str, Enum):
    """How the posterior ``pi(. | I, y)`` is obtained."""

    EXACT_BAYES = "exact_bayes"
    GOLD_LABEL = "gold_label"
    RANDOM_LABEL = "random_label"
    LATENT_LABEL = "latent_label"


@dataclass(frozen=True, slots=True)
class AnswerContext:
    """
    What a posterior mode needs to know about the instance being decoded.

    Parameters
    ----------
    instance : TaskInstance
        The instance; its gold answer is the ``y`` of exact Bayes and gold mode.
    posterior_model : CondSeqModel | None
        Label-aware model read by the label modes.
    oracle : EnumerationOracle | None
        Oracle on the prior, required by exact Bayes mode and by difficulty traces.
    seed : int
        Seed of the random-label draw.
    """

    instance: TaskInstance
    posterior_model: CondSeqModel | None = None
    oracle: EnumerationOracle | None = None
    seed: int = 0


def random_label(instance: TaskInstance, vocab: Vocabulary, seed: int) -> int:
    """Uniform draw from the answer block without the gold answer, fixed per (seed, instance)."""
    wrong = [a for a in vocab.answer_ids if a != instance.gold_answer]
    if not wrong:
        raise ConfigurationError("random_label needs at least two answer tokens")
    rng = rng_for(seed, "random_label", instance.id)
    return int(wrong[int(rng.integers(len(wrong)))])


def posterior_context(
    state: State,
    mode: PosteriorMode,
    instance: TaskInstance,
    vocab: Vocabulary,
    seed: int = 0,
) -> State:
    """
    Write the mode's label into the state's label slot.

    Gold mode injects the gold answer, random mode a non-gold answer and
    latent mode the placeholder. The slot is overwritten, so applying this
    twice is the same as applying it once.

    Raises
    ------
    ValueError
        If ``mode`` is not a label mode.
    """
    if mode is PosteriorMode.GOLD_LABEL:
        return state.with_label(instance.gold_answer)
    if mode is PosteriorMode.RANDOM_LABEL:
        return state.with_label(random_label(instance, vocab, seed))
    if mode is PosteriorMode.LATENT_LABEL:
        if vocab.placeholder_id is None:
            raise ConfigurationError("latent_label mode needs a placeholder token in the vocabulary")
        return state.with_label(vocab.placeholder_id)
    raise ValueError(f"{mode.value} is not a label mode")


def posterior_logprobs(state: State, mode: PosteriorMode, context: AnswerContext) -> np.ndarray:
    """Posterior next-token log-probabilities under ``mode``."""
    if mode is PosteriorMode.EXACT_BAYES:
        if context.oracle is None:
            raise ConfigurationError("exact_bayes mode needs an oracle")
        return context.oracle.exact_bayes_posterior(state, context.instance.gold_answer)
    model = context.posterior_model
    if model is None:
        raise ConfigurationError(f"{mode.value} mode needs a label-aware posterior model")
    augmented = posterior_context(state, mode, context.instance, model.vocab, context.seed)
    return model.next_token_logprobs(augmented)


@dataclass(frozen=True, slots=True)
class TokenVelocity:
    value: float
    clamped: bool


def velocity(
    model: CondSeqModel,
    state: State,
    token: int,
    mode: PosteriorMode,
    context: AnswerContext,
) -> TokenVelocity:
    """
    ``v = log posterior(token) - log prior(token)``.

    Both sides are clamped at :data:`LOG_FLOOR`; when both are clamped the
    velocity is 0 and a warning is logged.

    Parameters
    ----------
    model : CondSeqModel
        The prior; it never reads the label slot.
    state : State
        Prefix ``I_{i-1}``.
    token : int
        Candidate ``s_i``.
    mode : PosteriorMode
        Posterior approximation.
    context : AnswerContext
        Instance and the models the mode reads.

    Returns
    -------
    TokenVelocity
        Value and clamping flag.
    """
    prior, prior_clamped = clamp_log(float(model.next_token_logprobs(state)[token]))
    post, post_clamped = clamp_log(float(posterior_logprobs(state, mode, context)[token]))
    if prior_clamped and post_clamped:
        logger.warning(
            "Velocity of %s clamped on both sides (mode %s); returning 0",
            model.vocab.describe(token),
            mode.value,
        )
        return TokenVelocity(0.0, True)
    return TokenVelocity(post - prior, prior_clamped or post_clamped)


def velocity_vector(
    model: CondSeqModel,
    state: State,
    mode: PosteriorMode,
    context: AnswerContext,
) -> tuple[np.ndarray, np.ndarray]:
    """
    Velocities of every token at once.

    Returns
    -------
    tuple[np.ndarray, np.ndarray]
        Velocity per token id and a boolean mask of clamped entries. Tokens
        clamped on both sides (including every non-emittable one) get 0.
    """
    prior = np.asarray(model.next_token_logprobs(state), dtype=np.float64)
    post = np.asarray(posterior_logprobs(state, mode, context), dtype=np.float64)
    prior_low = prior < LOG_FLOOR
    post_low = post < LOG_FLOOR
    values = np.maximum(post, LOG_FLOOR) - np.maximum(prior, LOG_FLOOR)
    values[prior_low & post_low] = 0.0
    return values, prior_low | post_low


@dataclass(slots=True)
class VelocityProfile:
    """
    Per-step velocities of one trajectory.

    Attributes
    ----------
    tokens, roles : tuple
        Thought tokens and their role names.
    velocities : tuple[float, ...]
        ``v_i`` for each thought step.
    difficulties : tuple[float, ...] | None
        ``D(I_i) = -log p(y | I_i)`` for ``i = 0..T`` when an oracle backs the
        profile.
    """

    instance_id: str | None
    tokens: tuple[int, ...]
    roles: tuple[str, ...]
    velocities: tuple[float, ...]
    difficulties: tuple[float, ...] | None = None
    n_clamped: int = 0
    cumulative: tuple[float, ...] = field(init=False)

    def __post_init__(self) -> None:
        running, sums = [], []
        for value in self.velocities:
            running.append(value)
            sums.append(math.fsum(running))
        self.cumulative = tuple(sums)

    @property
    def total_flow(self) -> float:
        return math.fsum(self.velocities)

    @property
    def mean_pfp(self) -> float:
        return fsum_mean(self.velocities) if self.velocities else 0.0

    def _role_mean(self, filler: bool) -> float:
        chosen = [v for v, r in zip(self.velocities, self.roles) if (r == Role.FILLER.value) == filler]
        return fsum_mean(chosen)

    @property
    def content_mean(self) -> float:
        """Mean velocity of non-filler tokens (end-of-thought included); ``nan`` if none."""
        return self._role_mean(filler=False)

    @property
    def filler_mean(self) -> float:
        return self._role_mean(filler=True)

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.instance_id,
            "tokens": list(self.tokens),
            "v": list(self.velocities),
            "D": None if self.difficulties is None else list(self.difficulties),
            "cumulative": list(self.cumulative),
            "roles": list(self.roles),
        }


def profile(
    model: CondSeqModel,
    trajectory: Trajectory,
    mode: PosteriorMode,
    context: AnswerContext,
) -> VelocityProfile:
    """
    Velocity profile of a trajectory, with a difficulty trace when an oracle is present.

    Under exact Bayes the velocities telescope:
    ``sum(v) = log p(y | I_T) - log p(y | I_0)``.
    """
    vocab = model.vocab
    thought = trajectory.state.thought
    start = State(trajectory.state.query)
    states = [start]
    for token in thought:
        states.append(states[-1].extend(token))

    velocities = []
    n_clamped = 0
    for i, token in enumerate(thought):
        tv = velocity(model, states[i], token, mode, context)
        velocities.append(tv.value)
        n_clamped += tv.clamped

    difficulties = None
    if context.oracle is not None:
        answer = context.instance.gold_answer
        difficulties = tuple(-context.oracle.marginal_answer_logprob(s, answer) for s in states)

    return VelocityProfile(
        instance_id=trajectory.instance_id or context.instance.id,
        tokens=thought,
        roles=tuple(vocab.role(t).value for t in thought),
        velocities=tuple(velocities),
        difficulties=difficulties,
        n_clamped=n_clamped,
    )


def posterior_training_corpus(corpus: Iterable[Trajectory], vocab: Vocabulary) -> list[Trajectory]:
    """
    Demonstrations for the label-aware model.

    Each trajectory appears twice: once with its answer in the label slot and
    once with the placeholder, so the latent slot is a state of its own.
    """
    if vocab.placeholder_id is None:
        raise ConfigurationError("The posterior corpus needs a placeholder token")
    out = []
    for trajectory in corpus:
        for label in (trajectory.answer, vocab.placeholder_id):
            out.append(
                Trajectory(
                    state=trajectory.state.with_label(label),
                    answer=trajectory.answer,
                    log_probs=trajectory.log_probs,
                    terminated=trajectory.terminated,
                    instance_id=trajectory.instance_id,
                )
            )
    return out


def sample_states(
    prior: CondSeqModel,
    instances: Sequence[TaskInstance],
    n_states: int,
    horizon: int,
    rng: np.random.Generator,
) -> list[tuple[TaskInstance, State]]:
    """
    Draw open (non-terminal, below horizon) states by rolling the prior forward.

    Each draw picks an instance and a target depth uniformly, then samples
    from the prior until the depth or end-of-thought; an end-of-thought is
    dropped so the state stays open.
    """
    vocab = prior.vocab
    emit = np.array(vocab.emit_ids)
    drawn = []
    for _ in range(n_states):
        instance = instances[int(rng.integers(len(instances)))]
        depth = int(rng.integers(horizon))
        state = State(instance.query)
        while state.step_index < depth:
            probs = np.exp(prior.next_token_logprobs(state)[emit])
            token = int(emit[rng.choice(emit.size, p=probs / probs.sum())])
            if token == vocab.end_id:
                break
            state = state.extend(token)
        drawn.append((instance, state))
    return drawn


@dataclass(frozen=True, slots=True)
class PosteriorQuality:
    mode: PosteriorMode
    mean_kl: float
    n_states: int

    def to_dict(self) -> dict[str, Any]:
        return {"mode": self.mode.value, "mean_kl": self.mean_kl, "n_states": self.n_states}


def posterior_quality(
    prior: CondSeqModel,
    posterior_model: CondSeqModel | None,
    mode: PosteriorMode,
    instances: Sequence[TaskInstance],
    oracle: EnumerationOracle,
    *,
    n_states: int = 500,
    seed: int = 0,
    states: Sequence[tuple[TaskInstance, State]] | None = None,
) -> PosteriorQuality:
    """
    Mean ``KL(exact Bayes posterior || mode posterior)`` over sampled states.

    The sampled states depend on the seed only, so every mode is scored on
    the same states. The mode's log-probabilities are floored at
    :data:`LOG_FLOOR` so the divergence stays finite.

    Parameters
    ----------
    prior : CondSeqModel
        Prior policy (the oracle's model).
    posterior_model : CondSeqModel | None
        Label-aware model for the label modes.
    mode : PosteriorMode
        Approximation to score; ``EXACT_BAYES`` scores 0.
    instances : Sequence[TaskInstance]
        Instances to draw states from.
    oracle : EnumerationOracle
        Exact reference.
    n_states : int, default=500
        Number of states to draw when ``states`` is not given.
    seed : int, default=0
        Seed of the state draw and the random labels.
    states : Sequence[tuple[TaskInstance, State]] | None
        Pre-drawn states.

    Returns
    -------
    PosteriorQuality
        Mean divergence (lower is better).
    """
    if states is None:
        states = sample_states(prior, instances, n_states, oracle.budget.horizon, rng_for(seed, "quality_states"))
    divergences = []
    for instance, state in states:
        context = AnswerContext(instance, posterior_model, oracle, seed)
        try:
            exact = oracle.exact_bayes_posterior(state, instance.gold_answer)
        except ZeroProbabilityConditioningError:
            logger.debug("Skipping state with unreachable gold answer (instance %s)", instance.id)
            continue
        approx = posterior_logprobs(state, mode, context)
        support = np.isfinite(exact)
        weights = np.exp(exact[support])
        divergences.append(math.fsum(weights * (exact[support] - np.maximum(approx[support], LOG_FLOOR))))
    mean_kl = fsum_mean(divergences)
    logger.info("Posterior quality of %s: mean KL %.6f over %d states", mode.value, mean_kl, len(divergences))
    return PosteriorQuality(mode=mode, mean_kl=mean_kl, n_states=len(divergences))
