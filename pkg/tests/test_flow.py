from __future__ import annotations

import logging
import math

import numpy as np
import pytest

from flowcot.decode import DecodeConfig, DecodeStrategy, rollout
from flowcot.flow import (
    AnswerContext,
    PosteriorMode,
    VelocityProfile,
    posterior_context,
    posterior_quality,
    posterior_training_corpus,
    profile,
    random_label,
    velocity,
    velocity_vector,
)
from flowcot.models.fitting import fit_mle
from flowcot.models.model_base import State, Trajectory
from flowcot.oracle import EnumerationBudget, EnumerationOracle
from flowcot.tasks.corpus import synthesize_corpus
from flowcot.utils.utils import ConfigurationError, rng_for


def _gold_trajectory(instance) -> Trajectory:
    return Trajectory(
        state=State(instance.query, instance.gold_chain),
        answer=instance.gold_answer,
        log_probs=(0.0,) * len(instance.gold_chain),
        terminated=True,
        instance_id=instance.id,
    )


# --- posterior contexts --------------------------------------------------------


def test_posterior_context_labels(small_task):
    vocab = small_task.vocab
    instance = small_task.make_instance(1, [1])
    state = State(instance.query, (2,))
    assert posterior_context(state, PosteriorMode.LATENT_LABEL, instance, vocab).label == vocab.placeholder_id
    assert posterior_context(state, PosteriorMode.GOLD_LABEL, instance, vocab).label == small_task.answer_token(2)

    wrong = posterior_context(state, PosteriorMode.RANDOM_LABEL, instance, vocab, seed=3).label
    assert wrong in vocab.answer_ids and wrong != instance.gold_answer
    assert wrong == random_label(instance, vocab, 3)


def test_posterior_context_is_idempotent(small_task):
    vocab = small_task.vocab
    instance = small_task.make_instance(0, [2])
    state = State(instance.query, (1,))
    for mode in (PosteriorMode.GOLD_LABEL, PosteriorMode.LATENT_LABEL, PosteriorMode.RANDOM_LABEL):
        once = posterior_context(state, mode, instance, vocab, seed=1)
        assert posterior_context(once, mode, instance, vocab, seed=1) == once


def test_posterior_context_rejects_exact_mode(small_task):
    instance = small_task.make_instance(0, [2])
    with pytest.raises(ValueError, match="not a label mode"):
        posterior_context(State(instance.query), PosteriorMode.EXACT_BAYES, instance, small_task.vocab)


def test_label_modes_need_a_posterior_model(filler_prior, filler_instance):
    with pytest.raises(ConfigurationError):
        velocity(filler_prior, State((1,)), 1, PosteriorMode.LATENT_LABEL, AnswerContext(filler_instance))
    with pytest.raises(ConfigurationError):
        velocity(filler_prior, State((1,)), 1, PosteriorMode.EXACT_BAYES, AnswerContext(filler_instance))


def test_posterior_training_corpus(small_task, small_instances):
    corpus = synthesize_corpus(small_task, small_instances[:3], rate=0.5, seed=0)
    doubled = posterior_training_corpus(corpus, small_task.vocab)
    assert len(doubled) == 6
    assert [t.state.label for t in doubled[:2]] == [corpus[0].answer, small_task.vocab.placeholder_id]
    assert doubled[1].state.thought == corpus[0].state.thought


# --- velocity ------------------------------------------------------------------


def test_velocity_ratio(filler_prior, filler_posterior, filler_instance):
    context = AnswerContext(filler_instance, posterior_model=filler_posterior)
    state = State((1,))
    content = velocity(filler_prior, state, 1, PosteriorMode.GOLD_LABEL, context)
    filler = velocity(filler_prior, state, 2, PosteriorMode.GOLD_LABEL, context)
    assert content.value == pytest.approx(math.log(2.0))
    assert filler.value == pytest.approx(math.log(1 / 3))
    assert not content.clamped


def test_equal_prior_and_posterior_gives_zero(filler_prior, filler_instance):
    context = AnswerContext(filler_instance, posterior_model=filler_prior)
    assert velocity(filler_prior, State((1,)), 2, PosteriorMode.LATENT_LABEL, context).value == 0.0


def test_exact_velocity_vanishes_only_when_the_posterior_is_the_prior(
    filler_blind, filler_instance, branch_prior
):
    oracle = EnumerationOracle(filler_blind, EnumerationBudget(3))
    for thought in ((), (2,), (2, 2)):
        state = State(filler_instance.query, thought)
        ev = oracle.expected_velocity(state, filler_instance.gold_answer)
        assert ev.expected == pytest.approx(0.0, abs=1e-12)
        assert ev.neg_kl == pytest.approx(0.0, abs=1e-12)
        np.testing.assert_allclose(
            oracle.exact_bayes_posterior(state, filler_instance.gold_answer), filler_blind.next_token_logprobs(state)
        )

    oracle = EnumerationOracle(branch_prior, EnumerationBudget(1))
    state = State((1,))
    posterior = oracle.exact_bayes_posterior(state, 2)
    assert not np.allclose(posterior[:2], branch_prior.next_token_logprobs(state)[:2])
    assert oracle.expected_velocity(state, 2).neg_kl < -0.1


def test_double_clamp_returns_zero(filler_prior, filler_posterior, filler_instance, caplog):
    context = AnswerContext(filler_instance, posterior_model=filler_posterior)
    with caplog.at_level(logging.WARNING, logger="flowcot.flow"):
        result = velocity(filler_prior, State((1,)), 0, PosteriorMode.GOLD_LABEL, context)
    assert (result.value, result.clamped) == (0.0, True)
    assert "clamped on both sides" in caplog.text


def test_velocity_vector_matches_scalar(filler_prior, filler_posterior, filler_instance):
    context = AnswerContext(filler_instance, posterior_model=filler_posterior)
    state = State((1,), (2,))
    values, clamped = velocity_vector(filler_prior, state, PosteriorMode.GOLD_LABEL, context)
    for token in filler_prior.vocab.emit_ids:
        scalar = velocity(filler_prior, state, token, PosteriorMode.GOLD_LABEL, context)
        assert values[token] == pytest.approx(scalar.value)
        assert clamped[token] == scalar.clamped


def test_exact_velocity_is_difficulty_delta(small_task, small_instances, random_tabular):
    oracle = EnumerationOracle(random_tabular, EnumerationBudget(small_task.horizon))
    instance = small_instances[0]
    context = AnswerContext(instance, oracle=oracle)
    state = State(instance.query, (1,))
    answer = instance.gold_answer
    for token in random_tabular.vocab.emit_ids:
        v = velocity(random_tabular, state, token, PosteriorMode.EXACT_BAYES, context).value
        delta = oracle.marginal_answer_logprob(state.extend(token), answer) - oracle.marginal_answer_logprob(
            state, answer
        )
        assert v == pytest.approx(delta, abs=1e-9)


# --- profiles ------------------------------------------------------------------


def test_profile_statistics():
    prof = VelocityProfile(
        instance_id="p",
        tokens=(1, 6, 0),
        roles=("content", "filler", "end_of_thought"),
        velocities=(1.0, -0.5, 2.0),
    )
    assert prof.cumulative == (1.0, 0.5, 2.5)
    assert prof.total_flow == 2.5
    assert prof.mean_pfp == pytest.approx(2.5 / 3)
    assert prof.content_mean == 1.5
    assert prof.filler_mean == -0.5
    assert prof.to_dict()["D"] is None


def test_profile_telescopes(small_task, small_instances, random_tabular):
    oracle = EnumerationOracle(random_tabular, EnumerationBudget(small_task.horizon))
    config = DecodeConfig(strategy=DecodeStrategy.STANDARD_SAMPLE, horizon=small_task.horizon)
    rng = rng_for(0, "telescoping")
    for instance in small_instances[:10]:
        trajectory = rollout(random_tabular, instance, config, rng=rng).trajectory
        prof = profile(random_tabular, trajectory, PosteriorMode.EXACT_BAYES, AnswerContext(instance, oracle=oracle))
        assert len(prof.difficulties) == trajectory.length + 1
        assert prof.total_flow == pytest.approx(prof.difficulties[0] - prof.difficulties[-1], abs=1e-9)
        assert prof.n_clamped == 0


def test_gold_chain_flow_is_initial_difficulty(chain_task, chain_instances, gold_prior):
    oracle = EnumerationOracle(gold_prior, EnumerationBudget(chain_task.horizon))
    instance = chain_instances[0]
    prof = profile(
        gold_prior, _gold_trajectory(instance), PosteriorMode.EXACT_BAYES, AnswerContext(instance, oracle=oracle)
    )
    assert prof.difficulties[-1] == pytest.approx(0.0, abs=1e-2)
    assert prof.total_flow == pytest.approx(prof.difficulties[0] - prof.difficulties[-1], abs=1e-9)
    assert prof.roles == ("content", "end_of_thought")


# --- posterior quality -----------------------------------------------------------


def test_exact_posterior_has_zero_divergence(small_task, small_instances, filler_fit):
    oracle = EnumerationOracle(filler_fit, EnumerationBudget(small_task.horizon))
    quality = posterior_quality(
        filler_fit, None, PosteriorMode.EXACT_BAYES, small_instances, oracle, n_states=30, seed=0
    )
    assert quality.mean_kl == pytest.approx(0.0, abs=1e-9)
    assert quality.n_states == 30
    assert quality.to_dict()["mode"] == "exact_bayes"


def test_label_modes_share_states(small_task, small_instances):
    corpus = synthesize_corpus(small_task, small_instances, rate=0.5, seed=0, repeats=3)
    prior = fit_mle(corpus, small_task.vocab, alpha=0.1, order=2)
    posterior = fit_mle(
        posterior_training_corpus(corpus, small_task.vocab), small_task.vocab, alpha=0.1, order=2, label_aware=True
    )
    oracle = EnumerationOracle(prior, EnumerationBudget(small_task.horizon))
    scores = {
        mode: posterior_quality(prior, posterior, mode, small_instances, oracle, n_states=40, seed=1)
        for mode in (PosteriorMode.GOLD_LABEL, PosteriorMode.RANDOM_LABEL)
    }
    assert {q.n_states for q in scores.values()} == {40}
    assert all(np.isfinite(q.mean_kl) and q.mean_kl >= -1e-9 for q in scores.values())
    assert scores[PosteriorMode.GOLD_LABEL].mean_kl <= scores[PosteriorMode.RANDOM_LABEL].mean_kl


@pytest.mark.slow
def test_content_tokens_outpace_fillers(small_task):
    instances = small_task.generate(200)
    corpus = synthesize_corpus(small_task, instances, rate=0.5, seed=0, repeats=5)
    prior = fit_mle(corpus, small_task.vocab, alpha=0.1, order=2)
    oracle = EnumerationOracle(prior, EnumerationBudget(small_task.horizon + 4))
    by_id = {i.id: i for i in instances}
    content, filler = [], []
    for trajectory in corpus:
        if trajectory.length > small_task.horizon + 4:
            continue
        instance = by_id[trajectory.instance_id]
        prof = profile(prior, trajectory, PosteriorMode.EXACT_BAYES, AnswerContext(instance, oracle=oracle))
        for value, role in zip(prof.velocities, prof.roles):
            (filler if role == "filler" else content).append(value)
    assert np.mean(content) > np.mean(filler)
