from __future__ import annotations

import dataclasses
import math

import numpy as np
import pytest

from flowcot.config import split_instances
from flowcot.models.model_base import State, Trajectory
from flowcot.oracle import EnumerationBudget, EnumerationOracle, enumerate_paths, exact_objective_and_gradient
from flowcot.rl import (
    ConsistencyReport,
    FlowGradient,
    GateKind,
    RewardMode,
    TrainConfig,
    apply_update,
    estimator_consistency,
    flow_update,
    global_reward,
    gradient_check,
    greedy_evaluation,
    group_advantage,
    importance_weighted_flow_estimate,
    quality_gate,
    score_rollouts,
    time_weights,
    train,
)
from flowcot.utils.utils import ConfigurationError, DivergenceError, rng_for


def _scored(policy, task, instance, **overrides):
    config = TrainConfig(group_size=4, **overrides)
    return score_rollouts(policy, task, instance, config, rng_for(0, "rl-tests", instance.id))


# --- advantages, gates and weights -------------------------------------------


def test_group_advantage():
    np.testing.assert_allclose(group_advantage([1.0, -1.0]), [1.0, -1.0])
    np.testing.assert_allclose(
        group_advantage([3.0, 1.0, 1.0, 1.0]), [math.sqrt(3), -1 / math.sqrt(3), -1 / math.sqrt(3), -1 / math.sqrt(3)]
    )
    np.testing.assert_array_equal(group_advantage([0.7, 0.7, 0.7]), np.zeros(3))
    with pytest.raises(ValueError, match="at least 2"):
        group_advantage([1.0])


def test_quality_gates():
    assert quality_gate(-1.0, -1.5, GateKind.RELU_RELATIVE) == pytest.approx(0.5)
    assert quality_gate(-2.0, -1.0, "relu_relative") == 0.0
    assert quality_gate(-2.0, -1.0, GateKind.BINARY_RELATIVE) == 0.0
    assert quality_gate(-1.0, -1.5, GateKind.BINARY_RELATIVE) == 1.0
    assert quality_gate(-1.0, -1.5, GateKind.RATIO) == pytest.approx(math.exp(0.5))
    assert quality_gate(-1.0, -1.5, GateKind.ABSOLUTE) == pytest.approx(math.exp(-1.0))
    with pytest.raises(ValueError):
        quality_gate(0.0, 0.0, "sigmoid")


def test_time_weights():
    np.testing.assert_array_equal(time_weights(4), [0.0, 0.25, 0.5, 0.75])
    assert time_weights(0).size == 0
    with pytest.raises(ValueError):
        time_weights(-1)


def test_llm_preset():
    config = TrainConfig.llm_preset()
    assert (config.group_size, config.learning_rate) == (8, 1e-6)
    assert TrainConfig.llm_preset(steps=3).steps == 3


# --- rewards -------------------------------------------------------------------


def test_forced_reward_telescopes(tiny_task, tiny_instance, tiny_linear):
    for scored in _scored(tiny_linear, tiny_task, tiny_instance):
        reward = scored.reward
        assert len(reward.per_step) == scored.trajectory.length
        assert reward.total == pytest.approx(reward.terminal - reward.baseline[0], abs=1e-12)
        assert reward.terminal == pytest.approx(scored.terminal_logprob)
        assert reward.baseline[0] == pytest.approx(
            tiny_linear.answer_logprob(State(tiny_instance.query), tiny_instance.gold_answer, force=True)
        )


def test_oracle_reward_reads_marginals(tiny_task, tiny_instance, tiny_linear):
    oracle = EnumerationOracle(tiny_linear, EnumerationBudget(tiny_task.horizon))
    trajectory = _scored(tiny_linear, tiny_task, tiny_instance)[0].trajectory
    reward = global_reward(tiny_linear, trajectory, tiny_instance, backend="oracle", oracle=oracle)
    answer = tiny_instance.gold_answer
    assert reward.baseline[0] == pytest.approx(oracle.marginal_answer_logprob(State(tiny_instance.query), answer))
    assert reward.terminal == pytest.approx(oracle.marginal_answer_logprob(trajectory.state, answer))
    assert reward.total == pytest.approx(reward.terminal - reward.baseline[0], abs=1e-12)

    with pytest.raises(ConfigurationError):
        global_reward(tiny_linear, trajectory, tiny_instance, backend="oracle")
    with pytest.raises(ValueError):
        global_reward(tiny_linear, trajectory, tiny_instance, backend="sampled")


def test_pure_filler_trajectory_earns_nothing(filler_blind, filler_instance):
    trajectory = Trajectory(
        state=State(filler_instance.query, (2, 2, 2)),
        answer=4,
        log_probs=(math.log(0.7),) * 3,
        terminated=False,
        instance_id=filler_instance.id,
    )
    oracle = EnumerationOracle(filler_blind, EnumerationBudget(3))
    for backend in ("oracle", "forced"):
        reward = global_reward(filler_blind, trajectory, filler_instance, backend=backend, oracle=oracle)
        assert reward.total == pytest.approx(0.0, abs=1e-12)
        assert reward.per_step == pytest.approx((0.0, 0.0, 0.0), abs=1e-12)
        assert reward.terminal == pytest.approx(math.log(0.7))
        assert not reward.clamped


# --- updates -------------------------------------------------------------------


def test_score_rollouts(tiny_task, tiny_instance, tiny_linear):
    scored = _scored(tiny_linear, tiny_task, tiny_instance)
    assert len(scored) == 4
    for item in scored:
        assert item.target == tiny_instance.gold_answer
        assert item.trajectory.length <= tiny_task.horizon
        assert item.correct == tiny_task.verify_answer(tiny_instance, item.trajectory.answer)
        assert item.terminal_logprob == tiny_linear.answer_logprob(
            item.trajectory.state, tiny_instance.gold_answer, force=True
        )


def test_repeated_rollout_has_no_advantage(tiny_task, tiny_instance, tiny_linear):
    item = _scored(tiny_linear, tiny_task, tiny_instance)[0]
    gradient = flow_update(tiny_linear, [[item, item]], TrainConfig(gate=GateKind.ABSOLUTE))
    np.testing.assert_array_equal(gradient.term_a, np.zeros(tiny_linear.n_parameters))
    assert np.linalg.norm(gradient.term_b) > 0.0
    assert gradient.gates[0][0] == pytest.approx(math.exp(item.terminal_logprob))
    assert gradient.mu == [pytest.approx(item.terminal_logprob)]


def test_relative_gate_at_the_mean_is_closed(tiny_task, tiny_instance, tiny_linear):
    item = _scored(tiny_linear, tiny_task, tiny_instance)[0]
    gradient = flow_update(tiny_linear, [[item, item]], TrainConfig(gate=GateKind.RELU_RELATIVE))
    np.testing.assert_array_equal(gradient.total, np.zeros(tiny_linear.n_parameters))
    assert gradient.gate_mean == 0.0


def test_outcome_sparse_has_no_flow_term(tiny_task, tiny_instance, tiny_linear):
    scored = _scored(tiny_linear, tiny_task, tiny_instance)
    gradient = flow_update(tiny_linear, [scored], TrainConfig(reward_mode=RewardMode.OUTCOME_SPARSE))
    np.testing.assert_array_equal(gradient.term_b, np.zeros(tiny_linear.n_parameters))


def test_update_averages_over_groups(tiny_task, tiny_instance, tiny_linear):
    scored = _scored(tiny_linear, tiny_task, tiny_instance)
    config = TrainConfig(gate=GateKind.RATIO)
    single = flow_update(tiny_linear, [scored], config)
    double = flow_update(tiny_linear, [scored, scored], config)
    np.testing.assert_allclose(double.total, single.total, rtol=1e-12, atol=1e-15)


def test_apply_update(tiny_linear):
    n = tiny_linear.n_parameters
    gradient = FlowGradient(term_a=np.ones(n), term_b=np.ones(n))
    assert apply_update(tiny_linear, gradient, TrainConfig(learning_rate=0.0)) is tiny_linear

    updated = apply_update(tiny_linear, gradient, TrainConfig(learning_rate=0.1))
    np.testing.assert_allclose(updated.parameters(), tiny_linear.parameters() + 0.2)

    with pytest.raises(DivergenceError) as info:
        apply_update(tiny_linear, gradient, TrainConfig(learning_rate=0.1, divergence_threshold=1e-3), step=4)
    assert info.value.step == 4
    assert info.value.gate == "relu_relative"


# --- training ------------------------------------------------------------------


def test_train_with_zero_learning_rate_keeps_parameters(tiny_task, tiny_linear):
    instances = tiny_task.generate(6)
    config = TrainConfig(steps=3, group_size=2, prompts_per_batch=2, learning_rate=0.0)
    seen = []
    result = train(tiny_linear, tiny_task, config, instances[:4], instances[4:], on_step=lambda r, p: seen.append(r))
    np.testing.assert_array_equal(result.policy.parameters(), tiny_linear.parameters())
    assert [r.step for r in result.records] == [1, 2, 3]
    assert seen == result.records
    assert all(0.0 <= r.pass1 <= 1.0 for r in result.records)


def test_train_reports_divergence(tiny_task, tiny_linear):
    instances = tiny_task.generate(4)
    config = TrainConfig(steps=3, group_size=2, prompts_per_batch=2, divergence_threshold=1e-3)
    with pytest.raises(DivergenceError) as info:
        train(tiny_linear, tiny_task, config, instances, [])
    assert info.value.step == 1
    assert info.value.records == []


def test_train_needs_instances(tiny_task, tiny_linear):
    with pytest.raises(ValueError):
        train(tiny_linear, tiny_task, TrainConfig(steps=1), [], [])


# --- estimator checks ------------------------------------------------------------


def test_gradient_check(tiny_task, tiny_instance, tiny_linear):
    check = gradient_check(tiny_linear, tiny_instance, EnumerationBudget(tiny_task.horizon))
    assert check.fd_error <= 1e-4
    assert check.path_error <= 1e-8


def test_gradient_treats_baselines_as_constants(tiny_task, tiny_instance, tiny_linear):
    check = gradient_check(tiny_linear, tiny_instance, EnumerationBudget(tiny_task.horizon))
    assert check.fd_error <= 1e-4
    assert check.moving_baseline_error > 1e-2
    assert np.max(np.abs(check.moving_baseline - check.finite_difference)) > 1e-3


def test_marginal_path_matches_importance_weights(tiny_task, tiny_instance, tiny_linear):
    budget = EnumerationBudget(tiny_task.horizon)
    exact = exact_objective_and_gradient(tiny_linear, tiny_instance, budget)
    oracle = EnumerationOracle(tiny_linear, budget)
    mean = np.zeros(tiny_linear.n_parameters)
    for path in enumerate_paths(tiny_linear, State(tiny_instance.query), budget):
        single = importance_weighted_flow_estimate(tiny_linear, tiny_instance, path.tokens, path.terminated, oracle)
        mean += math.exp(path.log_prob) * single
    assert np.max(np.abs(exact.flow_marginal)) > 0.0
    np.testing.assert_allclose(mean, exact.flow_marginal, rtol=1e-7, atol=1e-10)
    np.testing.assert_allclose(exact.term_b, exact.flow_marginal, rtol=1e-7, atol=1e-10)


def test_consistency_is_checked_per_coordinate():
    # the small coordinate is off by 100% while the large one dominates any global bound
    report = ConsistencyReport(
        estimate=np.array([1.01, 2e-3, 0.0]),
        exact=np.array([1.0, 1e-3, 0.0]),
        stderr=np.array([0.0, 1e-5, 0.0]),
        relative_tolerance=0.05,
        z=4.0,
        atol=1e-10,
    )
    np.testing.assert_allclose(report.tolerance, [0.05, 5e-5, 1e-10])
    assert report.n_failing == 1
    assert not report.passed
    assert report.max_relative_error == pytest.approx(1.0)
    assert report.worst_ratio == pytest.approx(20.0)

    noisy = dataclasses.replace(report, stderr=np.array([0.0, 5e-4, 0.0]))
    assert noisy.passed
    assert noisy.worst_ratio == pytest.approx(0.5)


@pytest.mark.slow
def test_importance_weighted_estimator_is_consistent(tiny_task, tiny_instance, tiny_linear):
    report = estimator_consistency(
        tiny_linear, tiny_instance, EnumerationBudget(tiny_task.horizon), 100_000, rng_for(0, "consistency")
    )
    assert report.passed, f"{report.n_failing} coordinate(s) out of tolerance, worst ratio {report.worst_ratio:.3g}"
    assert report.stderr.shape == report.exact.shape


# --- reference runs ----------------------------------------------------------------


VARIANTS = ("reference", "outcome_sparse", "gate_binary", "gate_ratio", "gate_absolute")


@pytest.fixture(scope="module")
def reference_training(reference_run) -> dict[str, tuple[float, float] | None]:
    """Final held-out (pass@1, mean length) per shipped training config; ``None`` when the guard tripped."""
    train_instances, heldout = split_instances(reference_run.instances, reference_run.config.heldout_fraction)
    outcomes: dict[str, tuple[float, float] | None] = {
        "prior": greedy_evaluation(reference_run.prior, reference_run.task, heldout)
    }
    for name in VARIANTS:
        config = reference_run.variant(name).train
        try:
            result = train(reference_run.prior, reference_run.task, config, train_instances, heldout)
        except DivergenceError:
            outcomes[name] = None
            continue
        outcomes[name] = (result.records[-1].pass1, result.records[-1].length_mean)
    return outcomes


@pytest.mark.slow
def test_flow_training_moves_greedy_behaviour(reference_training):
    prior_pass1, prior_length = reference_training["prior"]
    pass1, length = reference_training["reference"]
    assert pass1 > prior_pass1 or length < prior_length


@pytest.mark.slow
def test_dense_reward_dominates_outcome_reward(reference_training):
    dense, sparse = reference_training["reference"], reference_training["outcome_sparse"]
    assert dense is not None and sparse is not None
    assert dense[0] >= sparse[0]
    assert dense[1] <= sparse[1]


@pytest.mark.slow
def test_gate_ablation(reference_training):
    relu, binary = reference_training["reference"], reference_training["gate_binary"]
    assert binary is not None
    assert relu[0] >= binary[0]
    ratio = reference_training["gate_ratio"]
    assert ratio is None or relu[0] - ratio[0] >= 0.05
    absolute = reference_training["gate_absolute"]
    assert absolute is not None
    assert relu[0] - absolute[0] >= 0.05
