from __future__ import annotations

from fractions import Fraction

import pytest

from flowcot.decode import DecodeConfig, DecodeStrategy, FlowModels
from flowcot.evaluation import (
    Arm,
    ArmSummary,
    RunRow,
    budget_sweep,
    classify_transitions,
    compare_arms,
    format_summary,
    pass_at_k,
    pass_at_k_fraction,
    passk_scaling,
    quality_trend,
    summarize_arm,
    transition_counts,
)
from flowcot.flow import PosteriorMode


def _greedy(name: str, horizon: int = 4) -> Arm:
    return Arm(name=name, decode=DecodeConfig(strategy=DecodeStrategy.STANDARD_GREEDY, horizon=horizon))


def _flow(name: str, horizon: int = 4) -> Arm:
    return Arm(
        name=name,
        decode=DecodeConfig(
            strategy=DecodeStrategy.FLOW_GREEDY, posterior_mode=PosteriorMode.EXACT_BAYES, horizon=horizon
        ),
    )


def _row(instance_id: str, correct: bool, length: int, arm: str = "a") -> RunRow:
    return RunRow(
        arm=arm, instance_id=instance_id, thought=[1] * length, answer=8, correct=correct, length=length, terminated=True
    )


# --- pass@k ------------------------------------------------------------------


def test_pass_at_k_values():
    assert pass_at_k(2, 1, 1) == 0.5
    assert pass_at_k(4, 2, 3) == 1.0
    assert pass_at_k(4, 2, 2) == pytest.approx(5 / 6)
    assert pass_at_k(10, 0, 5) == 0.0
    assert pass_at_k_fraction(4, 2, 2) == Fraction(5, 6)


def test_pass_at_k_large_n_matches_rationals():
    for c, k in [(10, 5), (3, 50), (97, 2)]:
        assert pass_at_k(100, c, k) == pytest.approx(float(pass_at_k_fraction(100, c, k)), rel=1e-10, abs=1e-12)


def test_pass_at_k_rejects_bad_arguments():
    with pytest.raises(ValueError, match="exceeds"):
        pass_at_k(3, 1, 4)
    with pytest.raises(ValueError):
        pass_at_k(3, 4, 1)
    with pytest.raises(ValueError):
        pass_at_k(3, 1, 0)


# --- summaries and transitions -------------------------------------------------


def test_summarize_arm():
    summary = summarize_arm("a", [_row("x", True, 2), _row("y", False, 4), _row("z", True, 9)])
    assert summary.n == 3
    assert summary.pass1 == pytest.approx(2 / 3)
    assert summary.mean_len == 5.0
    assert summary.median_len == 4.0


def test_transitions():
    baseline = [_row("x", True, 4), _row("y", False, 4), _row("z", False, 2)]
    guided = [_row("z", True, 1, "f"), _row("x", False, 2, "f"), _row("y", False, 4, "f")]
    records = classify_transitions(baseline, guided)
    assert [r.kind for r in records] == ["W->C", "C->W", "W->W"]
    assert [r.compression_rate for r in records] == [0.5, 0.5, 0.0]
    assert transition_counts(records) == {"W->C": 1, "C->W": 1, "C->C": 0, "W->W": 1}
    assert records[0].to_dict()["kind"] == "W->C"

    with pytest.raises(ValueError, match="same instance set"):
        classify_transitions(baseline, guided[:2])


def test_format_summary():
    text = format_summary([ArmSummary(arm="standard_greedy", n=4, pass1=0.5, mean_len=3.25, median_len=3.0)])
    header, line = text.splitlines()
    assert header.startswith("arm")
    assert "0.500" in line and "3.25" in line


# --- arm runs ------------------------------------------------------------------


def test_identical_arms_are_diagonal(chain_task, chain_instances, gold_prior):
    models = FlowModels(gold_prior)
    comparison = compare_arms(chain_instances[:10], [_greedy("first"), _greedy("second")], models, chain_task)
    counts = transition_counts(comparison.transitions["second"])
    assert counts["W->C"] == counts["C->W"] == 0
    assert counts["C->C"] + counts["W->W"] == 10
    assert comparison.summaries[0].model_dump(exclude={"arm"}) == comparison.summaries[1].model_dump(exclude={"arm"})


def test_gold_prior_greedy_is_always_correct(chain_task, chain_instances, gold_prior):
    comparison = compare_arms(chain_instances, [_greedy("greedy"), _flow("flow")], FlowModels(gold_prior), chain_task)
    assert comparison.summaries[0].pass1 == 1.0
    assert len(comparison.rows["flow"]) == len(chain_instances)
    assert all(row.mean_pfp is not None for row in comparison.rows["flow"])


def test_compare_arms_results_do_not_depend_on_workers(small_task, small_instances, filler_fit):
    arms = [_greedy("greedy"), _flow("flow")]
    serial = compare_arms(small_instances, arms, FlowModels(filler_fit), small_task, jobs=1)
    threaded = compare_arms(small_instances, arms, FlowModels(filler_fit), small_task, jobs=4)
    assert serial.rows == threaded.rows


def test_compare_arms_rejects_bad_arm_lists(chain_task, chain_instances, gold_prior):
    models = FlowModels(gold_prior)
    with pytest.raises(ValueError, match="at least two"):
        compare_arms(chain_instances, [_greedy("only")], models, chain_task)
    with pytest.raises(ValueError, match="unique"):
        compare_arms(chain_instances, [_greedy("same"), _flow("same")], models, chain_task)


# --- sweeps and trends -----------------------------------------------------------


def test_budget_sweep(small_task, small_instances, filler_fit):
    models = FlowModels(filler_fit)
    sweep = budget_sweep(small_instances[:8], [1, 2, 4], [_greedy("greedy"), _flow("flow")], models, small_task)
    assert len(sweep.rows) == 6
    for arm in ("greedy", "flow"):
        lengths = sweep.lengths(arm)
        assert len(lengths) == 3
        assert all(length <= budget for length, budget in zip(lengths, [1, 2, 4]))
        assert arm in sweep.slopes
    again = budget_sweep(small_instances[:8], [1, 2, 4], [_greedy("greedy"), _flow("flow")], models, small_task)
    assert again.rows == sweep.rows


def test_budget_sweep_needs_increasing_budgets(small_task, small_instances, filler_fit):
    with pytest.raises(ValueError, match="strictly increasing"):
        budget_sweep(small_instances, [4, 2], [_greedy("g")], FlowModels(filler_fit), small_task)


def test_passk_of_deterministic_arm_is_flat(chain_task, chain_instances, gold_prior):
    rows = passk_scaling(
        chain_instances[:5], [_greedy("greedy")], FlowModels(gold_prior), chain_task, n_samples=4, ks=[1, 2, 4]
    )
    assert [r.k for r in rows] == [1, 2, 4]
    assert len({r.pass_at_k for r in rows}) == 1
    with pytest.raises(ValueError):
        passk_scaling(chain_instances[:1], [_greedy("g")], FlowModels(gold_prior), chain_task, n_samples=2, ks=[3])


def test_quality_trend_exact_mode(small_task, small_instances, filler_fit):
    base = DecodeConfig(strategy=DecodeStrategy.FLOW_GREEDY, horizon=small_task.horizon)
    rows = quality_trend(
        small_instances[:6], [PosteriorMode.EXACT_BAYES], FlowModels(filler_fit), small_task, base, n_states=20
    )
    assert len(rows) == 1
    assert rows[0].mode == "exact_bayes"
    assert rows[0].mean_kl == pytest.approx(0.0, abs=1e-9)
    assert 0.0 <= rows[0].pass1 <= 1.0


# --- reference run ---------------------------------------------------------------


@pytest.mark.slow
def test_flow_decoding_compresses_filler_chains(reference_run):
    comparison = compare_arms(
        reference_run.instances,
        reference_run.config.arms(["standard_greedy", "flow_exact"]),
        reference_run.models(),
        reference_run.task,
    )
    greedy, flow = comparison.summaries
    assert (greedy.arm, flow.arm) == ("standard_greedy", "flow_exact")
    assert greedy.n == flow.n == 500
    assert flow.mean_len <= 0.85 * greedy.mean_len
    assert flow.pass1 >= greedy.pass1 - 0.01
    counts = transition_counts(comparison.transitions["flow_exact"])
    assert counts["W->C"] >= counts["C->W"]


@pytest.mark.slow
def test_flow_length_saturates_with_budget(reference_run):
    section = reference_run.config.decode
    sweep = budget_sweep(
        reference_run.instances,
        section.budgets,
        reference_run.config.arms(section.sweep_arms),
        reference_run.models(),
        reference_run.task,
    )
    greedy, flow = sweep.lengths("standard_greedy"), sweep.lengths("flow_exact")
    assert greedy[-1] > greedy[-2]
    assert abs(flow[-1] - flow[-2]) <= 0.1 * flow[-2]
    assert sweep.slopes["flow_exact"] < sweep.slopes["standard_greedy"]


@pytest.mark.slow
def test_better_labels_give_closer_posteriors(reference_run):
    config = reference_run.config
    base = next(arm.decode for arm in config.arms() if arm.decode.strategy.guided)
    rows = quality_trend(
        reference_run.instances,
        config.decode.quality_modes,
        reference_run.models(),
        reference_run.task,
        base,
        n_states=config.decode.quality_states,
        seed=config.seed,
    )
    kl = {row.mode: row.mean_kl for row in rows}
    assert kl["gold_label"] <= kl["latent_label"] <= kl["random_label"]
