from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from flowcot.config import RunConfig, load_run_config
from flowcot.decode import FlowModels
from flowcot.flow import posterior_training_corpus
from flowcot.models.fitting import fit_mle
from flowcot.models.linear import FeatureSpec, LinearSoftmaxPolicy
from flowcot.models.model_base import PAD, Role, Vocabulary
from flowcot.models.tabular import TabularPolicy
from flowcot.tasks.corpus import synthesize_corpus
from flowcot.tasks.modular_chain import ModularChainTask
from flowcot.tasks.task_base import TaskFamily, TaskFamilyConfig, TaskInstance
from flowcot.tasks.task_factory import TaskFactory
from flowcot.utils.utils import rng_for

NEG_INF = -math.inf


# --- hand-built two-token worlds ---------------------------------------------


@pytest.fixture
def branch_vocab() -> Vocabulary:
    """end-of-thought, one content token, two answers."""
    return Vocabulary.from_pairs([("<eot>", Role.END_OF_THOUGHT), ("x", Role.CONTENT), ("a0", "answer"), ("a1", "answer")])


@pytest.fixture
def branch_prior(branch_vocab: Vocabulary) -> TabularPolicy:
    """
    Prior (0.5, 0.5) over (end, x) after the query ``x``.

    Stopping answers a0 with probability 0.9, continuing to the horizon
    with 0.1, so the exact posterior for a0 is (0.9, 0.1).
    """

    def answer_fn(slot: int, tokens: tuple[int, ...]) -> np.ndarray:
        if tokens == (PAD, 1):
            return np.log([0.9, 0.1])
        if tokens == (1, 1):
            return np.log([0.1, 0.9])
        return np.zeros(2)

    return TabularPolicy.from_functions(branch_vocab, 2, lambda slot, tokens: np.zeros(2), answer_fn)


@pytest.fixture
def branch_instance() -> TaskInstance:
    return TaskInstance(id="branch", query=(1,), gold_answer=2, gold_chain=(0,))


@pytest.fixture
def filler_vocab() -> Vocabulary:
    return Vocabulary.from_pairs(
        [
            ("<eot>", Role.END_OF_THOUGHT),
            ("c", Role.CONTENT),
            ("~", Role.FILLER),
            ("<ans?>", Role.PLACEHOLDER),
            ("a0", Role.ANSWER),
            ("a1", Role.ANSWER),
        ]
    )


def _fixed_next(vocab: Vocabulary, content: float, filler: float, *, label_aware: bool = False) -> TabularPolicy:
    logits = np.array([NEG_INF, math.log(content), math.log(filler)])
    return TabularPolicy.from_functions(
        vocab, 1, lambda slot, tokens: logits, lambda slot, tokens: np.zeros(2), label_aware=label_aware
    )


@pytest.fixture
def filler_prior(filler_vocab: Vocabulary) -> TabularPolicy:
    """Prior 0.4 content / 0.6 filler; end-of-thought is never emitted."""
    return _fixed_next(filler_vocab, 0.4, 0.6)


@pytest.fixture
def filler_posterior(filler_vocab: Vocabulary) -> TabularPolicy:
    """Label-aware posterior 0.8 content / 0.2 filler."""
    return _fixed_next(filler_vocab, 0.8, 0.2, label_aware=True)


@pytest.fixture
def filler_instance() -> TaskInstance:
    return TaskInstance(id="filler", query=(1,), gold_answer=4, gold_chain=(1, 0))


@pytest.fixture
def filler_blind(filler_vocab: Vocabulary) -> TabularPolicy:
    """
    Emits only fillers (0.7) or end-of-thought (0.3) and answers a0 with 0.7
    whatever it has seen, so no thought token moves ``p(y | I)``.
    """
    return TabularPolicy.from_functions(
        filler_vocab,
        1,
        lambda slot, tokens: np.array([math.log(0.3), NEG_INF, math.log(0.7)]),
        lambda slot, tokens: np.log([0.7, 0.3]),
    )


# --- modular chain tasks -----------------------------------------------------


@pytest.fixture
def small_task() -> ModularChainTask:
    return ModularChainTask(TaskFamilyConfig(modulus=3, chain_length=(1, 2), filler_count=1, horizon=4, seed=0))


@pytest.fixture
def small_instances(small_task: ModularChainTask) -> list[TaskInstance]:
    return small_task.generate(20)


@pytest.fixture
def filler_fit(small_task: ModularChainTask, small_instances: list[TaskInstance]) -> TabularPolicy:
    """Order-2 MLE on a rate-0.5 filler corpus."""
    corpus = synthesize_corpus(small_task, small_instances, rate=0.5, seed=0, repeats=3)
    return fit_mle(corpus, small_task.vocab, alpha=0.1, order=2)


@pytest.fixture
def random_tabular(small_task: ModularChainTask) -> TabularPolicy:
    return TabularPolicy.random(small_task.vocab, 2, rng_for(0, "tests", "tabular"), scale=1.0)


@pytest.fixture
def chain_task() -> ModularChainTask:
    """Single-operation chains: an order-2 window always sees the whole query."""
    return ModularChainTask(TaskFamilyConfig(modulus=3, chain_length=(1, 1), filler_count=1, horizon=4, seed=0))


@pytest.fixture
def chain_instances(chain_task: ModularChainTask) -> list[TaskInstance]:
    return chain_task.generate(30)


@pytest.fixture
def gold_prior(chain_task: ModularChainTask, chain_instances: list[TaskInstance]) -> TabularPolicy:
    """Fitted on filler-free gold chains, so greedy decoding reproduces them."""
    corpus = synthesize_corpus(chain_task, chain_instances, rate=0.0, seed=0, repeats=2)
    return fit_mle(corpus, chain_task.vocab, alpha=0.01, order=2)


@pytest.fixture
def tiny_task() -> ModularChainTask:
    return ModularChainTask(TaskFamilyConfig(modulus=2, chain_length=(1, 1), filler_count=1, horizon=3, seed=0))


@pytest.fixture
def tiny_instance(tiny_task: ModularChainTask) -> TaskInstance:
    return tiny_task.make_instance(0, [1])


@pytest.fixture
def tiny_linear(tiny_task: ModularChainTask) -> LinearSoftmaxPolicy:
    return LinearSoftmaxPolicy.random(
        tiny_task.vocab, FeatureSpec(order=1, bias=False), rng_for(0, "tests", "linear"), scale=0.5
    )


# --- shipped reference run -----------------------------------------------------


CONFIG_DIR = Path(__file__).resolve().parents[1] / "configs"


@dataclass(slots=True)
class ReferenceRun:
    """The reference config's dataset and fitted models, built the way ``gen`` and ``fit`` build them."""

    config: RunConfig
    task: TaskFamily
    instances: list[TaskInstance]
    prior: TabularPolicy
    posterior: TabularPolicy

    def models(self) -> FlowModels:
        return FlowModels(
            self.prior, self.posterior, max_trajectories=self.config.oracle.max_trajectories, seed=self.config.seed
        )

    def variant(self, name: str) -> RunConfig:
        """A shipped config next to the reference one, e.g. ``gate_ratio``."""
        return load_run_config(CONFIG_DIR / f"{name}.json")


@pytest.fixture(scope="session")
def reference_run() -> ReferenceRun:
    config = load_run_config(CONFIG_DIR / "reference.json")
    task = TaskFactory.create(config.task)
    instances = task.generate(config.n_instances)
    corpus = synthesize_corpus(task, instances, config.task.filler_rate, config.seed, repeats=config.model.corpus_repeats)
    prior = fit_mle(corpus, task.vocab, alpha=config.model.alpha, order=config.model.order)
    posterior = fit_mle(
        posterior_training_corpus(corpus, task.vocab),
        task.vocab,
        alpha=config.model.alpha,
        order=config.model.order,
        label_aware=True,
    )
    return ReferenceRun(config=config, task=task, instances=instances, prior=prior, posterior=posterior)
