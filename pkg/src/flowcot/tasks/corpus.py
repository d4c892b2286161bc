from __future__ import annotations

import logging
import math
from pathlib import Path
from typing import Iterable, Sequence

from flowcot.models.model_base import State, Trajectory
from flowcot.utils.utils import read_jsonl, rng_for, write_jsonl

from .task_base import TaskFamily, TaskInstance

logger = logging.getLogger(__name__)


def synthesize_corpus(
    task: TaskFamily,
    instances: Sequence[TaskInstance],
    rate: float,
    seed: int,
    *,
    repeats: int = 1,
) -> list[Trajectory]:
    """
    Build demonstrations by inserting fillers into gold chains.

    Before every gold token (end-of-thought included) a geometric number of
    fillers is inserted: each further filler with probability ``rate``, so a
    chain of length ``g`` grows to ``g / (1 - rate)`` on average. Filler
    identities are uniform over the filler sub-vocabulary. The stored
    log-probs are those of this insertion process.

    Parameters
    ----------
    task : TaskFamily
        Family that owns the vocabulary.
    instances : Sequence[TaskInstance]
        Source instances.
    rate : float
        Filler injection rate in ``[0, 1)``.
    seed : int
        Seed of the insertion randomness.
    repeats : int, default=1
        Number of passes over ``instances``.

    Returns
    -------
    list[Trajectory]
        ``repeats * len(instances)`` trajectories, all answering gold.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"rate must lie in [0, 1), got {rate}")
    fillers = task.vocab.filler_ids
    if rate > 0 and not fillers:
        raise ValueError("A positive filler rate needs at least one filler token")

    filler_lp = math.log(rate) - math.log(len(fillers)) if rate > 0 else float("-inf")
    content_lp = math.log1p(-rate)

    corpus = []
    for repeat in range(repeats):
        for index, instance in enumerate(instances):
            rng = rng_for(seed, "corpus", repeat, index)
            thought: list[int] = []
            log_probs: list[float] = []
            for token in instance.gold_chain:
                while rate > 0 and rng.random() < rate:
                    thought.append(int(fillers[int(rng.integers(len(fillers)))]))
                    log_probs.append(filler_lp)
                thought.append(token)
                log_probs.append(content_lp)
            corpus.append(
                Trajectory(
                    state=State(instance.query, tuple(thought)),
                    answer=instance.gold_answer,
                    log_probs=tuple(log_probs),
                    terminated=True,
                    instance_id=instance.id,
                )
            )
    logger.info("Synthesized %d demonstrations at filler rate %.2f", len(corpus), rate)
    return corpus


def write_dataset(path: Path, instances: Iterable[TaskInstance]) -> int:
    """Write one ``{id, query, gold_answer, gold_chain}`` record per line."""
    return write_jsonl(path, (instance.to_dict() for instance in instances))


def read_dataset(path: Path) -> list[TaskInstance]:
    return [TaskInstance.from_dict(record) for record in read_jsonl(path)]


def write_corpus(path: Path, corpus: Iterable[Trajectory]) -> int:
    return write_jsonl(path, (trajectory.to_dict() for trajectory in corpus))


def read_corpus(path: Path) -> list[Trajectory]:
    return [Trajectory.from_dict(record) for record in read_jsonl(path)]
