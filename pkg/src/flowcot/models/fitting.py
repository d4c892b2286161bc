from __future__ import annotations

import logging
from typing import Iterable

import numpy as np

from .model_base import ContextTable, Trajectory, Vocabulary, window
from .tabular import TabularPolicy

logger = logging.getLogger(__name__)


def fit_mle(
    corpus: Iterable[Trajectory],
    vocab: Vocabulary,
    *,
    alpha: float,
    order: int = 2,
    label_aware: bool = False,
) -> TabularPolicy:
    """
    Fit a tabular policy by add-alpha smoothed counting.

    Every thought step contributes one count to ``(context, token)`` and
    every trajectory one count to ``(answer context, answer)``; logits are
    ``log(count + alpha)``.

    Parameters
    ----------
    corpus : Iterable[Trajectory]
        Demonstrations. With ``label_aware`` their states' label slots are
        part of the context.
    vocab : Vocabulary
        Token inventory shared with the corpus.
    alpha : float
        Additive smoothing, must be positive.
    order : int, default=2
        Markov window length.
    label_aware : bool, default=False
        Fit a posterior-style model that conditions on the label slot.

    Returns
    -------
    TabularPolicy
        The fitted policy.

    Raises
    ------
    ValueError
        If the corpus is empty or ``alpha`` is not positive.
    """
    if alpha <= 0:
        raise ValueError(f"alpha must be > 0, got {alpha}")

    table = ContextTable(vocab, order, vocab.n_label_slots if label_aware else 1)
    next_rows: list[int] = []
    next_cols: list[int] = []
    answer_rows: list[int] = []
    answer_cols: list[int] = []

    n_trajectories = 0
    for trajectory in corpus:
        n_trajectories += 1
        state = trajectory.state
        slot = vocab.label_slot(state.label) if label_aware else 0
        sequence = state.query
        for token in state.thought:
            next_rows.append(table.index(slot, window(sequence, order)))
            next_cols.append(vocab.emit_index(token))
            sequence = sequence + (token,)
        if vocab.is_terminal(state):
            sequence = sequence[:-1]
        answer_rows.append(table.index(slot, window(sequence, order)))
        answer_cols.append(vocab.answer_index(trajectory.answer))

    if n_trajectories == 0:
        raise ValueError("Cannot fit a policy on an empty corpus")

    next_counts = np.zeros((table.n_contexts, vocab.n_emit))
    answer_counts = np.zeros((table.n_contexts, vocab.n_answers))
    np.add.at(next_counts, (np.array(next_rows, dtype=np.int64), np.array(next_cols, dtype=np.int64)), 1.0)
    np.add.at(answer_counts, (np.array(answer_rows, dtype=np.int64), np.array(answer_cols, dtype=np.int64)), 1.0)

    logger.info(
        "Fitted %s tabular policy (order %d) on %d trajectories / %d steps",
        "label-aware" if label_aware else "prior",
        order,
        n_trajectories,
        len(next_rows),
    )
    return TabularPolicy(
        vocab,
        order,
        np.log(next_counts + alpha),
        np.log(answer_counts + alpha),
        label_aware=label_aware,
    )
