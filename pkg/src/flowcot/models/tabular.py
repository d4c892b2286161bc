from __future__ import annotations

from typing import Callable, Hashable

import numpy as np

from flowcot.utils.utils import StateError, log_normalize

from .model_base import ContextTable, DifferentiablePolicy, State, Vocabulary, window

LogitFn = Callable[[int, tuple[int, ...]], np.ndarray]


class TabularPolicy(DifferentiablePolicy):
    """
    Markov-window policy with dense logit tables.

    The next-token context of a state is ``(label slot, last k tokens of
    query + thought)``; the answer context is the same window taken after
    dropping a trailing end-of-thought. Every (slot, window) combination over
    the emittable alphabet has a row, so lookups never miss.

    Parameters
    ----------
    vocab : Vocabulary
        Token inventory.
    order : int
        Markov window length ``k``.
    next_logits : np.ndarray
        Shape ``(n_contexts, vocab.n_emit)``, rows in context-index order.
    answer_logits : np.ndarray
        Shape ``(n_contexts, vocab.n_answers)``.
    label_aware : bool, default=False
        Whether the label slot is part of the context. Prior policies leave
        it off so they never read the slot.
    """

    def __init__(
        self,
        vocab: Vocabulary,
        order: int,
        next_logits: np.ndarray,
        answer_logits: np.ndarray,
        *,
        label_aware: bool = False,
    ) -> None:
        if order < 1:
            raise ValueError(f"order must be >= 1, got {order}")
        self._vocab = vocab
        self._order = int(order)
        self._label_aware = bool(label_aware)
        self._table = ContextTable(vocab, self._order, vocab.n_label_slots if label_aware else 1)

        next_logits = np.array(next_logits, dtype=np.float64)
        answer_logits = np.array(answer_logits, dtype=np.float64)
        expected_next = (self._table.n_contexts, vocab.n_emit)
        expected_answer = (self._table.n_contexts, vocab.n_answers)
        if next_logits.shape != expected_next:
            raise ValueError(f"next_logits has shape {next_logits.shape}, expected {expected_next}")
        if answer_logits.shape != expected_answer:
            raise ValueError(f"answer_logits has shape {answer_logits.shape}, expected {expected_answer}")

        self._next_logits = next_logits
        self._answer_logits = answer_logits

        full = np.full((self._table.n_contexts, vocab.size), -np.inf)
        full[:, list(vocab.emit_ids)] = log_normalize(next_logits)
        full.setflags(write=False)
        self._next_lp = full
        answer_lp = log_normalize(answer_logits)
        answer_lp.setflags(write=False)
        self._answer_lp = answer_lp
        self._emit_cols = np.array(vocab.emit_ids)

    # --- constructors ------------------------------------------------------

    @classmethod
    def uniform(cls, vocab: Vocabulary, order: int, *, label_aware: bool = False) -> "TabularPolicy":
        """All-zero logits: uniform over emittable tokens and over answers."""
        table = ContextTable(vocab, order, vocab.n_label_slots if label_aware else 1)
        return cls(
            vocab,
            order,
            np.zeros((table.n_contexts, vocab.n_emit)),
            np.zeros((table.n_contexts, vocab.n_answers)),
            label_aware=label_aware,
        )

    @classmethod
    def random(
        cls,
        vocab: Vocabulary,
        order: int,
        rng: np.random.Generator,
        *,
        scale: float = 1.0,
        label_aware: bool = False,
    ) -> "TabularPolicy":
        """Gaussian logits with standard deviation ``scale``."""
        table = ContextTable(vocab, order, vocab.n_label_slots if label_aware else 1)
        return cls(
            vocab,
            order,
            rng.normal(0.0, scale, size=(table.n_contexts, vocab.n_emit)),
            rng.normal(0.0, scale, size=(table.n_contexts, vocab.n_answers)),
            label_aware=label_aware,
        )

    @classmethod
    def from_functions(
        cls,
        vocab: Vocabulary,
        order: int,
        next_fn: LogitFn,
        answer_fn: LogitFn,
        *,
        label_aware: bool = False,
    ) -> "TabularPolicy":
        """
        Fill both tables by calling ``fn(slot, window)`` for every context.

        ``next_fn`` returns ``n_emit`` logits in ``vocab.emit_ids`` order and
        ``answer_fn`` returns ``n_answers`` logits.
        """
        table = ContextTable(vocab, order, vocab.n_label_slots if label_aware else 1)
        next_logits = np.empty((table.n_contexts, vocab.n_emit))
        answer_logits = np.empty((table.n_contexts, vocab.n_answers))
        for index in range(table.n_contexts):
            slot, tokens = table.decode(index)
            next_logits[index] = next_fn(slot, tokens)
            answer_logits[index] = answer_fn(slot, tokens)
        return cls(vocab, order, next_logits, answer_logits, label_aware=label_aware)

    # --- CondSeqModel ------------------------------------------------------

    @property
    def label(self) -> str:
        return "tabular"

    @property
    def vocab(self) -> Vocabulary:
        return self._vocab

    @property
    def label_aware(self) -> bool:
        return self._label_aware

    @property
    def order(self) -> int:
        return self._order

    @property
    def table(self) -> ContextTable:
        return self._table

    @property
    def next_logits(self) -> np.ndarray:
        return self._next_logits.copy()

    @property
    def answer_logits(self) -> np.ndarray:
        return self._answer_logits.copy()

    def next_context(self, state: State) -> int:
        return self._table.index(self._slot(state), window(state.sequence, self._order))

    def answer_context(self, state: State) -> int:
        sequence = state.sequence
        if self._vocab.is_terminal(state):
            sequence = sequence[:-1]
        return self._table.index(self._slot(state), window(sequence, self._order))

    def next_token_logprobs(self, state: State) -> np.ndarray:
        return self._next_lp[self.next_context(state)]

    def answer_logprobs(self, state: State, *, force: bool = False) -> np.ndarray:
        self._require_answerable(state, force)
        return self._answer_lp[self.answer_context(state)]

    def context_key(self, state: State) -> Hashable:
        return (self._slot(state), window(state.sequence, self._order + 1))

    # --- DifferentiablePolicy ----------------------------------------------

    def parameters(self) -> np.ndarray:
        return np.concatenate([self._next_logits.ravel(), self._answer_logits.ravel()])

    def with_parameters(self, theta: np.ndarray) -> "TabularPolicy":
        theta = np.asarray(theta, dtype=np.float64)
        split = self._next_logits.size
        if theta.size != split + self._answer_logits.size:
            raise ValueError(f"Expected {split + self._answer_logits.size} parameters, got {theta.size}")
        return TabularPolicy(
            self._vocab,
            self._order,
            theta[:split].reshape(self._next_logits.shape),
            theta[split:].reshape(self._answer_logits.shape),
            label_aware=self._label_aware,
        )

    def grad_log_next(self, state: State, token: int) -> np.ndarray:
        column = self._vocab.emit_index(token)
        if column < 0:
            raise StateError(f"Token {self._vocab.describe(token)} is not emittable")
        row = self.next_context(state)
        n_emit = self._vocab.n_emit
        grad = np.zeros(self._next_logits.size + self._answer_logits.size)
        start = row * n_emit
        grad[start : start + n_emit] = -np.exp(self._next_lp[row, self._emit_cols])
        grad[start + column] += 1.0
        return grad

    def grad_log_answer(self, state: State, answer: int, *, force: bool = False) -> np.ndarray:
        self._require_answerable(state, force)
        column = self._vocab.answer_index(answer)
        row = self.answer_context(state)
        n_answers = self._vocab.n_answers
        grad = np.zeros(self._next_logits.size + self._answer_logits.size)
        start = self._next_logits.size + row * n_answers
        grad[start : start + n_answers] = -np.exp(self._answer_lp[row])
        grad[start + column] += 1.0
        return grad
