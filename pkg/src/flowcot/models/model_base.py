from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Hashable, Iterable, Sequence

import numpy as np

from flowcot.utils.utils import StateError, UnreachableContextError

PAD = -1
"""Left padding used in context windows shorter than the model order."""


class Role(str, Enum):
    """What a token is for inside a reasoning episode."""

    CONTENT = "content"
    FILLER = "filler"
    END_OF_THOUGHT = "end_of_thought"
    ANSWER = "answer"
    PLACEHOLDER = "placeholder"


EMITTABLE_ROLES = frozenset({Role.CONTENT, Role.FILLER, Role.END_OF_THOUGHT})


@dataclass(frozen=True, slots=True)
class Token:
    """
    One vocabulary entry.

    Parameters
    ----------
    id : int
        Index into the vocabulary.
    role : Role
        Token role.
    name : str
        Human-readable surface form.
    """

    id: int
    role: Role
    name: str


class Vocabulary:
    """
    Ordered token inventory shared by a task family and its models.

    Thought tokens (content, filler, end-of-thought) are *emittable*; answers
    are read out by a separate head and the placeholder only ever sits in the
    label slot.

    Parameters
    ----------
    tokens : Sequence[Token]
        Tokens with ids ``0..len(tokens)-1`` in order.

    Raises
    ------
    ValueError
        If ids are not contiguous, there is not exactly one end-of-thought
        token, there is more than one placeholder, or the answer block is
        empty or not contiguous.
    """

    def __init__(self, tokens: Sequence[Token]) -> None:
        tokens = tuple(tokens)
        for position, token in enumerate(tokens):
            if token.id != position:
                raise ValueError(f"Token ids must be 0..V-1 in order; got id {token.id} at {position}")

        ends = [t.id for t in tokens if t.role is Role.END_OF_THOUGHT]
        if len(ends) != 1:
            raise ValueError(f"Exactly one end-of-thought token is required, found {len(ends)}")

        answers = [t.id for t in tokens if t.role is Role.ANSWER]
        if not answers:
            raise ValueError("The vocabulary needs at least one answer token")
        if answers != list(range(answers[0], answers[0] + len(answers))):
            raise ValueError("Answer tokens must form one contiguous block")

        placeholders = [t.id for t in tokens if t.role is Role.PLACEHOLDER]
        if len(placeholders) > 1:
            raise ValueError("At most one placeholder token is allowed")

        self._tokens = tokens
        self.end_id: int = ends[0]
        self.answer_ids: tuple[int, ...] = tuple(answers)
        self.placeholder_id: int | None = placeholders[0] if placeholders else None
        self.filler_ids: tuple[int, ...] = tuple(t.id for t in tokens if t.role is Role.FILLER)
        self.emit_ids: tuple[int, ...] = tuple(t.id for t in tokens if t.role in EMITTABLE_ROLES)
        self.label_ids: tuple[int, ...] = self.answer_ids + (
            (self.placeholder_id,) if self.placeholder_id is not None else ()
        )

        self._emit_index = np.full(len(tokens), -1, dtype=np.int64)
        self._emit_index[list(self.emit_ids)] = np.arange(len(self.emit_ids))
        self._label_slot = {token_id: slot + 1 for slot, token_id in enumerate(self.label_ids)}

    # --- construction ------------------------------------------------------

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, Role | str]]) -> "Vocabulary":
        """Build a vocabulary from ``(name, role)`` pairs in id order."""
        return cls([Token(i, Role(role), name) for i, (name, role) in enumerate(pairs)])

    def to_json(self) -> list[list[str]]:
        """Serialize as ``[[name, role], ...]``."""
        return [[t.name, t.role.value] for t in self._tokens]

    @classmethod
    def from_json(cls, payload: Sequence[Sequence[str]]) -> "Vocabulary":
        return cls.from_pairs((str(name), str(role)) for name, role in payload)

    # --- lookups -----------------------------------------------------------

    def __len__(self) -> int:
        return len(self._tokens)

    def __getitem__(self, token_id: int) -> Token:
        return self._tokens[token_id]

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and self._tokens == other._tokens

    def __hash__(self) -> int:
        return hash(self._tokens)

    @property
    def size(self) -> int:
        return len(self._tokens)

    @property
    def tokens(self) -> tuple[Token, ...]:
        return self._tokens

    @property
    def n_emit(self) -> int:
        return len(self.emit_ids)

    @property
    def n_answers(self) -> int:
        return len(self.answer_ids)

    @property
    def n_label_slots(self) -> int:
        """Number of label-slot values: empty slot plus every answer and the placeholder."""
        return 1 + len(self.label_ids)

    def role(self, token_id: int) -> Role:
        return self._tokens[token_id].role

    def name(self, token_id: int) -> str:
        return self._tokens[token_id].name

    def emit_index(self, token_id: int) -> int:
        """Column of an emittable token in parameter tables, ``-1`` otherwise."""
        if token_id == PAD:
            return -1
        return int(self._emit_index[token_id])

    def answer_index(self, token_id: int) -> int:
        """Position of an answer token within the answer block."""
        if not self.is_answer(token_id):
            raise ValueError(f"Token {token_id} ({self.describe(token_id)}) is not an answer token")
        return token_id - self.answer_ids[0]

    def label_slot(self, label: int | None) -> int:
        """Slot index for the label position: 0 for an empty slot."""
        if label is None:
            return 0
        try:
            return self._label_slot[label]
        except KeyError:
            raise StateError(
                f"Token {label} ({self.describe(label)}) cannot occupy the label slot"
            ) from None

    def is_answer(self, token_id: int) -> bool:
        return 0 <= token_id < len(self._tokens) and self._tokens[token_id].role is Role.ANSWER

    def is_terminal(self, state: "State") -> bool:
        """True when the thought ends with end-of-thought."""
        return bool(state.thought) and state.thought[-1] == self.end_id

    def describe(self, token_id: int) -> str:
        if 0 <= token_id < len(self._tokens):
            return self._tokens[token_id].name
        return "<pad>" if token_id == PAD else f"<{token_id}?>"

    def render(self, token_ids: Iterable[int]) -> str:
        return " ".join(self.describe(t) for t in token_ids)

    # --- validation ----------------------------------------------------------

    def validate_state(self, state: "State") -> None:
        """
        Check the State invariants against this vocabulary.

        Raises
        ------
        StateError
            On out-of-range ids, non-emittable tokens in the query or thought,
            or an end-of-thought anywhere but the last thought position.
        """
        for token_id in state.query + state.thought:
            if not 0 <= token_id < len(self._tokens):
                raise StateError(f"Token id {token_id} outside vocabulary of size {len(self._tokens)}")
            if self._tokens[token_id].role not in EMITTABLE_ROLES:
                raise StateError(
                    f"Token {self.describe(token_id)} ({self._tokens[token_id].role.value}) "
                    "cannot appear in a query or thought"
                )
        if self.end_id in state.query:
            raise StateError("The query may not contain end-of-thought")
        if self.end_id in state.thought[:-1]:
            raise StateError("End-of-thought may only appear as the last thought token")
        if state.label is not None:
            self.label_slot(state.label)


@dataclass(frozen=True, slots=True)
class State:
    """
    A reasoning prefix: the query, the thought so far and an optional label slot.

    Parameters
    ----------
    query : tuple[int, ...]
        Query token ids.
    thought : tuple[int, ...], default=()
        Thought token ids emitted so far.
    label : int | None, default=None
        Content of the posterior label slot (answer or placeholder token).
        Prior models never read it.
    """

    query: tuple[int, ...]
    thought: tuple[int, ...] = ()
    label: int | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "query", tuple(int(t) for t in self.query))
        object.__setattr__(self, "thought", tuple(int(t) for t in self.thought))

    @property
    def step_index(self) -> int:
        return len(self.thought)

    @property
    def sequence(self) -> tuple[int, ...]:
        """Query followed by thought."""
        return self.query + self.thought

    def extend(self, token: int) -> "State":
        return State(self.query, self.thought + (int(token),), self.label)

    def with_label(self, label: int | None) -> "State":
        return State(self.query, self.thought, label)

    def prefix(self, length: int) -> "State":
        """State after the first ``length`` thought tokens."""
        return State(self.query, self.thought[:length], self.label)


def window(sequence: Sequence[int], k: int) -> tuple[int, ...]:
    """Last ``k`` tokens of ``sequence``, left padded with :data:`PAD`."""
    if k <= 0:
        return ()
    tail = tuple(sequence[-k:])
    return (PAD,) * (k - len(tail)) + tail


@dataclass(slots=True)
class Trajectory:
    """
    A finished rollout.

    Parameters
    ----------
    state : State
        Final state. Its thought ends with end-of-thought unless the horizon cut it.
    answer : int
        Emitted answer token.
    log_probs : tuple[float, ...]
        Per-step log-probabilities of the emitted thought tokens under the
        generating policy.
    terminated : bool
        True when the thought ended with end-of-thought, False on horizon cutoff.
    instance_id : str | None
        Task instance the trajectory answers, when known.
    """

    state: State
    answer: int
    log_probs: tuple[float, ...]
    terminated: bool
    instance_id: str | None = None

    def __post_init__(self) -> None:
        self.log_probs = tuple(float(x) for x in self.log_probs)
        if len(self.log_probs) != self.state.step_index:
            raise StateError(
                f"Trajectory has {len(self.log_probs)} log-probs for {self.state.step_index} thought tokens"
            )
        for value in self.log_probs:
            if not math.isfinite(value) or value > 0.0:
                raise StateError(f"Stored log-probs must be finite and <= 0, got {value}")

    @property
    def length(self) -> int:
        """Thought length (query and answer excluded)."""
        return self.state.step_index

    @property
    def tokens(self) -> tuple[int, ...]:
        return self.state.thought

    def to_dict(self) -> dict[str, Any]:
        return {
            "instance_id": self.instance_id,
            "query": list(self.state.query),
            "thought": list(self.state.thought),
            "label": self.state.label,
            "answer": self.answer,
            "log_probs": list(self.log_probs),
            "terminated": self.terminated,
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> "Trajectory":
        return cls(
            state=State(payload["query"], payload["thought"], payload.get("label")),
            answer=int(payload["answer"]),
            log_probs=tuple(payload["log_probs"]),
            terminated=bool(payload["terminated"]),
            instance_id=payload.get("instance_id"),
        )


class CondSeqModel(ABC):
    """
    Abstract autoregressive model over thought tokens with an answer head.

    Implementations are immutable after construction, so concurrent readers
    need no locking.
    """

    @property
    @abstractmethod
    def label(self) -> str:
        """
        Name of the backend.

        Returns
        -------
        str
            Backend identifier, e.g. ``"tabular"``.
        """
        raise NotImplementedError

    @property
    @abstractmethod
    def vocab(self) -> Vocabulary:
        """Vocabulary the model is defined over."""
        raise NotImplementedError

    @property
    @abstractmethod
    def label_aware(self) -> bool:
        """Whether the model reads the label slot of a state."""
        raise NotImplementedError

    @abstractmethod
    def next_token_logprobs(self, state: State) -> np.ndarray:
        """
        Next-token distribution.

        Parameters
        ----------
        state : State
            Current reasoning prefix.

        Returns
        -------
        np.ndarray
            Log-probabilities of length ``vocab.size``; non-emittable tokens
            are ``-inf``.
        """
        raise NotImplementedError

    @abstractmethod
    def answer_logprobs(self, state: State, *, force: bool = False) -> np.ndarray:
        """
        Answer-head distribution over the answer block.

        Parameters
        ----------
        state : State
            A terminal state, or any state when ``force`` is true.
        force : bool, default=False
            Answer immediately from a non-terminal state (horizon cutoff).

        Returns
        -------
        np.ndarray
            Log-probabilities of length ``vocab.n_answers``.

        Raises
        ------
        StateError
            If the state is not terminal and ``force`` is false.
        """
        raise NotImplementedError

    @abstractmethod
    def context_key(self, state: State) -> Hashable:
        """
        Hashable summary of everything the model reads from ``state``.

        Together with the step index it must determine the model's outputs on
        the state and on every extension of it; the oracle memoises on it.
        """
        raise NotImplementedError

    def answer_logprob(self, state: State, answer: int, *, force: bool = False) -> float:
        """Log-probability of one answer token (see :meth:`answer_logprobs`)."""
        column = self.vocab.answer_index(answer)
        return float(self.answer_logprobs(state, force=force)[column])

    def _require_answerable(self, state: State, force: bool) -> None:
        if not force and not self.vocab.is_terminal(state):
            raise StateError(
                "answer_logprob needs a terminal state; use the oracle's "
                "marginal_answer_logprob for a non-terminal state, or force=True "
                "for immediate answering"
            )

    def _slot(self, state: State) -> int:
        return self.vocab.label_slot(state.label) if self.label_aware else 0


class DifferentiablePolicy(CondSeqModel):
    """
    A CondSeqModel with a flat parameter vector and analytic log-gradients.
    """

    @abstractmethod
    def parameters(self) -> np.ndarray:
        """Copy of the flat parameter vector."""
        raise NotImplementedError

    @abstractmethod
    def with_parameters(self, theta: np.ndarray) -> "DifferentiablePolicy":
        """New policy of the same shape with parameters ``theta``."""
        raise NotImplementedError

    @abstractmethod
    def grad_log_next(self, state: State, token: int) -> np.ndarray:
        """Gradient of ``log pi(token | state)`` with respect to the parameters."""
        raise NotImplementedError

    @abstractmethod
    def grad_log_answer(self, state: State, answer: int, *, force: bool = False) -> np.ndarray:
        """Gradient of ``log p(answer | state)`` with respect to the parameters."""
        raise NotImplementedError

    @property
    def n_parameters(self) -> int:
        return int(self.parameters().size)


@dataclass(slots=True)
class ContextTable:
    """
    Dense indexing of (label slot, window) contexts.

    Windows range over the emittable alphabet plus padding, so every state
    built from valid tokens maps to exactly one row.
    """

    vocab: Vocabulary
    order: int
    n_slots: int
    base: int = field(init=False)
    n_windows: int = field(init=False)

    def __post_init__(self) -> None:
        self.base = self.vocab.n_emit + 1
        self.n_windows = self.base**self.order

    @property
    def n_contexts(self) -> int:
        return self.n_slots * self.n_windows

    def index(self, slot: int, tokens: tuple[int, ...]) -> int:
        code = 0
        for token in tokens:
            column = self.vocab.emit_index(token) if token != PAD else self.base - 1
            if column < 0:
                raise UnreachableContextError(
                    f"Context (slot={slot}, window=[{self.vocab.render(tokens)}]) "
                    f"contains the non-emittable token {self.vocab.describe(token)}"
                )
            code = code * self.base + column
        return slot * self.n_windows + code

    def decode(self, index: int) -> tuple[int, tuple[int, ...]]:
        """Inverse of :meth:`index`: ``(slot, window)``."""
        slot, code = divmod(index, self.n_windows)
        columns = []
        for _ in range(self.order):
            code, column = divmod(code, self.base)
            columns.append(column)
        tokens = tuple(
            PAD if column == self.base - 1 else self.vocab.emit_ids[column] for column in reversed(columns)
        )
        return slot, tokens
