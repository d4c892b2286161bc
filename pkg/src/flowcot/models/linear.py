from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Any, Hashable

import numpy as np

from flowcot.utils.utils import StateError, log_normalize

from .model_base import PAD, DifferentiablePolicy, State, Vocabulary, window


@dataclass(frozen=True, slots=True)
class FeatureSpec:
    """
    Feature map of a :class:`LinearSoftmaxPolicy`.

    Parameters
    ----------
    order : int, default=2
        Number of trailing tokens encoded (one one-hot block per position).
    step_buckets : int, default=0
        One-hot buckets of the step index, the last bucket absorbing longer
        thoughts. 0 disables the block. Not used by the answer head.
    query_features : bool, default=False
        Add a bag-of-tokens count block over the query.
    label_aware : bool, default=False
        Add a one-hot block for the label slot.
    bias : bool, default=True
        Add a constant feature.
    """

    order: int = 2
    step_buckets: int = 0
    query_features: bool = False
    label_aware: bool = False
    bias: bool = True

    def __post_init__(self) -> None:
        if self.order < 1:
            raise ValueError(f"order must be >= 1, got {self.order}")
        if self.step_buckets < 0:
            raise ValueError(f"step_buckets must be >= 0, got {self.step_buckets}")

    def window_dim(self, vocab: Vocabulary) -> int:
        return self.order * (vocab.n_emit + 1)

    def next_dim(self, vocab: Vocabulary) -> int:
        return self.window_dim(vocab) + self.step_buckets + self._shared_dim(vocab)

    def answer_dim(self, vocab: Vocabulary) -> int:
        return self.window_dim(vocab) + self._shared_dim(vocab)

    def _shared_dim(self, vocab: Vocabulary) -> int:
        return (
            (vocab.n_emit if self.query_features else 0)
            + (vocab.n_label_slots if self.label_aware else 0)
            + (1 if self.bias else 0)
        )

    def to_json(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_json(cls, payload: dict[str, Any]) -> "FeatureSpec":
        return cls(**payload)


class LinearSoftmaxPolicy(DifferentiablePolicy):
    """
    Log-linear policy: ``pi(s | I) ∝ exp(phi(I) . W[:, s])`` over emittable tokens.

    The answer head is a second log-linear model over the answer block, fed
    by the window before end-of-thought. Parameters are the two weight
    matrices flattened row-major and concatenated.

    Parameters
    ----------
    vocab : Vocabulary
        Token inventory.
    features : FeatureSpec
        Feature map description.
    weights_next : np.ndarray
        Shape ``(features.next_dim(vocab), vocab.n_emit)``.
    weights_answer : np.ndarray
        Shape ``(features.answer_dim(vocab), vocab.n_answers)``.
    """

    def __init__(
        self,
        vocab: Vocabulary,
        features: FeatureSpec,
        weights_next: np.ndarray,
        weights_answer: np.ndarray,
    ) -> None:
        self._vocab = vocab
        self._features = features
        weights_next = np.array(weights_next, dtype=np.float64)
        weights_answer = np.array(weights_answer, dtype=np.float64)
        expected_next = (features.next_dim(vocab), vocab.n_emit)
        expected_answer = (features.answer_dim(vocab), vocab.n_answers)
        if weights_next.shape != expected_next:
            raise ValueError(f"weights_next has shape {weights_next.shape}, expected {expected_next}")
        if weights_answer.shape != expected_answer:
            raise ValueError(f"weights_answer has shape {weights_answer.shape}, expected {expected_answer}")
        weights_next.setflags(write=False)
        weights_answer.setflags(write=False)
        self._w_next = weights_next
        self._w_answer = weights_answer
        self._emit_cols = list(vocab.emit_ids)

    @classmethod
    def zeros(cls, vocab: Vocabulary, features: FeatureSpec) -> "LinearSoftmaxPolicy":
        """Uniform policy and uniform answer head."""
        return cls(
            vocab,
            features,
            np.zeros((features.next_dim(vocab), vocab.n_emit)),
            np.zeros((features.answer_dim(vocab), vocab.n_answers)),
        )

    @classmethod
    def random(
        cls,
        vocab: Vocabulary,
        features: FeatureSpec,
        rng: np.random.Generator,
        *,
        scale: float = 0.5,
    ) -> "LinearSoftmaxPolicy":
        return cls(
            vocab,
            features,
            rng.normal(0.0, scale, size=(features.next_dim(vocab), vocab.n_emit)),
            rng.normal(0.0, scale, size=(features.answer_dim(vocab), vocab.n_answers)),
        )

    @property
    def label(self) -> str:
        return "linear"

    @property
    def vocab(self) -> Vocabulary:
        return self._vocab

    @property
    def label_aware(self) -> bool:
        return self._features.label_aware

    @property
    def features(self) -> FeatureSpec:
        return self._features

    @property
    def weights_next(self) -> np.ndarray:
        return self._w_next

    @property
    def weights_answer(self) -> np.ndarray:
        return self._w_answer

    # --- features ----------------------------------------------------------

    def _window_block(self, out: np.ndarray, tokens: tuple[int, ...]) -> int:
        base = self._vocab.n_emit + 1
        # tokens[-1] is the most recent one and lands in block 0
        for position, token in enumerate(reversed(tokens)):
            column = base - 1 if token == PAD else self._vocab.emit_index(token)
            if column < 0:
                raise StateError(f"Token {self._vocab.describe(token)} cannot appear in a context window")
            out[position * base + column] = 1.0
        return self._features.order * base

    def _shared_block(self, out: np.ndarray, offset: int, state: State) -> None:
        spec = self._features
        if spec.query_features:
            for token in state.query:
                out[offset + self._vocab.emit_index(token)] += 1.0
            offset += self._vocab.n_emit
        if spec.label_aware:
            out[offset + self._vocab.label_slot(state.label)] = 1.0
            offset += self._vocab.n_label_slots
        if spec.bias:
            out[offset] = 1.0

    def next_features(self, state: State) -> np.ndarray:
        """Feature vector ``phi(state)`` for the next-token head."""
        spec = self._features
        phi = np.zeros(spec.next_dim(self._vocab))
        offset = self._window_block(phi, window(state.sequence, spec.order))
        if spec.step_buckets:
            phi[offset + min(state.step_index, spec.step_buckets - 1)] = 1.0
            offset += spec.step_buckets
        self._shared_block(phi, offset, state)
        return phi

    def answer_features(self, state: State) -> np.ndarray:
        """Feature vector for the answer head (window taken before end-of-thought)."""
        sequence = state.sequence
        if self._vocab.is_terminal(state):
            sequence = sequence[:-1]
        phi = np.zeros(self._features.answer_dim(self._vocab))
        offset = self._window_block(phi, window(sequence, self._features.order))
        self._shared_block(phi, offset, state)
        return phi

    # --- CondSeqModel ------------------------------------------------------

    def _emit_logprobs(self, state: State) -> np.ndarray:
        return log_normalize(self.next_features(state) @ self._w_next)

    def next_token_logprobs(self, state: State) -> np.ndarray:
        full = np.full(self._vocab.size, -np.inf)
        full[self._emit_cols] = self._emit_logprobs(state)
        return full

    def answer_logprobs(self, state: State, *, force: bool = False) -> np.ndarray:
        self._require_answerable(state, force)
        return log_normalize(self.answer_features(state) @ self._w_answer)

    def context_key(self, state: State) -> Hashable:
        spec = self._features
        step = min(state.step_index, spec.step_buckets - 1) if spec.step_buckets else 0
        query = state.query if spec.query_features else ()
        return (self._slot(state), window(state.sequence, spec.order + 1), step, query)

    # --- DifferentiablePolicy ----------------------------------------------

    def parameters(self) -> np.ndarray:
        return np.concatenate([self._w_next.ravel(), self._w_answer.ravel()])

    def with_parameters(self, theta: np.ndarray) -> "LinearSoftmaxPolicy":
        theta = np.asarray(theta, dtype=np.float64)
        split = self._w_next.size
        if theta.size != split + self._w_answer.size:
            raise ValueError(f"Expected {split + self._w_answer.size} parameters, got {theta.size}")
        return LinearSoftmaxPolicy(
            self._vocab,
            self._features,
            theta[:split].reshape(self._w_next.shape),
            theta[split:].reshape(self._w_answer.shape),
        )

    def grad_log_next(self, state: State, token: int) -> np.ndarray:
        column = self._vocab.emit_index(token)
        if column < 0:
            raise StateError(f"Token {self._vocab.describe(token)} is not emittable")
        phi = self.next_features(state)
        residual = -np.exp(log_normalize(phi @ self._w_next))
        residual[column] += 1.0
        return np.concatenate([np.outer(phi, residual).ravel(), np.zeros(self._w_answer.size)])

    def grad_log_answer(self, state: State, answer: int, *, force: bool = False) -> np.ndarray:
        self._require_answerable(state, force)
        column = self._vocab.answer_index(answer)
        phi = self.answer_features(state)
        residual = -np.exp(log_normalize(phi @ self._w_answer))
        residual[column] += 1.0
        return np.concatenate([np.zeros(self._w_next.size), np.outer(phi, residual).ravel()])
