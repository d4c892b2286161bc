from __future__ import annotations

import logging
from typing import Sequence

from flowcot.models.model_base import Role, Token, Vocabulary
from flowcot.utils.utils import ConfigurationError, rng_for

from .task_base import TaskFamily, TaskFamilyConfig, TaskInstance, instance_id

logger = logging.getLogger(__name__)


class ModularChainTask(TaskFamily):
    """
    Modular chain arithmetic with semantics-free filler tokens.

    A query is ``start, +d_1, ..., +d_L``; the gold chain states every
    running value ``(start + d_1 + ... + d_j) mod m`` followed by
    end-of-thought, and the answer is the final value.

    Vocabulary layout (ids in order): end-of-thought, value tokens
    ``v0..v{m-1}``, operation tokens ``+1..+{m-1}``, fillers, spare content
    tokens (only when ``vocab_size`` asks for them), the placeholder, and the
    answer block ``a0..a{m-1}``.

    Parameters
    ----------
    config : TaskFamilyConfig
        Family configuration.

    Raises
    ------
    ConfigurationError
        If ``config.vocab_size`` is below the required minimum.
    """

    def __init__(self, config: TaskFamilyConfig) -> None:
        self._config = config
        m = config.modulus
        required = self.required_vocab_size(config)
        size = config.vocab_size if config.vocab_size is not None else required
        if size < required:
            raise ConfigurationError(
                f"vocab_size={size} is too small for modulus {m} with {config.filler_count} fillers; "
                f"at least {required} tokens are required"
            )

        pairs: list[tuple[str, Role]] = [("<eot>", Role.END_OF_THOUGHT)]
        pairs += [(f"v{value}", Role.CONTENT) for value in range(m)]
        pairs += [(f"+{step}", Role.CONTENT) for step in range(1, m)]
        pairs += [(f"~{j}", Role.FILLER) for j in range(config.filler_count)]
        pairs += [(f"spare{j}", Role.CONTENT) for j in range(size - required)]
        pairs += [("<ans?>", Role.PLACEHOLDER)]
        pairs += [(f"a{value}", Role.ANSWER) for value in range(m)]
        self._vocab = Vocabulary([Token(i, role, name) for i, (name, role) in enumerate(pairs)])

        self._value_ids = tuple(range(1, 1 + m))
        self._op_ids = tuple(range(1 + m, 2 * m))

    @staticmethod
    def required_vocab_size(config: TaskFamilyConfig) -> int:
        """End-of-thought, m values, m-1 operations, fillers, placeholder, m answers."""
        m = config.modulus
        return 1 + m + (m - 1) + config.filler_count + 1 + m

    @property
    def label(self) -> str:
        return "modular_chain"

    @property
    def config(self) -> TaskFamilyConfig:
        return self._config

    @property
    def vocab(self) -> Vocabulary:
        return self._vocab

    # --- token helpers -----------------------------------------------------

    def value_token(self, value: int) -> int:
        return self._value_ids[value % self._config.modulus]

    def op_token(self, step: int) -> int:
        if not 1 <= step < self._config.modulus:
            raise ValueError(f"Operation +{step} is outside 1..{self._config.modulus - 1}")
        return self._op_ids[step - 1]

    def answer_token(self, value: int) -> int:
        return self._vocab.answer_ids[value % self._config.modulus]

    def token_value(self, token: int) -> int | None:
        """Arithmetic value of a value token, ``None`` for anything else."""
        if token in self._value_ids:
            return token - self._value_ids[0]
        return None

    # --- instances ---------------------------------------------------------

    def make_instance(self, start: int, steps: Sequence[int], *, index: int = 0) -> TaskInstance:
        """
        Build the instance for ``start, +steps[0], +steps[1], ...``.

        Examples
        --------
        With ``m=5``, ``make_instance(2, [1, 1])`` has gold answer ``a4``.
        """
        m = self._config.modulus
        query = (self.value_token(start),) + tuple(self.op_token(step) for step in steps)
        running = start % m
        chain = []
        for step in steps:
            running = (running + step) % m
            chain.append(self.value_token(running))
        chain.append(self._vocab.end_id)
        return TaskInstance(
            id=instance_id(self.label, self._config.seed, index, query),
            query=query,
            gold_answer=self.answer_token(running),
            gold_chain=tuple(chain),
        )

    def generate(self, n: int, *, stream: int | str = "generate") -> list[TaskInstance]:
        if n < 1:
            raise ValueError(f"n must be >= 1, got {n}")
        m = self._config.modulus
        low, high = self._config.chain_length
        rng = rng_for(self._config.seed, self.label, stream)
        instances = []
        for index in range(n):
            length = int(rng.integers(low, high + 1))
            start = int(rng.integers(0, m))
            steps = [int(s) for s in rng.integers(1, m, size=length)]
            instances.append(self.make_instance(start, steps, index=index))
        logger.debug("Generated %d %s instances (seed %d)", n, self.label, self._config.seed)
        return instances

    def execute(self, query: Sequence[int], thought: Sequence[int]) -> int | None:
        # the chain state is the last value the thought stated; fillers never touch it
        last = None
        for token in thought:
            value = self.token_value(token)
            if value is not None:
                last = value
        return None if last is None else self.answer_token(last)

    def chain_is_correct(self, instance: TaskInstance, thought: Sequence[int]) -> bool:
        """True when the thought's content tokens are exactly the gold chain's."""
        fillers = set(self._vocab.filler_ids)
        return tuple(t for t in thought if t not in fillers) == instance.gold_chain
