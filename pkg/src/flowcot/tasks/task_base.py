from __future__ import annotations

import hashlib
from abc import ABC, abstractmethod
from dataclasses import dataclass
from typing import Any, Sequence

from pydantic import BaseModel, ConfigDict, Field, model_validator

from flowcot.models.model_base import Vocabulary


@dataclass(frozen=True, slots=True)
class TaskInstance:
    """
    One reasoning problem.

    Parameters
    ----------
    id : str
        Stable hash identifying the instance.
    query : tuple[int, ...]
        Query token ids.
    gold_answer : int
        Answer token id.
    gold_chain : tuple[int, ...]
        Minimal correct thought, ending with end-of-thought.
    """

    id: str
    query: tuple[int, ...]
    gold_answer: int
    gold_chain: tuple[int, ...]

    def to_dict(self) -> dict[str, Any]:
        # field order is part of the dataset file format
        return {
            "id": self.id,
            "query": list(self.query),
            "gold_answer": self.gold_answer,
            "gold_chain": list(self.gold_chain),
        }

    @classmethod
    def from_dict(cls, payload: dict[str, Any]) -> "TaskInstance":
        return cls(
            id=str(payload["id"]),
            query=tuple(int(t) for t in payload["query"]),
            gold_answer=int(payload["gold_answer"]),
            gold_chain=tuple(int(t) for t in payload["gold_chain"]),
        )


def instance_id(family: str, seed: int, index: int, query: Sequence[int]) -> str:
    """Stable 16-hex-digit id of an instance."""
    text = f"{family}|{seed}|{index}|{','.join(str(t) for t in query)}"
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


class TaskFamilyConfig(BaseModel):
    """
    Configuration of a synthetic task family.

    Attributes
    ----------
    name : str
        Task family key understood by :class:`TaskFactory`.
    modulus : int
        Arithmetic modulus ``m``; also the number of answer tokens.
    vocab_size : int | None
        Requested vocabulary size. ``None`` uses the minimum; larger values
        add unused content tokens.
    chain_length : tuple[int, int]
        Inclusive range of the number of operations per query.
    filler_count : int
        Size of the filler sub-vocabulary.
    filler_rate : float
        Filler injection rate used when synthesizing demonstration corpora.
    horizon : int
        Maximum thought length ``T_max``.
    seed : int
        Generation seed (overwritten by the run seed in run configs).
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str = "modular_chain"
    modulus: int = Field(5, ge=2)
    vocab_size: int | None = Field(None, ge=1)
    chain_length: tuple[int, int] = (1, 2)
    filler_count: int = Field(1, ge=0)
    filler_rate: float = Field(0.5, ge=0.0, lt=1.0)
    horizon: int = Field(16, ge=1)
    seed: int = Field(0, ge=0)

    @model_validator(mode="after")
    def _check_ranges(self) -> "TaskFamilyConfig":
        low, high = self.chain_length
        if low < 1 or high < low:
            raise ValueError(f"chain_length must be a non-empty range of positive ints, got {self.chain_length}")
        if self.filler_rate > 0 and self.filler_count == 0:
            raise ValueError("filler_rate > 0 needs filler_count >= 1")
        return self


class TaskFamily(ABC):
    """
    Abstract interface for synthetic reasoning task families.

    A family owns a vocabulary, generates instances with gold answers and
    gold chains, and defines the semantics used to check thoughts.
    """

    @property
    @abstractmethod
    def label(self) -> str:
        """
        Name of the task family.

        Returns
        -------
        str
            Family identifier.
        """
        raise NotImplementedError

    @property
    @abstractmethod
    def config(self) -> TaskFamilyConfig:
        raise NotImplementedError

    @property
    @abstractmethod
    def vocab(self) -> Vocabulary:
        raise NotImplementedError

    @abstractmethod
    def generate(self, n: int, *, stream: int | str = "generate") -> list[TaskInstance]:
        """
        Draw ``n`` instances.

        Parameters
        ----------
        n : int
            Number of instances, at least 1.
        stream : int | str, default="generate"
            Name of the random stream under the config seed, so held-out
            sets can be drawn independently.

        Returns
        -------
        list[TaskInstance]
            Instances in generation order; a pure function of (config, stream, n).
        """
        raise NotImplementedError

    @abstractmethod
    def execute(self, query: Sequence[int], thought: Sequence[int]) -> int | None:
        """
        Run the task semantics on a thought.

        Returns
        -------
        int | None
            The answer token the thought arrives at, or ``None`` when it
            states nothing.
        """
        raise NotImplementedError

    def verify_answer(self, instance: TaskInstance, answer: int) -> bool:
        """
        Outcome check used as the sparse reward.

        Raises
        ------
        ValueError
            If ``answer`` is not an answer-role token.
        """
        self.vocab.answer_index(answer)
        return answer == instance.gold_answer

    @property
    def horizon(self) -> int:
        return self.config.horizon
