from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Mapping

from pydantic import BaseModel, ConfigDict, Field, model_validator

from flowcot.decode import DecodeConfig, DecodeStrategy
from flowcot.evaluation import Arm
from flowcot.flow import PosteriorMode
from flowcot.rl import TrainConfig
from flowcot.tasks.task_base import TaskFamilyConfig, TaskInstance
from flowcot.utils.utils import config_hash, env_or_default

logger = logging.getLogger(__name__)

OUT_DIR_ENV = "FLOWCOT_OUT_DIR"
DEFAULT_OUT_DIR = "runs"


class ModelConfig(BaseModel):
    """
    How the prior and posterior models are fitted.

    Attributes
    ----------
    order : int
        Markov window of the tabular models.
    alpha : float
        Additive smoothing of the counts.
    posterior_filler_rate : float | None
        Filler rate of the posterior model's demonstrations; ``None`` reuses
        the prior corpus.
    corpus_repeats : int
        Passes over the instances when synthesizing the corpus.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    order: int = Field(3, ge=1)
    alpha: float = Field(0.01, gt=0.0)
    posterior_filler_rate: float | None = Field(None, ge=0.0, lt=1.0)
    corpus_repeats: int = Field(20, ge=1)


class OracleConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    max_trajectories: int = Field(10**6, ge=1)


class ArmSpec(BaseModel):
    """One decoding arm as written in the config file (horizon and seed come from the run)."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str
    strategy: DecodeStrategy
    tau: float | None = None
    top_p: float | None = None
    top_k: int | None = None
    temperature: float = 1.0
    posterior_mode: PosteriorMode = PosteriorMode.LATENT_LABEL

    def to_arm(self, *, horizon: int, seed: int) -> Arm:
        fields = self.model_dump(exclude={"name"}, exclude_none=True)
        return Arm(name=self.name, decode=DecodeConfig(**fields, horizon=horizon, seed=seed))


def default_arms() -> list[ArmSpec]:
    return [
        ArmSpec(name="standard_greedy", strategy=DecodeStrategy.STANDARD_GREEDY),
        ArmSpec(name="standard_sample", strategy=DecodeStrategy.STANDARD_SAMPLE),
        ArmSpec(name="flow_exact", strategy=DecodeStrategy.FLOW_GREEDY, posterior_mode=PosteriorMode.EXACT_BAYES),
        ArmSpec(name="flow_gold", strategy=DecodeStrategy.FLOW_GREEDY, posterior_mode=PosteriorMode.GOLD_LABEL),
        ArmSpec(name="flow_latent", strategy=DecodeStrategy.FLOW_GREEDY, posterior_mode=PosteriorMode.LATENT_LABEL),
        ArmSpec(name="flow_random", strategy=DecodeStrategy.FLOW_GREEDY, posterior_mode=PosteriorMode.RANDOM_LABEL),
        ArmSpec(name="posterior_latent", strategy=DecodeStrategy.POSTERIOR_ONLY),
    ]


class DecodeSection(BaseModel):
    """
    Decoding and evaluation settings.

    The first arm is the baseline of the transition analysis.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    arms: list[ArmSpec] = Field(default_factory=default_arms, min_length=2)
    budgets: list[int] = Field(default_factory=lambda: [4, 8, 12, 16])
    sweep_arms: list[str] = Field(default_factory=lambda: ["standard_greedy", "flow_exact"])
    passk_samples: int = Field(16, ge=1)
    passk_ks: list[int] = Field(default_factory=lambda: [1, 2, 4, 8, 16])
    passk_arms: list[str] = Field(default_factory=lambda: ["standard_sample"])
    quality_states: int = Field(500, ge=1)
    quality_modes: list[PosteriorMode] = Field(
        default_factory=lambda: [PosteriorMode.GOLD_LABEL, PosteriorMode.LATENT_LABEL, PosteriorMode.RANDOM_LABEL]
    )

    @model_validator(mode="after")
    def _known_names(self) -> "DecodeSection":
        names = [arm.name for arm in self.arms]
        if len(set(names)) != len(names):
            raise ValueError(f"Arm names must be unique, got {names}")
        for listed in (self.sweep_arms, self.passk_arms):
            unknown = sorted(set(listed) - set(names))
            if unknown:
                raise ValueError(f"Unknown arm names: {unknown}")
        if any(k > self.passk_samples for k in self.passk_ks):
            raise ValueError("Every passk_ks entry must be <= passk_samples")
        return self


class RunConfig(BaseModel):
    """
    Complete run configuration, read from one JSON file.

    ``task.seed`` and ``train.seed`` always equal the run ``seed``.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    seed: int = Field(0, ge=0)
    jobs: int = Field(1, ge=1)
    n_instances: int = Field(500, ge=1)
    heldout_fraction: float = Field(0.2, ge=0.0, lt=1.0)
    out_dir: str | None = None
    task: TaskFamilyConfig = Field(default_factory=TaskFamilyConfig)
    model: ModelConfig = Field(default_factory=ModelConfig)
    oracle: OracleConfig = Field(default_factory=OracleConfig)
    decode: DecodeSection = Field(default_factory=DecodeSection)
    train: TrainConfig = Field(default_factory=TrainConfig)

    @model_validator(mode="before")
    @classmethod
    def _propagate_seed(cls, data: Any) -> Any:
        if isinstance(data, dict):
            seed = data.get("seed", 0)
            data = dict(data)
            for section in ("task", "train"):
                value = data.get(section) or {}
                if isinstance(value, BaseModel):
                    value = value.model_dump()
                data[section] = {**value, "seed": seed}
        return data

    @property
    def output_dir(self) -> Path:
        return Path(self.out_dir or env_or_default(OUT_DIR_ENV, DEFAULT_OUT_DIR))

    @property
    def config_hash(self) -> str:
        """Hash of everything that affects results (``out_dir`` and ``jobs`` excluded)."""
        return config_hash(self.model_dump(mode="json", exclude={"out_dir", "jobs"}))

    @property
    def run_id(self) -> str:
        return f"{self.config_hash[:12]}-s{self.seed}"

    def arms(self, names: list[str] | None = None) -> list[Arm]:
        chosen = self.decode.arms if names is None else [a for a in self.decode.arms if a.name in names]
        return [spec.to_arm(horizon=self.task.horizon, seed=self.seed) for spec in chosen]

    def meta(self) -> dict[str, Any]:
        return {"run_id": self.run_id, "config_hash": self.config_hash, "seed": self.seed}


def load_run_config(path: str | Path | None, overrides: Mapping[str, Any] | None = None) -> RunConfig:
    """
    Read a run config, then apply flag overrides (flags > file > defaults).

    Parameters
    ----------
    path : str | Path | None
        JSON config file; ``None`` uses defaults.
    overrides : Mapping[str, Any] | None
        Top-level keys set from command-line flags; ``None`` values are ignored.

    Raises
    ------
    FileNotFoundError
        If ``path`` does not exist.
    pydantic.ValidationError
        On unknown keys or invalid values.
    """
    data: dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Config file not found: {path}")
        data = json.loads(path.read_text(encoding="utf-8"))
    for key, value in (overrides or {}).items():
        if value is not None:
            logger.debug("Flag override %s=%r", key, value)
            data[key] = value
    return RunConfig.model_validate(data)


def split_instances(instances: list[TaskInstance], heldout_fraction: float) -> tuple[list[TaskInstance], list[TaskInstance]]:
    """Training prompts first, the last ``heldout_fraction`` held out."""
    n_heldout = int(round(len(instances) * heldout_fraction))
    if n_heldout >= len(instances):
        n_heldout = len(instances) - 1
    cut = len(instances) - n_heldout
    return instances[:cut], instances[cut:]
