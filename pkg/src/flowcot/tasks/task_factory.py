from __future__ import annotations

from typing import Dict, List

from .modular_chain import ModularChainTask
from .task_base import TaskFamily, TaskFamilyConfig


class TaskFactory:
    """
    Factory for synthetic task families.

    This factory provides:

    - Creation of task family instances from their config
    - Listing supported task families
    """

    @staticmethod
    def create(config: TaskFamilyConfig) -> TaskFamily:
        """
        Create a task family.

        Parameters
        ----------
        config : TaskFamilyConfig
            Family configuration; ``config.name`` selects the family.
            Supported values are:

            - ``"modular_chain"``

        Returns
        -------
        TaskFamily
            Initialized task family.

        Raises
        ------
        ValueError
            If an unknown family name is provided.
        """
        key = config.name.strip().lower()

        if key == "modular_chain":
            return ModularChainTask(config)

        raise ValueError(f"Unknown task family: {config.name}")

    @staticmethod
    def list_tasks() -> Dict[str, List[str]]:
        """
        List supported task families.

        Returns
        -------
        dict[str, list[str]]
            Mapping of the category to family names.
        """
        return {"tasks": ["modular_chain"]}
