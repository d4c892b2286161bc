from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Dict, List

import numpy as np

from flowcot.utils.utils import CheckpointError

from .linear import FeatureSpec, LinearSoftmaxPolicy
from .model_base import DifferentiablePolicy, Vocabulary
from .tabular import TabularPolicy

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class PolicyFactory:
    """
    Factory for policy backends and their checkpoints.

    This factory provides:

    - Creation of fresh (uniform or seeded random) policies
    - Listing supported backends
    - JSON checkpoint save / load
    """

    @staticmethod
    def create(
        backend_key: str,
        vocab: Vocabulary,
        *,
        order: int = 2,
        label_aware: bool = False,
        step_buckets: int = 0,
        query_features: bool = False,
        bias: bool = True,
        rng: np.random.Generator | None = None,
        scale: float = 0.5,
    ) -> DifferentiablePolicy:
        """
        Create a policy.

        Parameters
        ----------
        backend_key : str
            Name of the backend. Supported values are:

            - ``"tabular"``
            - ``"linear"``

        vocab : Vocabulary
            Token inventory.
        order : int, default=2
            Markov window (tabular) or number of encoded trailing tokens (linear).
        label_aware : bool, default=False
            Whether the policy reads the label slot.
        step_buckets, query_features, bias
            Linear feature options, see :class:`FeatureSpec`.
        rng : np.random.Generator | None, default=None
            When given, parameters are Gaussian with std ``scale``; otherwise
            all zero (uniform distributions).
        scale : float, default=0.5
            Standard deviation of random parameters.

        Returns
        -------
        DifferentiablePolicy
            Initialized policy.

        Raises
        ------
        ValueError
            If an unknown backend_key is provided.
        """

        key = backend_key.strip().lower()

        if key == "tabular":
            if rng is None:
                return TabularPolicy.uniform(vocab, order, label_aware=label_aware)
            return TabularPolicy.random(vocab, order, rng, scale=scale, label_aware=label_aware)

        if key == "linear":
            features = FeatureSpec(
                order=order,
                step_buckets=step_buckets,
                query_features=query_features,
                label_aware=label_aware,
                bias=bias,
            )
            if rng is None:
                return LinearSoftmaxPolicy.zeros(vocab, features)
            return LinearSoftmaxPolicy.random(vocab, features, rng, scale=scale)

        raise ValueError(f"Unknown policy backend: {backend_key}")

    @staticmethod
    def list_backends() -> Dict[str, List[str]]:
        """
        List supported backends and the options each one reads.

        Returns
        -------
        dict[str, list[str]]
            Mapping of backend names to option names.
        """
        return {
            "tabular": ["order", "label_aware"],
            "linear": ["order", "step_buckets", "query_features", "label_aware", "bias"],
        }

    @staticmethod
    def save(policy: DifferentiablePolicy, path: str | Path) -> Path:
        """
        Write ``{version, backend, vocab, order_or_features, logits}`` as JSON.

        Logits are flat row-major ``(context, token)`` arrays; Python's float
        repr makes the round trip value-exact.
        """
        path = Path(path)
        if isinstance(policy, TabularPolicy):
            order_or_features = {"order": policy.order, "label_aware": policy.label_aware}
            logits = {
                "next": policy.next_logits.ravel().tolist(),
                "answer": policy.answer_logits.ravel().tolist(),
            }
        elif isinstance(policy, LinearSoftmaxPolicy):
            order_or_features = policy.features.to_json()
            logits = {
                "next": policy.weights_next.ravel().tolist(),
                "answer": policy.weights_answer.ravel().tolist(),
            }
        else:
            raise CheckpointError(f"Cannot checkpoint policy of type {type(policy).__name__}")

        payload = {
            "version": CHECKPOINT_VERSION,
            "backend": policy.label,
            "vocab": policy.vocab.to_json(),
            "order_or_features": order_or_features,
            "logits": logits,
        }
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(payload), encoding="utf-8")
        logger.debug("Saved %s checkpoint to %s", policy.label, path)
        return path

    @staticmethod
    def load(path: str | Path) -> DifferentiablePolicy:
        """
        Read a checkpoint written by :meth:`save`.

        Raises
        ------
        FileNotFoundError
            If the file does not exist.
        CheckpointError
            If the document is malformed or its shapes do not match.
        """
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Checkpoint not found: {path}")
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
            version = payload["version"]
            backend = payload["backend"]
            vocab = Vocabulary.from_json(payload["vocab"])
            spec = payload["order_or_features"]
            next_flat = np.asarray(payload["logits"]["next"], dtype=np.float64)
            answer_flat = np.asarray(payload["logits"]["answer"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"Malformed checkpoint {path}: {exc}") from exc

        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"Unsupported checkpoint version {version} in {path}")

        try:
            if backend == "tabular":
                template = TabularPolicy.uniform(vocab, int(spec["order"]), label_aware=bool(spec["label_aware"]))
            elif backend == "linear":
                template = LinearSoftmaxPolicy.zeros(vocab, FeatureSpec.from_json(spec))
            else:
                raise CheckpointError(f"Unknown backend {backend!r} in {path}")
            return template.with_parameters(np.concatenate([next_flat, answer_flat]))
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"Checkpoint {path} does not match its declared shape: {exc}") from exc
