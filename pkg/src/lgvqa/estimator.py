"""scikit-learn style facade over the backends, training loop and scorer.

The classifier treats a list of multi-choice instances as X and the per
instance choice index as the target, so the whole pipeline composes with
sklearn tooling (get_params/set_params, clone, cross-validation over
instance lists).
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from .backends import ToyDualEncoder, ToyFusionBackend
from .core import GuidanceBundle, MultiChoiceInstance, validate_instance
from .errors import ConfigError, EmptyDatasetError
from .guidance import GuidanceCache, parse_kinds
from .scoring import (
    GUIDED_MODES,
    ScoringMode,
    evaluate_instances,
    score_instance,
)
from .training import TrainConfig, default_learning_rate, train


def check_instances(X) -> list[MultiChoiceInstance]:
    """Validate an instance list; dict records are validated and converted."""
    if X is None or len(X) == 0:
        raise EmptyDatasetError("X is empty")
    out = []
    for item in X:
        if isinstance(item, MultiChoiceInstance):
            out.append(item)
        elif isinstance(item, Mapping):
            out.append(validate_instance(item))
        else:
            raise TypeError(
                f"X must contain MultiChoiceInstance or dict records, "
                f"got {type(item).__name__}")
    return out


class VqaChoiceClassifier(BaseEstimator):
    """Multi-choice VQA as a fit/predict estimator.

    Parameters
    ----------
    backend : str
        "toy-dual" or "toy-fusion" (a ready backend instance also works).
    mode : str
        Scoring mode: zero_shot, unguided, guided_concat or guided_merge.
        zero_shot skips training entirely; the others fine-tune on fit.
    guidance_kinds : str or sequence, optional
        Preset name ("all", "cso", "csol") or list of kinds for guided modes.
    guidance_cache : str or GuidanceCache, optional
        Cache of guidance text, required by guided modes.
    learning_rate : float, optional
        Defaults to the from-scratch toy rate for toy backends.
    """

    def __init__(self, backend="toy-dual", mode="unguided", guidance_kinds=None,
                 guidance_cache=None, learning_rate=None, batch_size=8,
                 epochs=8, weight_decay=0.0, seed=0, embed_dim=16):
        self.backend = backend
        self.mode = mode
        self.guidance_kinds = guidance_kinds
        self.guidance_cache = guidance_cache
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.epochs = epochs
        self.weight_decay = weight_decay
        self.seed = seed
        self.embed_dim = embed_dim

    def _make_backend(self):
        if not isinstance(self.backend, str):
            return self.backend
        if self.backend == "toy-dual":
            return ToyDualEncoder(seed=self.seed, d=self.embed_dim)
        if self.backend == "toy-fusion":
            return ToyFusionBackend(seed=self.seed, d=self.embed_dim)
        raise ConfigError(f"unknown backend {self.backend!r}")

    def _bundle_store(self) -> dict[str, GuidanceBundle] | None:
        if self.guidance_cache is None:
            return None
        cache = self.guidance_cache
        if not isinstance(cache, GuidanceCache):
            cache = GuidanceCache.load(cache)
        return cache.bundle_store()

    def _kinds(self):
        if self.guidance_kinds is None:
            return None
        return parse_kinds(self.guidance_kinds)

    def fit(self, X, y=None):
        """Fine-tune the backend on the instances (no-op for zero_shot).

        y defaults to each instance's own gold index; passing y overrides
        the gold indices.
        """
        instances = check_instances(X)
        if y is not None:
            if len(y) != len(instances):
                raise ValueError("y length does not match X")
            from dataclasses import replace
            instances = [replace(inst, gold_index=int(label))
                         for inst, label in zip(instances, y)]
        mode = ScoringMode(self.mode)
        if mode in GUIDED_MODES and self.guidance_cache is None:
            raise ConfigError(f"mode {mode.value} requires guidance_cache")

        backend = self._make_backend()
        if mode != ScoringMode.ZERO_SHOT:
            lr = self.learning_rate
            if lr is None:
                lr = default_learning_rate(backend)
            config = TrainConfig(batch_size=self.batch_size, epochs=self.epochs,
                                 learning_rate=lr, weight_decay=self.weight_decay,
                                 mode=mode, guidance_kinds=self._kinds(),
                                 seed=self.seed)
            result = train(backend, instances, config,
                           bundle_store=self._bundle_store())
            backend = result.backend
            self.history_ = result.history
        else:
            self.history_ = []
        self.backend_ = backend
        self.mode_ = mode
        return self

    def _check_fitted(self):
        if not hasattr(self, "backend_"):
            raise ConfigError("estimator is not fitted; call fit first")

    def predict(self, X) -> np.ndarray:
        """Predicted choice index per instance."""
        self._check_fitted()
        instances = check_instances(X)
        records = evaluate_instances(self.backend_, instances,
                                     bundle_store=self._bundle_store(),
                                     mode=self.mode_,
                                     guidance_kinds=self._kinds())
        return np.array([r.predicted_index for r in records], dtype=np.int64)

    def predict_proba(self, X) -> np.ndarray:
        """Per-choice probabilities, zero-padded to the widest instance."""
        self._check_fitted()
        instances = check_instances(X)
        store = self._bundle_store()
        rows = []
        for instance in instances:
            bundle = store.get(instance.id) if store else None
            if self.mode_ in GUIDED_MODES and bundle is None:
                bundle = GuidanceBundle(instance_id=instance.id)
            scores = score_instance(self.backend_, instance, bundle=bundle,
                                    mode=self.mode_,
                                    guidance_kinds=self._kinds())
            rows.append(list(scores.normalized))
        width = max(len(row) for row in rows)
        out = np.zeros((len(rows), width), dtype=np.float64)
        for i, row in enumerate(rows):
            out[i, :len(row)] = row
        return out

    def score(self, X, y=None) -> float:
        """Mean accuracy against the gold indices (or y when given)."""
        instances = check_instances(X)
        predictions = self.predict(instances)
        gold = np.array([inst.gold_index for inst in instances]) \
            if y is None else np.asarray(y)
        return float(np.mean(predictions == gold))
