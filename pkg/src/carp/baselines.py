"""Reference predictors: the global mean and a context-blind factorization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .aggregate import collapse_time
from .data import DataError, ReliabilityTensor
from .factorization import ContextFactorModel, FactorPair, TrainConfig, mf_train

BASELINE_FORMAT = "carp.baseline-model"
PMF_FORMAT = "carp.pmf-model"
VERSION = 1


@dataclass(frozen=True)
class BaselineModel:
    global_mean: float

    def predict(self, users, services=None, slices=None) -> np.ndarray:
        return np.full(np.shape(users), self.global_mean)

    def to_dict(self) -> dict:
        return {"format": BASELINE_FORMAT, "version": VERSION, "global_mean": self.global_mean}

    @classmethod
    def from_dict(cls, doc: dict) -> "BaselineModel":
        if doc.get("format") != BASELINE_FORMAT or doc.get("version") != VERSION:
            raise ValueError("not a version-1 baseline document")
        return cls(float(doc["global_mean"]))


def baseline_fit(train: ReliabilityTensor) -> BaselineModel:
    if len(train) == 0:
        raise DataError("cannot fit a baseline on an empty training set")
    return BaselineModel(float(np.mean(train.values)))


def baseline_predict(model: BaselineModel, u: int, s: int, t: int) -> float:
    return model.global_mean


@dataclass(frozen=True)
class PMFModel:
    factors: FactorPair
    config: TrainConfig

    def predict(self, users, services, slices=None) -> np.ndarray:
        # a one-context factor model gives the same range checks and clamping
        users = np.asarray(users, dtype=np.int64)
        return ContextFactorModel([self.factors], self.config, [0.0]).predict(
            users, services, np.zeros(users.shape, dtype=np.int64))

    def to_dict(self) -> dict:
        doc = ContextFactorModel([self.factors], self.config, [0.0]).to_dict()
        doc["format"] = PMF_FORMAT
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "PMFModel":
        if doc.get("format") != PMF_FORMAT:
            raise ValueError("not a PMF model document")
        inner = ContextFactorModel.from_dict({**doc, "format": "carp.factor-model"})
        return cls(inner.factors[0], inner.config)


def pmf_fit(train: ReliabilityTensor, config: TrainConfig) -> PMFModel:
    """Factorize the per-(user, service) time-mean matrix."""
    if len(train) == 0:
        raise DataError("cannot fit PMF on an empty training set")
    return PMFModel(mf_train(collapse_time(train), config), config)


def pmf_predict(model: PMFModel, u: int, s: int, t: int | None = None) -> float:
    return float(model.predict([u], [s])[0])
