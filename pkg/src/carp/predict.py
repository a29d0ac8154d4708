"""The CARP pipeline: offline model construction and online prediction."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .aggregate import aggregate
from .baselines import BaselineModel, baseline_fit
from .context import (ContextModel, FeatureVector, assign_context, build_features,
                      cluster_contexts)
from .data import ReliabilityTensor
from .factorization import ContextFactorModel, TrainConfig, train_context_models

BUNDLE_PARTS = {
    "context": "context.json",
    "factors": "factors.json",
    "baseline": "baseline.json",
    "metadata": "metadata.json",
}
MANIFEST = "manifest.json"


class BundleError(RuntimeError):
    pass


class Prediction(NamedTuple):
    value: float
    context: int | None
    source: str            # "factors" or "baseline"
    mask_density: float    # fraction of services observed in the query features


@dataclass(frozen=True)
class CarpModel:
    context_model: ContextModel
    factors: ContextFactorModel
    baseline: BaselineModel
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.context_model.C != self.factors.C:
            raise ValueError("context model and factor model disagree on C")

    @property
    def dims(self):
        M, N = self.factors.shape
        return M, N, len(self.context_model.assignment)

    def predict_at_slices(self, users, services, slices) -> np.ndarray:
        slices = np.asarray(slices, dtype=np.int64)
        T = len(self.context_model.assignment)
        if slices.size and (slices.min() < 0 or slices.max() >= T):
            raise IndexError(f"time slice outside the {T} training slices")
        return self.factors.predict(users, services, self.context_model.assignment[slices])

    # callable-approach protocol used by the evaluation harness
    predict = predict_at_slices

    def parts(self) -> dict:
        return {
            "context": self.context_model.to_dict(),
            "factors": self.factors.to_dict(),
            "baseline": self.baseline.to_dict(),
            "metadata": self.metadata,
        }


def carp_build(train: ReliabilityTensor, C: int, config: TrainConfig | None = None,
               n_init: int = 10, timestamp: str | None = None) -> CarpModel:
    """features -> k-means contexts -> per-context means -> chained factorization.

    Clustering and factor initialization both use ``config.seed``. The
    timestamp is only recorded when given, so equal inputs give equal models.
    """
    config = config or TrainConfig()
    features = build_features(train)
    contexts = cluster_contexts(features, C, seed=config.seed, n_init=n_init)
    agg = aggregate(train, contexts)
    factors = train_context_models(agg, config)
    metadata = {
        "seed": config.seed,
        "C": C,
        "n_init": n_init,
        "config": asdict(config),
        "dims": list(train.dims),
        "n_entries": len(train),
        "data_fingerprint": train.fingerprint(),
    }
    if timestamp is not None:
        metadata["timestamp"] = timestamp
    return CarpModel(contexts, factors, baseline_fit(train), metadata)


def carp_predict(model: CarpModel, u: int, s: int, current: FeatureVector) -> Prediction:
    """Predict for the slice described by ``current``; baseline if it has no context."""
    M, N, _ = model.dims
    if not (0 <= u < M and 0 <= s < N):
        raise IndexError(f"({u}, {s}) outside the {M}x{N} user-service grid")
    density = float(current.mask.mean()) if len(current.mask) else 0.0
    c = assign_context(current, model.context_model)
    if c is None:
        return Prediction(model.baseline.global_mean, None, "baseline", density)
    return Prediction(float(model.factors.predict([u], [s], [c])[0]), c, "factors", density)


def carp_predict_at_slice(model: CarpModel, u: int, s: int, t: int) -> float:
    """Predict using the stored context of training slice ``t``."""
    return float(model.predict_at_slices([u], [s], [t])[0])


def _dump(doc) -> bytes:
    return (json.dumps(doc, indent=1, sort_keys=True) + "\n").encode("utf-8")


def save_bundle(model: CarpModel, directory) -> dict:
    """Write the model parts and a manifest of their sha256 hashes."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"format": "carp.bundle", "version": 1, "parts": {}}
    for key, doc in model.parts().items():
        blob = _dump(doc)
        (directory / BUNDLE_PARTS[key]).write_bytes(blob)
        manifest["parts"][key] = {"file": BUNDLE_PARTS[key],
                                  "sha256": hashlib.sha256(blob).hexdigest()}
    (directory / MANIFEST).write_bytes(_dump(manifest))
    return manifest


def load_bundle(directory) -> CarpModel:
    directory = Path(directory)
    try:
        manifest = json.loads((directory / MANIFEST).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise BundleError(f"{directory}: no {MANIFEST}") from None
    docs = {}
    for key in BUNDLE_PARTS:
        entry = manifest.get("parts", {}).get(key)
        if entry is None:
            raise BundleError(f"{directory}: manifest lists no {key!r} part")
        path = directory / entry["file"]
        if not path.is_file():
            raise BundleError(f"{path}: missing bundle part")
        blob = path.read_bytes()
        if hashlib.sha256(blob).hexdigest() != entry["sha256"]:
            raise BundleError(f"{path}: content hash does not match manifest")
        docs[key] = json.loads(blob)
    return CarpModel(ContextModel.from_dict(docs["context"]),
                     ContextFactorModel.from_dict(docs["factors"]),
                     BaselineModel.from_dict(docs["baseline"]),
                     docs["metadata"])
