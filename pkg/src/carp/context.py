"""Context identification: per-slice service feature vectors and k-means."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import ReliabilityTensor, make_rng

MAX_ITER = 300
FORMAT = "carp.context-model"
VERSION = 1


class ContextError(ValueError):
    pass


@dataclass(frozen=True)
class FeatureVector:
    time_slice: int | None
    values: np.ndarray  # (N,), 0.0 where masked
    mask: np.ndarray    # (N,) bool

    @property
    def n_observed(self) -> int:
        return int(self.mask.sum())

    @classmethod
    def from_observations(cls, N, services, values, time_slice=None):
        """Average raw (service, value) observations into a feature vector."""
        services = np.asarray(services, dtype=np.int64)
        values = np.asarray(values, dtype=np.float64)
        if len(services) and (services.min() < 0 or services.max() >= N):
            raise ContextError(f"service index out of range [0, {N})")
        sums = np.bincount(services, weights=values, minlength=N)
        counts = np.bincount(services, minlength=N)
        mask = counts > 0
        feat = np.zeros(N)
        feat[mask] = sums[mask] / counts[mask]
        return cls(time_slice, feat, mask)


def build_features(tensor: ReliabilityTensor) -> list[FeatureVector]:
    """One feature vector per slice: mean observed reliability of each service."""
    if len(tensor) == 0:
        raise ContextError("tensor has no observed entries")
    M, N, T = tensor.dims
    flat = tensor.slices * N + tensor.services
    sums = np.bincount(flat, weights=tensor.values, minlength=T * N).reshape(T, N)
    counts = np.bincount(flat, minlength=T * N).reshape(T, N)
    mask = counts > 0
    means = np.divide(sums, counts, out=np.zeros((T, N)), where=mask)
    return [FeatureVector(t, means[t], mask[t]) for t in range(T)]


def imputation_means(features: list[FeatureVector]) -> np.ndarray:
    """Per-service mean over every slice where the service was observed.

    Services never observed fall back to the mean over all observed components.
    """
    vals = np.array([f.values for f in features])
    mask = np.array([f.mask for f in features])
    counts = mask.sum(axis=0)
    fill = vals[mask].mean() if mask.any() else 0.0
    sums = np.where(mask, vals, 0.0).sum(axis=0)
    return np.where(counts > 0, sums / np.maximum(counts, 1), fill)


def impute(feature: FeatureVector, means: np.ndarray) -> np.ndarray:
    return np.where(feature.mask, feature.values, means)


def _sq_dists(X, centroids):
    # exact row-wise differences; the expanded |x|^2 - 2xc + |c|^2 form loses ties
    diff = X[:, None, :] - centroids[None, :, :]
    return np.einsum("ijk,ijk->ij", diff, diff)


def kmeans_plusplus(X: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(X)
    centers = [int(rng.integers(n))]
    closest = _sq_dists(X, X[centers])[:, 0]
    for _ in range(1, k):
        total = closest.sum()
        if total <= 0:
            # every point coincides with a chosen center; take any unused one
            unused = np.setdiff1d(np.arange(n), centers)
            idx = int(unused[rng.integers(len(unused))])
        else:
            idx = int(rng.choice(n, p=closest / total))
        centers.append(idx)
        closest = np.minimum(closest, _sq_dists(X, X[[idx]])[:, 0])
    return X[centers].copy()


@dataclass
class LloydResult:
    centroids: np.ndarray
    labels: np.ndarray
    objective: float
    history: list = field(default_factory=list)
    iterations: int = 0


def lloyd(X: np.ndarray, centroids: np.ndarray, max_iter: int = MAX_ITER) -> LloydResult:
    """Lloyd iterations until the assignment stops changing.

    An empty cluster is moved onto the point farthest from its own centroid.
    ``history`` holds the objective after each assignment step.
    """
    centroids = centroids.copy()
    k = len(centroids)
    labels = None
    history = []
    it = 0
    for it in range(1, max_iter + 1):
        d2 = _sq_dists(X, centroids)
        new = np.argmin(d2, axis=1)
        history.append(float(d2[np.arange(len(X)), new].sum()))
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for c in range(k):
            members = labels == c
            if members.any():
                centroids[c] = X[members].mean(axis=0)
        for c in range(k):
            if not (labels == c).any():
                own = np.einsum("ij,ij->i", X - centroids[labels], X - centroids[labels])
                far = int(np.argmax(own))
                old = labels[far]
                labels[far] = c
                centroids[c] = X[far]
                if (labels == old).any():
                    centroids[old] = X[labels == old].mean(axis=0)
    d2 = _sq_dists(X, centroids)
    labels = np.argmin(d2, axis=1)
    objective = float(d2[np.arange(len(X)), labels].sum())
    return LloydResult(centroids, labels, objective, history, it)


@dataclass(frozen=True)
class ContextModel:
    centroids: np.ndarray          # (C, N)
    assignment: np.ndarray         # (T,) context id per training slice
    imputation_means: np.ndarray   # (N,)
    objective: float = 0.0

    @property
    def C(self) -> int:
        return len(self.centroids)

    @property
    def N(self) -> int:
        return self.centroids.shape[1]

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "version": VERSION,
            "C": self.C,
            "N": self.N,
            "centroids": self.centroids.ravel().tolist(),
            "assignment": [[t, int(c)] for t, c in enumerate(self.assignment)],
            "imputation_means": self.imputation_means.tolist(),
            "objective": self.objective,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ContextModel":
        if doc.get("format") != FORMAT or doc.get("version") != VERSION:
            raise ContextError("not a version-1 context model document")
        C, N = doc["C"], doc["N"]
        pairs = sorted(doc["assignment"])
        if [t for t, _ in pairs] != list(range(len(pairs))):
            raise ContextError("assignment must cover slices 0..T-1")
        return cls(np.array(doc["centroids"], dtype=float).reshape(C, N),
                   np.array([c for _, c in pairs], dtype=np.int64),
                   np.array(doc["imputation_means"], dtype=float),
                   float(doc.get("objective", 0.0)))


def _canonical_labels(labels, k):
    """Relabel clusters in order of their first member."""
    order = []
    for lab in labels:
        if lab not in order:
            order.append(int(lab))
    order += [c for c in range(k) if c not in order]
    remap = np.empty(k, dtype=np.int64)
    remap[order] = np.arange(k)
    return remap, np.array(order)


def cluster_contexts(features: list[FeatureVector], C: int, seed: int = 0,
                     n_init: int = 10, max_iter: int = MAX_ITER) -> ContextModel:
    """Cluster slice feature vectors into ``C`` contexts.

    Masked components are filled with per-service global means. Runs
    ``n_init`` k-means++ seeded Lloyd restarts from one seeded generator and
    keeps the lowest objective (first wins on ties). Context ids are ordered
    by the first slice that belongs to them.

    Slices with no observed component do not take part in clustering and are
    assigned to the centroid nearest the imputation means.
    """
    if C < 1:
        raise ContextError("C must be a positive integer")
    if n_init < 1:
        raise ContextError("n_init must be a positive integer")
    rows = [i for i, f in enumerate(features) if f.mask.any()]
    usable = [features[i] for i in rows]
    if not usable:
        raise ContextError("all feature vectors are fully masked")
    if C > len(usable):
        raise ContextError(f"C={C} exceeds the {len(usable)} slices with observations")
    means = imputation_means(features)
    X = np.array([impute(f, means) for f in usable])

    rng = make_rng(seed)
    best = None
    for _ in range(n_init):
        res = lloyd(X, kmeans_plusplus(X, C, rng), max_iter)
        if best is None or res.objective < best.objective:
            best = res

    remap, order = _canonical_labels(best.labels, C)
    centroids = best.centroids[order]
    labels = remap[best.labels]
    fallback = int(np.argmin(_sq_dists(means[None, :], centroids)[0]))
    assignment = np.full(len(features), fallback, dtype=np.int64)
    assignment[rows] = labels
    return ContextModel(centroids, assignment, means, best.objective)


def assign_context(feature: FeatureVector, model: ContextModel) -> int | None:
    """Nearest centroid to the imputed feature, lowest id on ties.

    Returns None for a fully masked feature.
    """
    if len(feature.values) != model.N:
        raise ContextError(f"feature length {len(feature.values)} != N={model.N}")
    if not feature.mask.any():
        return None
    x = impute(feature, model.imputation_means)
    return int(np.argmin(_sq_dists(x[None, :], model.centroids)[0]))
