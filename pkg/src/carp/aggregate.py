"""Per-context aggregation of the reliability tensor."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .context import ContextModel
from .data import ReliabilityTensor


class AggregationError(ValueError):
    pass


@dataclass(frozen=True)
class ObservedMatrix:
    """An M x N matrix with an explicit observation mask."""

    values: np.ndarray  # (M, N), 0.0 where unobserved
    mask: np.ndarray    # (M, N) bool

    def __post_init__(self):
        if self.values.shape != self.mask.shape or self.values.ndim != 2:
            raise ValueError("values and mask must be matching 2-D arrays")

    @property
    def shape(self):
        return self.values.shape

    @property
    def n_observed(self) -> int:
        return int(self.mask.sum())

    @classmethod
    def from_dense(cls, values, mask=None):
        values = np.asarray(values, dtype=np.float64)
        if mask is None:
            mask = np.ones(values.shape, dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        return cls(np.where(mask, values, 0.0), mask)


@dataclass(frozen=True)
class AggregatedTensor:
    values: np.ndarray   # (M, N, C) mean reliability, 0.0 where absent
    support: np.ndarray  # (M, N, C) number of slices averaged

    @property
    def dims(self):
        return self.values.shape

    @property
    def C(self) -> int:
        return self.values.shape[2]

    @property
    def mask(self) -> np.ndarray:
        return self.support > 0

    def matrix(self, c: int) -> ObservedMatrix:
        return ObservedMatrix(self.values[:, :, c], self.support[:, :, c] > 0)

    def density(self, c: int) -> float:
        return float((self.support[:, :, c] > 0).mean())

    def dumps(self) -> str:
        """One ``#context c`` section per context of sorted ``u,s,value,support`` rows."""
        M, N, C = self.dims
        lines = [f"#dims {M} {N} {C}"]
        for c in range(C):
            lines.append(f"#context {c}")
            for u, s in zip(*np.nonzero(self.support[:, :, c])):
                lines.append(f"{u},{s},{float(self.values[u, s, c])!r},{self.support[u, s, c]}")
        return "\n".join(lines) + "\n"


def aggregate(tensor: ReliabilityTensor, contexts: ContextModel | np.ndarray) -> AggregatedTensor:
    """Average every (user, service) pair's observations within each context.

    ``contexts`` is a ContextModel or a plain slice -> context array.
    """
    if isinstance(contexts, ContextModel):
        assignment, C = contexts.assignment, contexts.C
    else:
        assignment = np.asarray(contexts, dtype=np.int64)
        C = int(assignment.max()) + 1 if len(assignment) else 0
    M, N, T = tensor.dims
    if len(tensor) and tensor.slices.max() >= len(assignment):
        raise AggregationError(f"time slice {int(tensor.slices.max())} has no context assignment")
    if C < 1:
        raise AggregationError("no contexts")
    ctx = assignment[tensor.slices]
    flat = (tensor.users * N + tensor.services) * C + ctx
    sums = np.bincount(flat, weights=tensor.values, minlength=M * N * C).reshape(M, N, C)
    support = np.bincount(flat, minlength=M * N * C).reshape(M, N, C)
    values = np.divide(sums, support, out=np.zeros((M, N, C)), where=support > 0)
    return AggregatedTensor(values, support)


def collapse_time(tensor: ReliabilityTensor) -> ObservedMatrix:
    """Time-mean of each (user, service) pair: the single-context aggregation."""
    agg = aggregate(tensor, np.zeros(tensor.dims[2], dtype=np.int64))
    return agg.matrix(0)
