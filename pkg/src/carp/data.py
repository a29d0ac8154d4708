"""Reliability records, the sparse user x service x time tensor, splits and
synthetic ground-truth generation.

An entry that is absent from the tensor is unknown. An observed reliability
of exactly 0.0 is a real observation and is kept (see
:attr:`ReliabilityTensor.observed_zero`).
"""

from __future__ import annotations

import hashlib
import io
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple

import numpy as np


class DataError(ValueError):
    """Raised for malformed or inconsistent reliability data."""


class ReliabilityRecord(NamedTuple):
    user_id: int
    service_id: int
    time_slice: int
    value: float


def make_rng(seed: int) -> np.random.Generator:
    """The one generator used for every random draw in the package (PCG64)."""
    if seed < 0:
        raise ValueError(f"seed must be a non-negative integer, got {seed}")
    return np.random.Generator(np.random.PCG64(int(seed)))


class ReliabilityTensor:
    """Immutable sparse M x N x T store of observed reliability values.

    Entries are held as parallel coordinate arrays sorted lexicographically
    by (user, service, time slice). Iterating yields :class:`ReliabilityRecord`.
    """

    __slots__ = ("dims", "users", "services", "slices", "values")

    def __init__(self, dims, users, services, slices, values, *, _sorted=False):
        dims = tuple(int(x) for x in dims)
        if len(dims) != 3 or min(dims) < 1:
            raise DataError(f"dims must be three positive integers, got {dims}")
        users = np.asarray(users, dtype=np.int64).ravel()
        services = np.asarray(services, dtype=np.int64).ravel()
        slices = np.asarray(slices, dtype=np.int64).ravel()
        values = np.asarray(values, dtype=np.float64).ravel()
        n = len(values)
        if not (len(users) == len(services) == len(slices) == n):
            raise DataError("coordinate and value arrays differ in length")
        if n:
            for name, arr, bound in (("user", users, dims[0]),
                                     ("service", services, dims[1]),
                                     ("time slice", slices, dims[2])):
                if arr.min() < 0 or arr.max() >= bound:
                    raise DataError(f"{name} index out of range [0, {bound})")
            if not np.all(np.isfinite(values)) or values.min() < 0.0 or values.max() > 1.0:
                raise DataError("reliability values must lie in [0, 1]")
        if not _sorted:
            order = np.lexsort((slices, services, users))
            users, services, slices, values = (users[order], services[order],
                                               slices[order], values[order])
        keys = self._linear(dims, users, services, slices)
        if n > 1 and np.any(keys[1:] == keys[:-1]):
            i = int(np.flatnonzero(keys[1:] == keys[:-1])[0])
            raise DataError(
                f"duplicate entry ({users[i]}, {services[i]}, {slices[i]})")
        for arr in (users, services, slices, values):
            arr.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "users", users)
        object.__setattr__(self, "services", services)
        object.__setattr__(self, "slices", slices)
        object.__setattr__(self, "values", values)

    def __setattr__(self, name, value):
        raise AttributeError("ReliabilityTensor is immutable")

    @staticmethod
    def _linear(dims, users, services, slices):
        M, N, T = dims
        return (users * N + services) * T + slices

    @classmethod
    def from_records(cls, records: Iterable, dims=None) -> "ReliabilityTensor":
        rows = [tuple(r) for r in records]
        if rows:
            arr = np.array([r[:3] for r in rows], dtype=np.int64)
            vals = np.array([r[3] for r in rows], dtype=np.float64)
        else:
            arr = np.zeros((0, 3), dtype=np.int64)
            vals = np.zeros(0)
        if dims is None:
            if not rows:
                raise DataError("cannot infer dims of an empty record set")
            dims = tuple(int(x) + 1 for x in arr.max(axis=0))
        return cls(dims, arr[:, 0], arr[:, 1], arr[:, 2], vals)

    @classmethod
    def from_dense(cls, values: np.ndarray, mask: np.ndarray | None = None):
        values = np.asarray(values, dtype=np.float64)
        if mask is None:
            mask = np.ones(values.shape, dtype=bool)
        u, s, t = np.nonzero(mask)
        return cls(values.shape, u, s, t, values[u, s, t], _sorted=True)

    def subset(self, index: np.ndarray) -> "ReliabilityTensor":
        """Tensor with the same dims holding the selected entries."""
        index = np.sort(np.asarray(index, dtype=np.int64))
        return ReliabilityTensor(self.dims, self.users[index], self.services[index],
                                 self.slices[index], self.values[index], _sorted=True)

    def __len__(self) -> int:
        return len(self.values)

    def __iter__(self) -> Iterator[ReliabilityRecord]:
        for u, s, t, v in zip(self.users.tolist(), self.services.tolist(),
                              self.slices.tolist(), self.values.tolist()):
            yield ReliabilityRecord(u, s, t, v)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ReliabilityTensor):
            return NotImplemented
        return (self.dims == other.dims
                and np.array_equal(self.users, other.users)
                and np.array_equal(self.services, other.services)
                and np.array_equal(self.slices, other.slices)
                and np.array_equal(self.values, other.values))

    __hash__ = None

    def __repr__(self) -> str:
        return f"ReliabilityTensor(dims={self.dims}, entries={len(self)})"

    @property
    def keys(self) -> np.ndarray:
        return self._linear(self.dims, self.users, self.services, self.slices)

    @property
    def observed_zero(self) -> frozenset:
        """Keys whose observed reliability is exactly 0.0."""
        zero = self.values == 0.0
        return frozenset(zip(self.users[zero].tolist(), self.services[zero].tolist(),
                             self.slices[zero].tolist()))

    def get(self, u: int, s: int, t: int, default=None):
        key = self._linear(self.dims, u, s, t)
        i = int(np.searchsorted(self.keys, key))
        if i < len(self) and self.keys[i] == key:
            return float(self.values[i])
        return default

    def dense(self) -> tuple[np.ndarray, np.ndarray]:
        """Return (values, mask) arrays of shape (M, N, T)."""
        values = np.zeros(self.dims)
        mask = np.zeros(self.dims, dtype=bool)
        values[self.users, self.services, self.slices] = self.values
        mask[self.users, self.services, self.slices] = True
        return values, mask

    def density(self) -> float:
        M, N, T = self.dims
        return len(self) / (M * N * T)

    def dumps(self) -> str:
        """Canonical text form: a ``#dims`` line, then sorted ``u,s,t,value`` rows."""
        out = io.StringIO()
        write_tensor(self, out)
        return out.getvalue()

    def fingerprint(self) -> str:
        return hashlib.sha256(self.dumps().encode("utf-8")).hexdigest()


def write_tensor(tensor: ReliabilityTensor, fh, header: Iterable[str] = ()) -> None:
    for line in header:
        fh.write(f"# {line}\n")
    M, N, T = tensor.dims
    fh.write(f"#dims {M} {N} {T}\n")
    for u, s, t, v in tensor:
        fh.write(f"{u},{s},{t},{v!r}\n")


def save_tensor(tensor: ReliabilityTensor, path, header: Iterable[str] = ()) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        write_tensor(tensor, fh, header)


def _parse_dims(fields, lineno):
    try:
        dims = tuple(int(x) for x in fields)
    except ValueError:
        raise DataError(f"line {lineno}: malformed dims directive") from None
    if len(dims) != 3 or min(dims) < 1:
        raise DataError(f"line {lineno}: dims directive needs three positive integers")
    return dims


def load_records(source) -> ReliabilityTensor:
    """Parse the canonical CSV format into a tensor.

    ``source`` is a path, an open text file or an iterable of lines. Lines
    starting with ``#`` are comments except the ``#dims M N T`` directive. A
    first data line with exactly three integer fields is read as an
    ``M,N,T`` header, and a non-numeric first line as a column header.
    Without a dims directive the dims are the maximum indices plus one.
    """
    if isinstance(source, (str, Path)):
        with open(source, encoding="utf-8") as fh:
            return load_records(fh)

    dims = None
    rows = []
    seen = {}
    first_data = True
    for lineno, raw in enumerate(source, start=1):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].split()
            if body and body[0] == "dims":
                dims = _parse_dims(body[1:], lineno)
            continue
        fields = [f.strip() for f in line.split(",")]
        if first_data:
            first_data = False
            if len(fields) == 3:
                dims = _parse_dims(fields, lineno)
                continue
            try:
                float(fields[-1])
            except ValueError:
                continue
        if len(fields) != 4:
            raise DataError(f"line {lineno}: expected 4 fields, got {len(fields)}")
        try:
            u, s, t = (int(x) for x in fields[:3])
            v = float(fields[3])
        except ValueError:
            raise DataError(f"line {lineno}: cannot parse {line!r}") from None
        if min(u, s, t) < 0:
            raise DataError(f"line {lineno}: negative index")
        if not (0.0 <= v <= 1.0):
            raise DataError(f"line {lineno}: value {v} outside [0, 1]")
        key = (u, s, t)
        if key in seen:
            raise DataError(f"line {lineno}: duplicate entry {key} "
                            f"(first seen on line {seen[key]})")
        seen[key] = lineno
        rows.append((u, s, t, v))

    if dims is not None and rows:
        arr = np.array([r[:3] for r in rows])
        bad = np.flatnonzero(np.any(arr >= np.array(dims), axis=1))
        if len(bad):
            u, s, t, _ = rows[bad[0]]
            raise DataError(f"entry {(u, s, t)} outside declared dims {dims}")
    if dims is None and not rows:
        raise DataError("no records and no dims directive")
    return ReliabilityTensor.from_records(rows, dims)


@dataclass(frozen=True)
class SplitSpec:
    density: float
    seed: int = 0
    scheme: str = "per-user-uniform"

    def __post_init__(self):
        if not (0.0 < self.density <= 1.0):
            raise ValueError(f"density must be in (0, 1], got {self.density}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.scheme != "per-user-uniform":
            raise ValueError(f"unknown split scheme {self.scheme!r}")


def retained_count(n: int, density: float) -> int:
    """Entries kept out of ``n`` at ``density``, rounding half up."""
    return min(n, int(math.floor(density * n + 0.5)))


def _per_user_keep(tensor: ReliabilityTensor, density: float,
                   rng: np.random.Generator) -> np.ndarray:
    keep = np.zeros(len(tensor), dtype=bool)
    # entries are sorted by user, so each user's entries are contiguous
    bounds = np.searchsorted(tensor.users, np.arange(tensor.dims[0] + 1))
    for u in range(tensor.dims[0]):
        lo, hi = bounds[u], bounds[u + 1]
        n = hi - lo
        if n == 0:
            continue
        k = retained_count(n, density)
        keep[lo + rng.permutation(n)[:k]] = True
    return keep


def split(tensor: ReliabilityTensor, spec: SplitSpec):
    """Per-user uniform train/test split.

    Each user keeps ``round_half_up(density * n_u)`` of their ``n_u``
    observed entries in train; every removed entry goes to test. Returns
    ``(train, test)``, both tensors with the original dims.
    """
    if len(tensor) == 0:
        raise DataError("cannot split an empty tensor")
    keep = _per_user_keep(tensor, spec.density, make_rng(spec.seed))
    return tensor.subset(np.flatnonzero(keep)), tensor.subset(np.flatnonzero(~keep))


@dataclass(frozen=True)
class SyntheticSpec:
    M: int
    N: int
    T: int
    C_true: int
    d_true: int
    noise_sigma: float = 0.0
    density: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("M", "N", "T", "C_true", "d_true"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.C_true > self.T:
            raise ValueError("C_true must not exceed T")
        if self.d_true > min(self.M, self.N):
            raise ValueError("d_true must not exceed min(M, N)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not (0.0 < self.density <= 1.0):
            raise ValueError(f"density must be in (0, 1], got {self.density}")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")


@dataclass(frozen=True)
class SyntheticData:
    observed: ReliabilityTensor
    truth: np.ndarray            # (M, N, T)
    truth_contexts: np.ndarray   # (T,) context id of each slice
    user_factors: np.ndarray     # (C_true, d_true, M)
    service_factors: np.ndarray  # (C_true, d_true, N)

    def __iter__(self):
        return iter((self.observed, self.truth, self.truth_contexts))


def synth_generate(spec: SyntheticSpec) -> SyntheticData:
    """Draw a context-structured ground truth and a per-user observation mask.

    Each context gets its own factor pair with entries uniform in
    ``[0, 1/sqrt(d_true)]``. Slices are spread over contexts as evenly as
    possible (``t mod C_true`` shuffled), so every context owns at least one
    slice. ``truth = clamp(U_c^T S_c + noise, 0, 1)``.
    """
    rng = make_rng(spec.seed)
    M, N, T, C, d = spec.M, spec.N, spec.T, spec.C_true, spec.d_true
    scale = 1.0 / math.sqrt(d)
    U = rng.uniform(0.0, scale, size=(C, d, M))
    S = rng.uniform(0.0, scale, size=(C, d, N))
    contexts = rng.permutation(np.arange(T) % C)
    clean = np.einsum("cdm,cdn->cmn", U, S)[contexts].transpose(1, 2, 0)
    noise = rng.normal(0.0, spec.noise_sigma, size=(M, N, T)) if spec.noise_sigma > 0 else 0.0
    truth = np.clip(clean + noise, 0.0, 1.0)
    full = ReliabilityTensor.from_dense(truth)
    if spec.density < 1.0:
        observed = full.subset(np.flatnonzero(_per_user_keep(full, spec.density, rng)))
    else:
        observed = full
    return SyntheticData(observed, truth, contexts.astype(np.int64), U, S)
