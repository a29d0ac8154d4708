"""Regularized matrix factorization trained by full-batch gradient descent,
and the warm-started chain of per-context models."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .aggregate import AggregatedTensor, ObservedMatrix
from .data import make_rng

log = logging.getLogger(__name__)

MAX_HALVINGS = 30
FORMAT = "carp.factor-model"
VERSION = 1


class TrainingError(RuntimeError):
    """Gradient descent produced a non-finite loss even at the smallest step."""


@dataclass(frozen=True)
class TrainConfig:
    d: int = 2
    lam: float = 0.01
    eta: float = 0.01
    max_iters: int = 500
    tol: float = 1e-6
    seed: int = 0
    clamp_predictions: bool = True

    def __post_init__(self):
        if int(self.d) < 1:
            raise ValueError("d must be a positive integer")
        if not self.lam >= 0:
            raise ValueError("lam must be >= 0")
        if not self.eta > 0:
            raise ValueError("eta must be > 0")
        if int(self.max_iters) < 1:
            raise ValueError("max_iters must be a positive integer")
        if not self.tol > 0:
            raise ValueError("tol must be > 0")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    def replace(self, **changes) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **changes})


@dataclass(frozen=True)
class FactorPair:
    U: np.ndarray  # (d, M)
    S: np.ndarray  # (d, N)

    def __post_init__(self):
        if self.U.ndim != 2 or self.S.ndim != 2 or self.U.shape[0] != self.S.shape[0]:
            raise ValueError(f"incompatible factor shapes {self.U.shape} and {self.S.shape}")

    @property
    def d(self) -> int:
        return self.U.shape[0]

    def reconstruct(self) -> np.ndarray:
        return self.U.T @ self.S

    def copy(self) -> "FactorPair":
        return FactorPair(self.U.copy(), self.S.copy())


def _check(matrix: ObservedMatrix, U, S):
    M, N = matrix.shape
    if U.ndim != 2 or S.ndim != 2 or U.shape[0] != S.shape[0] \
            or U.shape[1] != M or S.shape[1] != N:
        raise ValueError(f"factor shapes {U.shape}, {S.shape} do not fit a {M}x{N} matrix")


def mf_loss(matrix: ObservedMatrix, U: np.ndarray, S: np.ndarray, lam: float) -> float:
    """0.5 * squared error over observed cells + 0.5 * lam * (|U|_F^2 + |S|_F^2)."""
    _check(matrix, U, S)
    # overflow is reported through the non-finite result
    with np.errstate(over="ignore", invalid="ignore"):
        resid = np.where(matrix.mask, matrix.values - U.T @ S, 0.0)
        return 0.5 * float(np.sum(resid * resid)) + 0.5 * lam * (float(np.sum(U * U)) + float(np.sum(S * S)))


def mf_gradients(matrix: ObservedMatrix, U: np.ndarray, S: np.ndarray, lam: float):
    """Analytic gradients ``(dU, dS)`` of :func:`mf_loss`."""
    _check(matrix, U, S)
    err = np.where(matrix.mask, U.T @ S - matrix.values, 0.0)
    return S @ err.T + lam * U, U @ err + lam * S


def random_init(M: int, N: int, d: int, rng: np.random.Generator) -> FactorPair:
    hi = 1.0 / math.sqrt(d)
    return FactorPair(rng.uniform(0.0, hi, size=(d, M)), rng.uniform(0.0, hi, size=(d, N)))


def mf_train(matrix: ObservedMatrix, config: TrainConfig, init: FactorPair | None = None,
             history: list | None = None) -> FactorPair:
    """Minimize :func:`mf_loss` with simultaneous full-batch updates.

    A step that raises the loss is retried with half the learning rate, up
    to 30 times; the next iteration starts again from ``config.eta``. When
    no halving lowers the loss the current factors are returned. Training
    stops once the relative loss decrease drops below ``config.tol``.

    If ``history`` is given, the initial loss and the loss after every
    accepted step are appended to it.
    """
    if matrix.n_observed == 0:
        raise ValueError("matrix has no observed entries")
    M, N = matrix.shape
    if init is None:
        init = random_init(M, N, config.d, make_rng(config.seed))
    U, S = init.U.astype(np.float64, copy=True), init.S.astype(np.float64, copy=True)
    _check(matrix, U, S)
    lam = config.lam
    loss = mf_loss(matrix, U, S, lam)
    if not math.isfinite(loss):
        raise TrainingError("initial loss is not finite")
    if history is not None:
        history.append(loss)

    for _ in range(config.max_iters):
        dU, dS = mf_gradients(matrix, U, S, lam)
        step = config.eta
        accepted = False
        for _ in range(MAX_HALVINGS + 1):
            U_new = U - step * dU
            S_new = S - step * dS
            new_loss = mf_loss(matrix, U_new, S_new, lam)
            if math.isfinite(new_loss) and new_loss <= loss:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            if not math.isfinite(new_loss):
                raise TrainingError("loss diverged at the minimum step size")
            break
        decrease = loss - new_loss
        U, S, prev, loss = U_new, S_new, loss, new_loss
        if history is not None:
            history.append(loss)
        if prev == 0.0 or decrease / prev < config.tol:
            break
    return FactorPair(U, S)


def _inner(pair: FactorPair, users, services):
    return np.einsum("dk,dk->k", pair.U[:, users], pair.S[:, services])


@dataclass(frozen=True)
class ContextFactorModel:
    factors: list             # FactorPair per context
    config: TrainConfig
    losses: list              # final loss per context
    initial_losses: list = field(default_factory=list)
    copied: list = field(default_factory=list)  # context had no data; factors copied

    def __post_init__(self):
        if len(self.losses) != len(self.factors):
            raise ValueError("one final loss per context is required")
        if not self.initial_losses:
            object.__setattr__(self, "initial_losses", list(self.losses))
        if not self.copied:
            object.__setattr__(self, "copied", [False] * len(self.factors))

    @property
    def C(self) -> int:
        return len(self.factors)

    @property
    def shape(self):
        return self.factors[0].U.shape[1], self.factors[0].S.shape[1]

    def predict(self, users, services, contexts) -> np.ndarray:
        """Vectorized inner products ``U_c[:, u] . S_c[:, s]``."""
        users = np.asarray(users, dtype=np.int64)
        services = np.asarray(services, dtype=np.int64)
        contexts = np.broadcast_to(np.asarray(contexts, dtype=np.int64), users.shape)
        M, N = self.shape
        if users.size and (users.min() < 0 or users.max() >= M or services.min() < 0
                           or services.max() >= N or contexts.min() < 0
                           or contexts.max() >= self.C):
            raise IndexError("user, service or context index out of range")
        out = np.empty(users.shape)
        for c in np.unique(contexts):
            sel = contexts == c
            out[sel] = _inner(self.factors[c], users[sel], services[sel])
        if self.config.clamp_predictions:
            np.clip(out, 0.0, 1.0, out=out)
        return out

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "version": VERSION,
            "config": asdict(self.config),
            "contexts": [
                {"U": p.U.ravel().tolist(), "S": p.S.ravel().tolist(),
                 "d": p.d, "M": p.U.shape[1], "N": p.S.shape[1],
                 "final_loss": loss, "initial_loss": init, "copied": copied}
                for p, loss, init, copied in zip(self.factors, self.losses,
                                                 self.initial_losses, self.copied)
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "ContextFactorModel":
        if doc.get("format") != FORMAT or doc.get("version") != VERSION:
            raise ValueError("not a version-1 factor model document")
        factors, losses, inits, copied = [], [], [], []
        for part in doc["contexts"]:
            d, M, N = part["d"], part["M"], part["N"]
            factors.append(FactorPair(np.array(part["U"], dtype=float).reshape(d, M),
                                      np.array(part["S"], dtype=float).reshape(d, N)))
            losses.append(part["final_loss"])
            inits.append(part["initial_loss"])
            copied.append(part["copied"])
        return cls(factors, TrainConfig(**doc["config"]), losses, inits, copied)


def predict_entry(model: ContextFactorModel, u: int, s: int, c: int) -> float:
    return float(model.predict([u], [s], [c])[0])


def train_context_models(agg: AggregatedTensor, config: TrainConfig) -> ContextFactorModel:
    """Train contexts in id order, each starting from the previous solution.

    Context 0 starts from the seeded random initialization. A context with
    no observed entries keeps the previous context's factors unchanged.
    """
    if agg.C < 1:
        raise ValueError("aggregated tensor has no contexts")
    if agg.matrix(0).n_observed == 0:
        raise ValueError("context 0 has no observed entries")
    M, N, _ = agg.dims
    factors, losses, inits, copied = [], [], [], []
    current = random_init(M, N, config.d, make_rng(config.seed))
    for c in range(agg.C):
        matrix = agg.matrix(c)
        if matrix.n_observed == 0:
            log.warning("context %d has no observations; reusing context %d factors", c, c - 1)
            factors.append(current.copy())
            losses.append(losses[-1])
            inits.append(losses[-1])
            copied.append(True)
            continue
        hist = []
        current = mf_train(matrix, config, init=current, history=hist)
        log.debug("context %d: loss %.6g -> %.6g in %d steps", c, hist[0], hist[-1], len(hist) - 1)
        factors.append(current)
        inits.append(hist[0])
        losses.append(hist[-1])
        copied.append(False)
    return ContextFactorModel(factors, config, losses, inits, copied)
