"""Accuracy metrics and the density-sweep experiment protocol."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .baselines import baseline_fit, pmf_fit
from .data import ReliabilityTensor, SplitSpec, split
from .factorization import TrainConfig

log = logging.getLogger(__name__)

Z95 = 1.96


def _pairs(pairs):
    arr = np.asarray(pairs, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("metrics need at least one (predicted, actual) pair")
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("expected a sequence of (predicted, actual) pairs")
    return arr[:, 0], arr[:, 1]


def mae(pairs) -> float:
    pred, actual = _pairs(pairs)
    return float(np.mean(np.abs(pred - actual)))


def rmse(pairs) -> float:
    pred, actual = _pairs(pairs)
    return float(np.sqrt(np.mean((pred - actual) ** 2)))


def ci_half_width(values: Sequence[float]) -> float:
    """Normal-approximation 95% half width, 1.96 * sd / sqrt(n)."""
    n = len(values)
    if n < 2:
        return 0.0
    return Z95 * float(np.std(values, ddof=1)) / math.sqrt(n)


class BaselineApproach:
    name = "baseline"

    def fit(self, train, seed):
        return baseline_fit(train)


class PMFApproach:
    name = "pmf"

    def __init__(self, config: TrainConfig | None = None):
        self.config = config or TrainConfig()

    def fit(self, train, seed):
        return pmf_fit(train, self.config.replace(seed=seed))


class CarpApproach:
    name = "carp"

    def __init__(self, C: int = 7, config: TrainConfig | None = None, n_init: int = 10):
        self.C = C
        self.config = config or TrainConfig()
        self.n_init = n_init

    def fit(self, train, seed):
        from .predict import carp_build
        return carp_build(train, self.C, self.config.replace(seed=seed), n_init=self.n_init)


APPROACHES = {"baseline": BaselineApproach, "pmf": PMFApproach, "carp": CarpApproach}


def make_approaches(names: Iterable[str], C: int = 7, config: TrainConfig | None = None,
                    n_init: int = 10) -> list:
    out = []
    for name in names:
        if name == "baseline":
            out.append(BaselineApproach())
        elif name == "pmf":
            out.append(PMFApproach(config))
        elif name == "carp":
            out.append(CarpApproach(C, config, n_init))
        else:
            raise ValueError(f"unknown approach {name!r}; choose from {sorted(APPROACHES)}")
    return out


@dataclass
class RepetitionResult:
    repetition: int
    seed: int
    status: str               # ok, failed, skipped
    mae: float = math.nan
    rmse: float = math.nan
    split_fingerprint: str = ""
    n_train: int = 0
    n_test: int = 0
    message: str = ""


@dataclass
class EvalReport:
    approach: str
    density: float
    runs: list = field(default_factory=list)

    @property
    def repetitions(self) -> int:
        return len(self.runs)

    def _ok(self, attr):
        return [getattr(r, attr) for r in self.runs if r.status == "ok"]

    @property
    def maes(self) -> list:
        return self._ok("mae")

    @property
    def rmses(self) -> list:
        return self._ok("rmse")

    @property
    def seeds(self) -> list:
        return [r.seed for r in self.runs]

    @property
    def mae_mean(self) -> float:
        return float(np.mean(self.maes)) if self.maes else math.nan

    @property
    def rmse_mean(self) -> float:
        return float(np.mean(self.rmses)) if self.rmses else math.nan

    @property
    def mae_ci(self) -> float:
        return ci_half_width(self.maes) if self.maes else math.nan

    @property
    def rmse_ci(self) -> float:
        return ci_half_width(self.rmses) if self.rmses else math.nan


def run_experiment(tensor: ReliabilityTensor, approaches: list, densities: Sequence[float],
                   repetitions: int, base_seed: int = 0) -> list[EvalReport]:
    """Score every approach on identical per-user splits.

    Repetition ``r`` uses seed ``base_seed + r`` for both the split and model
    fitting, at every density. An approach that fails to fit is recorded as
    a failed repetition. Reports come back ordered by density, then approach.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    for d in densities:
        if not (0.0 < d <= 1.0):
            raise ValueError(f"density {d} outside (0, 1]")
    names = [a.name for a in approaches]
    if len(set(names)) != len(names):
        raise ValueError("approach names must be unique")

    reports = []
    for density in densities:
        row = {a.name: EvalReport(a.name, float(density)) for a in approaches}
        for rep in range(repetitions):
            seed = base_seed + rep
            train, test = split(tensor, SplitSpec(density, seed))
            fp = train.fingerprint()
            for approach in approaches:
                res = RepetitionResult(rep, seed, "ok", split_fingerprint=fp,
                                       n_train=len(train), n_test=len(test))
                if len(test) == 0:
                    res.status = "skipped"
                    res.message = "empty test set"
                else:
                    try:
                        model = approach.fit(train, seed)
                        pred = model.predict(test.users, test.services, test.slices)
                        pairs = np.column_stack([pred, test.values])
                        res.mae, res.rmse = mae(pairs), rmse(pairs)
                    except (ValueError, RuntimeError, ArithmeticError) as exc:
                        log.warning("%s failed at density %s, repetition %d: %s",
                                    approach.name, density, rep, exc)
                        res.status = "failed"
                        res.message = str(exc)
                row[approach.name].runs.append(res)
        reports.extend(row.values())
    return reports


DETAIL_COLUMNS = ["approach", "density", "repetition", "mae", "rmse", "seed", "status"]
SUMMARY_COLUMNS = ["approach", "density", "mae_mean", "mae_ci", "rmse_mean", "rmse_ci",
                   "n_ok", "mae_impr_vs_pmf", "rmse_impr_vs_pmf"]


def _fmt(x) -> str:
    if isinstance(x, float):
        return "" if math.isnan(x) else repr(x)
    return str(x)


def _improvement(value, reference):
    if math.isnan(value) or math.isnan(reference) or reference == 0:
        return math.nan
    return (reference - value) / reference * 100.0


def write_reports(reports: list[EvalReport], detail_path, summary_path,
                  header: Iterable[str] = ()) -> None:
    header = list(header)
    with open(detail_path, "w", encoding="utf-8", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DETAIL_COLUMNS)
        for rep in reports:
            for r in rep.runs:
                w.writerow([rep.approach, _fmt(rep.density), r.repetition, _fmt(r.mae),
                            _fmt(r.rmse), r.seed, r.status])

    pmf = {r.density: r for r in reports if r.approach == "pmf"}
    with open(summary_path, "w", encoding="utf-8", newline="") as fh:
        for line in header:
            fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_COLUMNS)
        for rep in reports:
            ref = pmf.get(rep.density)
            w.writerow([rep.approach, _fmt(rep.density), _fmt(rep.mae_mean), _fmt(rep.mae_ci),
                        _fmt(rep.rmse_mean), _fmt(rep.rmse_ci), len(rep.maes),
                        _fmt(_improvement(rep.mae_mean, ref.mae_mean) if ref else math.nan),
                        _fmt(_improvement(rep.rmse_mean, ref.rmse_mean) if ref else math.nan)])
