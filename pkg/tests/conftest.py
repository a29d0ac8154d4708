import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from carp.baselines import pmf_fit  # noqa: E402
from carp.data import SyntheticSpec, synth_generate  # noqa: E402
from carp.factorization import TrainConfig  # noqa: E402
from carp.predict import carp_build  # noqa: E402
from oracles import recovery_rate  # noqa: E402

ACCEPTANCE_LINES = []

# synthetic setting shared by the context-recovery checks
SYNTH = dict(M=50, N=49, T=28, C_true=7, d_true=2, noise_sigma=0.02, density=0.2)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def _synthetic_run(seed):
    syn = synth_generate(SyntheticSpec(**SYNTH, seed=seed))
    config = TrainConfig(seed=seed)
    model = carp_build(syn.observed, 7, config)
    pmf = pmf_fit(syn.observed, config)
    _, mask = syn.observed.dense()
    u, s, t = np.nonzero(~mask)
    truth = syn.truth[u, s, t]
    return {
        "seed": seed,
        "data": syn,
        "model": model,
        "recovery": recovery_rate(model.context_model.assignment, syn.truth_contexts),
        "carp_rmse": float(np.sqrt(np.mean((model.predict_at_slices(u, s, t) - truth) ** 2))),
        "pmf_rmse": float(np.sqrt(np.mean((pmf.predict(u, s) - truth) ** 2))),
    }


@pytest.fixture(scope="session")
def synthetic_runs():
    """CARP (C=7) and PMF on 20 seeds of the 50x49x28, 7-context synthetic set.

    Returns ``(runs, seconds)``.
    """
    start = time.perf_counter()
    runs = [_synthetic_run(seed) for seed in range(20)]
    return runs, time.perf_counter() - start


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
