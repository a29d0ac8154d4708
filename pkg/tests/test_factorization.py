import math

import numpy as np
import pytest

from carp.aggregate import AggregatedTensor, ObservedMatrix
from carp.factorization import (ContextFactorModel, FactorPair, TrainConfig, TrainingError,
                                mf_gradients, mf_loss, mf_train, predict_entry,
                                train_context_models)
from oracles import central_difference, naive_loss, relative_error


def _random_instance(rng, M=None, N=None, d=None, density=0.6, lam=None):
    M = M or int(rng.integers(2, 11))
    N = N or int(rng.integers(2, 11))
    d = d or int(rng.integers(1, 4))
    mask = rng.random((M, N)) < density
    matrix = ObservedMatrix.from_dense(rng.random((M, N)), mask)
    U, S = rng.normal(0, 0.5, (d, M)), rng.normal(0, 0.5, (d, N))
    lam = rng.uniform(0, 0.5) if lam is None else lam
    return matrix, U, S, lam


def test_loss_of_zero_factors():
    m = ObservedMatrix.from_dense([[0.7, 0.0]], [[True, False]])
    assert mf_loss(m, np.zeros((1, 1)), np.zeros((1, 2)), 0.0) == pytest.approx(0.5 * 0.49)


def test_loss_of_exact_factorization():
    rng = np.random.default_rng(0)
    U, S = rng.random((2, 4)), rng.random((2, 3))
    m = ObservedMatrix.from_dense(U.T @ S)
    assert mf_loss(m, U, S, 0.0) == pytest.approx(0.0, abs=1e-28)


@pytest.mark.parametrize("seed", range(10))
def test_loss_matches_double_loop(seed):
    rng = np.random.default_rng(seed)
    m, U, S, lam = _random_instance(rng, M=5, N=4)
    assert abs(mf_loss(m, U, S, lam) - naive_loss(m.values, m.mask, U, S, lam)) <= 1e-12


def test_loss_shape_mismatch():
    m = ObservedMatrix.from_dense(np.ones((3, 2)))
    with pytest.raises(ValueError):
        mf_loss(m, np.ones((2, 2)), np.ones((2, 2)), 0.0)
    with pytest.raises(ValueError):
        mf_gradients(m, np.ones((2, 3)), np.ones((1, 2)), 0.0)


def test_gradient_of_zero_factors():
    rng = np.random.default_rng(1)
    m = ObservedMatrix.from_dense(rng.random((4, 3)))
    dU, dS = mf_gradients(m, np.zeros((2, 4)), np.zeros((2, 3)), 0.0)
    assert not dU.any() and not dS.any()


def test_gradient_regularizer_only():
    rng = np.random.default_rng(2)
    m = ObservedMatrix.from_dense(np.zeros((3, 4)), np.zeros((3, 4), bool))
    U, S = rng.random((2, 3)), rng.random((2, 4))
    dU, dS = mf_gradients(m, U, S, 0.3)
    np.testing.assert_array_equal(dU, 0.3 * U)
    np.testing.assert_array_equal(dS, 0.3 * S)


@pytest.mark.parametrize("seed", range(15))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(100 + seed)
    m, U, S, lam = _random_instance(rng)
    dU, dS = mf_gradients(m, U, S, lam)
    fdU = central_difference(lambda X: mf_loss(m, X, S, lam), U.copy())
    fdS = central_difference(lambda X: mf_loss(m, U, X, lam), S.copy())
    assert relative_error(dU, fdU).max() < 1e-5
    assert relative_error(dS, fdS).max() < 1e-5


def test_rank_one_recovery():
    rng = np.random.default_rng(3)
    v, w = rng.uniform(0.1, 1, 8), rng.uniform(0.1, 1, 6)
    R = np.outer(v, w)
    cfg = TrainConfig(d=1, lam=0.0, max_iters=5000, tol=1e-12)
    f = mf_train(ObservedMatrix.from_dense(R), cfg)
    assert np.sqrt(np.mean((f.reconstruct() - R) ** 2)) < 1e-3


def test_single_entry_converges():
    m = ObservedMatrix.from_dense([[0.0, 0.0], [0.0, 0.8]], [[False, False], [False, True]])
    f = mf_train(m, TrainConfig(d=1, lam=0.0, max_iters=5000, tol=1e-14))
    assert abs(f.reconstruct()[1, 1] - 0.8) < 1e-4


def test_training_is_deterministic():
    rng = np.random.default_rng(4)
    m, _, _, _ = _random_instance(rng, M=6, N=5)
    cfg = TrainConfig(seed=17)
    a, b = mf_train(m, cfg), mf_train(m, cfg)
    np.testing.assert_array_equal(a.U, b.U)
    np.testing.assert_array_equal(a.S, b.S)


@pytest.mark.parametrize("eta", [0.01, 0.5, 5.0])
def test_loss_never_increases(eta):
    rng = np.random.default_rng(5)
    m, U, S, _ = _random_instance(rng, M=10, N=9, d=3)
    hist = []
    mf_train(m, TrainConfig(d=3, eta=eta, max_iters=300), init=FactorPair(U, S), history=hist)
    assert len(hist) > 1
    assert all(b <= a for a, b in zip(hist, hist[1:]))


def test_random_init_range():
    m = ObservedMatrix.from_dense(np.full((5, 4), 0.5))
    hist = []
    mf_train(m, TrainConfig(d=4, max_iters=1, tol=1e-12), history=hist)
    assert len(hist) == 2


def test_empty_matrix_is_an_error():
    m = ObservedMatrix.from_dense(np.zeros((2, 2)), np.zeros((2, 2), bool))
    with pytest.raises(ValueError):
        mf_train(m, TrainConfig())


def test_non_finite_loss_is_a_training_failure():
    m = ObservedMatrix.from_dense(np.full((2, 2), 0.5))
    huge = FactorPair(np.full((2, 2), 1e200), np.full((2, 2), 1e200))
    with pytest.raises(TrainingError):
        mf_train(m, TrainConfig(), init=huge)


def test_config_validation():
    for bad in (dict(d=0), dict(lam=-1), dict(eta=0), dict(max_iters=0), dict(tol=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def _agg(*matrices):
    vals = np.stack([m.values for m in matrices], axis=2)
    support = np.stack([m.mask.astype(int) for m in matrices], axis=2)
    return AggregatedTensor(vals, support)


def test_single_context_equals_mf_train():
    rng = np.random.default_rng(6)
    m, _, _, _ = _random_instance(rng, M=6, N=5)
    cfg = TrainConfig(seed=3)
    model = train_context_models(_agg(m), cfg)
    direct = mf_train(m, cfg)
    np.testing.assert_array_equal(model.factors[0].U, direct.U)
    np.testing.assert_array_equal(model.factors[0].S, direct.S)


def test_warm_start_with_identical_contexts():
    rng = np.random.default_rng(7)
    m, _, _, _ = _random_instance(rng, M=6, N=5)
    model = train_context_models(_agg(m, m), TrainConfig())
    assert model.initial_losses[1] == model.losses[0]


def test_warm_start_initial_loss_is_previous_solution():
    rng = np.random.default_rng(8)
    a, _, _, _ = _random_instance(rng, M=7, N=6, d=2)
    b, _, _, _ = _random_instance(rng, M=7, N=6, d=2)
    cfg = TrainConfig()
    model = train_context_models(_agg(a, b), cfg)
    expected = mf_loss(b, model.factors[0].U, model.factors[0].S, cfg.lam)
    assert abs(model.initial_losses[1] - expected) <= 1e-12


def test_empty_context_copies_previous_factors():
    rng = np.random.default_rng(9)
    a, _, _, _ = _random_instance(rng, M=4, N=4)
    empty = ObservedMatrix.from_dense(np.zeros((4, 4)), np.zeros((4, 4), bool))
    model = train_context_models(_agg(a, empty), TrainConfig())
    assert model.copied == [False, True]
    np.testing.assert_array_equal(model.factors[1].U, model.factors[0].U)
    with pytest.raises(ValueError):
        train_context_models(_agg(empty, a), TrainConfig())


def test_predict_entry_unit_vectors():
    U = np.zeros((3, 2))
    S = np.zeros((3, 2))
    U[0, 1] = S[0, 0] = 1.0
    model = ContextFactorModel([FactorPair(U, S)], TrainConfig(d=3), [0.0])
    assert predict_entry(model, 1, 0, 0) == 1.0
    assert predict_entry(model, 0, 0, 0) == 0.0
    with pytest.raises(IndexError):
        predict_entry(model, 2, 0, 0)
    with pytest.raises(IndexError):
        predict_entry(model, 0, 0, 1)


def test_predictions_clamped_unless_disabled():
    pair = FactorPair(np.full((1, 1), 2.0), np.full((1, 1), 2.0))
    assert predict_entry(ContextFactorModel([pair], TrainConfig(d=1), [0.0]), 0, 0, 0) == 1.0
    raw = ContextFactorModel([pair], TrainConfig(d=1, clamp_predictions=False), [0.0])
    assert predict_entry(raw, 0, 0, 0) == 4.0


def test_noiseless_context_data_is_reproduced():
    from carp.aggregate import aggregate
    from carp.data import SyntheticSpec, synth_generate

    syn = synth_generate(SyntheticSpec(15, 12, 6, 3, 2, noise_sigma=0.0, density=1.0, seed=1))
    agg = aggregate(syn.observed, syn.truth_contexts)
    model = train_context_models(agg, TrainConfig(lam=0.0, max_iters=10000, tol=1e-12))
    M, N, T = syn.truth.shape
    u, s, t = np.meshgrid(range(M), range(N), range(T), indexing="ij")
    pred = model.predict(u.ravel(), s.ravel(), syn.truth_contexts[t.ravel()])
    assert np.abs(pred - syn.truth.ravel()).max() < 1e-2


def test_user_permutation_permutes_predictions():
    rng = np.random.default_rng(10)
    m, U, S, _ = _random_instance(rng, M=8, N=6, d=2)
    perm = rng.permutation(8)
    permuted = ObservedMatrix(m.values[perm], m.mask[perm])
    cfg = TrainConfig(d=2, max_iters=200)
    a = mf_train(m, cfg, init=FactorPair(U, S))
    b = mf_train(permuted, cfg, init=FactorPair(U[:, perm], S))
    np.testing.assert_allclose(b.reconstruct(), a.reconstruct()[perm], atol=1e-10)


def test_factor_model_json_round_trip():
    rng = np.random.default_rng(11)
    a, _, _, _ = _random_instance(rng, M=4, N=3, d=2)
    model = train_context_models(_agg(a, a), TrainConfig())
    again = ContextFactorModel.from_dict(model.to_dict())
    for p, q in zip(model.factors, again.factors):
        np.testing.assert_array_equal(p.U, q.U)
        np.testing.assert_array_equal(p.S, q.S)
    assert again.config == model.config
    assert again.losses == model.losses and all(map(math.isfinite, again.losses))
