import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from loremerge import linalg
from loremerge.bench import BenchSpec, generate_family
from loremerge.checkpoint import IncompatibleError, ParameterSet
from loremerge.solver import (
    SolverConfig,
    SolverError,
    decompose,
    decompose_parameter_sets,
    implemented_objective,
    update_base,
    update_task_vector,
)
from oracles import jacobi_singular_values, lore_objective, numerical_rank


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig(mu=-1)
    with pytest.raises(ValueError):
        SolverConfig(rank_fraction=0)
    with pytest.raises(ValueError):
        SolverConfig(rank_fraction=1.5)
    with pytest.raises(ValueError):
        SolverConfig(max_iters=0)
    with pytest.raises(ValueError):
        SolverConfig(rel_tol=-1e-3)
    assert SolverConfig().mu == 0.01 and SolverConfig().rank_fraction == 0.2


# --- objective ---------------------------------------------------------------

def test_objective_exact_fit_is_zero():
    t = np.random.default_rng(0).standard_normal((3, 3))
    assert implemented_objective(t, [np.zeros((3, 3))], [t], 0.5) == 0.0


def test_objective_identity_target():
    assert implemented_objective(np.zeros((2, 2)), [np.zeros((2, 2))], [np.eye(2)], 0.1) == pytest.approx(2.0)


def test_objective_matches_recomputation():
    rng = np.random.default_rng(1)
    base = rng.standard_normal((5, 4))
    deltas = [rng.standard_normal((5, 4)) for _ in range(3)]
    targets = [rng.standard_normal((5, 4)) for _ in range(3)]
    assert abs(implemented_objective(base, deltas, targets, 0.07)
               - lore_objective(base, deltas, targets, 0.07)) < 1e-10


def test_objective_shape_mismatch():
    with pytest.raises(ValueError):
        implemented_objective(np.zeros((2, 2)), [np.zeros((2, 3))], [np.zeros((2, 2))], 0.1)


# --- base update -------------------------------------------------------------

def test_update_base_zero_deltas_is_mean():
    rng = np.random.default_rng(2)
    ts = [rng.standard_normal((3, 2)) for _ in range(3)]
    np.testing.assert_allclose(update_base(ts, [np.zeros((3, 2))] * 3), (ts[0] + ts[1] + ts[2]) / 3, atol=1e-15)


def test_update_base_single_model():
    rng = np.random.default_rng(3)
    t, d = rng.standard_normal((3, 3)), rng.standard_normal((3, 3))
    assert np.array_equal(update_base([t], [d]), t - d)


def test_update_base_is_minimizer():
    rng = np.random.default_rng(4)
    ts = [rng.standard_normal((4, 3)) for _ in range(4)]
    ds = [rng.standard_normal((4, 3)) for _ in range(4)]
    b = update_base(ts, ds)
    f0 = implemented_objective(b, ds, ts, 0.1)
    for _ in range(100):
        e = rng.standard_normal(b.shape) * rng.uniform(0, 0.1)
        assert f0 <= implemented_objective(b + e, ds, ts, 0.1) + 1e-12


# --- task vector update ------------------------------------------------------

def test_update_task_vector_zero_difference():
    t = np.random.default_rng(5).standard_normal((4, 4))
    assert np.array_equal(update_task_vector(t, t, SolverConfig()), np.zeros((4, 4)))


def test_update_task_vector_diagonal():
    out = update_task_vector(np.diag([3.0, 1.0]), np.zeros((2, 2)), SolverConfig(mu=1.0, apply_rank_cap=False))
    np.testing.assert_allclose(out, np.diag([2.0, 0.0]), atol=1e-15)


def test_update_task_vector_rank_cap():
    rng = np.random.default_rng(6)
    out = update_task_vector(rng.standard_normal((10, 10)), np.zeros((10, 10)), SolverConfig(mu=0.01))
    assert numerical_rank(out) <= 2


# --- decompose ---------------------------------------------------------------

def test_single_model_is_trivial():
    t = np.random.default_rng(7).standard_normal((5, 4))
    res = decompose([t], SolverConfig())
    assert np.array_equal(res.base, t)
    assert not res.task_vectors[0].any()
    assert res.trace.converged and res.trace.iterations_run == 1


def test_identical_models_fixed_point():
    t = np.random.default_rng(8).standard_normal((5, 4))
    res = decompose([t, t.copy()], SolverConfig())
    np.testing.assert_array_equal(res.base, t)
    assert all(not d.any() for d in res.task_vectors)
    assert res.trace.converged and res.trace.iterations_run == 1


def test_antisymmetric_pair_hand_execution():
    rng = np.random.default_rng(9)
    b = rng.standard_normal((6, 5))
    u, v = rng.standard_normal(6), rng.standard_normal(5)
    p = np.outer(u, v)
    sigma = np.linalg.norm(u) * np.linalg.norm(v)
    mu = 0.05 * sigma
    seen = []
    res = decompose([b + p, b - p], SolverConfig(mu=mu, apply_rank_cap=False, max_iters=2, rel_tol=0.0),
                    callback=lambda stage, it, base, ds: seen.append((stage, it, base.copy(), [d.copy() for d in ds])))
    # round 1, after all updates
    _, _, base1, ds1 = seen[2]
    expected = (sigma - mu) / sigma * p
    assert np.abs(base1 - b).max() < 1e-12
    assert np.abs(ds1[0] - expected).max() < 1e-10
    assert np.abs(ds1[1] + expected).max() < 1e-10
    # objective: each model leaves residual mu*uv^T/sigma (norm mu) and pays 2 mu (sigma - mu)
    f_hand = 2 * (mu ** 2 + 2 * mu * (sigma - mu))
    assert abs(res.trace.objective_per_iteration[0] - f_hand) < 1e-10
    assert abs(res.trace.objective_per_iteration[-1] - f_hand) < 1e-10


def test_trace_is_monotone_and_converges():
    rng = np.random.default_rng(10)
    ts = [rng.standard_normal((8, 6)) * 0.3 for _ in range(3)]
    res = decompose(ts, SolverConfig(mu=0.1, apply_rank_cap=False, max_iters=5000, rel_tol=1e-12))
    f = np.array(res.trace.objective_per_iteration)
    assert np.all(np.diff(f) <= 1e-12)
    assert res.trace.converged


def test_every_coordinate_update_descends_with_cap():
    # the capped update is the exact minimizer over rank-limited matrices
    rng = np.random.default_rng(11)
    ts = [rng.standard_normal((12, 10)) for _ in range(3)]
    cfg = SolverConfig(mu=0.05, rank_fraction=0.3, max_iters=50, rel_tol=0.0)
    values = []
    decompose(ts, cfg, callback=lambda s, it, b, ds: values.append(lore_objective(b, ds, ts, cfg.mu)))
    assert np.all(np.diff(values[1:]) <= 1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(2, 5), st.sampled_from([0.01, 0.1, 1.0]),
       st.sampled_from([1e-6, 1e-8, 1e-10]))
def test_final_change_bounded_by_stopping_rule(seed, n, mu, rel_tol):
    # each exact block update lowers f by at least its squared change, so at the stop
    # change**2 <= (f_prev - f) < rel_tol * f_prev
    rng = np.random.default_rng(seed)
    ts = [rng.standard_normal((9, 7)) for _ in range(n)]
    res = decompose(ts, SolverConfig(mu=mu, rel_tol=rel_tol, max_iters=100000, apply_rank_cap=False))
    f = res.trace.objective_per_iteration
    assert res.trace.converged
    if len(f) >= 2:
        assert res.trace.final_change ** 2 <= rel_tol * f[-2] * (1 + 1e-9) + 1e-24


def test_rank_bound_holds():
    rng = np.random.default_rng(12)
    ts = [rng.standard_normal((15, 20)) for _ in range(3)]
    res = decompose(ts, SolverConfig(mu=0.01, rank_fraction=0.2))
    for d in res.task_vectors:
        assert numerical_rank(d) <= linalg.rank_cap(d.shape, 0.2)


def test_fixed_point_after_convergence():
    fam = generate_family(BenchSpec(((12, 9),), n_models=3, planted_rank=2, perturbation_scale=0.5,
                                    noise_scale=0.001, seed=3))
    ts = [m["layers.0.weight"] for m in fam.models]
    cfg = SolverConfig(mu=0.01, apply_rank_cap=False, max_iters=100000, rel_tol=1e-14)
    res = decompose(ts, cfg)
    assert res.trace.converged
    base = update_base(ts, res.task_vectors)
    ds = [update_task_vector(t, base, cfg) for t in ts]
    assert np.linalg.norm(base - res.base) < 1e-8
    assert max(np.linalg.norm(a - b) for a, b in zip(ds, res.task_vectors)) < 1e-8


def test_permutation_equivariance():
    rng = np.random.default_rng(13)
    ts = [rng.standard_normal((7, 5)) for _ in range(4)]
    cfg = SolverConfig(mu=0.1, max_iters=30)
    a = decompose(ts, cfg)
    perm = [2, 0, 3, 1]
    b = decompose([ts[i] for i in perm], cfg)
    assert np.abs(a.base - b.base).max() < 1e-12
    for j, i in enumerate(perm):
        assert np.abs(b.task_vectors[j] - a.task_vectors[i]).max() < 1e-12


def test_shift_equivariance():
    rng = np.random.default_rng(14)
    ts = [rng.standard_normal((6, 6)) for _ in range(3)]
    c = rng.standard_normal((6, 6)) * 3.0
    cfg = SolverConfig(mu=0.1, max_iters=20)
    a = decompose(ts, cfg)
    b = decompose([t + c for t in ts], cfg)
    assert np.abs(b.base - (a.base + c)).max() < 1e-10
    for x, y in zip(a.task_vectors, b.task_vectors):
        assert np.abs(x - y).max() < 1e-10


def test_decompose_rejects_bad_input():
    with pytest.raises(ValueError):
        decompose([])
    with pytest.raises(ValueError):
        decompose([np.zeros((2, 2)), np.zeros((3, 2))])
    with pytest.raises(ValueError):
        decompose([np.array([[np.nan, 1.0], [0.0, 1.0]])])


def test_non_finite_objective_is_reported(monkeypatch):
    from loremerge import solver

    monkeypatch.setattr(solver, "_residual_term", lambda *a: float("inf"))
    with pytest.raises(SolverError, match="iteration 1"):
        decompose([np.eye(2), 2 * np.eye(2)], name="layer.w")


# --- parameter sets ----------------------------------------------------------

def test_parameter_sets_identical():
    rng = np.random.default_rng(15)
    ps = ParameterSet({"w": rng.standard_normal((4, 4)), "b": rng.standard_normal(4)})
    base, tvs, traces = decompose_parameter_sets([ps, ps], SolverConfig())
    for k in ps:
        np.testing.assert_array_equal(base[k], ps[k])
        assert all(not tv[k].any() for tv in tvs)
    assert list(traces) == ["w"]


def test_parameter_sets_passthrough_bias_is_mean():
    rng = np.random.default_rng(16)
    w = rng.standard_normal((4, 4))
    a = ParameterSet({"w": w, "b": np.array([1.0, 2.0])})
    b = ParameterSet({"w": w.copy(), "b": np.array([3.0, 6.0])})
    base, tvs, _ = decompose_parameter_sets([a, b], SolverConfig())
    np.testing.assert_array_equal(base["b"], [2.0, 4.0])
    np.testing.assert_array_equal(base["w"], w)
    assert all(not tv["b"].any() and not tv["w"].any() for tv in tvs)


def test_parameter_sets_match_direct_calls():
    fam = generate_family(BenchSpec(((10, 8), (6, 12), (5, 5)), n_models=3, planted_rank=2,
                                    perturbation_scale=0.5, noise_scale=0.01, seed=4))
    cfg = SolverConfig(mu=0.02)
    base, tvs, traces = decompose_parameter_sets(fam.models, cfg, workers=3)
    for name in base:
        direct = decompose([m[name] for m in fam.models], cfg)
        assert np.array_equal(base[name], direct.base)
        for tv, d in zip(tvs, direct.task_vectors):
            assert np.array_equal(tv[name], d)
        assert traces[name].objective_per_iteration == direct.trace.objective_per_iteration


def test_parameter_sets_higher_rank_tensor_round_trips_shape():
    rng = np.random.default_rng(17)
    a = ParameterSet({"conv": rng.standard_normal((4, 3, 3))})
    b = ParameterSet({"conv": rng.standard_normal((4, 3, 3))})
    base, tvs, traces = decompose_parameter_sets([a, b], SolverConfig(mu=0.1, apply_rank_cap=False))
    assert base["conv"].shape == (4, 3, 3)
    direct = decompose([a["conv"].reshape(12, 3), b["conv"].reshape(12, 3)], SolverConfig(mu=0.1, apply_rank_cap=False))
    assert np.array_equal(tvs[0]["conv"], direct.task_vectors[0].reshape(4, 3, 3))


def test_parameter_sets_incompatible():
    a = ParameterSet({"w": np.ones((2, 2))})
    b = ParameterSet({"w": np.ones((2, 3))})
    with pytest.raises(IncompatibleError):
        decompose_parameter_sets([a, b])


def test_svd_spectrum_of_result_is_low_rank():
    fam = generate_family(BenchSpec(((20, 16),), n_models=2, planted_rank=1, perturbation_scale=1.0, seed=5))
    res = decompose([m["layers.0.weight"] for m in fam.models], SolverConfig(mu=0.01))
    # for two models delta_1 absorbs (P_1 - P_2) / 2, which has rank two
    s = jacobi_singular_values(res.task_vectors[0])
    assert s[1] > 0.1 and np.all(s[2:] < 1e-9)
