import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tpemimo import optimizer
from tpemimo.detequiv import RzfDetEq, tpe_power_detequiv, tpe_sinr_detequiv
from tpemimo.optimizer import (CSV_HEADER, FEASIBLE, INFEASIBLE, CvxpyBackend, MaxMinProblem, SolverFailure,
                               bisection_solve, extract_rank_one, feasibility_check, min_weighted_rate,
                               result_csv_row, rzf_mimic_weights, upper_bound_xi)

from oracles import grid_max_min_rate, synthetic_problem


def scalar_problem(a, b, nu=1.0, c=1.0, sigma2=0.0):
    return MaxMinProblem([np.array([[a]])], [[np.array([[[b]]])]], [np.array([[c]])],
                         np.array([[nu]]), 1.0, sigma2)


@pytest.fixture(scope="module")
def problems():
    return [synthetic_problem(s) for s in range(10)]


@pytest.fixture(scope="module")
def solved(problems):
    return [bisection_solve(p) for p in problems]


def test_scalar_upper_bound():
    a, b, nu = 0.8, 1.0, 1.5
    assert upper_bound_xi(scalar_problem(a, b, nu)) == pytest.approx(
        math.log2(1 + a * a / (b - a * a)) / nu, rel=1e-9)


def test_doubling_weights_halves_bound(problems):
    p = problems[0]
    q = MaxMinProblem(p.a_bar, p.B_bar, p.C_bar, 2 * p.nu, p.P, p.sigma2)
    assert upper_bound_xi(q) == pytest.approx(upper_bound_xi(p) / 2, rel=1e-12)


def test_problem_validation(problems):
    p = problems[0]
    with pytest.raises(ValueError):
        MaxMinProblem(p.a_bar, p.B_bar, p.C_bar, -p.nu, p.P, p.sigma2)
    with pytest.raises(ValueError):
        MaxMinProblem(p.a_bar, p.B_bar, p.C_bar, p.nu[:, :2], p.P, p.sigma2)
    with pytest.raises(ValueError):
        MaxMinProblem(p.a_bar, p.B_bar, [-p.C_bar[0]], p.nu, p.P, p.sigma2)
    with pytest.raises(ValueError):
        feasibility_check(-0.1, p)
    with pytest.raises(ValueError):
        bisection_solve(p, epsilon=0)


def test_zero_target_always_feasible(problems):
    for p in problems:
        status, W, margin = feasibility_check(0.0, p)
        assert status == FEASIBLE and margin >= -1e-7
        assert np.trace(p.C_bar[0] @ W[0]) == pytest.approx(1.0, abs=1e-6)


def test_infeasible_above_bound(problems):
    for p in problems[:5]:
        status, W, _ = feasibility_check(upper_bound_xi(p) + 0.05, p)
        assert status == INFEASIBLE and W is None


def test_feasibility_monotone_on_grid(problems):
    p = problems[1]
    backend = CvxpyBackend()
    prep = optimizer._prepare(p)
    grid = np.linspace(0, 1.2 * upper_bound_xi(p), 20)
    ok = [feasibility_check(x, p, backend=backend, prep=prep)[0] == FEASIBLE for x in grid]
    # once infeasible, never feasible again
    first_bad = ok.index(False) if False in ok else len(ok)
    assert all(ok[:first_bad]) and not any(ok[first_bad:])
    assert ok[0]


def test_bisection_matches_grid_oracle(problems, solved):
    for p, res in zip(problems, solved):
        grid, _ = grid_max_min_rate(p)
        assert abs(res.achieved - grid) < 1e-2
        assert abs(res.xi_star - grid) < 1e-2


def test_bound_dominates_optimum(solved):
    for res in solved:
        assert res.xi_max >= res.xi_star


@settings(max_examples=50, deadline=None)
@given(st.integers(100, 10_000), st.integers(1, 2), st.integers(1, 3))
def test_bound_dominates_on_random_instances(seed, L, J):
    p = synthetic_problem(seed, K=3, M=8, J=J, L=L)
    res = bisection_solve(p, epsilon=1e-2)
    assert res.xi_max >= res.xi_star - 1e-9


def test_certificate_and_result_contracts(problems, solved):
    for p, res in zip(problems, solved):
        W = res.W[0]
        assert np.trace(p.C_bar[0] @ W) == pytest.approx(p.P[0], abs=1e-6)
        assert np.linalg.eigvalsh(W).min() >= -1e-8 * np.abs(W).max()
        c = 1 - 2.0 ** (-p.nu[0] * res.xi_star)
        slack = np.array([c[m] * (p.sigma2 / p.K + np.trace(p.B_bar[0][0][m] @ W))
                          - p.a_bar[0][m] @ W @ p.a_bar[0][m] for m in range(p.K)])
        scale = p.sigma2 / p.K + np.abs(p.B_bar[0][0]).sum((1, 2)) + np.abs(p.a_bar[0]).sum(1) ** 2
        assert np.all(slack / scale <= 1e-7)
        assert tpe_power_detequiv(p.as_model(), res.w)[0] == pytest.approx(p.P[0], rel=1e-12)


def test_iterations_bounded_and_interval_halves(solved):
    for res in solved:
        eps = 1e-3
        assert res.iterations <= math.ceil(math.log2(res.xi_max / eps))
        probes = [x for x, _, _ in res.history[1:]]
        assert probes[0] == pytest.approx(res.xi_max / 2)


def test_tight_relaxation_reproduces_target(problems, solved):
    # rank-one certificates: the extracted w reaches xi* up to the bisection width
    for p, res in zip(problems, solved):
        if res.rank_gap.max() < 1e-6:
            assert res.achieved >= res.xi_star - 1e-3


def test_extract_rank_one_passthrough():
    rng = np.random.default_rng(0)
    A = rng.standard_normal((3, 3))
    C = A @ A.T + np.eye(3)
    v = rng.standard_normal(3)
    for sign in (1, -1):
        w, gaps = extract_rank_one([np.outer(v, v)], [C], 2.0, a_first=[sign * v])
        expected = sign * v * np.sqrt(2.0 / (v @ C @ v))
        assert np.allclose(w[0], expected, atol=1e-12)
        assert abs(w[0] @ C @ w[0] - 2.0) < 1e-12
        assert gaps[0] < 1e-12
    with pytest.raises(ValueError):
        extract_rank_one([np.zeros((3, 3))], [C], 1.0)


def test_extract_reports_rank_gap():
    W = np.diag([1.0, 0.25])
    _, gaps = extract_rank_one([W], [np.eye(2)], 1.0)
    assert gaps[0] == pytest.approx(0.25)


def test_degenerate_zero_signal():
    p = scalar_problem(0.0, 1.0, sigma2=0.1)
    res = bisection_solve(p)
    assert res.xi_star == 0.0 and res.xi_max == 0.0
    assert res.w[0] @ p.C_bar[0] @ res.w[0] == pytest.approx(1.0)


def test_power_and_noise_scaling_keeps_direction():
    p = synthetic_problem(3)
    q = MaxMinProblem(p.a_bar, p.B_bar, p.C_bar, p.nu, 10 * p.P, 10 * p.sigma2)
    w1 = bisection_solve(p, epsilon=1e-5).w[0]
    w2 = bisection_solve(q, epsilon=1e-5).w[0]
    u1, u2 = w1 / np.linalg.norm(w1), w2 / np.linalg.norm(w2)
    assert abs(u1 @ u2) > 1 - 1e-4


class _AlwaysUnknown:
    def check(self, xi, prep):
        if xi == 0:
            return CvxpyBackend().check(xi, prep)
        return INFEASIBLE, None, float("-inf")


def test_backend_is_swappable(problems):
    res = bisection_solve(problems[0], backend=_AlwaysUnknown())
    assert res.xi_star == 0.0


def test_backend_failure_is_distinct(problems):
    class Broken:
        def check(self, xi, prep):
            raise SolverFailure("boom")

    with pytest.raises(SolverFailure):
        bisection_solve(problems[0], backend=Broken())


def _rzf(gamma):
    z = np.zeros_like(gamma)
    return RzfDetEq(np.ones(gamma.shape[0]), z, z, z, z, z, z, gamma, np.ones(gamma.shape[0]), 0.1)


def test_rzf_mimic_weights():
    nu = rzf_mimic_weights(_rzf(np.array([[3.0, 0.0]])))
    assert nu[0, 0] == pytest.approx(2.0) and nu[0, 1] == 1e-6
    assert np.all(rzf_mimic_weights(_rzf(np.full((2, 3), 0.7))) == np.log2(1.7))
    with pytest.raises(ValueError):
        rzf_mimic_weights(_rzf(np.array([[np.inf]])))


def test_mimic_weights_make_xi_a_rate_fraction(problems):
    p = problems[2]
    res = bisection_solve(p, epsilon=1e-5)
    gamma = tpe_sinr_detequiv(p.as_model(), res.w)
    ratio = np.log2(1 + gamma) / p.nu
    # binding users sit at xi* while the others exceed it
    assert ratio.min() == pytest.approx(res.xi_star, abs=1e-3)
    assert min_weighted_rate(p, res.w) == pytest.approx(ratio.min())


def test_dump_load_round_trip(problems, tmp_path):
    p = synthetic_problem(4, L=2, J=3, K=3, M=8)
    p.dump(tmp_path / "p.npz")
    q = MaxMinProblem.load(tmp_path / "p.npz")
    assert q.J == p.J and q.L == 2 and q.sigma2 == p.sigma2
    for l in range(2):
        assert np.array_equal(q.C_bar[l], p.C_bar[l])
        for j in range(2):
            assert np.array_equal(q.B_bar[l][j], p.B_bar[l][j])


def test_csv_row(solved):
    row = result_csv_row(solved[0])
    assert len(row.split(",")) == len(CSV_HEADER.split(","))


@pytest.mark.slow
def test_rank_gap_small_on_deployment_drops():
    from tpemimo import simkit
    from tpemimo.detequiv import build_sinr_model, rzf_sinr_detequiv
    from tpemimo.scenario import ScenarioConfig

    cfg = ScenarioConfig(L=3, K=8, M=32, G=2, phi=0.1)
    gaps = []
    for drop in range(20):
        ctx = simkit.build_drop(cfg, drop)
        model = build_sinr_model(ctx.covs, ctx.est_model, 3, cfg.sigma2)
        rzf = rzf_sinr_detequiv(ctx.covs, ctx.est_model, cfg.phi, cfg.sigma2)
        res = bisection_solve(MaxMinProblem.from_model(model, rzf_mimic_weights(rzf)), epsilon=1e-2)
        gaps.extend(res.rank_gap)
    assert np.median(gaps) < 0.05
