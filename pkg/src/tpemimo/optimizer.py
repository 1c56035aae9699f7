"""
Weighted max-min optimisation of TPE coefficients.

The coefficient vectors of all cells are lifted to PSD matrices ``W_l``; for
a fixed target ``xi`` the SINR constraints are then linear in ``W_l`` and the
problem is a small SDP feasibility test. Bisection over ``xi`` gives the
relaxed optimum and the principal eigenvector of each ``W_l`` gives the
coefficients.

Numerics: the tables of different polynomial orders differ by many orders of
magnitude, so every cell is rescaled by ``D = diag(C)^{-1/2}`` before it is
handed to the solver and each SINR constraint is normalised to unit scale.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np

from .detequiv import RzfDetEq, SinrModelTPE, tpe_sinr_detequiv

log = logging.getLogger(__name__)

FEASIBLE = "FEASIBLE"
INFEASIBLE = "INFEASIBLE"


class SolverFailure(RuntimeError):
    pass


@dataclass
class MaxMinProblem:
    a_bar: list              # a_bar[j]: (K, J_j)
    B_bar: list              # B_bar[l][j]: (K, J_l, J_l)
    C_bar: list              # C_bar[l]: (J_l, J_l)
    nu: np.ndarray           # (L, K)
    P: np.ndarray            # (L,)
    sigma2: float

    def __post_init__(self):
        self.nu = np.asarray(self.nu, dtype=float)
        L = len(self.C_bar)
        self.P = np.broadcast_to(np.asarray(self.P, dtype=float), (L,)).copy()
        if self.nu.shape != (L, self.a_bar[0].shape[0]):
            raise ValueError("nu must have shape (L, K)")
        if np.any(self.nu <= 0):
            raise ValueError("user weights must be positive")
        for l in range(L):
            Jl = self.C_bar[l].shape[0]
            if self.a_bar[l].shape[1] != Jl or any(B.shape[1:] != (Jl, Jl) for B in self.B_bar[l]):
                raise ValueError(f"cell {l}: inconsistent table dimensions")
            lam = np.linalg.eigvalsh(self.C_bar[l])
            if lam.min() < -1e-9 * max(abs(lam).max(), 1e-300):
                raise ValueError(f"cell {l}: C_bar is not PSD")

    @classmethod
    def from_model(cls, model: SinrModelTPE, nu, P=1.0) -> "MaxMinProblem":
        return cls(model.a_bar, model.B_bar, model.C_bar, nu, P, model.sigma2)

    @property
    def L(self) -> int:
        return len(self.C_bar)

    @property
    def K(self) -> int:
        return self.a_bar[0].shape[0]

    @property
    def J(self) -> tuple:
        return tuple(C.shape[0] for C in self.C_bar)

    def as_model(self) -> SinrModelTPE:
        """Minimal SINR model view for evaluating coefficient vectors."""
        return SinrModelTPE(self.a_bar, self.B_bar, self.C_bar, self.sigma2, self.J,
                            np.zeros((self.L, self.K, 1)), np.zeros((self.L, self.L, self.K, 1)),
                            np.zeros((self.L, 1)))

    def dump(self, path: str | Path) -> None:
        arrays = {"nu": self.nu, "P": self.P, "sigma2": np.array(self.sigma2)}
        for l in range(self.L):
            arrays[f"a_{l}"] = self.a_bar[l]
            arrays[f"C_{l}"] = self.C_bar[l]
            for j in range(self.L):
                arrays[f"B_{l}_{j}"] = self.B_bar[l][j]
        np.savez_compressed(path, **arrays)

    @classmethod
    def load(cls, path: str | Path) -> "MaxMinProblem":
        with np.load(path) as data:
            L = data["P"].shape[0]
            a = [data[f"a_{l}"] for l in range(L)]
            C = [data[f"C_{l}"] for l in range(L)]
            B = [[data[f"B_{l}_{j}"] for j in range(L)] for l in range(L)]
            return cls(a, B, C, data["nu"], data["P"], float(data["sigma2"]))


@dataclass
class OptimizationResult:
    xi_star: float
    W: list
    w: list
    rank_gap: np.ndarray
    feasibility_margin: float
    xi_max: float
    iterations: int
    achieved: float = float("nan")   # min weighted rate of the extracted w
    history: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# scaled, deduplicated constraint data

@dataclass
class _Prepared:
    scale: list              # D_l as vectors
    C: list                  # scaled C_l
    sizes: list              # number of vec entries per cell
    A_noise: np.ndarray      # (n_rows,) sigma2 / K
    A_B: np.ndarray          # (n_rows, n_vars) interference coefficients
    A_a: np.ndarray          # (n_rows, n_vars) signal coefficients
    nu: np.ndarray           # (n_rows,)
    norm: np.ndarray         # (n_rows,)
    rows: list               # (j, m) representative per row


def _prepare(problem: MaxMinProblem) -> _Prepared:
    L, K = problem.L, problem.K
    scale = []
    for l in range(L):
        d = np.sqrt(np.clip(np.diag(problem.C_bar[l]), 1e-300, None))
        scale.append(1.0 / d)
    C = [problem.C_bar[l] * np.outer(scale[l], scale[l]) for l in range(L)]
    sizes = [c.shape[0] ** 2 for c in C]
    offs = np.concatenate([[0], np.cumsum(sizes)])
    rows, seen = [], {}
    A_B, A_a, noise, nu = [], [], [], []
    for j in range(L):
        for m in range(K):
            # W_l = P_l * X_l with tr(C_l X_l) = 1
            b = np.zeros(offs[-1])
            for l in range(L):
                Bs = problem.B_bar[l][j][m] * np.outer(scale[l], scale[l])
                b[offs[l]:offs[l + 1]] = problem.P[l] * Bs.ravel()
            a = problem.a_bar[j][m] * scale[j]
            av = np.zeros(offs[-1])
            av[offs[j]:offs[j + 1]] = problem.P[j] * np.outer(a, a).ravel()
            nz = problem.sigma2 / K
            key = (b.tobytes(), av.tobytes(), problem.nu[j, m])
            if key in seen:
                continue
            seen[key] = len(rows)
            rows.append((j, m))
            A_B.append(b)
            A_a.append(av)
            noise.append(nz)
            nu.append(problem.nu[j, m])
    A_B, A_a, noise = np.array(A_B), np.array(A_a), np.array(noise)
    norm = np.abs(A_B).sum(1) + np.abs(A_a).sum(1) + noise
    return _Prepared(scale, C, sizes, noise, A_B, A_a, np.array(nu), norm, rows)


class FeasibilityBackend(Protocol):
    def check(self, xi: float, prep: _Prepared) -> tuple[str, list | None, float]:
        """Return (status, X per cell in scaled coordinates, margin)."""


class CvxpyBackend:
    """Max-margin SDP solved with cvxpy; the problem is built once per data set."""

    def __init__(self, solver: str = "CLARABEL", tol: float = 1e-7, **solver_opts):
        self.solver = solver
        self.tol = tol
        self.solver_opts = solver_opts
        self._cache = None

    def _build(self, prep: _Prepared):
        import cvxpy as cp

        X = [cp.Variable((int(math.isqrt(n)),) * 2, symmetric=True) for n in prep.sizes]
        x = cp.hstack([cp.vec(Xl, order="C") for Xl in X])
        s = cp.Variable()
        c = cp.Parameter(len(prep.nu), nonneg=True)
        inv = 1.0 / prep.norm
        lhs = (cp.multiply(c, (prep.A_noise * inv) + (prep.A_B * inv[:, None]) @ x)
               - (prep.A_a * inv[:, None]) @ x + s)
        cons = [lhs <= 0]
        for Xl, Cl in zip(X, prep.C):
            cons += [Xl >> 0, cp.trace(Cl @ Xl) == 1]
        prob = cp.Problem(cp.Maximize(s), cons)
        return prob, X, s, c

    def check(self, xi, prep):
        import cvxpy as cp

        if self._cache is None or self._cache[0] is not prep:
            self._cache = (prep,) + self._build(prep)
        _, prob, X, s, c = self._cache
        c.value = 1.0 - np.exp2(-prep.nu * xi)
        try:
            with warnings.catch_warnings():
                # inaccurate solves are reported through the status below
                warnings.simplefilter("ignore", UserWarning)
                prob.solve(solver=self.solver, **self.solver_opts)
        except cp.error.SolverError as exc:
            raise SolverFailure(f"conic solver failed at xi={xi:.6g}: {exc}") from exc
        if prob.status == cp.OPTIMAL_INACCURATE:
            log.debug("inaccurate solve at xi=%.6g", xi)
        if prob.status in (cp.OPTIMAL, cp.OPTIMAL_INACCURATE):
            margin = float(s.value)
            Xs = [0.5 * (Xl.value + Xl.value.T) for Xl in X]
            return (FEASIBLE if margin >= -self.tol else INFEASIBLE), Xs, margin
        if prob.status in (cp.INFEASIBLE, cp.INFEASIBLE_INACCURATE, cp.UNBOUNDED):
            raise SolverFailure(f"margin problem reported {prob.status} at xi={xi:.6g}")
        log.warning("solver status %s at xi=%.6g treated as infeasible", prob.status, xi)
        return INFEASIBLE, None, float("-inf")


def _unscale(X: list, prep: _Prepared, problem: MaxMinProblem) -> list:
    return [problem.P[l] * X[l] * np.outer(prep.scale[l], prep.scale[l]) for l in range(len(X))]


def upper_bound_xi(problem: MaxMinProblem, reg: float = 1e-12) -> float:
    """Smallest single-user relaxed rate over weight.

    Per user, dropping noise and all other cells leaves a generalised
    eigenvalue problem with value ``a^T (B_jj - a a^T)^{-1} a``. If that matrix
    is not numerically positive definite the power constraint is used to keep
    the noise term, which gives a bound that is always well posed.
    """
    L, K = problem.L, problem.K
    best = np.inf
    for j in range(L):
        d = 1.0 / np.sqrt(np.clip(np.diag(problem.C_bar[j]), 1e-300, None))
        Cs = problem.C_bar[j] * np.outer(d, d)
        for m in range(K):
            a = problem.a_bar[j][m] * d
            Bs = problem.B_bar[j][j][m] * np.outer(d, d)
            A = Bs - np.outer(a, a)
            A = A + reg * np.trace(Bs) * np.eye(len(a))
            try:
                np.linalg.cholesky(A)
            except np.linalg.LinAlgError:
                log.warning("B - a a^T not positive definite for user (%d, %d); using noise-aware bound", j, m)
                A = Bs - np.outer(a, a) + problem.sigma2 / (K * problem.P[j]) * Cs
                try:
                    np.linalg.cholesky(A)
                except np.linalg.LinAlgError as exc:
                    raise np.linalg.LinAlgError(f"user ({j}, {m}): singular SINR bound matrix") from exc
            g = float(a @ np.linalg.solve(A, a))
            best = min(best, np.log2(1.0 + max(g, 0.0)) / problem.nu[j, m])
    return float(best)


def feasibility_check(xi: float, problem: MaxMinProblem, tol: float = 1e-7,
                      backend: FeasibilityBackend | None = None, prep: _Prepared | None = None):
    """Decide whether every user can reach ``nu * xi`` bits in the relaxation.

    Returns ``(status, W, margin)`` with ``W`` per cell in original units
    (``None`` when infeasible) and ``margin`` the largest uniform normalised
    constraint slack.
    """
    if xi < 0:
        raise ValueError("xi must be non-negative")
    backend = backend or CvxpyBackend(tol=tol)
    prep = prep or _prepare(problem)
    status, X, margin = backend.check(xi, prep)
    W = _unscale(X, prep, problem) if status == FEASIBLE else None
    return status, W, margin


def extract_rank_one(W: list, C_bar: list, P, a_first: list | None = None):
    """Principal direction of each ``W_l`` measured in the ``C_l`` metric.

    Returns ``(w, rank_gap)``; each ``w_l`` satisfies ``w^T C_l w = P_l`` and,
    if ``a_first`` is given, ``w^T a_first[l] >= 0``.
    """
    L = len(W)
    P = np.broadcast_to(np.asarray(P, dtype=float), (L,))
    ws, gaps = [], []
    for l in range(L):
        Wl = 0.5 * (W[l] + W[l].T)
        if not np.any(Wl):
            raise ValueError(f"cell {l}: zero matrix has no principal direction")
        d = 1.0 / np.sqrt(np.clip(np.diag(C_bar[l]), 1e-300, None))
        Cs = C_bar[l] * np.outer(d, d)
        Ws = Wl / np.outer(d, d)
        lam_c, U = np.linalg.eigh(Cs)
        keep = lam_c > 1e-14 * lam_c.max()
        root = np.sqrt(np.where(keep, lam_c, 0.0))
        half = (U * root) @ U.T
        half_pinv = (U * np.where(keep, 1.0 / np.where(keep, root, 1.0), 0.0)) @ U.T
        lam, V = np.linalg.eigh(half @ Ws @ half)
        lam = lam[::-1]
        gaps.append(float(max(lam[1], 0.0) / lam[0]) if len(lam) > 1 and lam[0] > 0 else 0.0)
        v = d * (half_pinv @ V[:, -1])
        q = float(v @ C_bar[l] @ v)
        if not q > 0:
            raise ValueError(f"cell {l}: extracted direction carries no power")
        v = v * np.sqrt(P[l] / q)
        if a_first is not None and float(v @ a_first[l]) < 0:
            v = -v
        ws.append(v)
    return ws, np.array(gaps)


def min_weighted_rate(problem: MaxMinProblem, w: list) -> float:
    gamma = tpe_sinr_detequiv(problem.as_model(), w)
    return float(np.min(np.log2(1.0 + gamma) / problem.nu))


def bisection_solve(problem: MaxMinProblem, epsilon: float = 1e-3, tol: float = 1e-7,
                    backend: FeasibilityBackend | None = None) -> OptimizationResult:
    """Bisection on ``xi`` over ``[0, xi_max]`` followed by rank-one extraction."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    backend = backend or CvxpyBackend(tol=tol)
    prep = _prepare(problem)
    a_first = [problem.a_bar[l][0] for l in range(problem.L)]
    xi_max = upper_bound_xi(problem)

    status, X, margin = backend.check(0.0, prep)
    if status != FEASIBLE:
        raise SolverFailure("xi = 0 reported infeasible")
    best = (0.0, X, margin)
    lo, hi = 0.0, xi_max
    history = [(0.0, status, margin)]
    iterations = 0
    while hi - lo > epsilon:
        mid = 0.5 * (lo + hi)
        status, X, margin = backend.check(mid, prep)
        history.append((mid, status, margin))
        iterations += 1
        if status == FEASIBLE:
            lo, best = mid, (mid, X, margin)
        else:
            hi = mid
    xi_star, X, margin = best
    W = _unscale(X, prep, problem)
    if xi_max <= 0:
        # no signal anywhere: fall back to a matched-filter-like direction
        w = []
        for l in range(problem.L):
            e = np.zeros(problem.J[l])
            e[0] = np.sqrt(problem.P[l] / problem.C_bar[l][0, 0])
            w.append(e)
        gaps = np.zeros(problem.L)
    else:
        w, gaps = extract_rank_one(W, problem.C_bar, problem.P, a_first)
    res = OptimizationResult(xi_star=xi_star, W=W, w=w, rank_gap=gaps, feasibility_margin=margin,
                             xi_max=xi_max, iterations=iterations, history=history)
    try:
        res.achieved = min_weighted_rate(problem, w)
    except ValueError:
        res.achieved = float("nan")
    return res


def rzf_mimic_weights(rzf: RzfDetEq, floor: float = 1e-6) -> np.ndarray:
    """User weights equal to the asymptotic RZF rates."""
    if not np.all(np.isfinite(rzf.gamma_bar)):
        raise ValueError("RZF SINRs must be finite")
    return np.maximum(np.log2(1.0 + rzf.gamma_bar), floor)


CSV_HEADER = "xi_star,xi_max,achieved,iterations,feasibility_margin,rank_gap,w"


def result_csv_row(res: OptimizationResult) -> str:
    gaps = ";".join(f"{g:.6g}" for g in res.rank_gap)
    ws = "|".join(";".join(f"{x:.12g}" for x in np.asarray(w)) for w in res.w)
    return (f"{res.xi_star:.12g},{res.xi_max:.12g},{res.achieved:.12g},{res.iterations},"
            f"{res.feasibility_margin:.6g},{gaps},{ws}")
