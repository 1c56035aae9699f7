"""
Deterministic equivalents for RZF and TPE precoding.

The building block is the fixed point ``T(t)`` of a resolvent with
per-user covariances ``R_u``; its Taylor coefficients at ``t = 0`` drive the
polynomial (TPE) SINR tables while its value at ``t = 1/phi`` drives the RZF
SINR. Inputs are stacks of *distinct* matrices with optional multiplicities
``counts``; the user count is ``K = counts.sum()``.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import comb, gammaln

from .channel import EstimationModel
from .scenario import CovarianceSet

log = logging.getLogger(__name__)


class FixedPointError(RuntimeError):
    def __init__(self, msg, residual):
        super().__init__(msg)
        self.residual = residual


def _counts(R: np.ndarray, counts) -> np.ndarray:
    if counts is None:
        return np.ones(R.shape[0])
    counts = np.asarray(counts, dtype=float)
    if counts.shape != (R.shape[0],):
        raise ValueError("need one multiplicity per matrix")
    return counts


def _tr(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """tr(A B) over the trailing two axes without forming the product."""
    return np.einsum("...ij,...ji->...", A, B)


def _herm(X: np.ndarray) -> np.ndarray:
    return 0.5 * (X + np.swapaxes(X.conj(), -1, -2))


@dataclass
class FixedPointState:
    t: float
    T: np.ndarray
    delta: np.ndarray
    residual: float
    iterations: int
    residuals: list = field(default_factory=list, repr=False)   # accepted residuals


@dataclass
class SecondOrderState:
    T_bar: np.ndarray
    delta_bar: np.ndarray
    Jmat: np.ndarray
    v: np.ndarray


def _resolvent(t, R, n, K, delta, Z):
    M = R.shape[-1]
    S = np.tensordot(n * t / (1.0 + t * delta), R, axes=1) / K
    if Z is not None:
        S = S + t * Z / K
    return _herm(np.linalg.inv(S + np.eye(M)))


def solve_theorem1(t: float, R: np.ndarray, Z: np.ndarray | None = None, tol: float = 1e-10,
                   max_iter: int = 10_000, counts=None, damping: float = 0.5,
                   delta0: np.ndarray | None = None,
                   allow_negative: bool = False) -> FixedPointState:
    """Solve ``delta_u = tr(R_u T)/K`` with
    ``T = (t/K sum_u n_u R_u / (1 + t delta_u) + t Z / K + I)^{-1}``.

    Damped Picard iteration. A step that would increase the sup-norm residual
    is halved until it does not, so accepted residuals never grow. Small
    negative ``t`` (inside the radius of analyticity) is accepted with
    ``allow_negative``, which finite-difference checks rely on.
    """
    if t < 0 and not allow_negative:
        raise ValueError("t must be non-negative")
    if tol <= 0:
        raise ValueError("tol must be positive")
    R = np.asarray(R)
    n = _counts(R, counts)
    K = n.sum()

    def F(delta):
        T = _resolvent(t, R, n, K, delta, Z)
        return T, _tr(R, T).real / K

    delta = np.trace(R, axis1=-2, axis2=-1).real / K if delta0 is None else np.asarray(delta0, float)
    T, Fd = F(delta)
    res = float(np.max(np.abs(Fd - delta)))
    history = [res]
    it = 0
    while res >= tol:
        if it >= max_iter:
            raise FixedPointError(f"fixed point did not converge in {max_iter} iterations "
                                  f"(residual {res:.3e})", res)
        step = damping if it else 1.0
        while True:
            cand = delta + step * (Fd - delta)
            T_c, F_c = F(cand)
            res_c = float(np.max(np.abs(F_c - cand)))
            if res_c <= res or step < 1e-8:
                break
            step *= 0.5
        delta, T, Fd, res = cand, T_c, F_c, res_c
        history.append(res)
        it += 1
    return FixedPointState(t=float(t), T=T, delta=delta, residual=res, iterations=it, residuals=history)


def solve_theorem2(t: float, R: np.ndarray, Z: np.ndarray | None, Theta: np.ndarray,
                   fp: FixedPointState, counts=None) -> SecondOrderState:
    """Second-order equivalent ``T_bar`` of ``Sigma Theta Sigma``."""
    if fp.t != t:
        raise ValueError("fixed point was solved at a different t")
    R = np.asarray(R)
    n = _counts(R, counts)
    K = n.sum()
    T = fp.T
    RT = R @ T
    # J[u, v] = tr(R_u T R_v T)/K * n_v / (K (1 + t delta_v)^2)
    cross = np.einsum("uij,vji->uv", RT, RT).real / K
    Jmat = cross * (n / (K * (1.0 + t * fp.delta) ** 2))[None, :]
    TTT = T @ Theta @ T
    v = _tr(R, TTT).real / K
    A = np.eye(len(n)) - t ** 2 * Jmat
    try:
        if np.linalg.cond(A) > 1e14:
            raise np.linalg.LinAlgError("singular")
        delta_bar = np.linalg.solve(A, v)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("I - t^2 J is singular at this t") from exc
    weights = n * delta_bar / (1.0 + t * fp.delta) ** 2
    T_bar = TTT + t ** 2 * T @ (np.tensordot(weights, R, axes=1) / K) @ T
    return SecondOrderState(T_bar=_herm(T_bar), delta_bar=delta_bar, Jmat=Jmat, v=v)


@dataclass
class DerivativeTable:
    T_n: np.ndarray          # (D+1, M, M)
    delta_n: np.ndarray      # (D+1, n_unique)
    f_n: np.ndarray          # (D+1, n_unique)
    g_n: np.ndarray          # (D+1, n_unique)
    Q_n: np.ndarray          # (D+1, M, M), Q_0 = 0
    D: int
    trace_n: np.ndarray      # (D+1,): tr(T^(n)) / K


def _f_derivative(k: int, f: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """k-th derivative of ``f = -1/(1 + t delta)`` from ``f' = f^2 (t delta)'``."""
    acc = np.zeros(f.shape[1])
    for m in range(k):
        f2 = sum(comb(m, j) * f[j] * f[m - j] for j in range(m + 1))
        acc += comb(k - 1, m) * f2 * (k - m) * delta[k - m - 1]
    return acc


def derivative_tables(Phi: np.ndarray, D: int, counts=None) -> DerivativeTable:
    """Derivatives at ``t = 0`` of ``T(t)`` and ``delta(t)`` up to order ``D``.

    With ``f_u = -1 / (1 + t delta_u)`` and ``Q = t/K sum n_u f_u Phi_u`` the
    resolvent is ``T = (I - Q)^{-1}``, so ``T' = T Q' T``. Leibniz expansion of
    this product and of ``f' = f^2 (t delta)'`` gives the recursion.
    """
    if D < 0:
        raise ValueError("D must be >= 0")
    Phi = np.asarray(Phi)
    n = _counts(Phi, counts)
    K = n.sum()
    nu, M = Phi.shape[0], Phi.shape[-1]
    T = np.zeros((D + 1, M, M), dtype=complex)
    Q = np.zeros((D + 1, M, M), dtype=complex)
    delta = np.zeros((D + 1, nu))
    f = np.zeros((D + 1, nu))
    g = np.zeros((D + 1, nu))
    T[0] = np.eye(M)
    delta[0] = np.trace(Phi, axis1=-2, axis2=-1).real / K
    f[0] = -1.0

    # P[m] = m-th derivative of Q' T, cached across orders
    P = []
    for i in range(1, D + 1):
        g[i] = i * delta[i - 1]
        if i >= 2:
            f[i - 1] = _f_derivative(i - 1, f, delta)
        Q[i] = i * np.tensordot(n * f[i - 1], Phi, axes=1) / K
        m = i - 1
        P.append(sum(comb(m, j) * Q[m - j + 1] @ T[j] for j in range(m + 1)))
        T[i] = _herm(sum(comb(i - 1, m) * T[i - 1 - m] @ P[m] for m in range(i)))
        delta[i] = _tr(Phi, T[i][None]).real / K
    if D >= 1:
        f[D] = _f_derivative(D, f, delta)
    trace_n = np.trace(T, axis1=-2, axis2=-1).real / K
    return DerivativeTable(T_n=T, delta_n=delta, f_n=f, g_n=g, Q_n=Q, D=D, trace_n=trace_n)


def xbar_derivatives(delta_n: np.ndarray, D: int | None = None) -> np.ndarray:
    """Derivatives of ``delta / (1 + t delta)`` at zero from those of ``delta``.

    ``delta_n`` has the order on axis 0; any trailing shape is carried along.
    """
    delta_n = np.asarray(delta_n)
    D = delta_n.shape[0] - 1 if D is None else D
    X = np.zeros_like(delta_n[: D + 1])
    for k in range(D + 1):
        X[k] = delta_n[k] - sum(comb(k, i) * i * X[i - 1] * delta_n[k - i] for i in range(1, k + 1))
    return X


def zbar_derivatives(r_traces: np.ndarray, phi_traces: np.ndarray, delta_n: np.ndarray,
                     D: int | None = None) -> np.ndarray:
    """Derivatives of ``Z(t) = tr(R T)/K - t |tr(Phi T)/K|^2 / (1 + t delta)``.

    ``r_traces[n] = tr(R T^(n))/K`` (real), ``phi_traces[n] = tr(Phi T^(n))/K``
    (complex in general) and ``delta_n`` are the derivative sequences of the
    BS's own user, all with the order on axis 0.
    """
    r_traces = np.real(np.asarray(r_traces))
    kap = np.asarray(phi_traces, dtype=complex)
    delta_n = np.asarray(delta_n)
    D = r_traces.shape[0] - 1 if D is None else D
    shape = np.broadcast_shapes(r_traces.shape[1:], kap.shape[1:], delta_n.shape[1:])
    y = np.zeros((D + 1,) + shape)
    W = np.zeros((D + 1,) + shape)
    for k in range(1, D + 1):
        y[k] = k * np.real(sum(comb(k - 1, i) * kap[i] * np.conj(kap[k - 1 - i]) for i in range(k)))
    for k in range(D + 1):
        W[k] = y[k] - sum(comb(k, i) * i * delta_n[i - 1] * W[k - i] for i in range(1, k + 1))
    return r_traces[: D + 1] - W


def _signed_inv_factorial(k: int) -> float:
    """(-1)^k / k!, via the log-gamma function for large k."""
    mag = 1.0 / math.factorial(k) if k <= 20 else math.exp(-gammaln(k + 1))
    return -mag if k % 2 else mag


@dataclass
class SinrModelTPE:
    a_bar: list              # a_bar[j]: (K, J_j)
    B_bar: list              # B_bar[l][j]: (K, J_l, J_l)
    C_bar: list              # C_bar[l]: (J_l, J_l)
    sigma2: float
    J: tuple
    xbar: np.ndarray         # (L, K, D+1)
    zbar: np.ndarray         # (L, L, K, D+1)
    ctrace: np.ndarray       # (L, D+1): tr(T_l^(n))/K

    @property
    def L(self) -> int:
        return len(self.C_bar)

    @property
    def K(self) -> int:
        return self.xbar.shape[1]


def assemble_sinr_model(xbar: np.ndarray, zbar: np.ndarray, ctrace: np.ndarray, sigma2: float,
                        J_orders) -> SinrModelTPE:
    """Turn derivative sequences into the SINR tables.

    ``[a]_n = (-1)^n/n! X^(n)``, ``[B]_{n,p} = (-1)^(n+p+1)/(n+p+1)! Z^(n+p+1)``
    and ``[C]_{n,p} = (-1)^(n+p+1)/(n+p+1)! tr(T^(n+p+1))/K``.
    """
    L = xbar.shape[0]
    J_orders = tuple(int(j) for j in np.broadcast_to(np.asarray(J_orders), (L,)))
    D = xbar.shape[-1] - 1
    if 2 * max(J_orders) - 1 > D:
        raise ValueError(f"need derivatives up to order {2 * max(J_orders) - 1}, have {D}")
    fac = np.array([_signed_inv_factorial(k) for k in range(D + 1)])
    a_bar = [xbar[j, :, : J_orders[j]] * fac[: J_orders[j]] for j in range(L)]
    B_bar, C_bar = [], []
    for l in range(L):
        Jl = J_orders[l]
        hank = np.add.outer(np.arange(Jl), np.arange(Jl)) + 1
        B_bar.append([zbar[l, j][:, hank] * fac[hank] for j in range(L)])
        C_bar.append(ctrace[l][hank] * fac[hank])
    return SinrModelTPE(a_bar, B_bar, C_bar, float(sigma2), J_orders, xbar, zbar, ctrace)


def _unique_with_counts(idx: np.ndarray):
    u, inv, cnt = np.unique(idx, return_inverse=True, return_counts=True)
    return u, inv, cnt


def build_sinr_model(covs: CovarianceSet, est: EstimationModel, J_orders, sigma2: float,
                     D: int | None = None) -> SinrModelTPE:
    """Compute all TPE SINR tables of a deployment from its statistics."""
    L, _, K = covs.shape
    J_orders = tuple(int(j) for j in np.broadcast_to(np.asarray(J_orders), (L,)))
    D = 2 * max(J_orders) - 1 if D is None else D
    xbar = np.zeros((L, K, D + 1))
    zbar = np.zeros((L, L, K, D + 1))
    ctrace = np.zeros((L, D + 1))
    own_delta = np.zeros((L, K, D + 1))
    for l in range(L):
        u, inv, cnt = _unique_with_counts(est.Phi.index[l, l])
        tab = derivative_tables(est.Phi.mats[u], D, cnt)
        ctrace[l] = tab.trace_n
        own_delta[l] = tab.delta_n[:, inv].T
        xbar[l] = xbar_derivatives(own_delta[l].T).T
        cache = {}
        for j in range(L):
            for m in range(K):
                key = (covs.bank.index[l, j, m], est.Phi.index[l, j, m], inv[m])
                if key not in cache:
                    R = covs.bank.mats[key[0]]
                    Ph = est.Phi.mats[key[1]]
                    rt = _tr(R[None], tab.T_n).real / K
                    kt = _tr(Ph[None], tab.T_n) / K
                    cache[key] = zbar_derivatives(rt, kt, tab.delta_n[:, key[2]])
                zbar[l, j, m] = cache[key]
    return assemble_sinr_model(xbar, zbar, ctrace, sigma2, J_orders)


def _as_cell_list(w, L):
    if isinstance(w, np.ndarray) and w.ndim == 1:
        w = [w] * L
    ws = [np.asarray(getattr(x, "w", x), dtype=float) for x in w]
    if len(ws) != L:
        raise ValueError(f"need coefficients for {L} cells")
    return ws


def tpe_sinr_detequiv(model: SinrModelTPE, w) -> np.ndarray:
    """Deterministic SINR per (j, m) for coefficient vectors ``w[l]``."""
    L = model.L
    ws = _as_cell_list(w, L)
    for l in range(L):
        if ws[l].size != model.J[l]:
            raise ValueError(f"cell {l}: got {ws[l].size} coefficients, order is {model.J[l]}")
    gamma = np.zeros((L, model.K))
    for j in range(L):
        sig = (model.a_bar[j] @ ws[j]) ** 2
        interf = sum(np.einsum("i,kij,j->k", ws[l], model.B_bar[l][j], ws[l]) for l in range(L))
        den = model.sigma2 / model.K + interf - sig
        if np.any(den <= 0):
            raise ValueError("non-positive SINR denominator: tables are inconsistent")
        gamma[j] = sig / den
    return gamma


def tpe_power_detequiv(model: SinrModelTPE, w) -> np.ndarray:
    """Asymptotic transmit power ``w^T C w`` per cell."""
    ws = _as_cell_list(w, model.L)
    return np.array([ws[l] @ model.C_bar[l] @ ws[l] for l in range(model.L)])


@dataclass
class RzfDetEq:
    beta_bar: np.ndarray     # (L,)
    theta: np.ndarray        # (L, L, K)
    theta_bar: np.ndarray
    kappa: np.ndarray        # complex
    kappa_bar: np.ndarray    # complex
    delta: np.ndarray        # (L, K): own-user delta at t = 1/phi
    zeta: np.ndarray         # (L, K)
    gamma_bar: np.ndarray    # (L, K)
    phi: np.ndarray
    sigma2: float

    @property
    def rate(self) -> np.ndarray:
        return np.log2(1.0 + self.gamma_bar)


def rzf_sinr_detequiv(covs: CovarianceSet, est: EstimationModel, phi, sigma2: float,
                      P=1.0, tol: float = 1e-10) -> RzfDetEq:
    """Asymptotic RZF SINR per user.

    The denominator is grouped as
    ``sigma2/K + sum_l beta_l/phi_l [theta - zeta|kappa|^2 - theta_bar
    + 2 zeta Re(kappa* kappa_bar) - zeta^2 |kappa|^2 delta_bar]``
    where ``zeta`` and ``delta_bar`` belong to the interfering BS's own user
    ``m``. This grouping reproduces Monte-Carlo RZF SINRs.
    """
    L, _, K = covs.shape
    phi = np.broadcast_to(np.asarray(phi, dtype=float), (L,)).copy()
    P = np.broadcast_to(np.asarray(P, dtype=float), (L,)).copy()
    M = covs.M
    beta = np.zeros(L)
    theta = np.zeros((L, L, K))
    theta_bar = np.zeros((L, L, K))
    kap = np.zeros((L, L, K), dtype=complex)
    kap_bar = np.zeros((L, L, K), dtype=complex)
    delta = np.zeros((L, K))
    delta_bar = np.zeros((L, K))
    for l in range(L):
        t = 1.0 / phi[l]
        u, inv, cnt = _unique_with_counts(est.Phi.index[l, l])
        Phi = est.Phi.mats[u]
        fp = solve_theorem1(t, Phi, tol=tol, counts=cnt)
        so = solve_theorem2(t, Phi, None, np.eye(M), fp, counts=cnt)
        T, Tb = fp.T, so.T_bar
        beta[l] = P[l] / ((np.trace(T).real - np.trace(Tb).real) / (K * phi[l]))
        delta[l] = fp.delta[inv]
        delta_bar[l] = so.delta_bar[inv]
        cache = {}
        for j in range(L):
            for m in range(K):
                key = (covs.bank.index[l, j, m], est.Phi.index[l, j, m])
                if key not in cache:
                    R = covs.bank.mats[key[0]]
                    Ph = est.Phi.mats[key[1]]
                    cache[key] = (_tr(R, T).real / K, _tr(R, Tb).real / K,
                                  _tr(Ph, T) / K, _tr(Ph, Tb) / K)
                theta[l, j, m], theta_bar[l, j, m], kap[l, j, m], kap_bar[l, j, m] = cache[key]
    zeta = 1.0 / (phi[:, None] + delta)
    gamma = np.zeros((L, K))
    for j in range(L):
        num = beta[j] * (delta[j] * zeta[j]) ** 2
        den = sigma2 / K
        for l in range(L):
            k2 = np.abs(kap[l, j]) ** 2
            cross = np.real(np.conj(kap[l, j]) * kap_bar[l, j])
            den = den + beta[l] / phi[l] * (theta[l, j] - zeta[l] * k2 - theta_bar[l, j]
                                            + 2 * zeta[l] * cross - zeta[l] ** 2 * k2 * delta_bar[l])
        den = den - num
        gamma[j] = np.maximum(num / den, 0.0)
    return RzfDetEq(beta, theta, theta_bar, kap, kap_bar, delta, zeta, gamma, phi, float(sigma2))


def export_tables_csv(model: SinrModelTPE, path: str | Path) -> None:
    """One row per (l, j, m, n): Z^(n), X^(n) (own cell only) and tr(T_l^(n))/K."""
    L, _, K, D1 = model.zbar.shape
    lines = ["l,j,m,n,zbar,xbar,ctrace"]
    for l in range(L):
        for j in range(L):
            for m in range(K):
                for n in range(D1):
                    x = f"{model.xbar[j, m, n]:.12g}" if l == j else ""
                    lines.append(f"{l},{j},{m},{n},{model.zbar[l, j, m, n]:.12g},{x},"
                                 f"{model.ctrace[l, n]:.12g}")
    Path(path).write_text("\n".join(lines) + "\n")
