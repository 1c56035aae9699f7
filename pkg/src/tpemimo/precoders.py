"""
MRT, RZF and TPE precoders.

Estimate matrices have shape (..., M, K) with one column per user of the
serving cell; every function broadcasts over the leading axes. The TPE
precoder is a matrix polynomial in ``V = H H^H / K`` applied by Horner's rule
so that no power of ``V`` is ever formed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import comb


@dataclass
class PrecodingMatrix:
    G: np.ndarray            # (..., M, K)
    P_target: float
    beta: np.ndarray | float | None = None

    def power(self) -> np.ndarray:
        """(1/K) tr(G G^H) for every leading index."""
        K = self.G.shape[-1]
        return np.sum(np.abs(self.G) ** 2, axis=(-2, -1)) / K


@dataclass
class TpeCoefficients:
    w: np.ndarray            # (J,) real

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        if self.w.ndim != 1 or self.w.size < 1:
            raise ValueError("TPE coefficients must be a non-empty vector")
        if not np.all(np.isfinite(self.w)):
            raise ValueError("TPE coefficients must be finite")

    @property
    def J(self) -> int:
        return self.w.size

    def __array__(self, dtype=None, copy=None):
        return self.w if dtype is None else self.w.astype(dtype)


def _coeffs(w) -> np.ndarray:
    return w.w if isinstance(w, TpeCoefficients) else np.asarray(w, dtype=float)


def _apply_gram(H: np.ndarray, Y: np.ndarray) -> np.ndarray:
    """V Y with V = H H^H / K, as two thin products."""
    K = H.shape[-1]
    return H @ (np.swapaxes(H.conj(), -1, -2) @ Y) / K


def _frob(X: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(np.abs(X) ** 2, axis=(-2, -1)))


def rzf_precoder(H_hat: np.ndarray, phi: float, P: float = 1.0) -> PrecodingMatrix:
    """``G = beta (H H^H + K phi I)^{-1} H sqrt(K)`` with (1/K) tr(G G^H) = P.

    Uses ``(H H^H + K phi I)^{-1} H = H (H^H H + K phi I)^{-1}`` so only a
    K x K system is solved.
    """
    if phi <= 0:
        raise ValueError("phi must be positive")
    H = np.asarray(H_hat)
    K = H.shape[-1]
    gram = np.swapaxes(H.conj(), -1, -2) @ H + K * phi * np.eye(K)
    # gram is Hermitian, so X^H = gram^{-1} H^H
    X = np.swapaxes(np.linalg.solve(gram, np.swapaxes(H.conj(), -1, -2)).conj(), -1, -2)
    X = X * np.sqrt(K)
    beta = np.sqrt(P * K) / _frob(X)
    return PrecodingMatrix(X * beta[..., None, None], float(P), beta)


def mrt_precoder(H_hat: np.ndarray, P: float = 1.0) -> PrecodingMatrix:
    """G proportional to the estimate matrix with (1/K) tr(G G^H) = P."""
    H = np.asarray(H_hat)
    norm = _frob(H)
    if np.any(norm == 0):
        raise ValueError("cannot normalise an all-zero estimate matrix")
    K = H.shape[-1]
    beta = np.sqrt(P * K) / norm
    return PrecodingMatrix(H * beta[..., None, None], float(P), beta)


def tpe_precoder(H_hat: np.ndarray, w) -> PrecodingMatrix:
    """``G = sum_n w_n V^n H / sqrt(K)`` without power renormalisation.

    ``w`` has shape (J,) or (..., J) broadcasting against the leading axes of
    ``H_hat``.
    """
    H = np.asarray(H_hat)
    w = _coeffs(w)
    K = H.shape[-1]
    J = w.shape[-1]
    Y = w[..., J - 1, None, None] * H
    for n in range(J - 2, -1, -1):
        Y = _apply_gram(H, Y) + w[..., n, None, None] * H
    G = Y / np.sqrt(K)
    return PrecodingMatrix(G, float("nan"))


def apply_tpe(H_hat: np.ndarray, w, s: np.ndarray) -> np.ndarray:
    """Transmit signal ``x = G s`` evaluated right to left on ``s``.

    ``s`` has shape (..., K) or (..., K, N).
    """
    H = np.asarray(H_hat)
    w = _coeffs(w)
    s = np.asarray(s)
    vec = s.ndim == H.ndim - 1
    if vec:
        s = s[..., None]
    u = H @ s
    x = w[..., -1, None, None] * u
    for n in range(w.shape[-1] - 2, -1, -1):
        x = _apply_gram(H, x) + w[..., n, None, None] * u
    x = x / np.sqrt(H.shape[-1])
    return x[..., 0] if vec else x


def taylor_initial_coeffs(J: int, beta: float, phi: float, kappa: float) -> TpeCoefficients:
    """Coefficients of the truncated Neumann series of ``beta (V + phi I)^{-1}``.

    ``w_n = beta kappa sum_{m=n}^{J-1} C(m, n) (1 - kappa phi)^(m-n) (-kappa)^n``
    """
    if J < 1:
        raise ValueError("J must be >= 1")
    w = np.zeros(J)
    q = 1.0 - kappa * phi
    for n in range(J):
        m = np.arange(n, J)
        w[n] = np.sum(comb(m, n) * q ** (m - n)) * (-kappa) ** n
    return TpeCoefficients(beta * kappa * w)


def spectral_radius_estimate(H_hat: np.ndarray, n_iter: int = 20) -> float:
    """Largest eigenvalue of H H^H / K by power iteration on the K x K Gram."""
    H = np.asarray(H_hat)
    K = H.shape[-1]
    gram = H.conj().T @ H / K
    v = np.ones(K, dtype=gram.dtype) / np.sqrt(K)
    lam = 0.0
    for _ in range(n_iter):
        u = gram @ v
        lam = float(np.real(np.vdot(v, u)))
        nrm = np.linalg.norm(u)
        if nrm == 0:
            return 0.0
        v = u / nrm
    return max(lam, float(np.real(np.vdot(v, gram @ v))))


def kappa_from_estimate(H_hat: np.ndarray, phi: float, n_iter: int = 20) -> float:
    """Step size for the Neumann series: ``2 / (lambda_max + 2 phi)``.

    All eigenvalues of ``kappa (V + phi I)`` then lie in (0, 2), so the series
    contracts.
    """
    lam = spectral_radius_estimate(H_hat, n_iter)
    return 2.0 / (lam + 2.0 * phi)


def normalize_tpe_power(w, C_bar: np.ndarray, P: float) -> TpeCoefficients:
    """Rescale so that ``w^T C_bar w = P``."""
    w = _coeffs(w)
    q = float(w @ np.asarray(C_bar) @ w)
    if not q > 0:
        raise ValueError(f"w^T C_bar w = {q:.3e} is not positive")
    return TpeCoefficients(w * np.sqrt(P / q))
