"""
Rayleigh block fading, pilot contamination and MMSE channel estimation.

Channel arrays follow the index order (source cell l, cell j, user m): the
vector ``h[..., l, j, m, :]`` is the channel from BS ``l`` to user ``m`` of
cell ``j``. Any number of leading axes can be used to batch trials.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .scenario import CovarianceSet, MatrixBank

log = logging.getLogger(__name__)


def psd_sqrt(R: np.ndarray, rtol: float = 1e-10) -> np.ndarray:
    """Hermitian square root with eigenvalues clipped at zero.

    Raises ``np.linalg.LinAlgError`` if an eigenvalue is more negative than
    ``-rtol * ||R||``, which means the input is not a covariance.
    """
    lam, U = np.linalg.eigh(R)
    top = max(float(np.abs(lam).max(initial=0.0)), np.finfo(float).tiny)
    if lam.min(initial=0.0) < -rtol * top:
        raise np.linalg.LinAlgError(
            f"matrix is indefinite: min eigenvalue {lam.min():.3e} vs norm {top:.3e}")
    return (U * np.sqrt(np.clip(lam, 0.0, None))) @ U.conj().T


def crandn(rng: np.random.Generator, shape) -> np.ndarray:
    """Standard circularly-symmetric complex Gaussian samples."""
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


@dataclass
class ChannelDraw:
    h: np.ndarray            # (..., L, L, K, M)
    trial_index: int = 0


@dataclass(frozen=True)
class EstimationModel:
    """Second-order statistics of the MMSE estimator.

    ``S[j, k]``, ``A[j, k] = R_{j,j,k} S_{j,k}`` and ``Phi[j, l, k]`` are
    banks over the distinct matrices.
    """

    S: MatrixBank
    A: MatrixBank
    Phi: MatrixBank
    rho_tr: float

    def Phi_full(self) -> np.ndarray:
        return self.Phi.full()


@dataclass
class EstimateSet:
    h_hat: np.ndarray        # (..., L, K, M): estimate of h_{j,j,k}
    y_tr: np.ndarray | None = None

    @property
    def H_hat(self) -> np.ndarray:
        """Per-cell estimate matrices, shape (..., L, M, K)."""
        return np.swapaxes(self.h_hat, -1, -2)


def covariance_roots(covs: CovarianceSet) -> np.ndarray:
    """Hermitian square roots of the distinct covariances, cached on ``covs``."""
    roots = covs.__dict__.get("_roots")
    if roots is None:
        roots = np.stack([psd_sqrt(R) for R in covs.bank.mats])
        covs.__dict__["_roots"] = roots
    return roots


def sample_channels(covs: CovarianceSet, rng: np.random.Generator, n_trials: int | None = None,
                    trial_index: int = 0) -> ChannelDraw:
    """Draw ``h = R^{1/2} z`` for all (l, j, m); batched if ``n_trials`` is given."""
    roots = covariance_roots(covs)
    L1, L2, K = covs.shape
    lead = () if n_trials is None else (n_trials,)
    z = crandn(rng, lead + (L1, L2, K, covs.M))
    h = np.empty_like(z)
    index = covs.bank.index
    for u in range(roots.shape[0]):
        sel = index == u
        if not sel.any():
            continue
        h[..., sel, :] = z[..., sel, :] @ roots[u].T
    return ChannelDraw(h, trial_index)


def _stable_inv(X: np.ndarray, what: str) -> np.ndarray:
    cond = np.linalg.cond(X)
    if cond > 1e12:
        log.warning("%s is ill conditioned (cond=%.2e)", what, cond)
    return np.linalg.inv(X)


def compute_estimation_model(covs: CovarianceSet, rho_tr: float) -> EstimationModel:
    """S_{j,k} = (I/rho_tr + sum_l R_{j,l,k})^{-1} and Phi_{j,l,k} = R_{j,j,k} S_{j,k} R_{j,l,k}."""
    if rho_tr <= 0:
        raise ValueError("rho_tr must be positive")
    L, L2, K = covs.shape
    if L != L2:
        raise ValueError("covariance table must be square in the cell axes")
    M = covs.M
    index = covs.bank.index
    eye = np.eye(M)

    s_keys, s_mats, a_mats = {}, [], []
    s_index = np.empty((L, K), dtype=int)
    phi_keys, phi_mats = {}, []
    phi_index = np.empty((L, L, K), dtype=int)
    for j in range(L):
        for k in range(K):
            key = (j,) + tuple(index[j, :, k])
            if key not in s_keys:
                total = eye / rho_tr + covs.bank.mats[index[j, :, k]].sum(axis=0)
                S = _stable_inv(total, "pilot observation covariance")
                S = 0.5 * (S + S.conj().T)
                s_keys[key] = len(s_mats)
                s_mats.append(S)
                a_mats.append(covs.bank.mats[index[j, j, k]] @ S)
            s_idx = s_keys[key]
            s_index[j, k] = s_idx
            for l in range(L):
                pkey = (s_idx, index[j, l, k])
                if pkey not in phi_keys:
                    Phi = a_mats[s_idx] @ covs.bank.mats[index[j, l, k]]
                    if l == j:
                        Phi = 0.5 * (Phi + Phi.conj().T)
                    phi_keys[pkey] = len(phi_mats)
                    phi_mats.append(Phi)
                phi_index[j, l, k] = phi_keys[pkey]

    return EstimationModel(
        S=MatrixBank(np.stack(s_mats), s_index),
        A=MatrixBank(np.stack(a_mats), s_index),
        Phi=MatrixBank(np.stack(phi_mats), phi_index),
        rho_tr=float(rho_tr),
    )


def mmse_estimate(draw: ChannelDraw, model: EstimationModel, rho_tr: float | None = None,
                  rng: np.random.Generator | None = None, noise: np.ndarray | None = None) -> EstimateSet:
    """Form the processed pilot signal and its MMSE estimate.

    ``y_{j,k} = sum_l h_{j,l,k} + b_{j,k}/sqrt(rho_tr)`` with fresh noise from
    ``rng`` (or the explicit ``noise`` array, which may be zero), then
    ``h_hat_{j,k} = R_{j,j,k} S_{j,k} y_{j,k}``.
    """
    rho_tr = model.rho_tr if rho_tr is None else rho_tr
    h = draw.h
    # h[..., j, l, k, :] summed over the user-cell axis l
    y = h.sum(axis=-3)
    if noise is None:
        if rng is None:
            raise ValueError("need an rng or an explicit noise array")
        noise = crandn(rng, y.shape)
    y = y + noise / np.sqrt(rho_tr)

    h_hat = np.empty_like(y)
    index = model.A.index
    for u in range(model.A.n_unique):
        sel = index == u
        if sel.any():
            h_hat[..., sel, :] = y[..., sel, :] @ model.A.mats[u].T
    return EstimateSet(h_hat, y)


def export_phi(model: EstimationModel, path) -> None:
    np.savez_compressed(path, Phi=model.Phi.mats, Phi_index=model.Phi.index,
                        S=model.S.mats, S_index=model.S.index)
