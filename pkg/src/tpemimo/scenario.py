"""
Three-sector multi-cell geometry and one-ring channel covariances.

All BSs of the site are co-located at the origin. Cell ``l`` has boresight
``90 + 120*l`` degrees and serves the 120 degree sector of the annulus centred
on its boresight. Users are split round-robin into ``G`` groups per cell and
all users of a group share one location, hence one covariance per source cell.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import yaml
from scipy.linalg import toeplitz


def _as_cell_vector(value, L: int, name: str) -> tuple:
    arr = np.atleast_1d(np.asarray(value, dtype=float))
    if arr.size == 1:
        arr = np.repeat(arr, L)
    if arr.size != L:
        raise ValueError(f"{name} must be a scalar or have one entry per cell (L={L})")
    return tuple(arr.tolist())


@dataclass(frozen=True)
class ScenarioConfig:
    """Physical and simulation parameters of one multi-cell deployment.

    Angles are in radians except ``theta_3db`` (degrees), powers and SNRs are
    linear. ``P``, ``J`` and ``phi`` accept a scalar (broadcast to all cells)
    or one value per cell.
    """

    L: int = 3
    K: int = 40
    M: int = 160
    G: int = 2
    r_inner: float = 35.0
    r_outer: float = 250.0
    delta_pl: float = 3.7
    d0: float = 30.0
    theta_3db: float = 70.0
    ant_spacing: float = 0.5
    ang_spread: float = float(np.deg2rad(10.0))
    rho_tr: float = float(10 ** 1.5)
    rho_dl: float = 10.0
    P: tuple = (1.0,)
    J: tuple = (5,)
    phi: tuple = (0.1,)
    seed: int = 0
    n_drops: int = 10
    n_trials: int = 500
    quad_nodes: int = 256

    def __post_init__(self):
        # frozen dataclass: normalise vectors through object.__setattr__
        for name in ("P", "phi"):
            object.__setattr__(self, name, _as_cell_vector(getattr(self, name), self.L, name))
        J = tuple(int(round(j)) for j in _as_cell_vector(self.J, self.L, "J"))
        object.__setattr__(self, "J", J)
        self.validate()

    def validate(self) -> None:
        if min(self.L, self.K, self.M, self.G) < 1:
            raise ValueError("L, K, M and G must all be >= 1")
        if self.K % self.G:
            raise ValueError(f"K={self.K} is not divisible by G={self.G}")
        if not 0 < self.r_inner < self.r_outer:
            raise ValueError("need 0 < r_inner < r_outer")
        if self.delta_pl <= 0 or self.d0 <= 0:
            raise ValueError("pathloss exponent and reference distance must be positive")
        if self.rho_tr <= 0 or self.rho_dl <= 0:
            raise ValueError("rho_tr and rho_dl must be positive")
        if self.ang_spread <= 0:
            raise ValueError("angular spread must be positive")
        if min(self.P) <= 0:
            raise ValueError("P must be positive in every cell")
        if min(self.J) < 1:
            raise ValueError("TPE order J must be >= 1 in every cell")
        if min(self.phi) <= 0:
            raise ValueError("regularization phi must be positive in every cell")
        if self.n_drops < 1 or self.n_trials < 2:
            raise ValueError("need n_drops >= 1 and n_trials >= 2")

    @property
    def sigma2(self) -> float:
        """Receiver noise variance for a unit reference transmit power."""
        return 1.0 / self.rho_dl

    def replace(self, **changes) -> "ScenarioConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v)
                for f in dataclasses.fields(self)}


# keys accepted in config files besides the field names themselves
_CONFIG_ALIASES = {
    "rho_tr_db": ("rho_tr", lambda v: 10 ** (v / 10)),
    "rho_dl_db": ("rho_dl", lambda v: 10 ** (v / 10)),
    "ang_spread_deg": ("ang_spread", np.deg2rad),
}


def load_config(path: str | Path, **overrides) -> ScenarioConfig:
    """Read a YAML (or JSON) mapping of ScenarioConfig fields.

    Besides the field names, ``rho_tr_db``, ``rho_dl_db`` and
    ``ang_spread_deg`` are accepted as convenience spellings.
    """
    text = Path(path).read_text()
    raw = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    raw = dict(raw or {})
    known = {f.name for f in dataclasses.fields(ScenarioConfig)}
    kwargs = {}
    for key, value in raw.items():
        if key in _CONFIG_ALIASES:
            name, conv = _CONFIG_ALIASES[key]
            kwargs[name] = float(conv(value))
        elif key in known:
            kwargs[key] = value
        else:
            raise ValueError(f"unknown config key {key!r}")
    kwargs.update(overrides)
    return ScenarioConfig(**kwargs)


@dataclass(frozen=True)
class MatrixBank:
    """A stack of distinct matrices addressed through an integer index table.

    ``bank[idx]`` returns ``mats[index[idx]]``. Users sharing a covariance
    therefore share storage and every downstream computation can run once
    per distinct matrix.
    """

    mats: np.ndarray
    index: np.ndarray

    def __getitem__(self, idx):
        return self.mats[self.index[idx]]

    @property
    def n_unique(self) -> int:
        return self.mats.shape[0]

    def full(self) -> np.ndarray:
        return self.mats[self.index]


@dataclass(frozen=True)
class Geometry:
    bs_position: np.ndarray      # (L, 2) metres
    boresight: np.ndarray        # (L,) radians
    group_position: np.ndarray   # (L, G, 2) metres
    user_group: np.ndarray       # (L, K) group index of every user
    d: np.ndarray                # (L, L, K) distance from BS l to user m of cell j
    theta: np.ndarray            # (L, L, G) azimuth of group g of cell j seen from BS l

    def group_distance(self) -> np.ndarray:
        """Distance per (source cell, cell, group), shape (L, L, G)."""
        L, G = self.group_position.shape[:2]
        diff = self.group_position[None, :, :, :] - self.bs_position[:, None, None, :]
        return np.hypot(diff[..., 0], diff[..., 1]).reshape(L, L, G)


@dataclass(frozen=True)
class CovarianceSet:
    """R_{l,j,m} for every (source cell l, cell j, user m), stored per group."""

    bank: MatrixBank
    M: int

    def R(self, l: int, j: int, m: int) -> np.ndarray:
        return self.bank[l, j, m]

    @property
    def shape(self) -> tuple:
        return self.bank.index.shape

    def full(self) -> np.ndarray:
        """Dense (L, L, K, M, M) array. Memory hungry for large M."""
        return self.bank.full()


def drop_rng(seed: int, drop: int, stream: int = 0) -> np.random.Generator:
    """Independent generator for (seed, drop, stream)."""
    return np.random.default_rng([int(seed), int(drop), int(stream)])


def _wrap_angle(x):
    return (np.asarray(x) + np.pi) % (2 * np.pi) - np.pi


def build_geometry(config: ScenarioConfig, rng: np.random.Generator) -> Geometry:
    L, K, G = config.L, config.K, config.G
    bs = np.zeros((L, 2))
    boresight = np.deg2rad(90.0 + 120.0 * np.arange(L)) % (2 * np.pi)

    # uniform over the sector of the annulus: r^2 uniform, azimuth uniform
    r2 = rng.uniform(config.r_inner ** 2, config.r_outer ** 2, size=(L, G))
    radius = np.sqrt(r2)
    az = boresight[:, None] + rng.uniform(-np.pi / 3, np.pi / 3, size=(L, G))
    groups = bs[:, None, :] + np.stack([radius * np.cos(az), radius * np.sin(az)], axis=-1)

    user_group = np.tile(np.arange(K) % G, (L, 1))

    diff = groups[None, :, :, :] - bs[:, None, None, :]          # (l, j, g, 2)
    dist_g = np.hypot(diff[..., 0], diff[..., 1])
    theta = _wrap_angle(np.arctan2(diff[..., 1], diff[..., 0]) - boresight[:, None, None])
    d = np.take_along_axis(dist_g, np.broadcast_to(user_group[None], (L, L, K)), axis=2)
    return Geometry(bs, boresight, groups, user_group, d, theta)


def antenna_gain_db(theta, theta_3db: float = 70.0):
    """Horizontal antenna pattern in dB, ``theta`` in radians off boresight."""
    deg = np.rad2deg(_wrap_angle(theta))
    return -np.minimum(12.0 * (deg / theta_3db) ** 2, 30.0)


def pathloss(d, d0: float = 30.0, delta_pl: float = 3.7):
    d = np.asarray(d, dtype=float)
    if np.any(d < 0):
        raise ValueError("distance must be non-negative")
    return 1.0 / (1.0 + (d / d0) ** delta_pl)


def one_ring_covariance(theta: float, spread: float, ant_spacing: float, M: int,
                        scale: float = 1.0, n_nodes: int = 256) -> np.ndarray:
    """Scaled one-ring covariance of a half-ring of scatterers.

    Entry (u, v) is ``scale/(2*spread)`` times the integral of
    ``exp(1j*2*pi*ant_spacing*(u-v)*sin(a))`` over ``a`` in
    ``[theta-spread, theta+spread]``, evaluated by Gauss-Legendre quadrature.
    The result is Toeplitz and exactly Hermitian.
    """
    if spread <= 0:
        raise ValueError("angular spread must be positive")
    if scale < 0:
        raise ValueError("scale must be non-negative")
    x, wq = np.polynomial.legendre.leggauss(n_nodes)
    alpha = theta + spread * x
    lags = np.arange(M)
    # (1/(2*spread)) * spread * sum(w f) = sum(w f) / 2
    col = 0.5 * np.exp(2j * np.pi * ant_spacing * np.outer(lags, np.sin(alpha))) @ wq
    col *= scale
    col[0] = scale
    return toeplitz(col, col.conj())


def covariance_scale(config: ScenarioConfig, theta, d):
    return 10 ** (antenna_gain_db(theta, config.theta_3db) / 10) * pathloss(d, config.d0, config.delta_pl)


def build_covariances(config: ScenarioConfig, geometry: Geometry) -> CovarianceSet:
    L, G, K, M = config.L, config.G, config.K, config.M
    dist = geometry.group_distance()
    mats = np.empty((L * L * G, M, M), dtype=complex)
    for l in range(L):
        for j in range(L):
            for g in range(G):
                scale = float(covariance_scale(config, geometry.theta[l, j, g], dist[l, j, g]))
                mats[(l * L + j) * G + g] = one_ring_covariance(
                    geometry.theta[l, j, g], config.ang_spread, config.ant_spacing, M,
                    scale, config.quad_nodes)
    lj = (np.arange(L)[:, None] * L + np.arange(L)[None, :]) * G      # (l, j)
    index = lj[:, :, None] + geometry.user_group[None, :, :]
    return CovarianceSet(MatrixBank(mats, index), M)


def export_geometry_csv(geometry: Geometry, path: str | Path) -> None:
    """One row per (source cell, cell, user) with distance and azimuth."""
    L, _, K = geometry.d.shape
    lines = ["l,j,m,group,d_m,theta_rad"]
    for l in range(L):
        for j in range(L):
            for m in range(K):
                g = int(geometry.user_group[j, m])
                lines.append(f"{l},{j},{m},{g},{geometry.d[l, j, m]:.12g},{geometry.theta[l, j, g]:.12g}")
    Path(path).write_text("\n".join(lines) + "\n")


def export_covariances(covs: CovarianceSet, path: str | Path) -> None:
    """Binary dump (``.npz``) of the distinct matrices and the index table."""
    np.savez_compressed(path, mats=covs.bank.mats, index=covs.bank.index)


def load_covariances(path: str | Path) -> CovarianceSet:
    with np.load(path) as data:
        mats, index = data["mats"], data["index"]
    return CovarianceSet(MatrixBank(mats, index), mats.shape[-1])
