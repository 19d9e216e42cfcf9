"""Fisher information and Cramer-Rao bound for the target angles.

The angles xi = [theta; phi] (radians internally) are the only unknowns; the
target amplitudes are treated as known. The mean of the stacked observation
is mu(xi) = Z (A_theta <> A_phi) s with <> the Khatri-Rao product.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    DEG,
    ArrayGeometry,
    azimuth_steering,
    elevation_steering,
    khatri_rao,
    steering_derivative,
)
from .scene import SensorArray

CONDITION_CAP = 1e12


class SingularFisherError(np.linalg.LinAlgError):
    def __init__(self, condition_number):
        super().__init__(f"Fisher information is singular or ill-conditioned (cond={condition_number:.3g})")
        self.condition_number = condition_number


@dataclass(frozen=True)
class FisherInformation:
    matrix: np.ndarray
    condition_number: float

    @property
    def target_count(self):
        return self.matrix.shape[0] // 2

    def _block(self, i, j):
        k = self.target_count
        return self.matrix[i * k:(i + 1) * k, j * k:(j + 1) * k]

    @property
    def theta_theta(self):
        return self._block(0, 0)

    @property
    def theta_phi(self):
        return self._block(0, 1)

    @property
    def phi_theta(self):
        return self._block(1, 0)

    @property
    def phi_phi(self):
        return self._block(1, 1)


def _angles(targets):
    arr = np.array([(t.azimuth, t.elevation) if hasattr(t, "azimuth") else tuple(t)
                    for t in targets], dtype=float).reshape(-1, 2)
    return arr[:, 0], arr[:, 1]


def derivative_factors(targets, geometry: ArrayGeometry):
    """(D1, D2) = (dA_theta <> A_phi, A_theta <> dA_phi), per radian."""
    theta, phi = _angles(targets)
    a_t = azimuth_steering(theta, geometry)
    a_p = elevation_steering(phi, geometry)
    d_t = steering_derivative(theta, "azimuth", geometry)
    d_p = steering_derivative(phi, "elevation", geometry)
    return khatri_rao(d_t, a_p), khatri_rao(a_t, d_p)


def fisher_information(z, targets, s, sigma2: float, geometry: ArrayGeometry,
                       rho: float = 1.0) -> FisherInformation:
    """F = (2 rho^2 / sigma2) Re [Lambda Upsilon]^H [Lambda Upsilon].

    ``rho`` is an extra gain on top of ``z``; leave it at 1 when ``z`` is the
    measurement operator with the path loss already folded in.
    """
    if sigma2 <= 0:
        raise ValueError("noise power must be positive")
    s = np.asarray(s, dtype=complex)
    d1, d2 = derivative_factors(targets, geometry)
    if d1.shape[1] != s.shape[0]:
        raise ValueError("one amplitude per target required")
    if z.shape[1] != d1.shape[0]:
        raise ValueError("operator width does not match the array size")
    jac = np.hstack([z @ d1 * s, z @ d2 * s])
    fim = (2.0 * rho ** 2 / sigma2) * (jac.conj().T @ jac).real
    fim = 0.5 * (fim + fim.T)
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = float(np.linalg.cond(fim)) if np.any(fim) else np.inf
    return FisherInformation(fim, cond)


def crlb_bounds(fim: FisherInformation, condition_cap: float = CONDITION_CAP) -> np.ndarray:
    """Diagonal of F^-1: per-parameter variance bounds in radians^2."""
    if not np.isfinite(fim.condition_number) or fim.condition_number > condition_cap:
        raise SingularFisherError(fim.condition_number)
    return np.diag(np.linalg.inv(fim.matrix)).copy()


def crlb(fim: FisherInformation, condition_cap: float = CONDITION_CAP) -> float:
    """tr(F^-1) in radians^2."""
    return float(np.sum(crlb_bounds(fim, condition_cap)))


def crlb_rms_deg(fim: FisherInformation, condition_cap: float = CONDITION_CAP) -> float:
    """Root of the mean per-angle bound, in degrees; comparable to an RMSE."""
    bounds = crlb_bounds(fim, condition_cap)
    return float(np.sqrt(np.mean(bounds)) / DEG)


@dataclass(frozen=True)
class CrlbSurrogate:
    """Block-diagonal quadratic form whose T diagonal blocks are all ``block``.

    With B the T-fold stack of D and Q = I_T (x) G, (B B^H)^+ is
    (1 1^T / T^2) (x) (D D^H)^+, so the Hadamard product with (Q^+)^T keeps
    only the diagonal blocks.
    """

    block: np.ndarray
    slots: int
    pseudo_rank_b: int
    pseudo_rank_q: int

    @property
    def matrix(self):
        return np.kron(np.eye(self.slots), self.block)


def _pinv_rank(matrix, rcond=1e-10):
    u, s, vh = np.linalg.svd(matrix)
    keep = s > rcond * s[0] if s.size and s[0] > 0 else np.zeros_like(s, dtype=bool)
    pinv = (vh[keep].conj().T / s[keep]) @ u[:, keep].conj().T
    return pinv, int(np.count_nonzero(keep))


def build_crlb_surrogate(targets, s, sensor_array: SensorArray, geometry: ArrayGeometry,
                         slots: int, sigma2: float = 1.0, rho: float = 1.0) -> CrlbSurrogate:
    """(4 rho^2 / sigma2) (B B^H)^+ (.) (Q^+)^T, stored as its repeated diagonal block.

    The amplitude outer product is taken as all ones, so ``s`` only fixes
    the target count.
    """
    d1, d2 = derivative_factors(targets, geometry)
    if len(np.atleast_1d(s)) != d1.shape[1]:
        raise ValueError("one amplitude per target required")
    d = np.hstack([d1, d2])
    gram_d, rank_d = _pinv_rank(d @ d.conj().T)
    weighted = sensor_array.weighted
    gram_q, rank_q = _pinv_rank(weighted.conj().T @ weighted)
    block = (4.0 * rho ** 2 / sigma2) * (gram_d / slots ** 2) * gram_q.T
    block = 0.5 * (block + block.conj().T)
    return CrlbSurrogate(block, slots, rank_d, rank_q * slots)
