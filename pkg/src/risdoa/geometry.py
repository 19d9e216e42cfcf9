"""Uniform planar array geometry, steering vectors and grid dictionaries.

Public angles are in degrees. Steering-vector derivatives (and everything
built on them: dictionary derivative atoms, off-grid offsets, the Fisher
information) are per radian; :data:`DEG` is the one conversion factor.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEG = np.pi / 180.0

ELEVATION_FASTEST = "elevation_fastest"


class AngleDomainError(ValueError):
    """Raised for an azimuth/elevation pair with cos^2(el) < sin^2(az)."""


@dataclass(frozen=True)
class ArrayGeometry:
    m_count: int
    n_count: int
    spacing: float
    wavelength: float
    ordering: str = ELEVATION_FASTEST

    def __post_init__(self):
        if self.m_count < 1 or self.n_count < 1:
            raise ValueError("array dimensions must be positive")
        if self.spacing <= 0 or self.wavelength <= 0:
            raise ValueError("spacing and wavelength must be positive")
        if self.ordering != ELEVATION_FASTEST:
            raise ValueError(f"unsupported element ordering {self.ordering!r}")

    @classmethod
    def half_wavelength(cls, m_count, n_count, wavelength=0.1):
        return cls(m_count, n_count, wavelength / 2.0, wavelength)

    @property
    def size(self) -> int:
        return self.m_count * self.n_count

    @property
    def wavenumber(self) -> float:
        return 2.0 * np.pi / self.wavelength

    def flat_index(self, m: int, n: int) -> int:
        """Flat index of 1-based element (m, n); elevation varies fastest."""
        return (m - 1) * self.n_count + (n - 1)


@dataclass(frozen=True)
class AnglePair:
    azimuth: float
    elevation: float

    def __post_init__(self):
        if not (-90.0 <= self.azimuth <= 90.0 and -90.0 <= self.elevation <= 90.0):
            raise ValueError(f"angles out of [-90, 90]: {self}")
        if _direction_radicand(self.azimuth, self.elevation) < 0:
            raise AngleDomainError(
                f"cos^2(elevation) < sin^2(azimuth) for {self}; direction undefined"
            )

    def as_tuple(self):
        return (self.azimuth, self.elevation)


def _direction_radicand(azimuth, elevation):
    value = np.cos(elevation * DEG) ** 2 - np.sin(azimuth * DEG) ** 2
    # cos^2(0) - sin^2(90) evaluates to ~-1e-17; boundary pairs are valid.
    return 0.0 if abs(value) < 1e-12 else value


@dataclass(frozen=True)
class AngleGrid:
    low: float = -90.0
    high: float = 90.0
    step: float = 3.0
    points: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.step <= 0 or self.high < self.low:
            raise ValueError("grid needs step > 0 and high >= low")
        span = (self.high - self.low) / self.step
        count = int(round(span))
        if abs(span - count) > 1e-9:
            raise ValueError("grid span is not an integer number of steps")
        points = self.low + self.step * np.arange(count + 1)
        points.setflags(write=False)
        object.__setattr__(self, "points", points)

    def __len__(self):
        return len(self.points)

    def index_of(self, angle: float) -> int:
        idx, offset = nearest_grid_decompose(angle, self)
        if offset != 0:
            raise ValueError(f"{angle} is not a grid point")
        return idx


@dataclass(frozen=True)
class Dictionary:
    """Separable on-grid dictionary: azimuth atoms are M x P, elevation N x Q."""

    azimuth_atoms: np.ndarray
    elevation_atoms: np.ndarray
    azimuth_derivs: np.ndarray
    elevation_derivs: np.ndarray
    azimuth_grid: AngleGrid
    elevation_grid: AngleGrid

    @property
    def flat_derivative_columns(self):
        """Grid angles whose derivative atom vanishes (cos = 0 at +-90 deg)."""
        return (
            self.azimuth_grid.points[~np.any(self.azimuth_derivs, axis=0)],
            self.elevation_grid.points[~np.any(self.elevation_derivs, axis=0)],
        )


def direction_vector(angle: AnglePair) -> np.ndarray:
    theta, phi = angle.azimuth * DEG, angle.elevation * DEG
    radicand = _direction_radicand(angle.azimuth, angle.elevation)
    if radicand < 0:
        raise AngleDomainError(f"direction undefined for {angle}")
    return np.array([np.sqrt(radicand), np.sin(theta), np.sin(phi)])


def _phase_progression(count, geometry):
    return geometry.wavenumber * geometry.spacing * np.arange(count)


def _steering(count, angle_deg, geometry):
    angle = np.asarray(angle_deg, dtype=float)
    if np.any(np.abs(angle) > 90.0):
        raise ValueError("steering angle outside [-90, 90] degrees")
    psi = np.multiply.outer(_phase_progression(count, geometry), np.sin(angle * DEG))
    return np.exp(-1j * psi)


def azimuth_steering(theta, geometry: ArrayGeometry) -> np.ndarray:
    """exp(-j (2 pi / lambda)(m - 1) d sin(theta)) for m = 1..M.

    A 1-D array of angles returns an M x len(theta) matrix of columns.
    """
    return _steering(geometry.m_count, theta, geometry)


def elevation_steering(phi, geometry: ArrayGeometry) -> np.ndarray:
    return _steering(geometry.n_count, phi, geometry)


def steering_derivative(angle, axis: str, geometry: ArrayGeometry, per: str = "radian"):
    """Analytic derivative of the 1-D steering vector with respect to the angle.

    ``per="degree"`` rescales by pi/180. Vectorized over ``angle`` like the
    steering functions.
    """
    if axis == "azimuth":
        count = geometry.m_count
    elif axis == "elevation":
        count = geometry.n_count
    else:
        raise ValueError(f"unknown axis {axis!r}")
    if per not in ("radian", "degree"):
        raise ValueError(f"unknown derivative unit {per!r}")
    angle = np.asarray(angle, dtype=float)
    base = _steering(count, angle, geometry)
    scale = np.multiply.outer(_phase_progression(count, geometry), np.cos(angle * DEG))
    # cos(90 deg) is 6e-17, not 0; snap so the endpoint columns are exactly flat.
    scale[..., np.isclose(np.abs(angle), 90.0, rtol=0, atol=1e-12)] = 0.0
    deriv = -1j * scale * base
    return deriv * DEG if per == "degree" else deriv


def build_dictionary(az_grid: AngleGrid, el_grid: AngleGrid, geometry: ArrayGeometry):
    return Dictionary(
        azimuth_atoms=azimuth_steering(az_grid.points, geometry),
        elevation_atoms=elevation_steering(el_grid.points, geometry),
        azimuth_derivs=steering_derivative(az_grid.points, "azimuth", geometry),
        elevation_derivs=steering_derivative(el_grid.points, "elevation", geometry),
        azimuth_grid=az_grid,
        elevation_grid=el_grid,
    )


def upa_steering(angle: AnglePair, geometry: ArrayGeometry) -> np.ndarray:
    return np.kron(
        azimuth_steering(angle.azimuth, geometry),
        elevation_steering(angle.elevation, geometry),
    )


def khatri_rao(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """Column-wise Kronecker product; column k is left[:, k] (x) right[:, k]."""
    if left.shape[1] != right.shape[1]:
        raise ValueError("Khatri-Rao factors need equal column counts")
    return np.einsum("ik,jk->ijk", left, right).reshape(-1, left.shape[1])


def nearest_grid_decompose(angle: float, grid: AngleGrid):
    """Split ``angle`` into (nearest grid index, offset in degrees).

    Midpoints resolve to the lower grid point.
    """
    if not grid.low <= angle <= grid.high:
        raise ValueError(f"angle {angle} outside grid [{grid.low}, {grid.high}]")
    # argmin returns the first minimum, i.e. the lower point on a tie
    idx = int(np.argmin(np.abs(angle - grid.points)))
    return idx, float(angle - grid.points[idx])
