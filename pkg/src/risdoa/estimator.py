"""Two-step sparse DoA estimation: back-projection, then Joint-2D-OMP.

The observation is first pulled back to the N x M RIS domain with the
pseudoinverse of the measurement operator. Joint-2D-OMP then greedily picks
(elevation, azimuth) grid cells, each carrying four rank-one atoms

    a_e a_a^T  (P1),  a_e b_a^T  (P2),  b_e a_a^T  (P3),  b_e b_a^T  (P4)

so that P2 / P1 and P3 / P1 at a selected cell give the per-radian off-grid
offsets of azimuth and elevation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import DEG, AngleGrid, Dictionary
from .scene import Observation


class EstimationError(RuntimeError):
    pass


@dataclass(frozen=True)
class BackProjection:
    matrix: np.ndarray
    residual_norm: float
    rank_flag: bool
    rank: int


@dataclass(frozen=True)
class SparseSolution:
    support: list
    p1: np.ndarray
    p2: np.ndarray
    p3: np.ndarray
    p4: np.ndarray
    residual_history: list = field(default_factory=list)


@dataclass(frozen=True)
class TargetEstimate:
    azimuth_grid: float
    elevation_grid: float
    azimuth_offset: float
    elevation_offset: float
    amplitude: complex
    flagged: bool = False

    @property
    def azimuth(self):
        return self.azimuth_grid + self.azimuth_offset

    @property
    def elevation(self):
        return self.elevation_grid + self.elevation_offset

    def to_record(self):
        return {
            "theta_grid": self.azimuth_grid,
            "phi_grid": self.elevation_grid,
            "delta_theta": self.azimuth_offset,
            "delta_phi": self.elevation_offset,
            "amplitude_re": float(np.real(self.amplitude)),
            "amplitude_im": float(np.imag(self.amplitude)),
            "flagged": self.flagged,
        }

    @classmethod
    def from_record(cls, record):
        return cls(
            float(record["theta_grid"]),
            float(record["phi_grid"]),
            float(record["delta_theta"]),
            float(record["delta_phi"]),
            complex(record["amplitude_re"], record["amplitude_im"]),
            bool(record.get("flagged", False)),
        )


@dataclass(frozen=True)
class DoaEstimate:
    targets: tuple = ()
    # max |p4 - d_theta d_phi p1| / |p1| over the support, in per-radian units
    cross_term_mismatch: float = 0.0

    def __len__(self):
        return len(self.targets)

    def angles(self) -> np.ndarray:
        """K x 2 array of (azimuth, elevation) in degrees."""
        return np.array([(t.azimuth, t.elevation) for t in self.targets]).reshape(-1, 2)

    def amplitudes(self) -> np.ndarray:
        return np.array([t.amplitude for t in self.targets], dtype=complex)

    def to_records(self):
        return [t.to_record() for t in self.targets]

    @classmethod
    def from_records(cls, records):
        return cls(tuple(TargetEstimate.from_record(r) for r in records))


def vec(matrix: np.ndarray) -> np.ndarray:
    """Column-major vectorization, matching the elevation-fastest flat index."""
    return matrix.reshape(-1, order="F")


def unvec(vector: np.ndarray, rows: int, cols: int) -> np.ndarray:
    return vector.reshape(rows, cols, order="F")


def backproject(z: np.ndarray, y: np.ndarray, shape: tuple, rcond: float = 1e-10) -> BackProjection:
    """Minimum-norm least-squares solution of z x = y, reshaped to ``shape`` (N, M).

    Singular values below ``rcond`` times the largest are truncated; that
    (or a wide operator) sets ``rank_flag``.
    """
    z = np.asarray(z)
    y = np.asarray(y)
    n, m = shape
    if z.ndim != 2 or y.ndim != 1 or z.shape[0] != y.shape[0] or z.shape[1] != n * m:
        raise ValueError(f"operator {z.shape} incompatible with y {y.shape} and shape {shape}")
    u, s, vh = np.linalg.svd(z, full_matrices=False)
    cutoff = rcond * s[0] if s.size and s[0] > 0 else np.inf
    keep = s > cutoff
    rank = int(np.count_nonzero(keep))
    x = vh[keep].conj().T @ ((u[:, keep].conj().T @ y) / s[keep])
    residual = float(np.linalg.norm(y - z @ x))
    return BackProjection(unvec(x, n, m), residual, rank < n * m, rank)


def _unit_columns(atoms):
    """Columns scaled to unit norm; all-zero columns (flat derivatives at +-90 deg) stay zero."""
    norms = np.linalg.norm(atoms, axis=0)
    live = norms > 0
    return np.where(live, atoms / np.where(live, norms, 1.0), 0.0)


def _cell_atoms(dictionary, q, p):
    ae, be = dictionary.elevation_atoms[:, q], dictionary.elevation_derivs[:, q]
    aa, ba = dictionary.azimuth_atoms[:, p], dictionary.azimuth_derivs[:, p]
    return [vec(np.outer(ae, aa)), vec(np.outer(ae, ba)),
            vec(np.outer(be, aa)), vec(np.outer(be, ba))]


def joint_2d_omp(backprojection, dictionary: Dictionary, k_max: int,
                 residual_tol: float = 1e-12) -> SparseSolution:
    """Greedy joint recovery of P1..P4 on a shared (elevation, azimuth) support.

    Each iteration scores every cell by |C|^2 + |D|^2 + |E|^2 + |F|^2, the
    squared correlations of the residual with the four unit-normalized
    atoms, adds the best unused cell, and refits all coefficients of all
    selected cells by least squares against the back-projected matrix.
    """
    y = backprojection.matrix if isinstance(backprojection, BackProjection) else np.asarray(backprojection)
    n, m = y.shape
    if dictionary.elevation_atoms.shape[0] != n or dictionary.azimuth_atoms.shape[0] != m:
        raise ValueError("dictionary dimensions do not match the back-projected matrix")
    q_count = dictionary.elevation_atoms.shape[1]
    p_count = dictionary.azimuth_atoms.shape[1]
    if k_max < 0 or k_max > p_count * q_count:
        raise ValueError(f"k_max={k_max} outside [0, P*Q={p_count * q_count}]")
    if not np.all(np.isfinite(y)):
        raise ValueError("non-finite entries in back-projected matrix")

    ue1, ue2 = _unit_columns(dictionary.elevation_atoms), _unit_columns(dictionary.elevation_derivs)
    ua1, ua2 = _unit_columns(dictionary.azimuth_atoms), _unit_columns(dictionary.azimuth_derivs)

    y_vec = vec(y)
    y_norm = float(np.linalg.norm(y_vec))
    support, columns, history = [], [], []
    coeffs = np.zeros(0, dtype=complex)
    residual = y.copy()
    res_norm = y_norm
    taken = np.zeros((q_count, p_count), dtype=bool)

    while len(support) < k_max and res_norm > residual_tol * y_norm:
        left1, left2 = ue1.conj().T @ residual, ue2.conj().T @ residual
        score = (np.abs(left1 @ ua1.conj()) ** 2 + np.abs(left1 @ ua2.conj()) ** 2
                 + np.abs(left2 @ ua1.conj()) ** 2 + np.abs(left2 @ ua2.conj()) ** 2)
        score[taken] = -np.inf
        q, p = np.unravel_index(int(np.argmax(score)), score.shape)
        taken[q, p] = True
        support.append((int(q), int(p)))
        columns.extend(_cell_atoms(dictionary, q, p))
        design = np.stack(columns, axis=1)
        coeffs = np.linalg.lstsq(design, y_vec, rcond=None)[0]
        residual = y - unvec(design @ coeffs, n, m)
        res_norm = float(np.linalg.norm(residual))
        history.append(res_norm)

    blocks = coeffs.reshape(-1, 4)
    return SparseSolution(support, blocks[:, 0].copy(), blocks[:, 1].copy(),
                          blocks[:, 2].copy(), blocks[:, 3].copy(), history)


def recover_offgrid(solution: SparseSolution, azimuth_grid: AngleGrid,
                    elevation_grid: AngleGrid, floor: float = 1e-6) -> DoaEstimate:
    """Read grid angles from the support and offsets from P2/P1, P3/P1."""
    if not solution.support:
        return DoaEstimate()
    p1 = solution.p1
    eps = floor * np.max(np.abs(p1))
    targets, mismatch = [], 0.0
    for (q, p), a1, a2, a3, a4 in zip(solution.support, p1, solution.p2, solution.p3, solution.p4):
        if abs(a1) <= eps:
            targets.append(TargetEstimate(float(azimuth_grid.points[p]),
                                          float(elevation_grid.points[q]), 0.0, 0.0, a1, True))
            continue
        d_theta = (a2 / a1).real
        d_phi = (a3 / a1).real
        mismatch = max(mismatch, abs(a4 - d_theta * d_phi * a1) / abs(a1))
        half_az, half_el = azimuth_grid.step / 2, elevation_grid.step / 2
        targets.append(TargetEstimate(
            float(azimuth_grid.points[p]),
            float(elevation_grid.points[q]),
            float(np.clip(d_theta / DEG, -half_az, half_az)),
            float(np.clip(d_phi / DEG, -half_el, half_el)),
            complex(a1),
        ))
    return DoaEstimate(tuple(targets), float(mismatch))


def estimate(observation: Observation, dictionary: Dictionary, k: int,
             residual_tol: float = 1e-12, rcond: float = 1e-10) -> DoaEstimate:
    shape = (dictionary.elevation_atoms.shape[0], dictionary.azimuth_atoms.shape[0])
    bp = backproject(observation.operator, observation.stacked, shape, rcond)
    solution = joint_2d_omp(bp, dictionary, k, residual_tol)
    return recover_offgrid(solution, dictionary.azimuth_grid, dictionary.elevation_grid)

