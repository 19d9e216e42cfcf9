"""RIS phase-schedule design on the complex circle manifold.

Per-sensor received power through the RIS is a quadratic form w^H R_j w in
the phase vector w. The optimizers here move along the manifold of
unit-modulus vectors: Euclidean gradient, projection onto the tangent space
of each entry's circle, step, then elementwise renormalization, with Armijo
backtracking so every accepted step improves the objective.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .scene import BeamformingSchedule, SensorArray

ARMIJO_C = 1e-4
SHRINK = 0.5
MAX_BACKTRACKS = 40
HERMITIAN_TOL = 1e-10


def _check_hermitian(matrix, what="objective"):
    scale = max(np.max(np.abs(matrix)), 1e-300)
    if np.max(np.abs(matrix - matrix.conj().T)) > HERMITIAN_TOL * scale:
        raise ValueError(f"{what} matrix is not Hermitian")


def _largest_eigenvalue(matvec, size, iters=100):
    """Power-iteration estimate of the spectral radius of a Hermitian operator."""
    v = np.random.default_rng(12345).standard_normal(size) + 0j
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        u = matvec(v)
        norm = np.linalg.norm(u)
        if norm == 0:
            return 0.0
        new = float(np.vdot(v, u).real)
        v = u / norm
        if abs(new - lam) <= 1e-12 * abs(new):
            lam = new
            break
        lam = new
    # both ||R v|| and the Rayleigh quotient sit below the true radius; take the tighter
    return max(abs(lam), float(norm))


@dataclass(frozen=True)
class SensorObjective:
    matrix: np.ndarray

    def __post_init__(self):
        _check_hermitian(self.matrix)

    def value(self, w):
        return float(np.vdot(w, self.matrix @ w).real)

    def matvec(self, w):
        return self.matrix @ w

    @cached_property
    def spectral_bound(self):
        return _largest_eigenvalue(self.matvec, self.matrix.shape[0])


@dataclass
class AscentReport:
    iterates: list
    final_point: np.ndarray
    step_counts: list = field(default_factory=list)
    gradient_norms: list = field(default_factory=list)


def retract(w):
    return w / np.abs(w)


def tangent_projection(w, g):
    """Project an ambient vector onto the tangent space of the complex circle at w."""
    return g - (g * w.conj()).real * w


def riemannian_gradient(matvec, w):
    g = 2.0 * matvec(w)
    return tangent_projection(w, g), g


def _manifold_search(matvec, start, max_iters, tol, spectral_bound, maximize=True):
    sign = 1.0 if maximize else -1.0
    w = np.asarray(start, dtype=complex).copy()
    if np.max(np.abs(np.abs(w) - 1.0)) > 1e-10:
        raise ValueError("start point is not unit modulus")

    def value(x):
        return float(np.vdot(x, matvec(x)).real)

    f = value(w)
    report = AscentReport([f], w)
    if spectral_bound <= 0:
        return report
    step0 = 1.0 / (2.0 * spectral_bound)
    for _ in range(max_iters):
        rgrad, egrad = riemannian_gradient(matvec, w)
        rnorm, enorm = np.linalg.norm(rgrad), np.linalg.norm(egrad)
        report.gradient_norms.append(float(rnorm))
        if enorm == 0 or rnorm <= tol * enorm:
            break
        step = step0
        for backtracks in range(MAX_BACKTRACKS):
            candidate = retract(w + sign * step * rgrad)
            fc = value(candidate)
            if sign * (fc - f) >= ARMIJO_C * step * rnorm ** 2:
                break
            step *= SHRINK
        else:
            break
        w, f = candidate, fc
        report.iterates.append(f)
        report.step_counts.append(backtracks)
    report.final_point = w
    return report


def build_sensor_objective(j: int, sensor_array: SensorArray, source_column: np.ndarray) -> SensorObjective:
    """R_j = B_j (.) C^T with B_j = a_j^H a_j (a_j row j of Xi A_R) and C = c c^H."""
    if not 0 <= j < sensor_array.steering.shape[0]:
        raise IndexError(f"sensor index {j} out of range")
    row = sensor_array.weighted[j]
    b = np.outer(row.conj(), row)
    c = np.outer(source_column, source_column.conj())
    return SensorObjective(b * c.T)


def riemannian_ascent(objective: SensorObjective, start, max_iters: int = 10,
                      tol: float = 1e-8) -> AscentReport:
    """Maximize w^H R w over unit-modulus w.

    ``tol`` is relative: stop once the Riemannian gradient norm drops below
    ``tol`` times the Euclidean gradient norm.
    """
    return _manifold_search(objective.matvec, start, max_iters, tol, objective.spectral_bound)


def bcgd_schedule(objectives, slots: int, init, inner_iters: int = 10, tol: float = 1e-8,
                  perturbation: float = 0.0, rng=None) -> BeamformingSchedule:
    """Block-coordinate sweep over per-sensor objectives, one sweep per slot.

    Each slot runs a short ascent on every sensor's objective in turn, warm
    started from the running point; the point after the sweep is that slot's
    phase vector and seeds the next slot. ``perturbation`` (radians, std) adds
    independent Gaussian phase jitter to the running point before each slot.
    """
    if not objectives:
        raise ValueError("need at least one objective")
    if perturbation > 0 and rng is None:
        raise ValueError("phase perturbation needs an rng")
    w = np.asarray(init, dtype=complex)
    out = []
    for _ in range(slots):
        if perturbation > 0:
            w = w * np.exp(1j * perturbation * rng.standard_normal(w.shape))
        for objective in objectives:
            w = riemannian_ascent(objective, w, inner_iters, tol).final_point
        out.append(w)
    return BeamformingSchedule(np.stack(out))


def summed_objective(objectives) -> SensorObjective:
    return SensorObjective(sum(o.matrix for o in objectives))


def random_phases(size, rng):
    return np.exp(2j * np.pi * rng.random(size))


def random_schedule(slots: int, size: int, rng) -> BeamformingSchedule:
    """Independent uniform phases for every element and slot."""
    return BeamformingSchedule(random_phases((slots, size), rng))


def crlb_min_schedule(surrogate, slots: int, inner_iters: int = 100, rng=None,
                      start=None, tol: float = 1e-8):
    """Descend the quadratic CRLB surrogate over the stacked phase vector.

    ``surrogate`` is either a dense Hermitian (T*MN) x (T*MN) matrix or an
    object with a per-slot ``block`` (the surrogate is block diagonal with
    identical blocks). Returns the schedule and the descent report.
    """
    if isinstance(surrogate, np.ndarray):
        _check_hermitian(surrogate, "surrogate")
        size = surrogate.shape[0]
        if size % slots:
            raise ValueError("surrogate size is not a multiple of the slot count")

        def matvec(x):
            return surrogate @ x
    else:
        block = surrogate.block
        _check_hermitian(block, "surrogate")
        size = block.shape[0] * slots

        def matvec(x):
            return (x.reshape(slots, -1) @ block.T).reshape(-1)

    if start is None:
        if rng is None:
            raise ValueError("need an rng or a start point")
        start = random_phases(size, rng)
    bound = _largest_eigenvalue(matvec, size)
    report = _manifold_search(matvec, start, inner_iters, tol, bound, maximize=False)
    return BeamformingSchedule(report.final_point.reshape(slots, -1)), report
