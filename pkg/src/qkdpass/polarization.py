"""Polarization compensation on the Poincaré sphere.

Everything here works in Stokes space: wave plates are proper rotations
(90 degrees for a quarter-wave plate, 180 for a half-wave plate) about an
equatorial axis at twice the plate's fast-axis angle.  Global phase never
enters, which is all BB84 statistics care about.

Two compensations are implemented:

* `basis_rotation_hwp` - the receiver-side HWP that undoes the apparent
  basis drift caused by satellite-ground relative roll.  Seen through the
  receiving telescope the drift acts as a half-turn of the sphere about an
  equatorial axis (the image parity flips handedness), so a single HWP at
  half the drift angle inverts it exactly for every state.

* `solve_compensation` - the QWP/QWP/HWP solver that inverts an arbitrary
  unitary fiber transformation given the images of the R, H, D reference
  states: the first QWP brings the R image to the equator, the second
  brings the H image to the equator (forcing R to a pole), and the HWP
  returns H to its original position, which restores the whole triad.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Iterable, Sequence, Tuple

import numpy as np

QWP = "qwp"
HWP = "hwp"

STOKES_H = np.array([1.0, 0.0, 0.0])
STOKES_D = np.array([0.0, 1.0, 0.0])
STOKES_R = np.array([0.0, 0.0, 1.0])

_POLE_TOL = 1e-12


class PolarizationError(ValueError):
    """Raised when inputs violate the unitary-fiber model."""


@dataclass(frozen=True)
class WavePlateSetting:
    """A wave plate kind and its fast-axis angle, normalized to [0, pi)."""

    kind: str
    fast_axis_angle: float

    def __post_init__(self) -> None:
        if self.kind not in (QWP, HWP):
            raise ValueError(f"unknown wave plate kind {self.kind!r}")
        object.__setattr__(self, "fast_axis_angle", self.fast_axis_angle % math.pi)


def rotation_about(axis: np.ndarray, angle: float) -> np.ndarray:
    """Right-handed rotation matrix about a unit axis (Rodrigues form)."""
    ax = np.asarray(axis, dtype=float)
    ax = ax / np.linalg.norm(ax)
    k = np.array(
        [[0.0, -ax[2], ax[1]], [ax[2], 0.0, -ax[0]], [-ax[1], ax[0], 0.0]]
    )
    return np.eye(3) + math.sin(angle) * k + (1.0 - math.cos(angle)) * (k @ k)


def waveplate_rotation(setting: WavePlateSetting) -> np.ndarray:
    """Stokes-space rotation of a wave plate at its fast-axis angle."""
    axis = np.array(
        [math.cos(2.0 * setting.fast_axis_angle), math.sin(2.0 * setting.fast_axis_angle), 0.0]
    )
    angle = math.pi / 2.0 if setting.kind == QWP else math.pi
    return rotation_about(axis, angle)


def compose(*settings: WavePlateSetting) -> np.ndarray:
    """Composite rotation of wave plates applied in the listed order."""
    m = np.eye(3)
    for s in settings:
        m = waveplate_rotation(s) @ m
    return m


def apparent_roll(theta: float) -> np.ndarray:
    """Basis drift seen by the receiver for a relative roll of theta.

    The telescope image parity makes the drift a half-turn of the sphere
    about the equatorial axis at azimuth theta: H moves to the linear state
    at physical angle theta and handedness flips.
    """
    return rotation_about(np.array([math.cos(theta), math.sin(theta), 0.0]), math.pi)


def basis_rotation_hwp(theta: float) -> WavePlateSetting:
    """HWP setting that undoes `apparent_roll(theta)`.

    The plate angle is theta/2, reduced modulo pi/2 since a half-wave
    plate's rotation is invariant under a 90-degree plate rotation (theta
    and theta + pi are the same physical setting).
    """
    if not math.isfinite(theta):
        raise ValueError("theta must be finite")
    return WavePlateSetting(HWP, (theta / 2.0) % (math.pi / 2.0))


# --- QWP/QWP/HWP fiber compensation ----------------------------------------


def _orthonormal_triad(r_img, h_img, d_img, tol: float):
    r = np.asarray(r_img, dtype=float)
    h = np.asarray(h_img, dtype=float)
    d = np.asarray(d_img, dtype=float)
    for name, v in (("R", r), ("H", h), ("D", d)):
        if abs(np.linalg.norm(v) - 1.0) > tol:
            raise PolarizationError(f"{name} image is not a unit Stokes vector")
    if abs(r @ h) > tol or abs(r @ d) > tol or abs(h @ d) > tol:
        raise PolarizationError("image triad is not orthogonal")
    if np.linalg.norm(np.cross(r, h) - d) > 10.0 * tol:
        raise PolarizationError("image triad is not right-handed (fiber model violated)")
    # Gram-Schmidt repair of measurement noise inside the tolerance.
    r = r / np.linalg.norm(r)
    h = h - (h @ r) * r
    h = h / np.linalg.norm(h)
    return r, h, np.cross(r, h)


def _axis_to_plate_angle(axis: np.ndarray) -> float:
    return (math.atan2(axis[1], axis[0]) / 2.0) % math.pi


def solve_compensation(
    r_img, h_img, d_img, tol: float = 1e-6
) -> Tuple[WavePlateSetting, WavePlateSetting, WavePlateSetting]:
    """Wave-plate triple (qwp1, qwp2, hwp) mapping the image triad back to
    (R, H, D).

    The inputs must be the images of R, H, D under one proper rotation,
    orthonormal within `tol` (estimated triads are re-orthonormalized).
    Degenerate starts take a fixed tie-break: a polar R image uses QWP1 at
    plate angle 0, a polar intermediate H image uses the equatorial axis
    perpendicular to the R image.
    """
    r0, h0, _ = _orthonormal_triad(r_img, h_img, d_img, tol)

    # QWP1: 90-degree turn about the equatorial projection of the R image
    # lands it on the equator.
    rho = math.hypot(r0[0], r0[1])
    if rho > _POLE_TOL:
        axis1 = np.array([r0[0] / rho, r0[1] / rho, 0.0])
    else:
        axis1 = np.array([1.0, 0.0, 0.0])
    m1 = rotation_about(axis1, math.pi / 2.0)
    r1 = m1 @ r0
    h1 = m1 @ h0

    # QWP2: 90-degree turn about the equatorial projection of the H image
    # moves H to the equator and R (already equatorial, orthogonal to the
    # axis) to a pole; the axis sign is chosen so R lands on the south pole,
    # which the final HWP flips back to R.
    rho_h = math.hypot(h1[0], h1[1])
    if rho_h > _POLE_TOL:
        base_axis = np.array([h1[0] / rho_h, h1[1] / rho_h, 0.0])
    else:
        base_axis = np.cross(np.array([0.0, 0.0, 1.0]), r1)
        base_axis /= np.linalg.norm(base_axis)
    m2 = rotation_about(base_axis, math.pi / 2.0)
    if (m2 @ r1)[2] > 0.0:
        base_axis = -base_axis
        m2 = rotation_about(base_axis, math.pi / 2.0)
    r2 = m2 @ r1
    h2 = m2 @ h1

    # HWP: half turn about the bisector of the H image and H restores H and
    # lifts the south pole back to R.
    s = h2 + STOKES_H
    norm_s = np.linalg.norm(s)
    if norm_s > _POLE_TOL:
        axis3 = s / norm_s
    else:
        axis3 = np.array([0.0, 1.0, 0.0])
    axis3[2] = 0.0
    axis3 /= np.linalg.norm(axis3)

    settings = (
        WavePlateSetting(QWP, _axis_to_plate_angle(axis1)),
        WavePlateSetting(QWP, _axis_to_plate_angle(base_axis)),
        WavePlateSetting(HWP, _axis_to_plate_angle(axis3)),
    )
    m = compose(*settings)
    for image, target in ((r0, STOKES_R), (h0, STOKES_H)):
        if np.linalg.norm(m @ image - target) > 1e-9:
            raise PolarizationError("compensation solve failed to converge")
    return settings


def write_waveplate_csv(path, rows: Iterable[Tuple[float, WavePlateSetting, WavePlateSetting, WavePlateSetting]]) -> None:
    """Rows of (time_s, qwp1, qwp2, hwp) for the pass report."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["time_s", "qwp1_rad", "qwp2_rad", "hwp_rad"])
        for t, q1, q2, h in rows:
            writer.writerow(
                [f"{t:.6f}", f"{q1.fast_axis_angle:.12f}", f"{q2.fast_axis_angle:.12f}", f"{h.fast_axis_angle:.12f}"]
            )
