"""
Forward geometric model: device poses to channel parameters.

Conventions
-----------
* Euler angles ``[o1, o2, o3]`` are rotations about X, Y and Z. The rotation
  matrix is ``Rz(o3) @ Ry(o2) @ Rx(o1)``; the default orientation faces +X.
* Angles are ``(azimuth, elevation)`` in the local frame of the observer,
  azimuth in (-pi, pi], elevation in [-pi/2, pi/2].
* Delays are in seconds. ``C_LIGHT`` is the exact SI value.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

C_LIGHT = 299_792_458.0

# distances below this are treated as coincident points
MIN_DISTANCE = 1e-9


class DegenerateGeometryError(ValueError):
    """Raised when two points coincide and angles/delays are undefined."""


def rotation_matrix(euler) -> np.ndarray:
    """Rotation matrix ``Rz(o3) Ry(o2) Rx(o1)`` for Euler angles ``[o1, o2, o3]``."""
    o1, o2, o3 = np.asarray(euler, dtype=float)
    c1, s1 = np.cos(o1), np.sin(o1)
    c2, s2 = np.cos(o2), np.sin(o2)
    c3, s3 = np.cos(o3), np.sin(o3)
    rx = np.array([[1.0, 0.0, 0.0], [0.0, c1, -s1], [0.0, s1, c1]])
    ry = np.array([[c2, 0.0, s2], [0.0, 1.0, 0.0], [-s2, 0.0, c2]])
    rz = np.array([[c3, -s3, 0.0], [s3, c3, 0.0], [0.0, 0.0, 1.0]])
    return rz @ ry @ rx


def rotation_matrix_dz(euler) -> np.ndarray:
    """Derivative of :func:`rotation_matrix` with respect to ``o3``."""
    o1, o2, o3 = np.asarray(euler, dtype=float)
    c3, s3 = np.cos(o3), np.sin(o3)
    drz = np.array([[-s3, -c3, 0.0], [c3, -s3, 0.0], [0.0, 0.0, 0.0]])
    return drz @ rotation_matrix([o1, o2, 0.0])


class AnglePair(NamedTuple):
    az: float
    el: float


@dataclass(frozen=True)
class Pose:
    """Position (m) and Euler orientation (rad) of a device."""

    position: np.ndarray
    euler: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        object.__setattr__(self, "euler", np.asarray(self.euler, dtype=float))

    @property
    def rotation(self) -> np.ndarray:
        return rotation_matrix(self.euler)


def wrap_angle(x):
    """Wrap angles to (-pi, pi]."""
    y = np.mod(np.asarray(x, dtype=float) + np.pi, 2 * np.pi) - np.pi
    y = np.where(y == -np.pi, np.pi, y)
    return float(y) if np.ndim(y) == 0 else y


@dataclass(frozen=True)
class LocalizationState:
    """Unknowns of the joint problem: UE position, RIS position, RIS yaw, clock bias.

    ``clock_bias`` is in seconds. ``fixed_o1_o2`` holds the known RIS
    rotations about X and Y.
    """

    p_U: np.ndarray
    p_R: np.ndarray
    o3: float = 0.0
    clock_bias: float = 0.0
    fixed_o1_o2: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        object.__setattr__(self, "p_U", np.asarray(self.p_U, dtype=float))
        object.__setattr__(self, "p_R", np.asarray(self.p_R, dtype=float))
        object.__setattr__(self, "fixed_o1_o2", np.asarray(self.fixed_o1_o2, dtype=float))
        object.__setattr__(self, "o3", wrap_angle(self.o3))

    @property
    def ris_euler(self) -> np.ndarray:
        return np.array([self.fixed_o1_o2[0], self.fixed_o1_o2[1], self.o3])

    @property
    def ris_pose(self) -> Pose:
        return Pose(self.p_R, self.ris_euler)

    def to_vector(self) -> np.ndarray:
        """``[p_U, p_R, o3, c*clock_bias]`` with the clock bias in meters."""
        return np.concatenate([self.p_U, self.p_R, [self.o3, C_LIGHT * self.clock_bias]])

    @classmethod
    def from_vector(cls, xi, fixed_o1_o2=(0.0, 0.0)) -> "LocalizationState":
        xi = np.asarray(xi, dtype=float)
        return cls(xi[0:3], xi[3:6], xi[6], xi[7] / C_LIGHT, np.asarray(fixed_o1_o2))

    def replace(self, **changes) -> "LocalizationState":
        return replace(self, **changes)


@dataclass(frozen=True)
class ChannelParams:
    """The eight localization-related channel parameters (delays in seconds)."""

    theta_L: AnglePair
    theta_R: AnglePair
    tau_L: float
    tau_R: float
    vartheta2: float
    vartheta3: float

    NAMES = ("thetaL_az", "thetaL_el", "thetaR_az", "thetaR_el",
             "tauL", "tauR", "vartheta2", "vartheta3")

    def to_vector(self, delay_scale: float = 1.0) -> np.ndarray:
        """Parameter vector; delays multiplied by ``delay_scale`` (use C_LIGHT for meters)."""
        return np.array([
            self.theta_L.az, self.theta_L.el, self.theta_R.az, self.theta_R.el,
            self.tau_L * delay_scale, self.tau_R * delay_scale,
            self.vartheta2, self.vartheta3,
        ])

    @classmethod
    def from_vector(cls, v, delay_scale: float = 1.0) -> "ChannelParams":
        v = np.asarray(v, dtype=float)
        return cls(AnglePair(v[0], v[1]), AnglePair(v[2], v[3]),
                   v[4] / delay_scale, v[5] / delay_scale, v[6], v[7])


@dataclass(frozen=True)
class FullChannelParams:
    """Localization-related parameters plus the nuisance complex gains."""

    eta: ChannelParams
    alpha_L: complex
    alpha_R: complex

    def to_vector(self, delay_scale: float = 1.0) -> np.ndarray:
        return np.concatenate([
            self.eta.to_vector(delay_scale),
            [self.alpha_L.real, self.alpha_L.imag, self.alpha_R.real, self.alpha_R.imag],
        ])


def direction_vector(a) -> np.ndarray:
    """Unit vector ``[cos az cos el, sin az cos el, sin el]``."""
    az, el = a
    return np.array([np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)])


def _checked_distance(d):
    n = float(np.linalg.norm(d))
    if n < MIN_DISTANCE:
        raise DegenerateGeometryError(f"coincident points (distance {n:.3g} m)")
    return n


def local_direction(observer: Pose, target) -> np.ndarray:
    """Unit vector toward ``target`` expressed in the observer's frame."""
    v = observer.rotation.T @ (np.asarray(target, dtype=float) - observer.position)
    return v / _checked_distance(v)


def aoa_in_lcs(observer: Pose, target) -> AnglePair:
    """Azimuth/elevation of ``target`` seen from ``observer`` in its local frame."""
    u = local_direction(observer, target)
    return AnglePair(float(np.arctan2(u[1], u[0])), float(np.arcsin(np.clip(u[2], -1.0, 1.0))))


def path_delays(state: LocalizationState, p_B) -> tuple[float, float]:
    """LOS and RIS-path delays including the clock bias."""
    p_B = np.asarray(p_B, dtype=float)
    d_ub = _checked_distance(p_B - state.p_U)
    d_ur = _checked_distance(state.p_R - state.p_U)
    d_rb = _checked_distance(p_B - state.p_R)
    return d_ub / C_LIGHT + state.clock_bias, (d_ur + d_rb) / C_LIGHT + state.clock_bias


def intermediate_angles(phi_A, phi_D) -> tuple[float, float]:
    """Sums of the local y- and z-direction cosines of arrival and departure."""
    v2 = np.sin(phi_A[0]) * np.cos(phi_A[1]) + np.sin(phi_D[0]) * np.cos(phi_D[1])
    v3 = np.sin(phi_A[1]) + np.sin(phi_D[1])
    return float(v2), float(v3)


def ris_angles(state: LocalizationState, p_B) -> tuple[AnglePair, AnglePair]:
    """Angle of arrival from the UE and angle of departure toward the BS at the RIS."""
    ris = state.ris_pose
    return aoa_in_lcs(ris, state.p_U), aoa_in_lcs(ris, p_B)


def forward_map(state: LocalizationState, bs: Pose) -> ChannelParams:
    """Map the localization state to the eight channel parameters."""
    theta_L = aoa_in_lcs(bs, state.p_U)
    theta_R = aoa_in_lcs(bs, state.p_R)
    tau_L, tau_R = path_delays(state, bs.position)
    phi_A, phi_D = ris_angles(state, bs.position)
    v2, v3 = intermediate_angles(phi_A, phi_D)
    return ChannelParams(theta_L, theta_R, tau_L, tau_R, v2, v3)


def _angle_jacobian(v):
    """d(az, el)/dv for a (non-normalized) local direction vector ``v``."""
    x, y, z = v
    rho2 = x * x + y * y
    rho = np.sqrt(rho2)
    r2 = rho2 + z * z
    if rho < MIN_DISTANCE:
        raise DegenerateGeometryError("target on the local z-axis; azimuth undefined")
    d_az = np.array([-y, x, 0.0]) / rho2
    d_el = np.array([-x * z, -y * z, rho2]) / (r2 * rho)
    return np.vstack([d_az, d_el])


def forward_jacobian(state: LocalizationState, bs: Pose) -> np.ndarray:
    """Analytic Jacobian of :func:`forward_map`.

    Rows follow ``ChannelParams.NAMES`` with delays in meters; columns follow
    ``LocalizationState.to_vector`` (clock bias in meters), so the
    clock-bias column carries ones on both delay rows.
    """
    p_B = bs.position
    R_B = bs.rotation
    T = np.zeros((8, 8))

    T[0:2, 0:3] = _angle_jacobian(R_B.T @ (state.p_U - p_B)) @ R_B.T
    T[2:4, 3:6] = _angle_jacobian(R_B.T @ (state.p_R - p_B)) @ R_B.T

    q_ub = state.p_U - p_B
    q_ur = state.p_U - state.p_R
    q_rb = state.p_R - p_B
    d_ub, d_ur, d_rb = (_checked_distance(q) for q in (q_ub, q_ur, q_rb))
    T[4, 0:3] = q_ub / d_ub
    T[5, 0:3] = q_ur / d_ur
    T[5, 3:6] = -q_ur / d_ur + q_rb / d_rb
    T[4, 7] = T[5, 7] = 1.0

    R_R = rotation_matrix(state.ris_euler)
    u_A = q_ur / d_ur
    u_D = -q_rb / d_rb
    P_A = (np.eye(3) - np.outer(u_A, u_A)) / d_ur
    P_D = (np.eye(3) - np.outer(u_D, u_D)) / d_rb
    sel = R_R.T[1:3]
    T[6:8, 0:3] = sel @ P_A
    T[6:8, 3:6] = -sel @ (P_A + P_D)
    T[6:8, 6] = rotation_matrix_dz(state.ris_euler).T[1:3] @ (u_A + u_D)
    return T
