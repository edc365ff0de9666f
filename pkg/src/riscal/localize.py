"""
Localization from channel parameters by a shrinking 2D grid search over the
RIS yaw ``o3`` and the clock bias.

For a candidate clock bias the LOS distance fixes the UE, and the RIS lies
where the BS-to-RIS ray meets the ellipsoid of constant UE-RIS-BS path
length. The candidate is scored by how well it reproduces the two RIS
intermediate angles, which is where ``o3`` enters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    C_LIGHT, ChannelParams, LocalizationState, Pose, direction_vector, rotation_matrix, wrap_angle,
)


class SearchFailure(RuntimeError):
    """Every candidate on the grid was invalid."""


@dataclass(frozen=True)
class SearchConfig:
    """Initial grids (``delta`` in seconds), shrink factor and refinement rounds.

    Every round keeps the grid cardinalities and shrinks both resolutions by
    ``kappa``. The initial resolutions are the spacings of the given grids.
    """

    o3_grid: np.ndarray
    delta_grid: np.ndarray
    kappa: float = 0.1
    rounds: int = 3

    def __post_init__(self):
        object.__setattr__(self, "o3_grid", np.atleast_1d(np.asarray(self.o3_grid, dtype=float)))
        object.__setattr__(self, "delta_grid", np.atleast_1d(np.asarray(self.delta_grid, dtype=float)))
        if self.o3_grid.size == 0 or self.delta_grid.size == 0:
            raise ValueError("search grids must be nonempty")
        if not 0 < self.kappa < 1:
            raise ValueError("kappa must lie in (0, 1)")
        if self.rounds < 0:
            raise ValueError("rounds must be nonnegative")

    @classmethod
    def default(cls, delta_f: float, n_o3: int = 64, n_delta: int = 64, max_delta_frac: float = 0.9,
                kappa: float = 0.1, rounds: int = 3, offset=(0.0, 0.0)) -> "SearchConfig":
        """``o3`` uniform on [-pi, pi) and the clock bias on [0, 0.9/delta_f).

        ``offset`` shifts the two grids by fractions of a cell, e.g. to
        randomize where the truth falls relative to the grid.
        """
        d_o3 = 2 * np.pi / n_o3
        d_delta = max_delta_frac / delta_f / n_delta
        o3 = wrap_angle(-np.pi + (np.arange(n_o3) + offset[0]) * d_o3)
        delta = (np.arange(n_delta) + offset[1]) * d_delta
        return cls(np.atleast_1d(o3), delta, kappa, rounds)

    @classmethod
    def dithered(cls, delta_f: float, rng, **kwargs) -> "SearchConfig":
        """:meth:`default` with uniformly random sub-cell offsets."""
        return cls.default(delta_f, offset=tuple(rng.uniform(0.0, 1.0, 2)), **kwargs)

    @staticmethod
    def _step(grid):
        if grid.size < 2:
            return 0.0
        return float(np.min(np.diff(np.sort(grid))))

    @property
    def d_o3(self) -> float:
        return self._step(self.o3_grid)

    @property
    def d_delta(self) -> float:
        return self._step(self.delta_grid)

    def final_resolution(self) -> tuple[float, float]:
        """``(d_o3, d_delta)`` of the last round."""
        s = self.kappa ** self.rounds
        return self.d_o3 * s, self.d_delta * s


@dataclass
class SearchRound:
    """Winner of one round of the grid search."""

    o3: float
    delta: float
    cost: float
    p_U: np.ndarray
    p_R: np.ndarray
    d_o3: float
    d_delta: float

    def state(self, fixed_o1_o2=(0.0, 0.0)) -> LocalizationState:
        return LocalizationState(self.p_U, self.p_R, self.o3, self.delta, np.asarray(fixed_o1_o2))


def _candidates(eta: ChannelParams, delta, bs: Pose):
    """Vectorized :func:`candidate_solution`; invalid rows are NaN."""
    delta = np.atleast_1d(np.asarray(delta, dtype=float))
    p_B = bs.position
    R_B = bs.rotation
    u_L = R_B @ direction_vector(eta.theta_L)
    u_R = R_B @ direction_vector(eta.theta_R)
    d_L = C_LIGHT * (eta.tau_L - delta)
    d_R = C_LIGHT * (eta.tau_R - delta)
    p_U = p_B + d_L[:, None] * u_L
    # |p_B - p_U| = d_L and u_R . (p_B - p_U) = -d_L u_R . u_L
    den = 2.0 * (d_R - d_L * (u_R @ u_L))
    with np.errstate(divide="ignore", invalid="ignore"):
        x = (d_R ** 2 - d_L ** 2) / den
    ok = (d_L > 0) & (d_R > 0) & (delta >= 0) & (np.abs(den) > 1e-12) & (x > 0) & np.isfinite(x)
    p_R = p_B + x[:, None] * u_R
    p_U[~ok] = np.nan
    p_R[~ok] = np.nan
    return p_U, p_R, ok


def candidate_solution(eta: ChannelParams, o3: float, delta: float, bs: Pose):
    """UE and RIS positions implied by a clock bias (``o3`` does not enter).

    Returns ``(p_U, p_R)`` or ``None`` when the candidate is invalid.
    """
    p_U, p_R, ok = _candidates(eta, [delta], bs)
    if not ok[0]:
        return None
    return p_U[0], p_R[0]


def intersection_distance(eta: ChannelParams, delta: float, bs: Pose) -> float:
    """BS-to-RIS distance ``x`` of the ray/ellipsoid intersection."""
    sol = candidate_solution(eta, 0.0, delta, bs)
    if sol is None:
        return float("nan")
    return float(np.linalg.norm(sol[1] - bs.position))


def _cost_grid(eta: ChannelParams, o3, delta, bs: Pose, fixed_o1_o2=(0.0, 0.0)):
    """Cost on the outer grid ``o3 x delta``; invalid entries are ``inf``.

    Returns ``(cost, p_U, p_R)`` with costs of shape ``(len(o3), len(delta))``.
    """
    o3 = np.atleast_1d(np.asarray(o3, dtype=float))
    p_U, p_R, ok = _candidates(eta, delta, bs)
    p_B = bs.position
    with np.errstate(invalid="ignore", divide="ignore"):
        a = p_U - p_R
        b = p_B - p_R
        s = a / np.linalg.norm(a, axis=1, keepdims=True) + b / np.linalg.norm(b, axis=1, keepdims=True)
    base = rotation_matrix([fixed_o1_o2[0], fixed_o1_o2[1], 0.0])
    c, sn = np.cos(o3), np.sin(o3)
    # Rz(o3)^T s, then (Ry Rx)^T
    sx = c[:, None] * s[None, :, 0] + sn[:, None] * s[None, :, 1]
    sy = -sn[:, None] * s[None, :, 0] + c[:, None] * s[None, :, 1]
    sz = np.broadcast_to(s[None, :, 2], sx.shape)
    loc = np.einsum("ji,jab->iab", base, np.stack([sx, sy, sz]))
    f = (loc[1] - eta.vartheta2) ** 2 + (loc[2] - eta.vartheta3) ** 2
    # UE and BS must both lie in front of the surface; this removes the
    # mirrored yaw that reproduces the same intermediate angles
    front = loc[0] > 0
    f = np.where(ok[None, :] & front & np.isfinite(f), f, np.inf)
    return f, p_U, p_R


def cost(eta: ChannelParams, o3: float, delta: float, bs: Pose, fixed_o1_o2=(0.0, 0.0)) -> float:
    """Squared mismatch of the predicted and estimated intermediate angles.

    ``inf`` for an invalid candidate or one that puts the UE and BS behind
    the surface.
    """
    return float(_cost_grid(eta, [o3], [delta], bs, fixed_o1_o2)[0][0, 0])


def _argmin(f, o3, delta):
    """Index of the smallest cost; ties go to the smallest delta, then smallest |o3|."""
    O, D = np.meshgrid(o3, delta, indexing="ij")
    order = np.lexsort((np.abs(O).ravel(), D.ravel(), f.ravel()))
    return np.unravel_index(order[0], f.shape)


def grid_search_path(eta: ChannelParams, search: SearchConfig, bs: Pose,
                     fixed_o1_o2=(0.0, 0.0)) -> list[SearchRound]:
    """Winners of the initial round and of every refinement round."""
    if not np.all(np.isfinite(eta.to_vector())):
        raise SearchFailure("channel parameters are not finite")
    o3, delta = search.o3_grid, search.delta_grid
    d_o3, d_delta = search.d_o3, search.d_delta
    n_o3, n_delta = o3.size, delta.size
    rounds = []
    for q in range(search.rounds + 1):
        f, p_U, p_R = _cost_grid(eta, o3, delta, bs, fixed_o1_o2)
        if not np.any(np.isfinite(f)):
            raise SearchFailure(f"no valid candidate in round {q}")
        i, j = _argmin(f, o3, delta)
        win = SearchRound(float(o3[i]), float(delta[j]), float(f[i, j]), p_U[j].copy(), p_R[j].copy(),
                          d_o3, d_delta)
        rounds.append(win)
        if q == search.rounds:
            break
        d_o3 *= search.kappa
        d_delta *= search.kappa
        o3 = wrap_angle(win.o3 + (np.arange(n_o3) - n_o3 // 2) * d_o3)
        delta = win.delta + (np.arange(n_delta) - n_delta // 2) * d_delta
    return rounds


def grid_search(eta: ChannelParams, search: SearchConfig, bs: Pose,
                fixed_o1_o2=(0.0, 0.0)) -> LocalizationState:
    """Final-round estimate of ``(p_U, p_R, o3, delta)``."""
    return grid_search_path(eta, search, bs, fixed_o1_o2)[-1].state(fixed_o1_o2)
