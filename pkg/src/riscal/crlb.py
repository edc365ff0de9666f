"""
Fisher information and error bounds for the two-path observation model.

The measurement noise is circular Gaussian with covariance
``sigma0^2 W^H W + sigmar^2 A_r A_r^H`` per transmission and subcarrier,
handled through the real/imaginary stacking ``[Re y; Im y]``. Only the mean
carries parameter information: the dependence of the RIS-noise covariance
on the gains and angles is ignored.

Units: delays and the clock bias are in meters, angles in radians.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channel import (
    ChannelGains, ScenarioRealization, _beamspace, config_amplification, true_gain_magnitudes,
)
from .geometry import ChannelParams, FullChannelParams, LocalizationState, Pose, forward_jacobian, forward_map
from .refine import MeasurementModel

CHANNEL_LABELS = ChannelParams.NAMES + ("re_alphaL", "im_alphaL", "re_alphaR", "im_alphaR")
STATE_LABELS = ("pU_x", "pU_y", "pU_z", "pR_x", "pR_y", "pR_z", "o3", "delta")

# condition number above which a FIM is treated as singular
SINGULAR_COND = 1e14

BOUND_GROUPS = {
    "p_U": ("pU_x", "pU_y", "pU_z"),
    "p_R": ("pR_x", "pR_y", "pR_z"),
    "o3": ("o3",),
    "delta": ("delta",),
    "theta_L": ("thetaL_az", "thetaL_el"),
    "theta_R": ("thetaR_az", "thetaR_el"),
    "tau_L": ("tauL",),
    "tau_R": ("tauR",),
    "vartheta": ("vartheta2", "vartheta3"),
}


class SingularFimError(np.linalg.LinAlgError):
    """A block that must be inverted is numerically singular."""


def real_block(X: np.ndarray) -> np.ndarray:
    """``[[Re X, -Im X], [Im X, Re X]]``: real form of a complex covariance."""
    X = np.asarray(X)
    return np.block([[X.real, -X.imag], [X.imag, X.real]])


@dataclass
class NoiseCovariances:
    """Real-stacked noise covariances.

    ``C0`` is ``(2M, 2M)``; ``Cr`` is either one ``(2M, 2M)`` matrix shared by
    every transmission and subcarrier or an array ``(G, K, 2M, 2M)``.
    """

    C0: np.ndarray
    Cr: np.ndarray

    @property
    def shared(self) -> bool:
        return self.Cr.ndim == 2

    def total(self, g: int | None = None, k: int | None = None) -> np.ndarray:
        if self.shared:
            return self.C0 + self.Cr
        return self.C0 + self.Cr[g, k]


def noise_covariance(W, H_R2_k=None, Gamma_g=None, sigma0_sq: float = 0.0,
                     sigmar_sq: float = 0.0) -> NoiseCovariances:
    """Covariances for ``A0 = W^H`` and ``A_r = W^H H_R2^k Gamma_g``.

    Each term is ``sigma^2/2 * real_block(A A^H)``.
    """
    W = np.asarray(W)
    A0 = W.conj().T
    C0 = 0.5 * sigma0_sq * real_block(A0 @ A0.conj().T)
    if H_R2_k is None or Gamma_g is None or sigmar_sq == 0:
        return NoiseCovariances(C0, np.zeros_like(C0))
    G_ = np.asarray(Gamma_g)
    G_ = np.diag(G_) if G_.ndim == 1 else G_
    Ar = A0 @ np.asarray(H_R2_k) @ G_
    return NoiseCovariances(C0, 0.5 * sigmar_sq * real_block(Ar @ Ar.conj().T))


def _ris_noise_grams(real: ScenarioRealization) -> np.ndarray:
    """``A_r A_r^H`` for every ``(g, k)`` without forming ``A_r``.

    ``A_r`` is a sum over RIS-to-BS paths of rank-one terms, so the Gram
    matrices follow from the small path-by-path overlaps of the reflected
    RIS responses.
    """
    bs = _beamspace(real)
    R = np.einsum("ign,jgn->ijg", bs.refl_out, bs.refl_out.conj())
    c = bs.paths.out_gain[:, None] * bs.e_out                  # (I, K)
    P = np.einsum("ik,jk,ijg->gkij", c, c.conj(), R)
    return np.einsum("gkij,im,jl->gkml", P, bs.b_out, bs.b_out.conj(), optimize=True)


def realization_covariances(real: ScenarioRealization, shared_tol: float = 1e-12) -> NoiseCovariances:
    """Covariances of every ``(g, k)`` for a realization.

    When every ``A_r A_r^H`` coincides (the LOS model without coupling) the
    shared matrix is returned.
    """
    cfg = real.config
    W = real.combiner.W
    C0 = 0.5 * cfg.sigma0_sq * real_block(W.conj().T @ W)
    if cfg.sigmar_sq == 0:
        return NoiseCovariances(C0, np.zeros_like(C0))
    AA = _ris_noise_grams(real)                                  # (G, K, M, M)
    ref = AA[0, 0]
    scale = max(np.abs(ref).max(), 1e-300)
    if np.all(np.abs(AA - ref) <= shared_tol * scale):
        return NoiseCovariances(C0, 0.5 * cfg.sigmar_sq * real_block(ref))
    Cr = 0.5 * cfg.sigmar_sq * np.stack([[real_block(a) for a in row] for row in AA])
    return NoiseCovariances(C0, Cr)


@dataclass
class FimMatrix:
    """Real symmetric Fisher information matrix with named axes."""

    matrix: np.ndarray
    labels: tuple
    flags: dict = field(default_factory=dict)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=float)
        self.labels = tuple(self.labels)
        if self.matrix.shape != (len(self.labels),) * 2:
            raise ValueError("matrix shape does not match the labels")

    def index(self, names) -> list[int]:
        return [self.labels.index(n) for n in names]

    def __add__(self, other: "FimMatrix") -> "FimMatrix":
        if self.labels != other.labels:
            raise ValueError("cannot add FIMs with different parameter axes")
        return FimMatrix(self.matrix + other.matrix, self.labels)

    def scaled(self, s: float) -> "FimMatrix":
        return FimMatrix(s * self.matrix, self.labels, dict(self.flags))

    def is_symmetric(self, rtol: float = 1e-10) -> bool:
        m = self.matrix
        return bool(np.abs(m - m.T).max() <= rtol * max(np.abs(m).max(), 1e-300))

    def is_psd(self, rtol: float = 1e-10) -> bool:
        m = 0.5 * (self.matrix + self.matrix.T)
        return bool(np.linalg.eigvalsh(m).min() >= -rtol * abs(np.trace(m)))

    def condition(self) -> float:
        s = np.linalg.svd(self.matrix, compute_uv=False)
        return float(np.inf if s[-1] == 0 else s[0] / s[-1])


# channel FIM

def gain_derivatives(mu_L, mu_R, d_L, d_R, alpha_L, alpha_R):
    """Stack of ``d mu / d eta_ch`` along the first axis (12 entries)."""
    d_eta = alpha_L * d_L + alpha_R * d_R
    return np.concatenate([d_eta, np.stack([mu_L, 1j * mu_L, mu_R, 1j * mu_R])], axis=0)


def _weighted_gram(D, cov: NoiseCovariances):
    """``sum_{g,k} D_gk^T C_gk^{-1} D_gk`` for complex ``D`` of shape ``(P, G, K, M)``."""
    P = D.shape[0]
    Dr = np.concatenate([D.real, D.imag], axis=-1)               # (P, G, K, 2M)
    if cov.shared:
        C = cov.total()
        X = Dr.reshape(P, -1, C.shape[0])
        sol = np.linalg.solve(C, X.reshape(-1, C.shape[0]).T).T.reshape(X.shape)
        return np.einsum("pnm,qnm->pq", X, sol)
    C = cov.C0[None, None] + cov.Cr
    Dt = np.moveaxis(Dr, 0, -1)                                  # (G, K, 2M, P)
    sol = np.linalg.solve(C, Dt)
    return np.einsum("gkmp,gkmq->pq", Dt, sol)


def fim_channel(params, model: MeasurementModel, cov: NoiseCovariances) -> FimMatrix:
    """FIM of ``[eta, Re aL, Im aL, Re aR, Im aR]`` (12 x 12).

    Parameters
    ----------
    params : FullChannelParams
    model : MeasurementModel
        Supplies the unit-gain means and their derivatives.
    cov : NoiseCovariances
    """
    mu_L, mu_R, d_L, d_R = model.means(params.eta, derivs=True)
    D = gain_derivatives(mu_L, mu_R, d_L, d_R, params.alpha_L, params.alpha_R)
    flags = {}
    if cov.shared:
        C = cov.total()
        tr = np.trace(C)
        if np.linalg.cond(C) > SINGULAR_COND:
            cov = NoiseCovariances(cov.C0 + 1e-12 * tr * np.eye(len(C)), cov.Cr)
            flags["ridge"] = True
    J = _weighted_gram(D, cov)
    return FimMatrix(0.5 * (J + J.T), CHANNEL_LABELS, flags)


def efim(J: FimMatrix, keep=ChannelParams.NAMES) -> FimMatrix:
    """Equivalent FIM of ``keep`` after eliminating the remaining parameters
    with a Schur complement ``X - Y Z^{-1} Y^T``."""
    ik = J.index(keep)
    inu = [i for i in range(len(J.labels)) if i not in ik]
    X = J.matrix[np.ix_(ik, ik)]
    Y = J.matrix[np.ix_(ik, inu)]
    Z = J.matrix[np.ix_(inu, inu)]
    if not inu:
        return FimMatrix(X, keep)
    s = np.linalg.svd(Z, compute_uv=False)
    if s[0] == 0 or s[-1] / s[0] < 1.0 / SINGULAR_COND:
        raise SingularFimError("nuisance block is singular")
    E = X - Y @ np.linalg.solve(Z, Y.T)
    return FimMatrix(0.5 * (E + E.T), tuple(keep))


efim_localization_channel = efim


def fim_localization(J_eta: FimMatrix, state: LocalizationState, bs: Pose,
                     jacobian: np.ndarray | None = None) -> FimMatrix:
    """Chain rule ``T^T J(eta) T`` with ``T = d eta / d xi``."""
    if J_eta.labels != ChannelParams.NAMES:
        raise ValueError("expected a FIM over the eight channel parameters")
    T = forward_jacobian(state, bs) if jacobian is None else np.asarray(jacobian)
    if not np.all(np.isfinite(T)):
        raise SingularFimError("non-finite geometric Jacobian")
    M = T.T @ J_eta.matrix @ T
    return FimMatrix(0.5 * (M + M.T), STATE_LABELS)


def fim_with_priors(J_eta: FimMatrix, state: LocalizationState, bs: Pose,
                    known=()) -> FimMatrix:
    """Localization FIM with the columns of known parameters (``"o3"``,
    ``"delta"``) removed from the Jacobian."""
    known = set(known)
    bad = known - {"o3", "delta"}
    if bad:
        raise ValueError(f"unsupported prior(s): {sorted(bad)}")
    full = fim_localization(J_eta, state, bs)
    keep = [lab for lab in STATE_LABELS if lab not in known]
    idx = full.index(keep)
    return FimMatrix(full.matrix[np.ix_(idx, idx)], tuple(keep))


def fim_multi_bs(per_bs) -> FimMatrix:
    """Sum of independent per-BS FIMs over a shared parameterization."""
    per_bs = list(per_bs)
    if not per_bs:
        raise ValueError("need at least one FIM")
    total = per_bs[0]
    for J in per_bs[1:]:
        total = total + J
    return total


def error_bounds(J: FimMatrix, groups=None) -> dict:
    """``sqrt(trace)`` of the inverse-FIM blocks for every parameter group
    present on the axes of ``J``. Singular FIMs give ``inf``."""
    groups = BOUND_GROUPS if groups is None else groups
    present = {k: v for k, v in groups.items() if all(n in J.labels for n in v)}
    if not present:
        raise ValueError("no known parameter group on the FIM axes")
    if not np.all(np.isfinite(J.matrix)) or J.condition() > SINGULAR_COND:
        return {k: np.inf for k in present}
    inv = np.linalg.inv(J.matrix)
    out = {}
    for k, names in present.items():
        idx = J.index(names)
        v = float(np.trace(inv[np.ix_(idx, idx)]))
        out[k] = np.sqrt(v) if v >= 0 else np.inf
    return out


# scenario-level helpers

def bound_realization(real: ScenarioRealization, state: LocalizationState | None = None,
                      bs: Pose | None = None, combiner=None) -> ScenarioRealization:
    """LOS-only realization used for bounds, with gain magnitudes and the RIS
    amplification recomputed for ``state`` and ``bs``.

    Gain phases enter the equivalent FIM only through the small LOS/RIS
    overlap, so they are set to zero.
    The amplification of ``real`` is kept unless a new state is given; it
    does not depend on the BS pose.
    """
    cfg = real.config if bs is None else real.config.replace(bs=bs)
    profiles = real.profiles
    if state is not None:
        profiles = profiles.with_amplification(config_amplification(cfg, state))
    state = real.state if state is None else state
    mags = true_gain_magnitudes(cfg, state)
    return ScenarioRealization(cfg, state, ChannelGains(*(complex(m) for m in mags)),
                               real.combiner if combiner is None else combiner, profiles)


def channel_fim(real: ScenarioRealization) -> FimMatrix:
    """12 x 12 channel FIM of a LOS realization at its true parameters."""
    cfg = real.config
    eta = forward_map(real.state, cfg.bs)
    pilots = np.full((real.profiles.G, cfg.K), np.sqrt(cfg.P_T), dtype=complex)
    model = MeasurementModel(cfg, real.combiner, real.profiles, pilots)
    params = FullChannelParams(eta, real.gains.alpha_L, real.gains.alpha_R)
    return fim_channel(params, model, realization_covariances(real))


def localization_fim(real: ScenarioRealization, known=(), extra_bs=()) -> FimMatrix:
    """Localization FIM of a realization, optionally with priors and extra BSs.

    Extra base stations reuse the RIS profiles, the combiner and the noise
    levels of ``real``; their observations are independent.
    """
    base = bound_realization(real)
    fims = []
    for pose in (real.config.bs, *extra_bs):
        r = bound_realization(base, bs=pose)
        J_eta = efim(channel_fim(r))
        fims.append(fim_with_priors(J_eta, r.state, pose, known))
    return fim_multi_bs(fims)


def localization_bounds(real: ScenarioRealization, known=(), extra_bs=()) -> dict:
    """Error bounds (``p_U``, ``p_R``, ``o3``, ``delta`` when unknown) of a realization."""
    try:
        J = localization_fim(real, known, extra_bs)
    except SingularFimError:
        keys = [k for k in ("p_U", "p_R", "o3", "delta") if k not in set(known)]
        return {k: np.inf for k in keys}
    return error_bounds(J)
