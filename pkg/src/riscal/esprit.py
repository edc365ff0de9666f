"""
Element-space and beamspace ESPRIT, and the coarse tensor-ESPRIT channel estimator.

Sign convention: with ``b(w) = T^H a(w)`` and ``a(w) = [1, e^{jw}, ...]``,
the restored beamspace relation reads ``Q F^H b(w) = e^{+jw} Q b(w)``, so
the eigenvalues of the beamspace ``Theta`` carry ``+w``, the same sign as the
element-space estimator.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .channel import ObservationSet, steering
from .geometry import AnglePair, ChannelParams
from .tensor import cp_decompose, rank1_matrix

# a component whose CP weight falls below this fraction of the strongest one
# is treated as absent
RANK_COLLAPSE_RATIO = 1e-8


class DegenerateSubspaceError(np.linalg.LinAlgError):
    """A shift-invariance equation has no unique least-squares solution."""


@dataclass(frozen=True)
class SelectionPair:
    """``J1 = [I, 0]`` and ``J2 = [0, I]`` of size ``(n-1) x n``."""

    J1: np.ndarray
    J2: np.ndarray

    @classmethod
    def of_size(cls, n: int) -> "SelectionPair":
        if n < 2:
            raise ValueError("selection needs at least two rows")
        eye = np.eye(n - 1)
        z = np.zeros((n - 1, 1))
        return cls(np.hstack([eye, z]), np.hstack([z, eye]))


def _pinv_checked(m, what, cond_max=1e10):
    s = np.linalg.svd(m, compute_uv=False)
    if s.size == 0 or s[0] == 0 or s[-1] / s[0] < 1.0 / cond_max or m.shape[0] < m.shape[1]:
        raise DegenerateSubspaceError(f"{what} is rank deficient")
    return np.linalg.pinv(m)


def element_space_theta(U: np.ndarray, sel: SelectionPair | None = None) -> np.ndarray:
    """``Theta = (J1 U)^+ J2 U`` for a basis ``U`` of an element-space manifold."""
    U = np.atleast_2d(np.asarray(U, dtype=complex))
    if U.shape[0] == 1:
        U = U.T
    sel = SelectionPair.of_size(U.shape[0]) if sel is None else sel
    return _pinv_checked(sel.J1 @ U, "J1 U") @ (sel.J2 @ U)


@dataclass(frozen=True)
class BeamspaceRestore:
    """Projector ``Q`` and shift matrix ``F`` restoring shift invariance of ``T^H a``."""

    Q: np.ndarray
    F: np.ndarray
    t_first: np.ndarray
    t_last: np.ndarray


def beamspace_restore(T: np.ndarray) -> BeamspaceRestore:
    """Build ``F = (J2 T)^+ J1 T`` and the projector ``Q`` annihilating
    ``t_I`` and ``F^H t_1``, where ``t_i`` is row ``i`` of ``T`` conjugated.

    ``Q`` is the orthogonal projector onto the complement of the span of
    those two vectors.
    """
    T = np.asarray(T, dtype=complex)
    n, J = T.shape
    if J < 2:
        raise ValueError("the transformation needs more than one column")
    sel = SelectionPair.of_size(n)
    F = _pinv_checked(sel.J2 @ T, "J2 T") @ (sel.J1 @ T)
    t_first = T[0].conj()
    t_last = T[-1].conj()
    V = np.column_stack([t_last, F.conj().T @ t_first])
    u, s, _ = np.linalg.svd(V, full_matrices=False)
    basis = u[:, s > s[0] * 1e-12] if s[0] > 0 else u[:, :0]
    Q = np.eye(J) - basis @ basis.conj().T
    return BeamspaceRestore(Q, F, t_first, t_last)


def beamspace_theta(U: np.ndarray, restore: BeamspaceRestore) -> np.ndarray:
    """``Theta = (Q U)^+ Q F^H U``; eigenphases are ``+w``."""
    U = np.asarray(U, dtype=complex)
    if U.ndim == 1:
        U = U[:, None]
    QU = restore.Q @ U
    return _pinv_checked(QU, "Q U") @ (restore.Q @ restore.F.conj().T @ U)


def eigen_frequencies(theta: np.ndarray):
    """Eigenphases of ``theta`` ordered to follow the basis columns.

    For CP factors ``theta`` is close to diagonal; each eigenvalue is
    assigned to the column where its eigenvector has the largest weight.
    """
    vals, vecs = np.linalg.eig(theta)
    R = len(vals)
    order = np.empty(R, dtype=int)
    best_perm = None
    best_score = -np.inf
    for perm in itertools.permutations(range(R)):
        score = sum(abs(vecs[r, perm[r]]) for r in range(R))
        if score > best_score:
            best_score, best_perm = score, perm
    order[:] = best_perm
    return np.angle(vals[order])


# parameter <-> frequency maps

def delay_from_frequency(phase, delta_f):
    """Eigenphase in (-pi, pi] to delay in [0, 1/delta_f)."""
    w = np.where(np.asarray(phase) > 0, np.asarray(phase) - 2 * np.pi, phase)
    return -w / (2 * np.pi * delta_f)


def delay_frequency(tau, delta_f):
    return -2 * np.pi * delta_f * np.asarray(tau)


def angles_from_frequencies(w1, w2, kappa) -> AnglePair:
    """Invert ``w1 = kappa sin(az) cos(el)``, ``w2 = kappa sin(el)``; az in (-pi/2, pi/2)."""
    el = np.arcsin(np.clip(w2 / kappa, -1.0, 1.0))
    ce = np.cos(el)
    az = np.arcsin(np.clip(w1 / (kappa * ce), -1.0, 1.0)) if ce > 0 else 0.0
    return AnglePair(float(az), float(el))


def angle_frequencies(a: AnglePair, kappa):
    return kappa * np.sin(a.az) * np.cos(a.el), kappa * np.sin(a.el)


@dataclass
class CoarseEstimate:
    """Output of the coarse estimator. RIS-path entries are NaN when unreliable."""

    eta: ChannelParams
    alpha_L: complex
    beta_R: np.ndarray
    ris_reliable: bool = True
    diagnostics: dict = field(default_factory=dict)


def beamspace_channels(obs: ObservationSet) -> np.ndarray:
    """``y x^* / P_T`` for every transmission and subcarrier; shape ``(G, K, M)``."""
    P_T = obs.config.P_T
    return obs.y * obs.pilots.conj()[:, :, None] / P_T


def _model_tensor(w_tau, w1, w2, T1, T2, K):
    """Columns of the rank-R beamspace model for given frequencies; ``(K*N1*N2, R)``."""
    cols = []
    for wt, a, b in zip(w_tau, w1, w2):
        ka = steering(K, wt)
        b1 = T1.conj().T @ steering(T1.shape[0], a)
        b2 = T2.conj().T @ steering(T2.shape[0], b)
        cols.append(np.einsum("k,i,j->kij", ka, b1, b2).ravel())
    return np.column_stack(cols)


def coarse_estimate(obs: ObservationSet, seed=0, cp_restarts: int = 3) -> CoarseEstimate:
    """Coarse estimate of all eight channel parameters from tensor-ESPRIT.

    Steps: beamspace channels; sum over transmissions and CP-decompose the
    ``K x N1 x N2`` tensor; delays from element-space ESPRIT on the
    subcarrier factor, BS angles from beamspace ESPRIT on the two port
    factors; per-transmission least squares for the LOS gain and the RIS
    coefficients; rank-one factorization of the reshaped RIS coefficients and
    beamspace ESPRIT for the two RIS angles.
    """
    cfg = obs.config
    comb = obs.combiner
    T1, T2 = comb.T1, comb.T2
    N1, N2 = T1.shape[1], T2.shape[1]
    K, G = cfg.K, cfg.G
    kappa_B = cfg.bs_array.spatial_frequency(cfg.f_c)
    kappa_R = cfg.ris_array.spatial_frequency(cfg.f_c)
    diag = {}

    h = beamspace_channels(obs)
    H = h.sum(axis=0).reshape(K, N1, N2)

    cp = cp_decompose(H, 2, restarts=cp_restarts, seed=seed)
    diag["cp_residual"] = cp.residual
    diag["cp_converged"] = cp.converged
    mags = np.abs(cp.weights)
    ris_reliable = bool(mags.min() > RANK_COLLAPSE_RATIO * mags.max()) and not cp.degenerate
    if not ris_reliable:
        cp = cp_decompose(H, 1, restarts=cp_restarts, seed=seed)
    R = cp.rank
    U1, U2, U3 = cp.factors

    w_tau = eigen_frequencies(element_space_theta(U1))
    w1 = eigen_frequencies(beamspace_theta(U2, beamspace_restore(T1)))
    w2 = eigen_frequencies(beamspace_theta(U3, beamspace_restore(T2)))

    # pair modes 2 and 3 with mode 1 by the best rank-R model fit
    target = H.ravel()
    best = None
    for p2 in itertools.permutations(range(R)):
        for p3 in itertools.permutations(range(R)):
            A = _model_tensor(w_tau, w1[list(p2)], w2[list(p3)], T1, T2, K)
            lam = np.linalg.lstsq(A, target, rcond=None)[0]
            res = np.linalg.norm(target - A @ lam)
            if best is None or res < best[0]:
                best = (res, p2, p3)
    diag["pairing_residual"] = best[0] / max(np.linalg.norm(target), 1e-300)
    diag["pairing"] = (best[1], best[2])
    w1 = w1[list(best[1])]
    w2 = w2[list(best[2])]

    taus = delay_from_frequency(w_tau, cfg.delta_f)
    order = np.argsort(taus)
    iL = order[0]
    theta_L = angles_from_frequencies(w1[iL], w2[iL], kappa_B)
    tau_L = float(taus[iL])

    W = comb.W
    aL = np.kron(steering(K, delay_frequency(tau_L, cfg.delta_f)),
                 W.conj().T @ np.kron(steering(cfg.bs_array.n1, w1[iL]),
                                      steering(cfg.bs_array.n2, w2[iL])))
    hg = h.reshape(G, -1)

    if R < 2:
        alpha_L = complex(np.mean(hg @ aL.conj()) / np.vdot(aL, aL))
        nan = float("nan")
        eta = ChannelParams(theta_L, AnglePair(nan, nan), tau_L, nan, nan, nan)
        return CoarseEstimate(eta, alpha_L, np.full(G, np.nan + 0j), False, diag)

    iR = order[1]
    theta_R = angles_from_frequencies(w1[iR], w2[iR], kappa_B)
    tau_R = float(taus[iR])
    aR = np.kron(steering(K, delay_frequency(tau_R, cfg.delta_f)),
                 W.conj().T @ np.kron(steering(cfg.bs_array.n1, w1[iR]),
                                      steering(cfg.bs_array.n2, w2[iR])))
    Rm = np.column_stack([aL, aR])
    coef = np.linalg.lstsq(Rm, hg.T, rcond=None)[0]          # (2, G)
    alpha_L = complex(coef[0].mean())
    beta = coef[1]

    sg = cfg.sqrt_G
    S = beta.reshape(sg, sg)
    _, u, v, s_res = rank1_matrix(S)
    diag["s_residual"] = s_res
    prof = obs.profiles
    wv2 = eigen_frequencies(beamspace_theta(u, beamspace_restore(prof.T3.conj())))[0]
    wv3 = eigen_frequencies(beamspace_theta(v, beamspace_restore(prof.T4.conj())))[0]

    eta = ChannelParams(theta_L, theta_R, tau_L, tau_R,
                        float(wv2 / kappa_R), float(wv3 / kappa_R))
    return CoarseEstimate(eta, alpha_L, beta, ris_reliable, diag)
