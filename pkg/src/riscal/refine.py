"""
Least-squares refinement of the channel parameters with the complex gains
eliminated in closed form (variable projection, Gauss-Newton steps).

Internally delays are in meters so all eight coordinates have similar scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .channel import Combiner, ObservationSet, RisProfileSet, ScenarioConfig, steering
from .geometry import C_LIGHT, ChannelParams


class DegenerateGainsError(np.linalg.LinAlgError):
    """The two path signatures are collinear; gains are not identifiable."""


class MeasurementModel:
    """Noise-free LOS model ``mu = alpha_L mu_L(eta) + alpha_R mu_R(eta)``.

    Parameters
    ----------
    config : ScenarioConfig
    combiner : Combiner
    profiles : RisProfileSet
    pilots : ndarray, shape (G, K)
    """

    def __init__(self, config: ScenarioConfig, combiner: Combiner, profiles: RisProfileSet,
                 pilots: np.ndarray):
        self.config = config
        self.W = combiner.W
        self.Wh = self.W.conj().T
        self.upsilon = profiles.upsilon
        self.pilots = np.asarray(pilots)
        self.k = np.arange(config.K)
        self.bs_pos = config.bs_array.element_positions
        self.ris_pos = config.ris_array.element_positions
        self.wavenumber = 2 * np.pi * config.f_c / C_LIGHT

    @classmethod
    def from_observations(cls, obs: ObservationSet) -> "MeasurementModel":
        return cls(obs.config, obs.combiner, obs.profiles, obs.pilots)

    def _bs_terms(self, az, el, derivs):
        t = np.array([np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)])
        a = np.exp(1j * self.wavenumber * (self.bs_pos @ t))
        b = self.Wh @ a
        if not derivs:
            return b, None
        dt_az = np.array([-np.sin(az) * np.cos(el), np.cos(az) * np.cos(el), 0.0])
        dt_el = np.array([-np.cos(az) * np.sin(el), -np.sin(az) * np.sin(el), np.cos(el)])
        db = np.stack([self.Wh @ (a * 1j * self.wavenumber * (self.bs_pos @ d)) for d in (dt_az, dt_el)])
        return b, db

    def _delay_terms(self, d_m, derivs):
        scale = 2 * np.pi * self.config.delta_f / C_LIGHT
        e = np.exp(-1j * scale * self.k * d_m)
        return e, (-1j * scale * self.k * e if derivs else None)

    def _ris_terms(self, v2, v3, derivs):
        y, z = self.ris_pos[:, 1], self.ris_pos[:, 2]
        a = np.exp(1j * self.wavenumber * (v2 * y + v3 * z))
        s = a @ self.upsilon
        if not derivs:
            return s, None
        ds = np.stack([(a * 1j * self.wavenumber * y) @ self.upsilon,
                       (a * 1j * self.wavenumber * z) @ self.upsilon])
        return s, ds

    def means(self, eta: ChannelParams, derivs: bool = False):
        """Unit-gain means ``(mu_L, mu_R)``, each ``(G, K, M)``.

        With ``derivs=True`` also returns ``(d_mu_L, d_mu_R)`` of shape
        ``(8, G, K, M)`` in the order of ``ChannelParams.NAMES`` with delays
        in meters.
        """
        v = eta.to_vector(C_LIGHT)
        return self.means_vec(v, derivs)

    def means_vec(self, v, derivs: bool = False):
        b_L, db_L = self._bs_terms(v[0], v[1], derivs)
        b_R, db_R = self._bs_terms(v[2], v[3], derivs)
        e_L, de_L = self._delay_terms(v[4], derivs)
        e_R, de_R = self._delay_terms(v[5], derivs)
        s, ds = self._ris_terms(v[6], v[7], derivs)
        x = self.pilots
        mu_L = x[:, :, None] * (e_L[:, None] * b_L[None, :])[None]
        mu_R = (x * s[:, None])[:, :, None] * (e_R[:, None] * b_R[None, :])[None]
        if not derivs:
            return mu_L, mu_R
        shape = (8,) + mu_L.shape
        d_L = np.zeros(shape, dtype=complex)
        d_R = np.zeros(shape, dtype=complex)
        for i in range(2):
            d_L[i] = x[:, :, None] * (e_L[:, None] * db_L[i][None, :])[None]
            d_R[2 + i] = (x * s[:, None])[:, :, None] * (e_R[:, None] * db_R[i][None, :])[None]
            d_R[6 + i] = (x * ds[i][:, None])[:, :, None] * (e_R[:, None] * b_R[None, :])[None]
        d_L[4] = x[:, :, None] * (de_L[:, None] * b_L[None, :])[None]
        d_R[5] = (x * s[:, None])[:, :, None] * (de_R[:, None] * b_R[None, :])[None]
        return mu_L, mu_R, d_L, d_R


def model_means(eta: ChannelParams, obs: ObservationSet):
    """Unit-gain path signatures ``(mu_L, mu_R)`` flattened over ``(g, k, m)``."""
    mu_L, mu_R = MeasurementModel.from_observations(obs).means(eta)
    return mu_L.ravel(), mu_R.ravel()


def closed_form_gains(y, mu_L, mu_R):
    """Least-squares gains for fixed path signatures."""
    y, mu_L, mu_R = (np.ravel(a) for a in (y, mu_L, mu_R))
    nL = np.vdot(mu_L, mu_L).real
    nR = np.vdot(mu_R, mu_R).real
    cLR = np.vdot(mu_L, mu_R)
    den = nL * nR - abs(cLR) ** 2
    if den <= 1e-12 * nL * nR or nL == 0 or nR == 0:
        raise DegenerateGainsError("mu_L and mu_R are collinear")
    yL = np.vdot(mu_L, y)
    yR = np.vdot(mu_R, y)
    alpha_L = (yL * nR - yR * cLR) / den
    alpha_R = (yR * nL - yL * np.conj(cLR)) / den
    return complex(alpha_L), complex(alpha_R)


@dataclass
class RefineOptions:
    max_iters: int = 40
    grad_tol: float = 1e-10
    max_backtracks: int = 30
    shrink: float = 0.5

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")


@dataclass
class RefineResult:
    eta: ChannelParams
    alpha_L: complex
    alpha_R: complex
    cost: float
    initial_cost: float
    iterations: int
    stop_reason: str
    history: list = field(default_factory=list)

    @property
    def line_search_failed(self) -> bool:
        return self.stop_reason == "line-search"


class _Objective:
    def __init__(self, model: MeasurementModel, y):
        self.model = model
        self.y = np.ravel(y)

    def value(self, v):
        mu_L, mu_R = self.model.means_vec(v)
        aL, aR = closed_form_gains(self.y, mu_L, mu_R)
        r = self.y - aL * mu_L.ravel() - aR * mu_R.ravel()
        return float(np.vdot(r, r).real), (aL, aR)

    def linearize(self, v):
        """Residual, Kaufman Jacobian and exact gradient at ``v``."""
        mu_L, mu_R, d_L, d_R = self.model.means_vec(v, derivs=True)
        mL, mR = mu_L.ravel(), mu_R.ravel()
        aL, aR = closed_form_gains(self.y, mL, mR)
        r = self.y - aL * mL - aR * mR
        dM = (aL * d_L + aR * d_R).reshape(8, -1).T              # (N, 8)
        # project the columns onto the orthogonal complement of span{mu_L, mu_R}
        basis, _ = np.linalg.qr(np.column_stack([mL, mR]))
        J = -(dM - basis @ (basis.conj().T @ dM))
        grad = 2 * np.real(J.conj().T @ r)
        return r, J, grad, (aL, aR)

    def gradient(self, v):
        """Exact gradient of the gain-eliminated objective."""
        return self.linearize(v)[2]


def objective_gradient(eta: ChannelParams, obs: ObservationSet):
    """``(value, gradient)`` of the gain-eliminated LS objective (delays in meters)."""
    obj = _Objective(MeasurementModel.from_observations(obs), obs.y)
    v = eta.to_vector(C_LIGHT)
    return obj.value(v)[0], obj.gradient(v)


def ls_refine(eta0: ChannelParams, obs: ObservationSet,
              opts: RefineOptions | None = None) -> RefineResult:
    """Refine ``eta0`` by minimizing ``||y - a_L mu_L - a_R mu_R||^2``.

    Each iteration takes a Gauss-Newton step on the eight real parameters
    with the gains eliminated in closed form, and backtracks until the
    objective decreases. Stops on ``max_iters``, a small gradient
    (``grad_tol`` relative to ``||y||^2``), or a failed line search, in which
    case the best iterate so far is returned.
    """
    opts = RefineOptions() if opts is None else opts
    model = MeasurementModel.from_observations(obs)
    obj = _Objective(model, obs.y)
    v = eta0.to_vector(C_LIGHT)
    if not np.all(np.isfinite(v)):
        raise ValueError("initial parameters must be finite")
    scale = max(float(np.vdot(obj.y, obj.y).real), 1e-300)

    f, gains = obj.value(v)
    f0 = f
    history = [f]
    reason = "max-iters"
    it = 0
    for it in range(1, opts.max_iters + 1):
        r, J, grad, gains = obj.linearize(v)
        if np.linalg.norm(grad) <= opts.grad_tol * scale:
            reason = "gradient"
            it -= 1
            break
        Jr = np.vstack([J.real, J.imag])
        rr = np.concatenate([r.real, r.imag])
        step = np.linalg.lstsq(Jr, -rr, rcond=None)[0]
        t = 1.0
        accepted = False
        for _ in range(opts.max_backtracks):
            cand = v + t * step
            try:
                fc, gc = obj.value(cand)
            except DegenerateGainsError:
                fc = np.inf
            if fc < f:
                accepted = True
                break
            t *= opts.shrink
        if not accepted:
            reason = "line-search" if f > 1e-28 * scale else "converged"
            it -= 1
            break
        v, f, gains = cand, fc, gc
        history.append(f)

    return RefineResult(ChannelParams.from_vector(v, C_LIGHT), gains[0], gains[1], f, f0,
                        it, reason, history)
