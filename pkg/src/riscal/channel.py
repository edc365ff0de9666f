"""
Uplink SIMO-OFDM observation synthesis with an active RIS.

Array layout
------------
Both arrays lie in the YOZ plane of their local frame. Element ``(i1, i2)``
sits at ``[0, i1*d, i2*d]`` and the flattened index is ``i1*n2 + i2``, so an
array response factors as ``a(w1) kron a(w2)``.

Array shapes used throughout: ``y`` and ``mu`` are ``(G, K, M)`` with
``M = N1*N2`` combiner ports, pilots are ``(G, K)``; subcarrier ``k`` is
zero-based so the first subcarrier carries no delay phase.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .geometry import (
    C_LIGHT, AnglePair, LocalizationState, Pose, aoa_in_lcs, direction_vector, path_delays,
)


class ConfigError(ValueError):
    """Invalid scenario configuration."""


class SingularReflectionError(np.linalg.LinAlgError):
    """The coupled reflection matrix cannot be formed."""


def dbm_to_watt(dbm):
    return 10.0 ** ((np.asarray(dbm, dtype=float) - 30.0) / 10.0)


def watt_to_dbm(w):
    return 10.0 * np.log10(np.asarray(w, dtype=float)) + 30.0


def noise_power(psd_dbm_hz: float, noise_figure_db: float, bandwidth: float) -> float:
    """Thermal noise power in watts over ``bandwidth``."""
    return float(dbm_to_watt(psd_dbm_hz + noise_figure_db) * bandwidth)


def steering(n: int, omega: float) -> np.ndarray:
    """Uniform linear manifold ``[1, e^{jw}, ..., e^{j(n-1)w}]``."""
    return np.exp(1j * omega * np.arange(n))


@dataclass(frozen=True)
class ArrayGeometry:
    """Uniform planar array in the local YOZ plane; ``spacing`` in meters."""

    n1: int
    n2: int
    spacing: float

    @property
    def size(self) -> int:
        return self.n1 * self.n2

    @property
    def element_positions(self) -> np.ndarray:
        i1, i2 = np.meshgrid(np.arange(self.n1), np.arange(self.n2), indexing="ij")
        pos = np.zeros((self.size, 3))
        pos[:, 1] = i1.ravel() * self.spacing
        pos[:, 2] = i2.ravel() * self.spacing
        return pos

    def spatial_frequency(self, f_c: float) -> float:
        """Phase increment per unit direction cosine, ``2 pi f_c d / c``."""
        return 2 * np.pi * f_c * self.spacing / C_LIGHT


def array_response(geom: ArrayGeometry, a: AnglePair, f_c: float) -> np.ndarray:
    """Far-field response ``exp(j 2 pi f_c / c * t(a)^T p_i)`` for every element."""
    t = direction_vector(a)
    return np.exp(1j * 2 * np.pi * f_c / C_LIGHT * (geom.element_positions @ t))


def ris_combined_response(geom: ArrayGeometry, vartheta2: float, vartheta3: float, f_c: float):
    """Elementwise product of arrival and departure responses, written through
    the summed direction cosines."""
    kappa = geom.spatial_frequency(f_c)
    return np.kron(steering(geom.n1, kappa * vartheta2), steering(geom.n2, kappa * vartheta3))


@dataclass(frozen=True)
class ScenarioConfig:
    """System parameters and true geometry; powers in watts, frequencies in Hz."""

    f_c: float
    bandwidth: float
    K: int
    G: int
    P_T: float
    P_R: float
    sigma0_sq: float
    sigmar_sq: float
    bs_array: ArrayGeometry
    ris_array: ArrayGeometry
    N1: int
    N2: int
    bs: Pose
    truth: LocalizationState
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @classmethod
    def indoor(cls, **overrides) -> "ScenarioConfig":
        """Default indoor scenario: 28 GHz, 100 MHz, 32 subcarriers, 9 transmissions."""
        f_c = 28e9
        lam = C_LIGHT / f_c
        bandwidth = 100e6
        noise = noise_power(-174.0, 10.0, bandwidth)
        base = dict(
            f_c=f_c, bandwidth=bandwidth, K=32, G=9,
            P_T=float(dbm_to_watt(10.0)), P_R=float(dbm_to_watt(7.0)),
            sigma0_sq=noise, sigmar_sq=noise,
            bs_array=ArrayGeometry(10, 10, 0.5 * lam),
            ris_array=ArrayGeometry(15, 15, 0.2 * lam),
            N1=5, N2=5,
            bs=Pose([0.0, 5.0, 3.0], [0.0, 0.0, -np.pi / 2]),
            truth=LocalizationState([3.0, 2.0, 1.0], [-5.0, 0.0, 3.0], 0.0, 100e-9),
        )
        base.update(overrides)
        return cls(**base)

    @property
    def wavelength(self) -> float:
        return C_LIGHT / self.f_c

    @property
    def delta_f(self) -> float:
        return self.bandwidth / self.K

    @property
    def sqrt_G(self) -> int:
        return math.isqrt(self.G)

    @property
    def n_ports(self) -> int:
        return self.N1 * self.N2

    def replace(self, **changes) -> "ScenarioConfig":
        return replace(self, **changes)

    def validate(self):
        if self.K < 2:
            raise ConfigError("need at least two subcarriers")
        if self.G < 1 or math.isqrt(self.G) ** 2 != self.G:
            raise ConfigError(f"G={self.G} is not a perfect square")
        if self.N1 < 2 or self.N2 < 2:
            raise ConfigError("both RF-chain dimensions must exceed 1")
        if self.N1 > self.bs_array.n1 or self.N2 > self.bs_array.n2:
            raise ConfigError("more RF chains than antennas along an array axis")
        if self.sqrt_G > min(self.ris_array.n1, self.ris_array.n2):
            raise ConfigError("sqrt(G) exceeds an RIS array dimension")
        if self.bandwidth <= 0 or self.f_c <= 0:
            raise ConfigError("carrier and bandwidth must be positive")
        for name in ("P_T", "P_R", "sigma0_sq", "sigmar_sq"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be nonnegative")
        tau_L, tau_R = path_delays(self.truth, self.bs.position)
        if not (0 <= tau_L and tau_R < 1.0 / self.delta_f):
            raise ConfigError(
                f"delays must lie in [0, 1/delta_f) = [0, {1e9 / self.delta_f:.1f} ns)")
        if self.ris_array.spacing > 0.25 * self.wavelength:
            warnings.warn("RIS spacing above a quarter wavelength: vartheta estimates may alias",
                          stacklevel=3)


@dataclass(frozen=True)
class ChannelGains:
    """Complex LOS gains of the UE-BS, UE-RIS and RIS-BS links."""

    alpha_L: complex
    alpha_R1: complex
    alpha_R2: complex

    @property
    def alpha_R(self) -> complex:
        return self.alpha_R1 * self.alpha_R2


def _phase(rng):
    return np.exp(1j * rng.uniform(0.0, 2 * np.pi))


def los_gain(distance: float, lambda_c: float, rng=None) -> complex:
    """Free-space gain ``lambda/(4 pi d)`` with a uniform random phase (unit phase if no rng)."""
    if distance <= 0:
        raise ValueError("distance must be positive")
    mag = lambda_c / (4 * np.pi * distance)
    return complex(mag * (_phase(rng) if rng is not None else 1.0))


def nlos_gain(rcs: float, d1: float, d2: float, lambda_c: float, rng=None) -> complex:
    """Bistatic scatter gain ``sqrt(4 pi rcs) lambda / (16 pi^2 d1 d2)`` with random phase."""
    if d1 <= 0 or d2 <= 0:
        raise ValueError("distances must be positive")
    if rcs < 0:
        raise ValueError("rcs must be nonnegative")
    mag = np.sqrt(4 * np.pi * rcs) * lambda_c / (16 * np.pi ** 2 * d1 * d2)
    return complex(mag * (_phase(rng) if rng is not None else 1.0))


def amplification_factor(P_R: float, n_elements: int, P_in: float, sigmar_sq: float) -> float:
    """Amplification factor supported by RIS power ``P_R``."""
    if min(P_R, n_elements, P_in, sigmar_sq) < 0:
        raise ValueError("negative inputs")
    if P_R == 0:
        return 1.0
    denom = n_elements * (P_in + sigmar_sq)
    if denom <= 0:
        raise ValueError("incident plus noise power must be positive when P_R > 0")
    return float(np.sqrt(P_R / denom + 1.0))


def ris_power(p: float, n_elements: int, P_in: float, sigmar_sq: float) -> float:
    """Power supply needed for amplification ``p`` (inverse of :func:`amplification_factor`)."""
    return float((p * p - 1.0) * n_elements * (P_in + sigmar_sq))


def true_gain_magnitudes(config: ScenarioConfig, state: LocalizationState | None = None):
    """``(|alpha_L|, |alpha_R1|, |alpha_R2|)`` from the free-space law."""
    state = config.truth if state is None else state
    lam = config.wavelength
    p_B = config.bs.position
    return (
        lam / (4 * np.pi * np.linalg.norm(state.p_U - p_B)),
        lam / (4 * np.pi * np.linalg.norm(state.p_U - state.p_R)),
        lam / (4 * np.pi * np.linalg.norm(state.p_R - p_B)),
    )


def config_amplification(config: ScenarioConfig, state: LocalizationState | None = None) -> float:
    """Amplification factor with incident power ``P_T |alpha_R1|^2`` (LOS only)."""
    a_r1 = true_gain_magnitudes(config, state)[1]
    return amplification_factor(config.P_R, config.ris_array.size,
                                config.P_T * a_r1 ** 2, config.sigmar_sq)


def draw_gains(config: ScenarioConfig, rng, state: LocalizationState | None = None) -> ChannelGains:
    mags = true_gain_magnitudes(config, state)
    return ChannelGains(*(complex(m * _phase(rng)) for m in mags))


@dataclass(frozen=True)
class Combiner:
    """BS combiner ``W = T1 kron T2``."""

    T1: np.ndarray
    T2: np.ndarray

    @property
    def W(self) -> np.ndarray:
        return np.kron(self.T1, self.T2)


@dataclass(frozen=True)
class RisProfileSet:
    """RIS profiles ``Upsilon = p (T3 kron T4)``; column ``g`` is the profile of transmission g."""

    T3: np.ndarray
    T4: np.ndarray
    p: float

    @property
    def upsilon(self) -> np.ndarray:
        return self.p * np.kron(self.T3, self.T4)

    @property
    def G(self) -> int:
        return self.T3.shape[1] * self.T4.shape[1]

    def with_amplification(self, p: float) -> "RisProfileSet":
        return replace(self, p=float(p))


def shift_structured_matrix(n_rows: int, n_cols: int, rng) -> np.ndarray:
    """Unit-modulus matrix whose columns are uniform-array manifolds at random
    spatial frequencies.

    The linear phase progression keeps ``J1 T = J2 T F`` satisfied, which the
    beamspace shift-invariance restoration needs.
    """
    omegas = rng.uniform(-np.pi, np.pi, n_cols)
    return np.exp(1j * np.outer(np.arange(n_rows), omegas))


def generate_pilots(config: ScenarioConfig, rng) -> np.ndarray:
    """Random-phase pilots with ``|x|^2 = P_T``; shape ``(G, K)``."""
    return np.sqrt(config.P_T) * np.exp(1j * rng.uniform(0, 2 * np.pi, (config.G, config.K)))


def generate_combiner(config: ScenarioConfig, rng) -> Combiner:
    nb1, nb2 = config.bs_array.n1, config.bs_array.n2
    T1 = shift_structured_matrix(nb1, config.N1, rng) / np.sqrt(nb1)
    T2 = shift_structured_matrix(nb2, config.N2, rng) / np.sqrt(nb2)
    return Combiner(T1, T2)


def generate_profiles(config: ScenarioConfig, rng, p: float | None = None) -> RisProfileSet:
    sg = config.sqrt_G
    T3 = shift_structured_matrix(config.ris_array.n1, sg, rng)
    T4 = shift_structured_matrix(config.ris_array.n2, sg, rng)
    if p is None:
        p = config_amplification(config)
    return RisProfileSet(T3, T4, float(p))


def generate_pilots_and_profiles(config: ScenarioConfig, seed):
    """Pilots, combiner and RIS profiles drawn from one seed."""
    if math.isqrt(config.G) ** 2 != config.G:
        raise ConfigError("G must be a perfect square")
    rng = np.random.default_rng(seed)
    combiner = generate_combiner(config, rng)
    profiles = generate_profiles(config, rng)
    pilots = generate_pilots(config, rng)
    return pilots, combiner, profiles


@dataclass(frozen=True)
class MultipathSet:
    """Scatter points, radar cross sections and phase draws per channel.

    Keys ``"L"``, ``"R1"``, ``"R2"`` refer to the UE-BS, UE-RIS and RIS-BS
    channels. Points are ``(I, 3)`` arrays.
    """

    points: dict = field(default_factory=lambda: {k: np.zeros((0, 3)) for k in ("L", "R1", "R2")})
    rcs: dict = field(default_factory=lambda: {k: np.zeros(0) for k in ("L", "R1", "R2")})
    phases: dict = field(default_factory=lambda: {k: np.zeros(0) for k in ("L", "R1", "R2")})

    def count(self, key: str) -> int:
        return len(self.points[key])

    @classmethod
    def random(cls, n_points: int, rng, rcs: float = 0.5,
               box=((-5.0, 5.0), (-5.0, 5.0), (0.0, 5.0))) -> "MultipathSet":
        """``n_points`` scatter points per channel drawn uniformly in ``box``."""
        lo = np.array([b[0] for b in box])
        hi = np.array([b[1] for b in box])
        pts, cs, ph = {}, {}, {}
        for key in ("L", "R1", "R2"):
            pts[key] = lo + (hi - lo) * rng.uniform(size=(n_points, 3))
            cs[key] = np.full(n_points, float(rcs))
            ph[key] = rng.uniform(0, 2 * np.pi, n_points)
        return cls(pts, cs, ph)


def coupling_matrix(geom: ArrayGeometry, wavelength: float, scale: float = 1e-3,
                    decay: float = 0.1) -> np.ndarray:
    """Toy scattering matrix with coupling that decays with element distance.

    ``|S_ij| = scale * exp(-(d_ij / wavelength) / decay)`` with propagation
    phase ``exp(-j 2 pi d_ij / wavelength)`` and zero diagonal.
    """
    pos = geom.element_positions
    d = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=-1) / wavelength
    S = scale * np.exp(-d / decay) * np.exp(-2j * np.pi * d)
    np.fill_diagonal(S, 0.0)
    return S


def mutual_coupling_reflection(gamma, S) -> np.ndarray:
    """Effective reflection matrix ``(Gamma^{-1} - S)^{-1}`` for profile ``gamma``.

    ``gamma`` may be the diagonal vector or the diagonal matrix.
    """
    gamma = np.asarray(gamma)
    g = np.diag(gamma) if gamma.ndim == 2 else gamma
    if np.any(np.abs(g) == 0):
        raise SingularReflectionError("reflection matrix is not invertible")
    S = np.asarray(S, dtype=complex)
    if not np.any(S):
        return np.diag(g).astype(complex)
    M = np.diag(1.0 / g) - S
    if np.linalg.cond(M) > 1e14:
        raise SingularReflectionError("Gamma^{-1} - S is numerically singular")
    return np.linalg.inv(M)


@dataclass(frozen=True)
class PropagationPaths:
    """Per-path quantities; index 0 is always the LOS path.

    ``bs_*`` describe the UE-BS channel, ``in_*`` the UE-RIS channel and
    ``out_*`` the RIS-BS channel. Delays include the clock bias.
    """

    bs_gain: np.ndarray
    bs_delay: np.ndarray
    bs_aoa: list
    in_gain: np.ndarray
    in_aoa: list
    out_gain: np.ndarray
    out_delay: np.ndarray
    out_aoa: list
    out_aod: list


def propagation_paths(config: ScenarioConfig, state: LocalizationState, gains: ChannelGains,
                      multipath: MultipathSet | None = None) -> PropagationPaths:
    p_B, p_U, p_R = config.bs.position, state.p_U, state.p_R
    ris = state.ris_pose
    lam = config.wavelength
    tau_L, tau_R = path_delays(state, p_B)
    d_ur = np.linalg.norm(p_R - p_U)

    bs_gain = [gains.alpha_L]
    bs_delay = [tau_L]
    bs_aoa = [aoa_in_lcs(config.bs, p_U)]
    in_gain = [gains.alpha_R1]
    in_aoa = [aoa_in_lcs(ris, p_U)]
    out_gain = [gains.alpha_R2]
    out_delay = [tau_R]
    out_aoa = [aoa_in_lcs(config.bs, p_R)]
    out_aod = [aoa_in_lcs(ris, p_B)]

    if multipath is not None:
        for sp, c, ph in zip(multipath.points["L"], multipath.rcs["L"], multipath.phases["L"]):
            d1, d2 = np.linalg.norm(sp - p_U), np.linalg.norm(p_B - sp)
            bs_gain.append(nlos_gain(c, d1, d2, lam) * np.exp(1j * ph))
            bs_delay.append((d1 + d2) / C_LIGHT + state.clock_bias)
            bs_aoa.append(aoa_in_lcs(config.bs, sp))
        for sp, c, ph in zip(multipath.points["R1"], multipath.rcs["R1"], multipath.phases["R1"]):
            d1, d2 = np.linalg.norm(sp - p_U), np.linalg.norm(p_R - sp)
            in_gain.append(nlos_gain(c, d1, d2, lam) * np.exp(1j * ph))
            in_aoa.append(aoa_in_lcs(ris, sp))
        for sp, c, ph in zip(multipath.points["R2"], multipath.rcs["R2"], multipath.phases["R2"]):
            d1, d2 = np.linalg.norm(sp - p_R), np.linalg.norm(p_B - sp)
            out_gain.append(nlos_gain(c, d1, d2, lam) * np.exp(1j * ph))
            out_delay.append((d_ur + d1 + d2) / C_LIGHT + state.clock_bias)
            out_aoa.append(aoa_in_lcs(config.bs, sp))
            out_aod.append(aoa_in_lcs(ris, sp))

    return PropagationPaths(
        np.array(bs_gain, dtype=complex), np.array(bs_delay), bs_aoa,
        np.array(in_gain, dtype=complex), in_aoa,
        np.array(out_gain, dtype=complex), np.array(out_delay), out_aoa, out_aod,
    )


@dataclass(frozen=True)
class ScenarioRealization:
    """Everything fixed across Monte-Carlo trials for one profile seed."""

    config: ScenarioConfig
    state: LocalizationState
    gains: ChannelGains
    combiner: Combiner
    profiles: RisProfileSet
    multipath: MultipathSet | None = None
    scattering: np.ndarray | None = None

    @property
    def paths(self) -> PropagationPaths:
        return propagation_paths(self.config, self.state, self.gains, self.multipath)

    def replace(self, **changes) -> "ScenarioRealization":
        return replace(self, **changes)

    def reflection_matrices(self) -> list[np.ndarray] | None:
        """Per-transmission coupled reflection matrices, or None without coupling."""
        if self.scattering is None:
            return None
        ups = self.profiles.upsilon
        return [mutual_coupling_reflection(ups[:, g], self.scattering) for g in range(ups.shape[1])]


def build_realization(config: ScenarioConfig, seed, multipath_points: int = 0,
                      scattering=None, state: LocalizationState | None = None,
                      rcs: float = 0.5) -> ScenarioRealization:
    """Draw gain phases, combiner, RIS profiles and scatter points from ``seed``."""
    rng = np.random.default_rng(seed)
    state = config.truth if state is None else state
    gains = draw_gains(config, rng, state)
    combiner = generate_combiner(config, rng)
    profiles = generate_profiles(config, rng, config_amplification(config, state))
    mp = MultipathSet.random(multipath_points, rng, rcs) if multipath_points > 0 else None
    return ScenarioRealization(config, state, gains, combiner, profiles, mp, scattering)


def build_channels(real: ScenarioRealization, k: int):
    """Explicit ``(h_L^k, h_R1^k, H_R2^k)`` for zero-based subcarrier ``k``."""
    cfg = real.config
    paths = real.paths
    df = cfg.delta_f
    h_L = sum(a * np.exp(-2j * np.pi * k * df * t) * array_response(cfg.bs_array, th, cfg.f_c)
              for a, t, th in zip(paths.bs_gain, paths.bs_delay, paths.bs_aoa))
    h_R1 = sum(a * array_response(cfg.ris_array, ph, cfg.f_c)
               for a, ph in zip(paths.in_gain, paths.in_aoa))
    H_R2 = sum(a * np.exp(-2j * np.pi * k * df * t)
               * np.outer(array_response(cfg.bs_array, th, cfg.f_c),
                          array_response(cfg.ris_array, ph, cfg.f_c))
               for a, t, th, ph in zip(paths.out_gain, paths.out_delay, paths.out_aoa, paths.out_aod))
    return h_L, h_R1, H_R2


def compact_ris_channel(gains: ChannelGains, phi_A: AnglePair, phi_D: AnglePair, gamma_g,
                        k: int, config: ScenarioConfig, theta_R: AnglePair, tau_R: float):
    """LOS UE-RIS-BS channel written through the combined RIS response."""
    a_comb = (array_response(config.ris_array, phi_A, config.f_c)
              * array_response(config.ris_array, phi_D, config.f_c))
    scalar = gains.alpha_R * (a_comb @ np.asarray(gamma_g))
    return scalar * np.exp(-2j * np.pi * k * config.delta_f * tau_R) \
        * array_response(config.bs_array, theta_R, config.f_c)


@dataclass
class _Beamspace:
    """Combined-port quantities shared by synthesis, covariance and SNR."""

    b_bs: np.ndarray        # (I_L+1, M) W^H a_B for UE-BS paths
    b_out: np.ndarray       # (I_R2+1, M) W^H a_B for RIS-BS paths
    e_bs: np.ndarray        # (I_L+1, K) delay phases
    e_out: np.ndarray       # (I_R2+1, K)
    refl_out: np.ndarray    # (I_R2+1, G, N_R) rows of a_R(phi_D)^T Gamma_g
    h_R1: np.ndarray        # (N_R,)
    paths: PropagationPaths


def _beamspace(real: ScenarioRealization) -> _Beamspace:
    cfg = real.config
    paths = real.paths
    W = real.combiner.W
    kk = np.arange(cfg.K)
    b_bs = np.array([W.conj().T @ array_response(cfg.bs_array, th, cfg.f_c) for th in paths.bs_aoa])
    b_out = np.array([W.conj().T @ array_response(cfg.bs_array, th, cfg.f_c) for th in paths.out_aoa])
    e_bs = np.exp(-2j * np.pi * cfg.delta_f * np.outer(paths.bs_delay, kk))
    e_out = np.exp(-2j * np.pi * cfg.delta_f * np.outer(paths.out_delay, kk))
    a_out = np.array([array_response(cfg.ris_array, ph, cfg.f_c) for ph in paths.out_aod])
    h_R1 = sum(a * array_response(cfg.ris_array, ph, cfg.f_c)
               for a, ph in zip(paths.in_gain, paths.in_aoa))
    refl = real.reflection_matrices()
    if refl is None:
        refl_out = a_out[:, None, :] * real.profiles.upsilon.T[None, :, :]
    else:
        refl_out = np.stack([np.stack([a @ R for R in refl]) for a in a_out])
    return _Beamspace(b_bs, b_out, e_bs, e_out, refl_out, h_R1, paths)


def noise_free_channels(real: ScenarioRealization):
    """Beamspace channels ``W^H h_{g,k}`` split into UE-BS and RIS parts, each ``(G, K, M)``."""
    bs = _beamspace(real)
    G = real.profiles.G
    los = np.einsum("i,ik,im->km", bs.paths.bs_gain, bs.e_bs, bs.b_bs)
    coef = bs.refl_out @ bs.h_R1                                   # (I, G)
    ris = np.einsum("i,ig,ik,im->gkm", bs.paths.out_gain, coef, bs.e_out, bs.b_out)
    return np.broadcast_to(los, (G,) + los.shape).copy(), ris


@dataclass(frozen=True)
class ObservationSet:
    """Received samples ``y[g, k, m]`` with everything that produced them."""

    y: np.ndarray
    pilots: np.ndarray
    combiner: Combiner
    profiles: RisProfileSet
    mu: np.ndarray
    config: ScenarioConfig
    realization: ScenarioRealization | None = None

    @property
    def W(self) -> np.ndarray:
        return self.combiner.W


def sample_noise(real: ScenarioRealization, rng, bs: _Beamspace | None = None) -> np.ndarray:
    """Combined noise ``W^H (H_R2^k Gamma_g n_r + n_0)``; shape ``(G, K, M)``."""
    cfg = real.config
    bs = _beamspace(real) if bs is None else bs
    G, K = real.profiles.G, cfg.K
    W = real.combiner.W
    nb, nr = W.shape[0], cfg.ris_array.size

    def cn(shape, var):
        return np.sqrt(var / 2) * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))

    n0 = cn((G, K, nb), cfg.sigma0_sq)
    noise = n0 @ W.conj()
    if cfg.sigmar_sq > 0:
        n_r = cn((G, K, nr), cfg.sigmar_sq)
        z = np.einsum("ign,gkn->igk", bs.refl_out, n_r)
        noise = noise + np.einsum("i,igk,ik,im->gkm", bs.paths.out_gain, z, bs.e_out, bs.b_out)
    return noise


def synthesize_observations(real: ScenarioRealization, seed=None, pilots=None,
                            noise: bool = True) -> ObservationSet:
    """Draw pilots (unless given) and noise, and form the received samples."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    cfg = real.config
    if pilots is None:
        pilots = generate_pilots(cfg, rng)
    bs = _beamspace(real)
    los, ris = noise_free_channels(real)
    mu = (los + ris) * pilots[:, :, None]
    y = mu + sample_noise(real, rng, bs) if noise else mu.copy()
    return ObservationSet(y, pilots, real.combiner, real.profiles, mu, cfg, real)


def ris_noise_operators(real: ScenarioRealization) -> np.ndarray:
    """``A_r^{g,k} = W^H H_R2^k Gamma_g``; shape ``(G, K, M, N_R)``."""
    bs = _beamspace(real)
    return np.einsum("i,ik,im,ign->gkmn", bs.paths.out_gain, bs.e_out, bs.b_out, bs.refl_out)


def noise_trace(real: ScenarioRealization) -> float:
    """Total noise power ``sum_{g,k} tr(C_0 + C_r^{g,k})``."""
    cfg = real.config
    W = real.combiner.W
    G, K = real.profiles.G, cfg.K
    total = G * K * cfg.sigma0_sq * np.linalg.norm(W) ** 2
    if cfg.sigmar_sq > 0:
        A = ris_noise_operators(real)
        total += cfg.sigmar_sq * np.sum(np.abs(A) ** 2)
    return float(total)


def received_snr(mu, total_noise: float) -> float:
    """``10 log10(sum |mu|^2 / total_noise)`` with infinite sentinels."""
    signal = float(np.sum(np.abs(mu) ** 2))
    if signal == 0:
        return -np.inf
    if total_noise == 0:
        return np.inf
    return 10 * np.log10(signal / total_noise)


def realization_snr(real: ScenarioRealization) -> float:
    """Received SNR of a realization; independent of the pilot phases since ``|x|^2 = P_T``."""
    los, ris = noise_free_channels(real)
    mu = (los + ris) * np.sqrt(real.config.P_T)
    return received_snr(mu, noise_trace(real))


def scale_noise_to_snr(real: ScenarioRealization, snr_db: float) -> ScenarioRealization:
    """Jointly scale both noise variances to hit ``snr_db``; the amplification is kept."""
    current = realization_snr(real)
    if not np.isfinite(current):
        raise ValueError("cannot rescale: the realization has zero signal or zero noise")
    s = 10 ** ((current - snr_db) / 10)
    cfg = real.config
    new_cfg = cfg.replace(sigma0_sq=cfg.sigma0_sq * s, sigmar_sq=cfg.sigmar_sq * s)
    return real.replace(config=new_cfg)
