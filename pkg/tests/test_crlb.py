import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from riscal.channel import ChannelGains, scale_noise_to_snr
from riscal.crlb import (
    FimMatrix, SingularFimError, channel_fim, efim, error_bounds, fim_localization, fim_multi_bs, localization_bounds,
    localization_fim, noise_covariance, real_block, realization_covariances,
)
from riscal.harness import DEFAULT_EXTRA_BS


def test_real_block_represents_complex_product(rng):
    A = rng.standard_normal((4, 4)) + 1j * rng.standard_normal((4, 4))
    x = rng.standard_normal(4) + 1j * rng.standard_normal(4)
    y = A @ x
    assert np.allclose(real_block(A) @ np.r_[x.real, x.imag], np.r_[y.real, y.imag])


def test_real_block_covariance_matches_samples(rng):
    # x = A n with n ~ CN(0, s I): Cov([Re x; Im x]) = s/2 real_block(A A^H)
    A = rng.standard_normal((3, 5)) + 1j * rng.standard_normal((3, 5))
    s = 2.0
    n = np.sqrt(s / 2) * (rng.standard_normal((5, 200000)) + 1j * rng.standard_normal((5, 200000)))
    x = A @ n
    emp = np.cov(np.r_[x.real, x.imag])
    ref = noise_covariance(A.conj().T, sigma0_sq=s).C0
    assert np.allclose(emp, ref, atol=0.03 * np.abs(ref).max())


@given(arrays(float, (12, 12), elements=st.floats(-1, 1)))
@settings(max_examples=40, deadline=None)
def test_efim_is_inverse_of_inverse_block(B):
    J = B @ B.T + 12 * np.eye(12)
    F = FimMatrix(J, tuple(f"x{i}" for i in range(12)))
    keep = tuple(f"x{i}" for i in range(8))
    E = efim(F, keep).matrix
    inv = np.linalg.inv(J)[:8, :8]
    assert np.allclose(np.linalg.inv(E), inv, rtol=1e-8, atol=1e-12)


def test_efim_singular_nuisance_raises():
    J = np.eye(3)
    J[2, 2] = 0
    with pytest.raises(SingularFimError):
        efim(FimMatrix(J, ("a", "b", "c")), ("a",))


def test_channel_fim_symmetric_psd(real30):
    J = channel_fim(real30)
    assert J.is_symmetric() and J.is_psd()
    assert not J.flags.get("ridge")


def test_localization_fim_symmetric_psd(real30):
    J = localization_fim(real30)
    assert J.is_symmetric() and J.is_psd()
    assert np.isfinite(J.condition())


def test_bound_scales_with_sqrt_snr(real):
    a = localization_bounds(scale_noise_to_snr(real, 20.0))
    b = localization_bounds(scale_noise_to_snr(real, 30.0))
    for k in a:
        assert np.isclose(a[k] / b[k], np.sqrt(10), rtol=1e-6)


def test_gain_phases_barely_change_bounds(real30):
    # phases only enter through the overlap of the LOS and RIS responses
    g = real30.gains
    rot = real30.replace(gains=ChannelGains(g.alpha_L * np.exp(1.1j), g.alpha_R1 * np.exp(-0.4j), g.alpha_R2))
    bs = real30.config.bs
    a = error_bounds(fim_localization(efim(channel_fim(real30)), real30.state, bs))
    b = error_bounds(fim_localization(efim(channel_fim(rot)), real30.state, bs))
    for k in a:
        assert np.isclose(a[k], b[k], rtol=1e-3)


def test_priors_and_extra_bs_reduce_bounds(real30):
    base = localization_bounds(real30)
    for known in (("o3",), ("delta",), ("o3", "delta")):
        eb = localization_bounds(real30, known=known)
        assert eb["p_U"] <= base["p_U"] * (1 + 1e-9)
        assert all(k not in eb for k in known)
    one = localization_bounds(real30, extra_bs=DEFAULT_EXTRA_BS[:1])
    two = localization_bounds(real30, extra_bs=DEFAULT_EXTRA_BS)
    assert two["p_U"] <= one["p_U"] <= base["p_U"]


def test_multi_bs_is_sum():
    a = FimMatrix(np.eye(2), ("x", "y"))
    b = FimMatrix(2 * np.eye(2), ("x", "y"))
    assert np.allclose(fim_multi_bs([a, b]).matrix, 3 * np.eye(2))
    with pytest.raises(ValueError):
        fim_multi_bs([a, FimMatrix(np.eye(2), ("x", "z"))])


def test_singular_fim_gives_infinite_bounds():
    J = FimMatrix(np.diag([1.0, 0.0, 1.0]), ("pU_x", "pU_y", "pU_z"))
    assert error_bounds(J) == {"p_U": np.inf}


def test_passive_noise_is_thermal_only(real30):
    cov = realization_covariances(real30.replace(config=real30.config.replace(sigmar_sq=0.0)))
    assert np.all(cov.Cr == 0)
    assert np.allclose(cov.total(), cov.C0)


def test_los_covariance_is_shared(real30):
    cov = realization_covariances(real30)
    assert cov.shared
    W = real30.combiner.W
    assert np.allclose(cov.C0, 0.5 * real30.config.sigma0_sq * real_block(W.conj().T @ W))
