import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from riscal.geometry import C_LIGHT, LocalizationState, forward_map
from riscal.localize import (
    SearchConfig, SearchFailure, candidate_solution, cost, grid_search, grid_search_path,
    intersection_distance,
)


def test_default_intersection_distance(cfg):
    eta = forward_map(cfg.truth, cfg.bs)
    # d_R = sqrt(72) + sqrt(50), so d_R^2 - d_L^2 = 122 + 2 sqrt(3600) - 22, and the BS-UE and
    # BS-RIS directions are orthogonal
    x = intersection_distance(eta, cfg.truth.clock_bias, cfg.bs)
    assert np.isclose(x, np.sqrt(50), rtol=1e-9)


def test_candidate_at_true_bias_is_exact(cfg):
    eta = forward_map(cfg.truth, cfg.bs)
    p_U, p_R = candidate_solution(eta, 0.0, cfg.truth.clock_bias, cfg.bs)
    assert np.allclose(p_U, cfg.truth.p_U, atol=1e-9)
    assert np.allclose(p_R, cfg.truth.p_R, atol=1e-9)
    assert cost(eta, cfg.truth.o3, cfg.truth.clock_bias, cfg.bs) < 1e-20


@given(st.floats(0.0, 150e-9))
@settings(max_examples=40, deadline=None)
def test_ellipsoid_identity(delta):
    from riscal.channel import ScenarioConfig
    cfg = ScenarioConfig.indoor()
    eta = forward_map(cfg.truth, cfg.bs)
    sol = candidate_solution(eta, 0.0, delta, cfg.bs)
    if sol is None:
        return
    p_U, p_R = sol
    d_R = C_LIGHT * (eta.tau_R - delta)
    lhs = np.linalg.norm(p_U - p_R) + np.linalg.norm(p_R - cfg.bs.position)
    assert np.isclose(lhs, d_R, rtol=1e-9)


def test_invalid_candidates(cfg):
    eta = forward_map(cfg.truth, cfg.bs)
    assert candidate_solution(eta, 0.0, -1e-9, cfg.bs) is None
    assert candidate_solution(eta, 0.0, eta.tau_L + 1e-9, cfg.bs) is None
    assert np.isinf(cost(eta, 0.0, -1e-9, cfg.bs))


def test_mirrored_yaw_rejected(cfg):
    eta = forward_map(cfg.truth, cfg.bs)
    assert np.isinf(cost(eta, np.pi, cfg.truth.clock_bias, cfg.bs))


def test_single_candidate_grid_exact(cfg):
    eta = forward_map(cfg.truth, cfg.bs)
    sc = SearchConfig([cfg.truth.o3], [cfg.truth.clock_bias], rounds=0)
    est = grid_search(eta, sc, cfg.bs)
    assert np.allclose(est.p_U, cfg.truth.p_U, atol=1e-9)
    assert np.allclose(est.p_R, cfg.truth.p_R, atol=1e-9)


def test_all_invalid_raises(cfg):
    eta = forward_map(cfg.truth, cfg.bs)
    with pytest.raises(SearchFailure):
        grid_search(eta, SearchConfig([0.0], [eta.tau_L + 1e-9], rounds=0), cfg.bs)


def test_search_config_validation():
    with pytest.raises(ValueError):
        SearchConfig([], [0.0])
    with pytest.raises(ValueError):
        SearchConfig([0.0], [0.0], kappa=1.0)


def test_default_grid_extents():
    sc = SearchConfig.default(100e6 / 32)
    assert sc.o3_grid.size == 64 and sc.delta_grid.size == 64
    assert np.isclose(sc.d_o3, 2 * np.pi / 64)
    assert sc.delta_grid.min() == 0 and sc.delta_grid.max() < 0.9 * 32 / 100e6
    off = SearchConfig.dithered(100e6 / 32, np.random.default_rng(0))
    assert np.isclose(off.d_delta, sc.d_delta)


def test_winner_cost_non_increasing(cfg):
    eta = forward_map(cfg.truth.replace(p_U=np.array([1.0, -1.0, 1.2])), cfg.bs)
    path = grid_search_path(eta, SearchConfig.default(cfg.delta_f), cfg.bs)
    costs = [r.cost for r in path]
    assert all(b <= a for a, b in zip(costs, costs[1:]))
    assert [r.d_delta for r in path] == pytest.approx([path[0].d_delta * 0.1 ** q for q in range(4)])


def test_noise_free_search_within_resolution(cfg):
    eta = forward_map(cfg.truth, cfg.bs)
    sc = SearchConfig.default(cfg.delta_f)
    est = grid_search(eta, sc, cfg.bs)
    _, d_delta = sc.final_resolution()
    # UE error is c times the bias error; the bias error is at most half a final cell
    assert np.linalg.norm(est.p_U - cfg.truth.p_U) <= C_LIGHT * d_delta


def test_round_trip_random_geometries(cfg):
    # UEs on the BS half of the room; the far half admits exact ambiguities (see below)
    rng = np.random.default_rng(11)
    sc = SearchConfig.default(cfg.delta_f)
    worst = 0.0
    for _ in range(50):
        s = LocalizationState(rng.uniform([-4, 0.5, 0.5], [4, 4.5, 2]), cfg.truth.p_R, rng.uniform(-0.4, 0.4),
                              rng.uniform(10e-9, 150e-9))
        eta = forward_map(s, cfg.bs)
        est = grid_search(eta, sc, cfg.bs)
        worst = max(worst, np.linalg.norm(est.p_U - s.p_U))
    assert worst < 0.01


def test_far_side_exact_ambiguity(cfg):
    s = LocalizationState(np.array([-0.85, -2.34, 1.13]), cfg.truth.p_R, 0.145, 90.86e-9)
    eta = forward_map(s, cfg.bs)
    est = grid_search(eta, SearchConfig.default(cfg.delta_f, n_o3=256, n_delta=256), cfg.bs)
    # a different state reproduces the same channel parameters
    assert np.linalg.norm(est.p_U - s.p_U) > 1.0
    assert cost(eta, est.o3, est.clock_bias, cfg.bs) < 1e-9
