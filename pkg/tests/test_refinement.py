"""Frenet transforms, bicycle dynamics round trips, Gauss-Newton
contracts, Gaussian-potential safety costs, and both refinement modes."""

import math

import numpy as np
import pytest

import hybridplan.refinement as rf
from hybridplan.autodiff import Tensor, fd_check
from hybridplan.config import RefineConfig
from hybridplan.errors import ConfigurationError, ProjectionError, SolverError
from hybridplan.gtformer import GmmPolicy
from hybridplan.scene import GridSpec


def straight_route(length=60.0):
    xs = np.linspace(-10.0, length, int((length + 10) / 0.5) + 1)
    return rf.ReferenceRoute(np.stack([xs, np.zeros_like(xs)], axis=-1))


def arc_route(radius=20.0):
    ang = np.linspace(-np.pi / 2, np.pi / 2, 200)
    pts = np.stack([radius * np.cos(ang), radius * np.sin(ang) + radius], axis=-1)
    return rf.ReferenceRoute(pts)


# -- frenet ------------------------------------------------------------------------------

def test_frenet_straight_route_coordinates():
    route = straight_route()
    s, d = route.to_frenet(np.array([3.0, 2.0]))
    assert abs(s - 13.0) < 1e-12   # route starts at x=-10
    assert abs(d - 2.0) < 1e-12


def test_frenet_on_route_zero_lateral():
    route = straight_route()
    for x in (0.0, 5.5, 20.25):
        _, d = route.to_frenet(np.array([x, 0.0]))
        assert abs(d) < 1e-12


def test_frenet_round_trip_straight_and_arc():
    rng = np.random.default_rng(0)
    for route in (straight_route(), arc_route(20.0)):
        pts = route.points
        lo, hi = pts.min(0), pts.max(0)
        count = 0
        while count < 100:
            p = rng.uniform(lo - 3, hi + 3)
            try:
                s, d = route.to_frenet(p)
            except ProjectionError:
                continue
            back = route.from_frenet(s, d)
            assert np.linalg.norm(back - p) < 1e-6
            count += 1


def test_frenet_frames_unit_and_orthogonal():
    route = arc_route(20.0)
    assert np.allclose(np.linalg.norm(route.seg_dirs, axis=1), 1.0, atol=1e-12)
    dots = np.einsum("ij,ij->i", route.seg_dirs, route.seg_normals)
    assert np.allclose(dots, 0.0, atol=1e-12)
    assert np.all(np.diff(route.cum_s) > 0)
    assert np.max(np.diff(route.cum_s)) <= 0.5 + 1e-9


def test_frenet_corridor_error():
    route = straight_route()
    with pytest.raises(ProjectionError):
        route.to_frenet(np.array([5.0, 30.0]))


def test_route_from_polyline_spacing():
    route = rf.route_from_polyline(np.array([[0.0, 0.0], [10.0, 0.0], [10.0, 10.0]]))
    assert np.max(np.diff(route.cum_s)) <= 0.5 + 1e-12


# -- dynamics -----------------------------------------------------------------------------

def test_forward_dynamics_basic_step():
    state, clamped = rf.forward_dynamics((0.0, 0.0, 0.0, 2.0), (0.0, 0.0), 0.5)
    assert state == (1.0, 0.0, 0.0, 2.0)
    assert not clamped


def test_forward_dynamics_zero_steer_keeps_heading():
    state = (0.0, 0.0, 0.7, 3.0)
    for _ in range(10):
        state, _ = rf.forward_dynamics(state, (0.2, 0.0), 0.5)
    assert abs(state[2] - 0.7) < 1e-12


def test_forward_dynamics_speed_clamped():
    state, clamped = rf.forward_dynamics((0.0, 0.0, 0.0, 1.0), (-5.0, 0.0), 0.5)
    assert state[3] == 0.0 and clamped


def test_dynamics_round_trip_slalom():
    # feasible slalom built by the same discrete model round-trips exactly
    state0 = (0.0, 0.0, 0.0, 5.0)
    controls = np.zeros((10, 2))
    controls[:, 0] = 0.4
    controls[:, 1] = 0.25 * np.sin(np.arange(10))
    states = rf.rollout_controls(state0, controls, 0.5)
    tau = states[1:, 0:2]
    seq = rf.inverse_dynamics(tau, state0, 0.5)
    assert seq.feasible
    rebuilt = rf.rollout_controls(state0, seq.controls, 0.5)
    err = np.abs(rebuilt[1:, 0:2] - tau).max()
    assert err < 1e-6


def test_inverse_dynamics_flags_infeasible():
    tau = np.zeros((5, 2))
    tau[:, 0] = [40.0, 80.0, 120.0, 160.0, 200.0]   # absurd accelerations
    seq = rf.inverse_dynamics(tau, (0.0, 0.0, 0.0, 2.0), 0.5)
    assert not seq.feasible


def test_tensor_rollout_matches_scalar():
    state0 = (1.0, -2.0, 0.3, 4.0)
    rng = np.random.default_rng(1)
    controls = np.stack([rng.uniform(-1, 1, 6), rng.uniform(-0.3, 0.3, 6)], axis=-1)
    want = rf.rollout_controls(state0, controls, 0.5)
    pos, head, speed = rf.rollout_controls_tensor(state0, Tensor(controls), 0.5)
    assert np.allclose(pos.data, want[1:, 0:2], atol=1e-12)
    assert np.allclose(speed.data[:, 0], want[1:, 3], atol=1e-12)


def test_tensor_rollout_fd():
    state0 = (0.0, 0.0, 0.1, 3.0)
    rng = np.random.default_rng(2)
    controls = np.stack([rng.uniform(-1, 1, 4), rng.uniform(-0.2, 0.2, 4)], axis=-1)

    def f(ts):
        pos, _, speed = rf.rollout_controls_tensor(state0, ts[0].reshape((4, 2)), 0.5)
        return (pos * np.arange(8.0).reshape(4, 2)).sum() + speed.sum()

    assert fd_check(f, [controls.reshape(-1)], h=1e-6) < 1e-5


# -- gaussian safety cost -----------------------------------------------------------------

def grid16():
    return GridSpec(16, 16, 1.0, 3, 0.5)


def test_safety_anchor_density_at_mean():
    # plan point exactly on a p=1 occupied cell center, sigma=1 -> 1/(2*pi)
    spec = grid16()
    occ = np.zeros((3, 16, 16))
    cell = spec.cell_of(np.array([0.5, 0.5]))
    occ[0, cell[0], cell[1]] = 1.0
    center = spec.cell_center(cell)
    tau = np.tile(center, (3, 1))
    cfg = RefineConfig()
    res = rf.safety_residuals(Tensor(tau), occ, spec, None, cfg)
    assert abs(res[0].item() - 1.0 / (2.0 * math.pi)) < 1e-12
    assert res[1].item() == 0.0


def test_safety_zero_beyond_thresholds():
    spec = grid16()
    occ = np.zeros((3, 16, 16))
    occ[:, 0, 0] = 1.0   # far corner: beyond D1 of the plan
    rng = np.random.default_rng(0)
    means = np.full((1, 2, 2, 3, 2), 7.9)   # within grid, beyond D2 of origin plan
    policy = GmmPolicy(Tensor(means), Tensor(np.zeros_like(means)),
                       Tensor(np.full((1, 2, 2), 0.5)), 0)
    tau = np.zeros((3, 2))
    cfg = RefineConfig()
    res = rf.safety_residuals(Tensor(tau), occ, spec, policy, cfg)
    assert all(r.item() == 0.0 for r in res)


def test_safety_matches_exhaustive_oracle():
    spec = GridSpec(4, 4, 1.0, 2, 0.5)
    rng = np.random.default_rng(3)
    occ = rng.random((2, 4, 4)) * 0.9
    means = rng.uniform(-2, 2, (1, 3, 2, 2, 2))
    stds = np.exp(rng.uniform(-0.3, 0.3, means.shape))
    probs = rng.random((1, 3, 2))
    probs /= probs.sum(-1, keepdims=True)
    policy = GmmPolicy(Tensor(means), Tensor(np.log(stds)), Tensor(probs), 0)
    tau = rng.uniform(-1.5, 1.5, (2, 2))
    cfg = RefineConfig()
    res = rf.safety_residuals(Tensor(tau), occ, spec, policy, cfg)
    for t in range(2):
        want = 0.0
        for i in range(4):
            for j in range(4):
                p = occ[t, i, j]
                if p <= cfg.occ_prob_floor:
                    continue
                c = spec.cell_center(np.array([i, j]))
                if np.linalg.norm(c - tau[t]) > cfg.occ_threshold_m:
                    continue
                dx, dy = tau[t] - c
                want += p * math.exp(-0.5 * (dx * dx + dy * dy)) / (2 * math.pi)
        for a in range(1, 3):
            for m in range(2):
                y = means[0, a, m, t]
                if np.linalg.norm(y - tau[t]) > cfg.agent_threshold_m:
                    continue
                sx, sy = stds[0, a, m, t]
                dx, dy = tau[t] - y
                dens = math.exp(-0.5 * ((dx / sx) ** 2 + (dy / sy) ** 2)) / (2 * math.pi * sx * sy)
                want += probs[0, a, m] * dens
        assert abs(res[t].item() - want) < 1e-12


def test_safety_permutation_invariant_over_agents():
    spec = grid16()
    rng = np.random.default_rng(5)
    occ = np.zeros((2, 16, 16))
    means = rng.uniform(-3, 3, (1, 4, 2, 2, 2))
    stds = np.ones_like(means)
    probs = np.full((1, 4, 2), 0.5)
    tau = rng.uniform(-1, 1, (2, 2))
    cfg = RefineConfig()

    def total(mn):
        policy = GmmPolicy(Tensor(mn), Tensor(np.zeros_like(mn)), Tensor(probs), 0)
        return sum(r.item() for r in rf.safety_residuals(Tensor(tau), occ, spec, policy, cfg))

    base = total(means)
    perm = means.copy()
    perm[0, 1:] = means[0, [3, 1, 2]]   # permute the neighbors
    assert abs(total(perm) - base) < 1e-12


def test_safety_gradient_fd():
    spec = GridSpec(8, 8, 1.0, 2, 0.5)
    rng = np.random.default_rng(6)
    occ = (rng.random((2, 8, 8)) > 0.6) * 0.8
    tau0 = rng.uniform(-1.0, 1.0, (2, 2))

    def f(ts):
        res = rf.safety_residuals(ts[0].reshape((2, 2)), occ, spec, None, RefineConfig())
        return sum((r * r for r in res), Tensor(np.zeros(())))

    assert fd_check(f, [tau0.reshape(-1)], h=1e-6) < 1e-4


# -- auxiliary costs ----------------------------------------------------------------------

def test_auxiliary_zero_on_route_at_target_speed():
    route = straight_route()
    cfg = RefineConfig()
    state0 = (0.0, 0.0, 0.0, 5.0)
    controls = np.zeros((4, 2))
    pos, head, speed = rf.rollout_controls_tensor(state0, Tensor(controls), 0.5)
    aux = rf.auxiliary_residuals(Tensor(controls), pos, head, speed, route, cfg,
                                 0.5, v_target=5.0, v0=5.0)
    for group in ("progress", "comfort", "rule"):
        for r in aux[group]:
            assert abs(r.item()) < 1e-12


def test_auxiliary_lateral_offset_residual():
    route = straight_route()
    cfg = RefineConfig()
    state0 = (0.0, 1.0, 0.0, 4.0)   # 1 m left of the route
    controls = np.zeros((3, 2))
    pos, head, speed = rf.rollout_controls_tensor(state0, Tensor(controls), 0.5)
    aux = rf.auxiliary_residuals(Tensor(controls), pos, head, speed, route, cfg,
                                 0.5, 4.0, 4.0)
    lateral = [aux["rule"][2 * t].item() for t in range(3)]
    assert np.allclose(lateral, 1.0, atol=1e-9)


def test_auxiliary_jerk_matches_fd_of_accel():
    route = straight_route()
    cfg = RefineConfig()
    state0 = (0.0, 0.0, 0.0, 2.0)
    accel = np.array([0.0, 0.5, 1.0, 1.5])  # quadratic speed profile
    controls = np.stack([accel, np.zeros(4)], axis=-1)
    pos, head, speed = rf.rollout_controls_tensor(state0, Tensor(controls), 0.5)
    aux = rf.auxiliary_residuals(Tensor(controls), pos, head, speed, route, cfg,
                                 0.5, 2.0, 2.0)
    # comfort rows: a_0, lat_0, then (a_t, jerk_t, lat_t) per later step
    jerks = [aux["comfort"][2 + 3 * t + 1].item() for t in range(3)]
    want = np.diff(accel) / 0.5
    assert np.allclose(jerks, want, atol=1e-12)


def test_auxiliary_requires_route():
    with pytest.raises(ConfigurationError):
        rf.auxiliary_residuals(Tensor(np.zeros((2, 2))), Tensor(np.zeros((2, 2))),
                               Tensor(np.zeros((2, 1))), Tensor(np.zeros((2, 1))),
                               None, RefineConfig(), 0.5, 1.0, 1.0)


# -- gauss-newton ----------------------------------------------------------------------------

def test_gn_linear_residual_one_iteration():
    def residual_fn(u):
        return [("main", (u[0] - 3.0))]

    u, c0, c1 = rf.gauss_newton(np.array([0.0]), residual_fn, max_iterations=1)
    assert abs(u[0] - 3.0) < 1e-10


def test_gn_zero_weights_no_move():
    def residual_fn(u):
        return [("main", (u[0] - 3.0))]

    u, c0, c1 = rf.gauss_newton(np.array([0.5]), residual_fn, weights={"main": 0.0})
    assert u[0] == 0.5


def test_gn_two_quadratic_toy():
    def residual_fn(u):
        return [("a", u[0] - 1.0), ("b", u[0] - 3.0)]

    u, c0, c1 = rf.gauss_newton(np.array([0.0]), residual_fn)
    assert abs(u[0] - 2.0) < 1e-8


def test_gn_never_worse_on_random_problems():
    rng = np.random.default_rng(0)
    for trial in range(100):
        a = rng.standard_normal((3, 2))
        b = rng.standard_normal(3)

        def residual_fn(u):
            rows = []
            for i in range(3):
                r = (u * Tensor(a[i])).sum() + float(b[i])
                r = r + (r * r) * 0.1   # mild nonlinearity
                rows.append(("main", r))
            return rows

        u0 = rng.standard_normal(2)
        u, c0, c1 = rf.gauss_newton(u0, residual_fn, max_iterations=5)
        assert c1 <= c0 + 1e-12


def test_gn_singular_raises():
    def residual_fn(u):
        return [("main", u[0] * float("nan"))]

    with pytest.raises((SolverError, Exception)):
        rf.gauss_newton(np.array([1.0]), residual_fn)


# -- refinement modes ---------------------------------------------------------------------------

def test_optimize_path_no_conflicts_identity():
    spec = grid16()
    occ = np.zeros((3, 16, 16))
    tau = np.array([[1.0, 0.0], [2.0, 0.0], [3.0, 0.0]])
    result = rf.optimize_path(tau, occ, spec, None, RefineConfig())
    assert np.array_equal(result.tau, tau)
    assert result.final_cost == 0.0


def test_optimize_path_avoids_occupied_cell():
    spec = grid16()
    occ = np.zeros((3, 16, 16))
    # occupied cell 1 m ahead of the step-1 waypoint, slightly offset laterally
    cell = spec.cell_of(np.array([3.0, 0.0]))
    occ[1, cell[0], cell[1]] = 1.0
    tau = np.array([[1.0, 0.25], [2.0, 0.25], [3.0, 0.25]])
    cfg = RefineConfig(max_iterations=10)
    result = rf.optimize_path(tau, occ, spec, None, cfg)
    assert result.final_cost <= result.initial_cost
    moved = np.abs(result.tau[1:, 1] - tau[1:, 1]).max()
    assert moved >= 0.5


def test_optimize_path_cost_never_exceeds_initial():
    spec = grid16()
    rng = np.random.default_rng(1)
    for _ in range(5):
        occ = (rng.random((3, 16, 16)) > 0.8) * rng.random((3, 16, 16))
        tau = rng.uniform(-4, 4, (3, 2))
        result = rf.optimize_path(tau, occ, spec, None, RefineConfig())
        assert result.final_cost <= result.initial_cost + 1e-12


def test_optimize_motion_expert_identity():
    # constant-speed straight expert on its own route with no conflicts
    spec = grid16()
    occ = np.zeros((3, 16, 16))
    route = straight_route()
    state0 = (0.0, 0.0, 0.0, 4.0)
    controls = np.zeros((3, 2))
    tau = rf.rollout_controls(state0, controls, 0.5)[1:, 0:2]
    cfg = RefineConfig(mode="motion")
    result = rf.optimize_motion(tau, occ, spec, None, route, state0, cfg, 0.5,
                                v_target=4.0)
    assert result.mode == "motion" and not result.fallback
    assert np.abs(result.tau - tau).max() < 1e-3


def test_optimize_motion_speed_limit_enforced():
    spec = grid16()
    occ = np.zeros((4, 16, 16))
    route = straight_route()
    state0 = (0.0, 0.0, 0.0, 6.0)
    controls = np.zeros((4, 2))
    controls[:, 0] = 2.0   # accelerate beyond the limit
    tau = rf.rollout_controls(state0, controls, 0.5)[1:, 0:2]
    cfg = RefineConfig(mode="motion", speed_limit=6.0, weight_progress=0.0)
    result = rf.optimize_motion(tau, occ, spec, None, route, state0, cfg, 0.5,
                                v_target=6.0)
    speeds_before = np.linalg.norm(np.diff(np.concatenate([[state0[:2]], tau]), axis=0),
                                   axis=1) / 0.5
    speeds_after = np.linalg.norm(np.diff(np.concatenate([[state0[:2]], result.tau]),
                                          axis=0), axis=1) / 0.5
    assert speeds_after.max() <= speeds_before.max() + 1e-9


def test_optimize_motion_infeasible_falls_back_to_path():
    spec = grid16()
    occ = np.zeros((3, 16, 16))
    route = straight_route()
    tau = np.array([[50.0, 0.0], [100.0, 0.0], [150.0, 0.0]])   # absurd speeds
    cfg = RefineConfig(mode="motion")
    result = rf.optimize_motion(tau, occ, spec, None, route, (0.0, 0.0, 0.0, 2.0),
                                cfg, 0.5)
    assert result.fallback and result.mode == "path"


def test_optimize_motion_controls_within_limits():
    spec = grid16()
    rng = np.random.default_rng(2)
    occ = (rng.random((3, 16, 16)) > 0.7) * 1.0
    route = straight_route()
    state0 = (0.0, 0.0, 0.0, 5.0)
    controls = np.stack([rng.uniform(-2, 2, 3), rng.uniform(-0.3, 0.3, 3)], axis=-1)
    tau = rf.rollout_controls(state0, controls, 0.5)[1:, 0:2]
    cfg = RefineConfig(mode="motion")
    result = rf.optimize_motion(tau, occ, spec, None, route, state0, cfg, 0.5)
    seq = rf.inverse_dynamics(result.tau, state0, 0.5)
    assert np.abs(seq.controls[:, 0]).max() <= cfg.accel_limit + 1e-6
    assert np.abs(seq.controls[:, 1]).max() <= cfg.steer_limit + 1e-6
