"""Hybrid-prediction-guided plan refinement.

Cost profiles (Gaussian-potential safety, progress, comfort, rules), a
polyline Frenet frame whose two transforms are exact inverses, the
discrete kinematic bicycle with an exact algebraic inverse, and a damped
Gauss-Newton solver over either raw waypoints (path mode, safety cost
only) or control sequences (motion mode, all costs in the Frenet frame).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, backward
from .config import RefineConfig
from .errors import ConfigurationError, ContractError, ProjectionError, SolverError
from .gtformer import GmmPolicy
from .scene import GridSpec, normalize_angle

Array = np.ndarray

TWO_PI = 2.0 * math.pi


# -- reference route -----------------------------------------------------------------

@dataclass
class ReferenceRoute:
    """Densely resampled route polyline with per-segment frames.

    to_frenet / from_frenet use the same per-segment tangent/normal pair,
    so the round trip is exact (up to fp) anywhere inside the corridor.
    """

    points: Array          # (P, 2), spacing <= 0.5 m
    corridor: float = 10.0
    seg_dirs: Array = field(init=False)
    seg_len: Array = field(init=False)
    seg_normals: Array = field(init=False)
    cum_s: Array = field(init=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] < 2:
            raise ConfigurationError("reference route needs at least 2 points")
        diffs = np.diff(pts, axis=0)
        lens = np.linalg.norm(diffs, axis=1)
        if np.any(lens <= 0):
            raise ConfigurationError("route points must be strictly increasing in arc length")
        self.points = pts
        self.seg_dirs = diffs / lens[:, None]
        self.seg_len = lens
        self.seg_normals = np.stack([-self.seg_dirs[:, 1], self.seg_dirs[:, 0]], axis=-1)
        self.cum_s = np.concatenate([[0.0], np.cumsum(lens)])

    @property
    def length(self) -> float:
        return float(self.cum_s[-1])

    def tangent_at(self, s: float) -> Array:
        i = self._segment_of_s(s)
        return self.seg_dirs[i]

    def _segment_of_s(self, s: float) -> int:
        i = int(np.searchsorted(self.cum_s, s, side="right")) - 1
        return min(max(i, 0), len(self.seg_len) - 1)

    def to_frenet(self, point: Array) -> tuple[float, float]:
        """(s, d) by perpendicular projection onto the nearest segment."""
        p = np.asarray(point, dtype=np.float64)
        rel = p[None, :] - self.points[:-1]
        u = np.einsum("ij,ij->i", rel, self.seg_dirs)
        u = np.clip(u, 0.0, self.seg_len)
        foot = self.points[:-1] + u[:, None] * self.seg_dirs
        d_vec = p[None, :] - foot
        dist = np.linalg.norm(d_vec, axis=1)
        i = int(np.argmin(dist))
        d = float(np.dot(p - foot[i], self.seg_normals[i]))
        if abs(d) > self.corridor:
            raise ProjectionError(f"point {p.tolist()} lies {abs(d):.2f} m from the route "
                                  f"(corridor {self.corridor} m)")
        s = float(self.cum_s[i] + u[i])
        return s, d

    def from_frenet(self, s: float, d: float) -> Array:
        i = self._segment_of_s(s)
        u = s - self.cum_s[i]
        return self.points[i] + u * self.seg_dirs[i] + d * self.seg_normals[i]

    def to_frenet_many(self, pts: Array) -> Array:
        return np.array([self.to_frenet(p) for p in np.asarray(pts, dtype=np.float64)])

    def lateral_tensor(self, positions: Tensor) -> Tensor:
        """Signed lateral offsets d for a (T, 2) position tensor; the segment
        assignment is frozen from the forward values (projection is local)."""
        pos = positions.data
        idx = []
        for p in pos:
            rel = p[None, :] - self.points[:-1]
            u = np.einsum("ij,ij->i", rel, self.seg_dirs)
            u = np.clip(u, 0.0, self.seg_len)
            foot = self.points[:-1] + u[:, None] * self.seg_dirs
            idx.append(int(np.argmin(np.linalg.norm(p[None, :] - foot, axis=1))))
        idx = np.array(idx)
        normals = self.seg_normals[idx]
        starts = self.points[:-1][idx]
        return ((positions - Tensor(starts)) * Tensor(normals)).sum(axis=-1)


def route_from_polyline(points: Array, spacing: float = 0.5, corridor: float = 10.0) -> ReferenceRoute:
    """Resample a sparse polyline so consecutive spacing is <= ``spacing``."""
    pts = np.asarray(points, dtype=np.float64)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    out = [pts[0]]
    for a, b, ln in zip(pts[:-1], pts[1:], seg):
        n = max(1, int(math.ceil(ln / spacing)))
        for k in range(1, n + 1):
            out.append(a + (b - a) * (k / n))
    return ReferenceRoute(np.array(out), corridor=corridor)


# -- dynamics ---------------------------------------------------------------------------

@dataclass
class ControlSequence:
    controls: Array          # (T, 2): accel, steer
    states: Array            # (T+1, 4): x, y, heading, speed chain
    feasible: bool = True
    clamped_speed: bool = False


def forward_dynamics(state: tuple[float, float, float, float], control: tuple[float, float],
                     dt: float, wheelbase: float = 2.8) -> tuple[tuple, bool]:
    """One discrete bicycle step; returns (state', speed_was_clamped)."""
    if dt <= 0:
        raise ConfigurationError(f"dt must be positive, got {dt}")
    x, y, psi, v = state
    a, delta = control
    x2 = x + v * math.cos(psi) * dt
    y2 = y + v * math.sin(psi) * dt
    psi2 = normalize_angle(psi + (v / wheelbase) * math.tan(delta) * dt)
    v2 = v + a * dt
    clamped = v2 < 0.0
    return (x2, y2, psi2, max(v2, 0.0)), clamped


def rollout_controls(state0, controls: Array, dt: float, wheelbase: float = 2.8) -> Array:
    """(T+1, 4) state chain from executing the control rows."""
    states = [tuple(map(float, state0))]
    for a, d in np.asarray(controls, dtype=np.float64):
        nxt, _ = forward_dynamics(states[-1], (a, d), dt, wheelbase)
        states.append(nxt)
    return np.array(states)


def inverse_dynamics(tau: Array, state0, dt: float, wheelbase: float = 2.8,
                     accel_limit: float = 5.0, steer_limit: float = 0.6) -> ControlSequence:
    """Recover (a, delta) per interval from consecutive plan poses.

    Exact algebraic inverse of the discrete bicycle for feasible plans:
    speeds from displacement norms, headings from displacement directions,
    then finite differences. Controls beyond the limits mark the sequence
    infeasible (callers fall back to path mode).
    """
    tau = np.asarray(tau, dtype=np.float64)
    t_total = tau.shape[0]
    x0, y0, psi0, v0 = (float(s) for s in state0)
    pts = np.concatenate([[[x0, y0]], tau], axis=0)
    deltas = np.diff(pts, axis=0)          # displacement t uses (v_t, psi_t)
    norms = np.linalg.norm(deltas, axis=1)
    speeds = norms / dt                    # v_t for t = 0..T-1
    headings = np.empty(t_total)
    headings[0] = psi0
    for t in range(1, t_total):
        if norms[t] > 1e-9:
            headings[t] = math.atan2(deltas[t, 1], deltas[t, 0])
        else:
            headings[t] = headings[t - 1]
    controls = np.zeros((t_total, 2))
    feasible = True
    for t in range(t_total - 1):
        a = (speeds[t + 1] - speeds[t]) / dt
        dpsi = normalize_angle(headings[t + 1] - headings[t])
        if speeds[t] * dt > 1e-9:
            delta = math.atan(dpsi * wheelbase / (speeds[t] * dt))
        else:
            delta = 0.0
        if abs(a) > accel_limit + 1e-9 or abs(delta) > steer_limit + 1e-9:
            feasible = False
        controls[t] = (np.clip(a, -accel_limit, accel_limit),
                       np.clip(delta, -steer_limit, steer_limit))
    # the final control never influences the rebuilt positions
    states = rollout_controls((x0, y0, psi0, v0), controls, dt, wheelbase)
    # consistency of the plan's first interval with the current state
    if abs(norms[0] / dt - v0) > 0.5 or (norms[0] > 1e-6 and
                                         abs(normalize_angle(math.atan2(deltas[0, 1], deltas[0, 0])
                                                             - psi0)) > 0.5):
        feasible = False
    return ControlSequence(controls, states, feasible=feasible)


def rollout_controls_tensor(state0, controls: Tensor, dt: float,
                            wheelbase: float = 2.8) -> tuple[Tensor, Tensor, Tensor]:
    """Differentiable state chain: returns (positions (T,2), headings (T,), speeds (T,))
    for the T post-step states."""
    x0, y0, psi0, v0 = (float(s) for s in state0)
    t_total = controls.shape[0]
    xs, psis, vs = [], [], []
    psi = Tensor(np.array([psi0]))
    v = Tensor(np.array([v0]))
    pos = Tensor(np.array([[x0, y0]]))
    for t in range(t_total):
        a = controls[t, 0:1]
        delta = controls[t, 1:2]
        cos_psi = _cos1(psi)
        sin_psi = _sin1(psi)
        step_vec = ad.concat([(v * cos_psi).reshape((1, 1)),
                              (v * sin_psi).reshape((1, 1))], axis=1) * dt
        pos = pos + step_vec
        psi = psi + (v * _tan1(delta)) * (dt / wheelbase)
        v = ad.relu(v + a * dt)   # speed clamped at zero
        xs.append(pos)
        psis.append(psi.reshape((1, 1)))
        vs.append(v.reshape((1, 1)))
    positions = ad.concat(xs, axis=0)
    headings = ad.concat(psis, axis=0)
    speeds = ad.concat(vs, axis=0)
    return positions, headings, speeds


def _sin1(t: Tensor) -> Tensor:
    out = np.sin(t.data)

    def bw(g):
        ad._accum(t, g * np.cos(t.data))

    return ad._node(out, (t,), bw, "sin")


def _cos1(t: Tensor) -> Tensor:
    out = np.cos(t.data)

    def bw(g):
        ad._accum(t, g * -np.sin(t.data))

    return ad._node(out, (t,), bw, "cos")


def _tan1(t: Tensor) -> Tensor:
    out = np.tan(t.data)

    def bw(g):
        ad._accum(t, g * (1.0 + out * out))

    return ad._node(out, (t,), bw, "tan")


# -- cost profiles -------------------------------------------------------------------------

def gaussian_potential(delta: Tensor, sx, sy) -> Tensor:
    """2-D Gaussian density at offset ``delta`` (..., 2) with per-axis stds."""
    z = (delta[..., 0] / sx) ** 2.0 + (delta[..., 1] / sy) ** 2.0
    return ad.texp(z * -0.5) * (1.0 / (TWO_PI * sx * sy))


def occupied_cells(occ_joint: Array, spec: GridSpec, prob_floor: float) -> tuple[Array, Array]:
    """Per-step occupied cell centers and probabilities above the floor.

    Returns (coords, probs) flattened over all steps with a step index
    column: coords (N, 3) = [t, x, y]."""
    t_total = occ_joint.shape[0]
    rows = []
    probs = []
    for t in range(t_total):
        idx = np.argwhere(occ_joint[t] > prob_floor)
        if idx.size == 0:
            continue
        centers = spec.cell_center(idx)
        rows.append(np.concatenate([np.full((len(idx), 1), t), centers], axis=1))
        probs.append(occ_joint[t][idx[:, 0], idx[:, 1]])
    if not rows:
        return np.zeros((0, 3)), np.zeros((0,))
    return np.concatenate(rows), np.concatenate(probs)


def safety_residuals(tau: Tensor, occ_joint: Array, spec: GridSpec,
                     policies: GmmPolicy | None, cfg: RefineConfig,
                     batch_index: int = 0) -> list[Tensor]:
    """Per-step Gaussian-potential residuals (occupancy + marginal terms).

    The occupancy term sums the fixed sigma=1 density over occupied cells
    (prob > floor) within D1 of the plan point, weighted by cell
    probability; the marginal term sums each neighbor mode's density with
    its predicted stds within D2, weighted by mode probability.
    """
    t_total = tau.shape[0]
    cells, cell_probs = occupied_cells(np.asarray(occ_joint, float), spec, cfg.occ_prob_floor)
    res: list[Tensor] = []
    means = stds = probs = None
    if policies is not None:
        means = policies.means_np()[batch_index]   # (N_A, M, T, 2)
        stds = policies.stds_np()[batch_index]
        probs = policies.probs_np()[batch_index]
    for t in range(t_total):
        pt = tau[t]
        term = Tensor(np.zeros(()))
        if len(cells):
            sel = cells[:, 0] == t
            if sel.any():
                centers = cells[sel, 1:]
                near = np.linalg.norm(centers - tau.data[t], axis=1) <= cfg.occ_threshold_m
                if near.any():
                    delta = pt.reshape((1, 2)) - Tensor(centers[near])
                    dens = gaussian_potential(delta, 1.0, 1.0)
                    term = term + (dens * Tensor(cell_probs[sel][near])).sum()
        if means is not None:
            n_a, m = means.shape[0], means.shape[1]
            pts_t = means[1:, :, t, :].reshape(-1, 2)       # neighbors only
            std_t = stds[1:, :, t, :].reshape(-1, 2)
            w_t = probs[1:, :].reshape(-1)
            near = np.linalg.norm(pts_t - tau.data[t], axis=1) <= cfg.agent_threshold_m
            if near.any():
                delta = pt.reshape((1, 2)) - Tensor(pts_t[near])
                z = (delta[..., 0] / Tensor(std_t[near, 0])) ** 2.0 \
                    + (delta[..., 1] / Tensor(std_t[near, 1])) ** 2.0
                dens = ad.texp(z * -0.5) * Tensor(
                    1.0 / (TWO_PI * std_t[near, 0] * std_t[near, 1]))
                term = term + (dens * Tensor(w_t[near])).sum()
        res.append(term)
    return res


def auxiliary_residuals(controls: Tensor, positions: Tensor, headings: Tensor,
                        speeds: Tensor, route: ReferenceRoute | None,
                        cfg: RefineConfig, dt: float, v_target: float,
                        v0: float) -> dict[str, list[Tensor]]:
    """Progress, comfort (accel, jerk, lateral accel), and rule residuals."""
    if route is None:
        raise ConfigurationError("motion-mode refinement requires a reference route")
    t_total = controls.shape[0]
    out: dict[str, list[Tensor]] = {"progress": [], "comfort": [], "rule": []}
    lateral = route.lateral_tensor(positions)
    kappa_scale = 1.0 / cfg.wheelbase
    for t in range(t_total):
        a_t = controls[t, 0]
        delta_t = controls[t, 1]
        v_t = speeds[t, 0]
        out["progress"].append(v_t - v_target)
        out["comfort"].append(a_t)
        if t >= 1:
            out["comfort"].append((controls[t, 0] - controls[t - 1, 0]) * (1.0 / dt))
        lat_acc = (v_t * v_t) * _tan1(delta_t.reshape((1,))).reshape(()) * kappa_scale
        out["comfort"].append(lat_acc)
        out["rule"].append(lateral[t])
        out["rule"].append(ad.relu(v_t - cfg.speed_limit))
    return out


# -- gauss-newton ------------------------------------------------------------------------

def gauss_newton(u0: Array, residual_fn, weights: dict[str, float] | None = None,
                 max_iterations: int = 10, damping: float = 1e-3,
                 tolerance: float = 1e-6) -> tuple[Array, float, float]:
    """Damped Gauss-Newton over a flat variable vector.

    ``residual_fn(u_tensor)`` returns a list of (group_name, residual
    Tensor scalar) pairs. A pure GN step is attempted first; Levenberg
    damping (starting at ``damping``, escalating x10) is applied only when
    the normal equations are singular or the step increases the cost. The
    returned variable never has higher cost than u0.

    Returns (u_star, initial_cost, final_cost).
    """
    weights = weights or {}
    u = np.array(u0, dtype=np.float64).reshape(-1)
    n = u.size

    def evaluate(u_flat: Array):
        ut = Tensor(u_flat.copy(), requires_grad=True)
        pairs = residual_fn(ut)
        rows = np.empty(len(pairs))
        jac = np.zeros((len(pairs), n))
        for i, (group, r) in enumerate(pairs):
            w = weights.get(group, 1.0)
            rows[i] = w * float(r.data)
            ut.grad = None
            ut._grad_owned = False
            if r.requires_grad:
                backward(r, free_graph=False)
                if ut.grad is not None:
                    jac[i] = w * ut.grad.reshape(-1)
        cost = 0.5 * float(rows @ rows)
        return rows, jac, cost

    rows, jac, cost0 = evaluate(u)
    best_u, best_cost = u.copy(), cost0
    cost = cost0
    for _ in range(max_iterations):
        jtj = jac.T @ jac
        jtr = jac.T @ rows
        step = None
        trial = None
        lam = 0.0
        all_singular = True
        for _attempt in range(8):
            try:
                system = jtj if lam == 0.0 else jtj + lam * np.eye(n)
                cand = np.linalg.solve(system, -jtr)
                if not np.all(np.isfinite(cand)):
                    raise np.linalg.LinAlgError("non-finite step")
            except np.linalg.LinAlgError:
                lam = damping if lam == 0.0 else lam * 10.0
                continue
            all_singular = False
            trial = evaluate(u + cand)
            if trial[2] <= cost + 1e-15:
                step = cand
                break
            lam = damping if lam == 0.0 else lam * 10.0
        if step is None:
            if all_singular:
                raise SolverError("normal equations unsolvable after damping")
            break  # no descent step found; keep the best iterate
        u = u + step
        rows, jac, trial_cost = trial
        improvement = cost - trial_cost
        cost = trial_cost
        if cost < best_cost:
            best_cost, best_u = cost, u.copy()
        if improvement < tolerance:
            break
    return best_u, cost0, best_cost


# -- refinement modes ----------------------------------------------------------------------

@dataclass
class RefinementResult:
    tau: Array               # (T, 2) refined plan
    initial_cost: float
    final_cost: float
    mode: str
    fallback: bool = False   # motion mode fell back to path mode


def optimize_path(tau: Array, occ_joint: Array, spec: GridSpec,
                  policies: GmmPolicy | None, cfg: RefineConfig,
                  batch_index: int = 0) -> RefinementResult:
    """Gauss-Newton over raw waypoints with safety residuals only."""
    tau = np.asarray(tau, dtype=np.float64)
    t_total = tau.shape[0]

    def residual_fn(ut: Tensor):
        pts = ut.reshape((t_total, 2))
        res = safety_residuals(pts, occ_joint, spec, policies, cfg, batch_index)
        return [("safety", r) for r in res]

    u_star, c0, c1 = gauss_newton(tau.reshape(-1), residual_fn,
                                  {"safety": cfg.weight_safety},
                                  cfg.max_iterations, cfg.damping, cfg.tolerance)
    return RefinementResult(u_star.reshape(t_total, 2), c0, c1, "path")


def optimize_motion(tau: Array, occ_joint: Array, spec: GridSpec,
                    policies: GmmPolicy | None, route: ReferenceRoute,
                    state0, cfg: RefineConfig, dt: float,
                    v_target: float | None = None,
                    batch_index: int = 0) -> RefinementResult:
    """MPC-style refinement over controls recovered by inverse dynamics."""
    if route is None:
        raise ConfigurationError("motion-mode refinement requires a reference route")
    tau = np.asarray(tau, dtype=np.float64)
    t_total = tau.shape[0]
    seq = inverse_dynamics(tau, state0, dt, cfg.wheelbase, cfg.accel_limit, cfg.steer_limit)
    if not seq.feasible:
        path = optimize_path(tau, occ_joint, spec, policies, cfg, batch_index)
        return RefinementResult(path.tau, path.initial_cost, path.final_cost,
                                "path", fallback=True)
    v0 = float(state0[3])
    vt = v_target if v_target is not None else v0

    def residual_fn(ut: Tensor):
        controls = ut.reshape((t_total, 2))
        positions, headings, speeds = rollout_controls_tensor(state0, controls, dt,
                                                              cfg.wheelbase)
        pairs = [("safety", r) for r in
                 safety_residuals(positions, occ_joint, spec, policies, cfg, batch_index)]
        aux = auxiliary_residuals(controls, positions, headings, speeds, route, cfg,
                                  dt, vt, v0)
        pairs += [("progress", r) for r in aux["progress"]]
        pairs += [("comfort", r) for r in aux["comfort"]]
        pairs += [("rule", r) for r in aux["rule"]]
        return pairs

    weights = {"safety": cfg.weight_safety, "progress": cfg.weight_progress,
               "comfort": cfg.weight_comfort, "rule": cfg.weight_rule}
    u_star, c0, c1 = gauss_newton(seq.controls.reshape(-1), residual_fn, weights,
                                  cfg.max_iterations, cfg.damping, cfg.tolerance)
    controls = u_star.reshape(t_total, 2)
    controls[:, 0] = np.clip(controls[:, 0], -cfg.accel_limit, cfg.accel_limit)
    controls[:, 1] = np.clip(controls[:, 1], -cfg.steer_limit, cfg.steer_limit)
    states = rollout_controls(state0, controls, dt, cfg.wheelbase)
    return RefinementResult(states[1:, 0:2], c0, c1, "motion")
