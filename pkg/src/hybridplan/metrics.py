"""Evaluation metrics: marginal prediction errors, joint consistency,
occupancy quality, open-loop planning, and closed-loop driving measures.

All functions take plain numpy arrays (single scenario unless noted) and
return floats; the harness aggregates across scenarios.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .refinement import ReferenceRoute
from .scene import normalize_angle

Array = np.ndarray


# -- marginal prediction ----------------------------------------------------------------

def min_ade_fde_mr(means: Array, gt: Array, miss_threshold: float = 2.0,
                   valid: Array | None = None) -> tuple[float, float, float]:
    """Per-agent best-mode displacement errors.

    means: (N_A, M, T, 2); gt: (N_A, T, 2). Returns (minADE, minFDE, MR)
    averaged over agents; MR is the fraction of agents whose best final
    error exceeds the threshold.
    """
    err = np.linalg.norm(means - gt[:, None, :, :], axis=-1)   # (N_A, M, T)
    if valid is not None:
        err = np.where(valid[:, None, :], err, np.nan)
        ade_per_mode = np.nanmean(err, axis=-1)
        fde_per_mode = err[:, :, -1]
    else:
        ade_per_mode = err.mean(axis=-1)
        fde_per_mode = err[:, :, -1]
    min_ade = ade_per_mode.min(axis=-1)
    min_fde = fde_per_mode.min(axis=-1)
    return float(min_ade.mean()), float(min_fde.mean()), float((min_fde > miss_threshold).mean())


def jade_jfde(means: Array, gt: Array) -> tuple[float, float]:
    """Joint errors under a single shared mode index for the whole scene."""
    err = np.linalg.norm(means - gt[:, None, :, :], axis=-1)   # (N_A, M, T)
    per_mode_ade = err.mean(axis=(0, 2))                       # (M,)
    per_mode_fde = err[:, :, -1].mean(axis=0)
    m_star = int(per_mode_ade.argmin())
    return float(per_mode_ade[m_star]), float(per_mode_fde[m_star])


def epa(means: Array, gt: Array, threshold: float = 2.0, alpha: float = 0.5) -> float:
    """End-to-end prediction accuracy under privileged identity matching:
    (hits - alpha * false positives) / N with zero false positives, i.e.
    the fraction of agents with best final error under the threshold."""
    err = np.linalg.norm(means[:, :, -1, :] - gt[:, None, -1, :], axis=-1)
    hits = (err.min(axis=-1) < threshold).sum()
    n_gt = means.shape[0]
    return float(hits / n_gt)


# -- occupancy ---------------------------------------------------------------------------

def occupancy_iou(pred_joint: Array, gt_joint: Array, threshold: float = 0.5) -> float:
    """IoU of thresholded joint grids; empty-vs-empty defined as 1."""
    p = pred_joint >= threshold
    g = gt_joint >= 0.5
    inter = np.logical_and(p, g).sum()
    union = np.logical_or(p, g).sum()
    if union == 0:
        return 1.0
    return float(inter / union)


def occupancy_auc(pred_joint: Array, gt_joint: Array, n_thresholds: int = 100) -> float:
    """Area under the linearly-interpolated precision-recall curve."""
    g = (gt_joint >= 0.5).ravel()
    p = pred_joint.ravel()
    n_pos = g.sum()
    if n_pos == 0:
        return 1.0 if (p >= 0.5).sum() == 0 else 0.0
    points = []
    for thr in np.linspace(0.0, 1.0, n_thresholds):
        sel = p >= thr
        tp = (sel & g).sum()
        fp = (sel & ~g).sum()
        recall = tp / n_pos
        precision = tp / (tp + fp) if (tp + fp) > 0 else 1.0
        points.append((recall, precision))
    points.sort(key=lambda rp: (rp[0], rp[1]))
    area = 0.0
    prev_r, prev_p = 0.0, points[0][1] if points else 1.0
    for r, pr in points:
        area += (r - prev_r) * 0.5 * (pr + prev_p)
        prev_r, prev_p = r, pr
    return float(area)


def occupancy_vpq(pred_cond: Array, gt_cond: Array, threshold: float = 0.5,
                  iou_gate: float = 0.5) -> float:
    """Video panoptic quality over agent channels with identity matching.

    Per step, a channel pair with IoU > the gate is a true positive
    contributing its IoU; non-empty unmatched predictions are false
    positives and non-empty unmatched ground truths false negatives.
    """
    t_total, _, _, n_a = pred_cond.shape
    scores = []
    for t in range(t_total):
        tp, fp, fn, iou_sum = 0, 0, 0, 0.0
        for a in range(n_a):
            p = pred_cond[t, :, :, a] >= threshold
            g = gt_cond[t, :, :, a] >= 0.5
            p_any, g_any = p.any(), g.any()
            if not p_any and not g_any:
                continue
            union = np.logical_or(p, g).sum()
            iou = np.logical_and(p, g).sum() / union if union else 0.0
            if p_any and g_any and iou > iou_gate:
                tp += 1
                iou_sum += iou
            else:
                if p_any:
                    fp += 1
                if g_any:
                    fn += 1
        denom = tp + 0.5 * fp + 0.5 * fn
        scores.append(1.0 if denom == 0 else iou_sum / denom)
    return float(np.mean(scores))


# -- oriented box overlap ------------------------------------------------------------------

def box_corners(cx: float, cy: float, heading: float, length: float, width: float) -> Array:
    c, s = math.cos(heading), math.sin(heading)
    dx, dy = length / 2.0, width / 2.0
    local = np.array([[dx, dy], [dx, -dy], [-dx, -dy], [-dx, dy]])
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + np.array([cx, cy])


def boxes_overlap(box_a: tuple, box_b: tuple) -> bool:
    """Separating-axis test for two oriented rectangles
    (cx, cy, heading, length, width)."""
    ca = box_corners(*box_a)
    cb = box_corners(*box_b)
    for corners in (ca, cb):
        for i in range(2):
            edge = corners[(i + 1) % 4] - corners[i]
            axis = np.array([-edge[1], edge[0]])
            pa = ca @ axis
            pb = cb @ axis
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True


def boxes_distance(box_a: tuple, box_b: tuple) -> float:
    """Euclidean clearance between two oriented rectangles (0 if overlapping)."""
    if boxes_overlap(box_a, box_b):
        return 0.0
    ca = box_corners(*box_a)
    cb = box_corners(*box_b)
    best = math.inf
    for pa0, pa1 in zip(ca, np.roll(ca, -1, axis=0)):
        for pb0, pb1 in zip(cb, np.roll(cb, -1, axis=0)):
            best = min(best, _segment_distance(pa0, pa1, pb0, pb1))
    return best


def _segment_distance(p1: Array, p2: Array, q1: Array, q2: Array) -> float:
    def point_seg(p, a, b):
        ab = b - a
        denom = float(ab @ ab)
        t = 0.0 if denom == 0 else float(np.clip((p - a) @ ab / denom, 0.0, 1.0))
        return float(np.linalg.norm(p - (a + t * ab)))

    return min(point_seg(p1, q1, q2), point_seg(p2, q1, q2),
               point_seg(q1, p1, p2), point_seg(q2, p1, p2))


# -- planning ---------------------------------------------------------------------------

def plan_heading(tau: Array, psi0: float) -> Array:
    """Per-step headings from plan displacement directions."""
    pts = np.concatenate([[[0.0, 0.0]], np.asarray(tau, float)], axis=0)
    diffs = np.diff(pts, axis=0)
    out = np.empty(len(tau))
    prev = psi0
    for t, d in enumerate(diffs):
        if np.linalg.norm(d) > 1e-6:
            prev = math.atan2(d[1], d[0])
        out[t] = prev
    return out


def planning_metrics(tau: Array, gt_ego: Array, neighbor_boxes: list[list[tuple]],
                     ego_box: tuple[float, float], psi0: float, dt: float,
                     marks_s: tuple[float, ...] = (1.0, 2.0, 3.0)) -> dict[str, float]:
    """Open-loop planning errors and collision flags at horizon marks.

    neighbor_boxes: per step, list of (cx, cy, heading, length, width) for
    the logged agents. Returns L2@mark (absolute at the mark), avgL2@mark
    (mean up to the mark), CR@mark (any-overlap flag up to the mark).
    """
    tau = np.asarray(tau, float)
    gt_ego = np.asarray(gt_ego, float)
    err = np.linalg.norm(tau - gt_ego, axis=-1)
    headings = plan_heading(tau, psi0)
    length, width = ego_box
    t_total = len(tau)
    collided = np.zeros(t_total, dtype=bool)
    for t in range(t_total):
        ego = (tau[t, 0], tau[t, 1], headings[t], length, width)
        collided[t] = any(boxes_overlap(ego, nb) for nb in neighbor_boxes[t])
    out: dict[str, float] = {}
    for mark in marks_s:
        step = int(round(mark / dt)) - 1
        if step >= t_total:
            continue
        out[f"l2@{mark:g}s"] = float(err[step])
        out[f"avg_l2@{mark:g}s"] = float(err[: step + 1].mean())
        out[f"cr@{mark:g}s"] = float(collided[: step + 1].any())
    out["l2_avg"] = float(np.mean([v for k, v in out.items() if k.startswith("l2@")]))
    out["cr_any"] = float(collided.any())
    return out


# -- closed loop -------------------------------------------------------------------------

def closed_loop_metrics(trace_states: Array, expert_states: Array, route: ReferenceRoute,
                        collided: bool, tick_dt: float,
                        marks_s: tuple[float, ...] = (3.0, 5.0, 8.0)) -> dict[str, float]:
    """Driving measurements from an executed 10 Hz trace.

    trace_states / expert_states: (N, 4) rows (x, y, heading, speed) on the
    same tick grid; progress is route arc length traveled; success requires
    no collision and >= 0.8x the expert progress.
    """
    if len(trace_states) != len(expert_states):
        raise ContractError(f"misaligned traces: {len(trace_states)} vs {len(expert_states)}")
    trace = np.asarray(trace_states, float)
    expert = np.asarray(expert_states, float)

    def progress_of(states: Array) -> float:
        s0, _ = route.to_frenet(states[0, 0:2])
        s1, _ = route.to_frenet(states[-1, 0:2])
        return max(s1 - s0, 0.0)

    progress = progress_of(trace)
    expert_progress = progress_of(expert)
    success = (not collided) and progress >= 0.8 * expert_progress

    v = trace[:, 3]
    acc = np.diff(v) / tick_dt
    jerk = np.diff(acc) / tick_dt if len(acc) >= 2 else np.zeros(1)
    dpsi = np.array([normalize_angle(d) for d in np.diff(trace[:, 2])])
    lat = np.abs(v[1:] * dpsi / tick_dt)

    out = {
        "success": float(success),
        "collided": float(collided),
        "progress_m": float(progress),
        "expert_progress_m": float(expert_progress),
        "accel_mean": float(np.abs(acc).mean()) if len(acc) else 0.0,
        "jerk_mean": float(np.abs(jerk).mean()) if len(jerk) else 0.0,
        "lat_acc_mean": float(lat.mean()) if len(lat) else 0.0,
    }
    pos_err = np.linalg.norm(trace[:, 0:2] - expert[:, 0:2], axis=-1)
    horizon_s = (len(trace) - 1) * tick_dt
    for mark in marks_s:
        if mark <= horizon_s + 1e-9:
            out[f"pos_err@{mark:g}s"] = float(pos_err[int(round(mark / tick_dt))])
    return out


# -- report -----------------------------------------------------------------------------

@dataclass
class MetricReport:
    """Named metric aggregates with config echo and hash."""

    metrics: dict[str, float]
    counts: dict[str, int]
    config_echo: str
    config_hash: str
    notes: list[str] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [f"# metric report (config {self.config_hash})"]
        for note in self.notes:
            lines.append(f"# note: {note}")
        for k in sorted(self.counts):
            lines.append(f"count {k} = {self.counts[k]}")
        for k in sorted(self.metrics):
            lines.append(f"{k} = {self.metrics[k]:.6f}")
        lines.append("# config echo")
        for cfg_line in self.config_echo.strip().splitlines():
            lines.append(f"#   {cfg_line}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        keys = sorted(self.metrics)
        return ",".join(keys) + "\n" + ",".join(f"{self.metrics[k]:.6f}" for k in keys) + "\n"


def aggregate(per_scenario: list[dict[str, float]]) -> dict[str, float]:
    """Mean of each metric over scenarios (keys missing in some rows are
    averaged over the rows that have them)."""
    out: dict[str, float] = {}
    keys = {k for row in per_scenario for k in row}
    for k in sorted(keys):
        vals = [row[k] for row in per_scenario if k in row]
        out[k] = float(np.mean(vals))
    return out
