"""Level-k game-theoretic reasoning over all agents.

A stack of K reasoning layers produces one Gaussian-mixture policy per
level; level 0 reasons independently, each later level attends to the
previous level's policies (gated by a future distance mask), to the scene
context, and to joint-occupancy features via deformable sampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .config import ModelConfig
from .errors import ConfigurationError, ContractError, DataError, ShapeError
from .scene import ContextFeatures, GridSpec

Array = np.ndarray


@dataclass
class GmmPolicy:
    """Per-agent M-mode Gaussian mixture over future trajectories."""

    means: Tensor      # (B, N_A, M, T, 2) meters
    log_stds: Tensor   # (B, N_A, M, T, 2), clamped
    probs: Tensor      # (B, N_A, M), rows sum to 1
    level: int

    @property
    def stds(self) -> Tensor:
        return ad.texp(self.log_stds)

    def means_np(self) -> Array:
        return self.means.data

    def probs_np(self) -> Array:
        return self.probs.data

    def stds_np(self) -> Array:
        return np.exp(self.log_stds.data)


@dataclass
class MotionQueries:
    features: Tensor   # (B, N_A, M, D)
    anchors: Array     # (B, N_A, M, 2) fixed radial intention endpoints


@dataclass
class OccFeature:
    h_occ: Tensor      # (B, H', W', D) at the coarse grid scale
    spec: GridSpec     # coarse grid geometry for world->cell transforms


def intention_anchors(current_states: Array, modes: int, horizon_seconds: float) -> Array:
    """M fixed radial endpoints per agent: headings -60..+60 deg relative,
    range speed * horizon. Zero speed collapses all anchors onto the agent."""
    if modes < 1:
        raise ConfigurationError(f"modes must be >= 1, got {modes}")
    pos = current_states[..., 0:2]
    heading = current_states[..., 2]
    speed = current_states[..., 3]
    offsets = np.linspace(-math.pi / 3.0, math.pi / 3.0, modes) if modes > 1 else np.zeros(1)
    ang = heading[..., None] + offsets
    rng = (speed * horizon_seconds)[..., None]
    return np.stack([pos[..., 0:1] + rng * np.cos(ang),
                     pos[..., 1:2] + rng * np.sin(ang)], axis=-1)


class ModeFusion:
    """Eq.-2 style agent/mode fusion: p * (Q + MLP(PE(y))) (+ Q_A)."""

    def __init__(self, store: nn.ParamStore, name: str, dim: int, pe_dim: int, horizon: int):
        self.traj_mlp = nn.MLP(store, f"{name}.traj_mlp", [horizon * pe_dim, dim])
        self.pe_dim = pe_dim
        self.horizon = horizon

    def mode_terms(self, queries: Tensor, policy: GmmPolicy, q_a: Tensor) -> Tensor:
        """Per-(agent, mode) fused features (B, N_A, M, D), before mode-sum."""
        b, n_a, m = queries.shape[0], queries.shape[1], queries.shape[2]
        pe = nn.sinusoidal_pe(policy.means, self.pe_dim)
        pe = pe.reshape((b, n_a, m, self.horizon * self.pe_dim))
        h_m = self.traj_mlp(pe)
        scaled = (queries + h_m) * policy.probs.reshape((b, n_a, m, 1))
        return scaled + q_a.reshape((b, n_a, 1, q_a.shape[-1]))

    def fused(self, queries: Tensor, policy: GmmPolicy, q_a: Tensor) -> Tensor:
        """Mode-summed per-agent features (B, N_A, D)."""
        b, n_a, m = queries.shape[0], queries.shape[1], queries.shape[2]
        pe = nn.sinusoidal_pe(policy.means, self.pe_dim)
        pe = pe.reshape((b, n_a, m, self.horizon * self.pe_dim))
        h_m = self.traj_mlp(pe)
        scaled = (queries + h_m) * policy.probs.reshape((b, n_a, m, 1))
        return scaled.sum(axis=2) + q_a


class OccupancyFusion:
    """Joint-occupancy feature encoding: ResConv(max_T Conv(PE * O) + Q_occ)."""

    def __init__(self, store: nn.ParamStore, name: str, dim: int, pe_dim: int, spec: GridSpec):
        self.conv = nn.Linear(store, f"{name}.conv", pe_dim, dim, bias=False)
        self.res1 = nn.Linear(store, f"{name}.res1", dim, dim)
        self.res2 = nn.Linear(store, f"{name}.res2", dim, dim)
        self.spec = spec
        self.pe_dim = pe_dim
        self._pe = nn.sinusoidal_pe(spec.centers_grid().reshape(-1, 2), pe_dim).data

    def __call__(self, occ_joint, q_occ: Tensor) -> OccFeature:
        """occ_joint: (B, T, H', W') in [0, 1]; q_occ: (B, H', W', D)."""
        spec = self.spec
        hw = spec.height_cells * spec.width_cells
        occ = occ_joint if isinstance(occ_joint, Tensor) else Tensor(np.asarray(occ_joint, float))
        b, t = occ.shape[0], occ.shape[1]
        if occ.shape[2:] != (spec.height_cells, spec.width_cells) \
                or q_occ.shape[1:3] != (spec.height_cells, spec.width_cells):
            raise ShapeError(f"occupancy shape {occ.shape} / query shape {q_occ.shape} "
                             f"do not match grid ({spec.height_cells}, {spec.width_cells})")
        # Conv(PE * O) == O * Conv(PE): the per-cell scalar commutes with the
        # channel projection, so project the static PE once. The ReLU keeps
        # painted features non-negative, making the temporal max selective
        # (empty steps contribute exactly zero).
        pe_proj = ad.relu(self.conv(Tensor(self._pe)))   # (H'*W', D)
        painted = occ.reshape((b, t, hw, 1)) * pe_proj   # (B, T, H'W', D)
        pooled = painted.max(axis=1)                     # (B, H'W', D)
        h = pooled + q_occ.reshape((b, hw, q_occ.shape[-1]))
        h_occ = h + self.res2(ad.relu(self.res1(h)))
        return OccFeature(h_occ.reshape(q_occ.shape), spec)


def future_mask_bias(means_prev: Array, radius: float) -> tuple[Array, Array]:
    """Additive GT-reasoning bias over (agent, mode) keys.

    means_prev: (B, N_A, M, T, 2) previous-level means. Entry (i*M+m, j*M+m')
    is 0 when j != i and min-over-time distance between the two mean
    trajectories is <= radius, else -inf. Returns (bias, row_has_key).
    """
    b, n_a, m = means_prev.shape[:3]
    flat = means_prev.reshape(b, n_a * m, means_prev.shape[3], 2)
    diff = flat[:, :, None, :, :] - flat[:, None, :, :, :]
    dmin = np.linalg.norm(diff, axis=-1).min(axis=-1)        # (B, NM, NM)
    allowed = dmin <= radius
    same_agent = np.repeat(np.eye(n_a, dtype=bool), m, axis=0)
    same_agent = np.repeat(same_agent, m, axis=1)
    allowed &= ~same_agent[None]
    bias = np.where(allowed, 0.0, -np.inf)
    return bias, allowed.any(axis=-1)


class ReasoningLayer:
    """One game-theoretic reasoning layer (own parameters per level)."""

    def __init__(self, store: nn.ParamStore, name: str, cfg: ModelConfig, horizon: int):
        d, h = cfg.embed_dim, cfg.heads
        self.cfg = cfg
        self.mode2mode = nn.MultiHeadAttention(store, f"{name}.mode2mode", d, h, cfg.dropout)
        self.gt_attn = nn.MultiHeadAttention(store, f"{name}.gt", d, h, cfg.dropout)
        self.agent_attn = nn.MultiHeadAttention(store, f"{name}.agent", d, h, cfg.dropout)
        self.map_attn = nn.MultiHeadAttention(store, f"{name}.map", d, h, cfg.dropout)
        self.gt_fusion = ModeFusion(store, f"{name}.gt_fusion", d, cfg.pe_dim, horizon)
        self.offset_head = nn.Linear(store, f"{name}.occ_offsets", d, cfg.n_def_points * 2,
                                     init="zeros")
        self.occ_proj = nn.Linear(store, f"{name}.occ_proj", d, d)
        self.cat_proj = nn.Linear(store, f"{name}.cat_proj", 3 * d, d)
        self.ffn = nn.FFN(store, f"{name}.ffn", d, dropout=cfg.dropout)

    def branch_features(self, level: int, queries: MotionQueries,
                        prev_policy: GmmPolicy | None, ctx: ContextFeatures,
                        occ: OccFeature, run: nn.RunContext | None = None
                        ) -> dict[str, Tensor]:
        cfg = self.cfg
        q = queries.features
        b, n_a, m, d = q.shape
        q_mm = self.mode2mode(q.reshape((b * n_a, m, d)),
                              q.reshape((b * n_a, m, d)),
                              q.reshape((b * n_a, m, d)), ctx=run)
        q_mm = q_mm.reshape((b, n_a * m, d))

        if level > 0:
            if prev_policy is None:
                raise ContractError("reasoning at level >= 1 requires the previous policy")
            keys = self.gt_fusion.mode_terms(queries.features, prev_policy, ctx.q_a)
            keys = keys.reshape((b, n_a * m, d))
            bias, has_key = future_mask_bias(prev_policy.means_np(), cfg.future_mask_radius)
            safe = np.where(has_key[:, :, None], bias, 0.0)
            f_gt = self.gt_attn.attend(q_mm, keys, keys, Tensor(safe[:, None, :, :]))
            f_gt = f_gt * Tensor(has_key[:, :, None].astype(float))
        else:
            f_gt = Tensor(np.zeros((b, n_a * m, d)))

        f_agent = self.agent_attn.attend(q_mm, ctx.q_a, ctx.q_a)
        f_map = self.map_attn.attend(q_mm, ctx.q_map, ctx.q_map)

        if level > 0 and prev_policy is not None:
            ref = prev_policy.means[:, :, :, -1, :]  # previous-level endpoints
        else:
            ref = Tensor(queries.anchors)  # level 0 ignores any policy argument
        offsets = self.offset_head(q.reshape((b, n_a, m, d)))
        offsets = offsets.reshape((b, n_a, m, cfg.n_def_points, 2))
        sampled = nn.deformable_sample(occ.h_occ, ref, offsets, occ.spec.world_to_cell_t)
        f_occ = self.occ_proj(sampled).reshape((b, n_a * m, d))

        return {"gt": f_gt, "agent": f_agent, "map": f_map, "occ": f_occ}

    def __call__(self, level: int, queries: MotionQueries, prev_policy: GmmPolicy | None,
                 ctx: ContextFeatures, occ: OccFeature,
                 run: nn.RunContext | None = None) -> MotionQueries:
        f = self.branch_features(level, queries, prev_policy, ctx, occ, run)
        cat = ad.concat([f["gt"] + f["agent"], f["map"], f["occ"]], axis=-1)
        out = self.ffn(self.cat_proj(cat), ctx=run)
        b, n_a, m, d = queries.features.shape
        return MotionQueries(out.reshape((b, n_a, m, d)), queries.anchors)


class PolicyDecoder:
    """Score and trajectory heads for one reasoning level."""

    def __init__(self, store: nn.ParamStore, name: str, dim: int, horizon: int,
                 log_std_clamp: float):
        self.traj_head = nn.MLP(store, f"{name}.traj", [dim, dim, horizon * 4])
        self.score_head = nn.MLP(store, f"{name}.score", [dim, dim, 1])
        self.horizon = horizon
        self.clamp = log_std_clamp

    def __call__(self, queries: MotionQueries, level: int) -> GmmPolicy:
        q = queries.features
        b, n_a, m, _ = q.shape
        raw = self.traj_head(q).reshape((b, n_a, m, self.horizon, 4))
        means = raw[:, :, :, :, 0:2]
        log_stds = ad.clip(raw[:, :, :, :, 2:4], -self.clamp, self.clamp)
        scores = self.score_head(q).reshape((b, n_a, m))
        probs = ad.softmax(scores, axis=-1)
        return GmmPolicy(means=means, log_stds=log_stds, probs=probs, level=level)


class GTFormer:
    """K stacked reasoning layers with per-level decoders."""

    def __init__(self, store: nn.ParamStore, cfg: ModelConfig, spec: GridSpec):
        self.cfg = cfg
        self.horizon = spec.horizon_steps
        self.horizon_seconds = spec.horizon_steps * spec.step_seconds
        d = cfg.embed_dim
        self.query_mlp = nn.MLP(store, "gtformer.query_mlp", [cfg.pe_dim + d, d, d])
        self.layers = [ReasoningLayer(store, f"gtformer.layer{k}", cfg, self.horizon)
                       for k in range(cfg.reasoning_levels)]
        self.decoders = [PolicyDecoder(store, f"gtformer.decoder{k}", d, self.horizon,
                                       cfg.log_std_clamp)
                         for k in range(cfg.reasoning_levels)]

    def init_motion_queries(self, q_a: Tensor, current_states: Array) -> MotionQueries:
        anchors = intention_anchors(current_states, self.cfg.modes, self.horizon_seconds)
        pe = nn.sinusoidal_pe(anchors, self.cfg.pe_dim)
        b, n_a, m = anchors.shape[:3]
        d = q_a.shape[-1]
        q_rep = ad.broadcast_to(q_a.reshape((b, n_a, 1, d)), (b, n_a, m, d))
        feats = self.query_mlp(ad.concat([pe, q_rep], axis=-1))
        return MotionQueries(feats, anchors)

    def rollout(self, ctx: ContextFeatures, occ: OccFeature, current_states: Array,
                levels: int | None = None, run: nn.RunContext | None = None
                ) -> tuple[list[GmmPolicy], MotionQueries]:
        """Level-k policies (level 0..K-1) plus the final motion queries."""
        k_total = levels if levels is not None else self.cfg.reasoning_levels
        if k_total < 1:
            raise ConfigurationError(f"reasoning levels must be >= 1, got {k_total}")
        if k_total > len(self.layers):
            raise ConfigurationError(
                f"requested level {k_total} exceeds configured depth {len(self.layers)}")
        queries = self.init_motion_queries(ctx.q_a, current_states)
        policies: list[GmmPolicy] = []
        prev: GmmPolicy | None = None
        for k in range(k_total):
            queries = self.layers[k](k, queries, prev, ctx, occ, run)
            policy = self.decoders[k](queries, k)
            policies.append(policy)
            prev = policy
        return policies, queries


def nll_loss(policies: list[GmmPolicy], gt_futures: Array, valid: Array | None = None) -> Tensor:
    """Imitation loss: Eq.-12 NLL at the min-FDE positive mode, summed over
    agents/steps/levels, plus a cross-entropy score term; mean over batch."""
    gt = np.asarray(gt_futures, dtype=np.float64)
    if not np.all(np.isfinite(gt)):
        raise DataError("non-finite ground-truth futures")
    b, n_a, t = gt.shape[0], gt.shape[1], gt.shape[2]
    if valid is None:
        valid = np.ones((b, n_a, t), dtype=bool)
    total = Tensor(np.zeros(()))
    bi = np.arange(b)[:, None]
    ai = np.arange(n_a)[None, :]
    for policy in policies:
        fde = np.linalg.norm(policy.means_np()[:, :, :, -1, :] - gt[:, :, None, -1, :], axis=-1)
        positive = fde.argmin(axis=-1)  # (B, N_A)
        means = policy.means[bi, ai, positive]       # (B, N_A, T, 2)
        log_stds = policy.log_stds[bi, ai, positive]
        p_pos = policy.probs[bi, ai, positive]       # (B, N_A)
        delta = means - Tensor(gt)
        inv_std = ad.texp(-log_stds)
        z = (delta * inv_std) ** 2.0
        step_mask = Tensor(valid.astype(float))
        per_step = (log_stds.sum(axis=-1) + 0.5 * z.sum(axis=-1)
                    - ad.tlog(p_pos).reshape((b, n_a, 1)))
        nll = (per_step * step_mask).sum()
        ce = -ad.tlog(p_pos).sum()
        total = total + nll + ce
    return total * (1.0 / b)


def collision_loss(policy_k: GmmPolicy, policy_km1: GmmPolicy, d_col: float) -> Tensor:
    """Interactive repulsion (Eq. 13): 1(D < d_col) / (1 + D) against the
    closest opponent (agent, mode) pair from the previous level."""
    means_k = policy_k.means          # (B, N_A, M, T, 2)
    means_p = policy_km1.means
    b, n_a, m, t = means_k.shape[:4]
    a = means_k.reshape((b, n_a, m, t, 1, 1, 2))
    # opponents arranged as (B, 1, 1, T, N_A, M, 2): time moved ahead of agents
    opp = means_p.transpose((0, 3, 1, 2, 4)).reshape((b, 1, 1, t, n_a, m, 2))
    diff = a - opp
    dist = ad.tsqrt((diff ** 2.0).sum(axis=-1) + 1e-18)     # (B, N_A, M, T, N_A, M)
    within = dist.data < d_col
    same = np.zeros((n_a, n_a), dtype=bool)
    np.fill_diagonal(same, True)
    mask = within & ~same[None, :, None, None, :, None]
    val = (1.0 / (dist + 1.0)) * Tensor(mask.astype(float))
    flat = val.reshape((b, n_a, m, t, n_a * m))
    best = flat.max(axis=-1)
    return best.sum() * (1.0 / b)
