"""Target-conditioned, hybrid-prediction-aware planning head.

A single plan query is fused from the ego's final reasoning features and
the plan context (goal, command, traffic light, optional ego status),
then refined by a stack of interaction layers that attend to neighbor
policies (distance-gated), scene context, and predicted-occupancy
features, and finally decoded into one trajectory.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .config import COMMANDS, TL_STATES, ModelConfig
from .errors import ConfigurationError, ContractError
from .gtformer import GmmPolicy, ModeFusion, OccFeature
from .scene import ContextFeatures

Array = np.ndarray


@dataclass
class PlanContext:
    h_e: Tensor   # (B, 1, D)


@dataclass
class PlanTrajectory:
    tau: Tensor   # (B, T, 2) ego-frame waypoints

    def numpy(self, batch_index: int = 0) -> Array:
        return self.tau.data[batch_index]


def plan_context_inputs(goal: Array, commands: list[str], tl_states: list[str],
                        ego_status: Array | None) -> Array:
    """Raw input rows: [onehot command; goal xy; onehot TL; (v, psi)?]."""
    b = len(commands)
    rows = np.zeros((b, len(COMMANDS) + 2 + len(TL_STATES)
                     + (2 if ego_status is not None else 0)))
    for i, (cmd, tl) in enumerate(zip(commands, tl_states)):
        if cmd not in COMMANDS:
            raise ConfigurationError(f"unknown command tag '{cmd}'")
        if tl not in TL_STATES:
            raise ConfigurationError(f"unknown traffic-light state '{tl}'")
        rows[i, COMMANDS.index(cmd)] = 1.0
        rows[i, len(COMMANDS):len(COMMANDS) + 2] = goal[i] / 32.0
        rows[i, len(COMMANDS) + 2 + TL_STATES.index(tl)] = 1.0
        if ego_status is not None:
            rows[i, -2] = ego_status[i, 0] / 10.0
            rows[i, -1] = ego_status[i, 1]
    return rows


class PlanContextEncoder:
    def __init__(self, store: nn.ParamStore, dim: int, with_ego_status: bool):
        self.with_ego_status = with_ego_status
        in_dim = len(COMMANDS) + 2 + len(TL_STATES) + (2 if with_ego_status else 0)
        self.mlp = nn.MLP(store, "planner.context_mlp", [in_dim, dim, dim])

    def __call__(self, goal: Array, commands: list[str], tl_states: list[str],
                 ego_status: Array | None) -> PlanContext:
        rows = plan_context_inputs(goal, commands, tl_states,
                                   ego_status if self.with_ego_status else None)
        h = self.mlp(Tensor(rows))
        return PlanContext(h.reshape((len(commands), 1, h.shape[-1])))


class PlanInteractionLayer:
    """One planner layer reusing the reasoning-layer parts for one query."""

    def __init__(self, store: nn.ParamStore, name: str, cfg: ModelConfig, horizon: int):
        d, h = cfg.embed_dim, cfg.heads
        self.cfg = cfg
        self.gt_attn = nn.MultiHeadAttention(store, f"{name}.gt", d, h, cfg.dropout)
        self.agent_attn = nn.MultiHeadAttention(store, f"{name}.agent", d, h, cfg.dropout)
        self.map_attn = nn.MultiHeadAttention(store, f"{name}.map", d, h, cfg.dropout)
        self.gt_fusion = ModeFusion(store, f"{name}.gt_fusion", d, cfg.pe_dim, horizon)
        self.offset_head = nn.Linear(store, f"{name}.occ_offsets", d, cfg.n_def_points * 2,
                                     init="zeros")
        self.occ_proj = nn.Linear(store, f"{name}.occ_proj", d, d)
        self.cat_proj = nn.Linear(store, f"{name}.cat_proj", 3 * d, d)
        self.ffn = nn.FFN(store, f"{name}.ffn", d, dropout=cfg.dropout)

    def _neighbor_gate(self, policy: GmmPolicy) -> tuple[Array, Array]:
        """Bias over neighbor (agent, mode) keys gated by min distance from
        any ego mode trajectory; ego keys are excluded by construction."""
        means = policy.means_np()
        b, n_a, m, t, _ = means.shape
        ego = means[:, 0]                         # (B, M, T, 2)
        opp = means[:, 1:].reshape(b, (n_a - 1) * m, t, 2)
        d = np.linalg.norm(ego[:, :, None, :, :] - opp[:, None, :, :, :], axis=-1)
        dmin = d.min(axis=(1, 3))                 # (B, (N_A-1)*M)
        allowed = dmin <= self.cfg.future_mask_radius
        bias = np.where(allowed, 0.0, -np.inf)[:, None, None, :]   # (B, 1, 1, K)
        return bias, allowed.any(axis=-1)

    def __call__(self, q_e: Tensor, policy: GmmPolicy, queries_final: Tensor,
                 ctx: ContextFeatures, occ_feat: OccFeature,
                 run: nn.RunContext | None = None) -> Tensor:
        b, _, d = q_e.shape
        n_a, m = policy.means.shape[1], policy.means.shape[2]
        if n_a > 1:
            keys = self.gt_fusion.mode_terms(queries_final, policy, ctx.q_a)
            keys = keys[:, 1:].reshape((b, (n_a - 1) * m, d))
            bias, has_key = self._neighbor_gate(policy)
            safe = np.where(has_key[:, None, None, None], bias, 0.0)
            f_gt = self.gt_attn.attend(q_e, keys, keys, Tensor(safe))
            f_gt = f_gt * Tensor(has_key[:, None, None].astype(float))
        else:
            f_gt = Tensor(np.zeros((b, 1, d)))
        f_agent = self.agent_attn.attend(q_e, ctx.q_a, ctx.q_a)
        f_map = self.map_attn.attend(q_e, ctx.q_map, ctx.q_map)

        # reference point: probability-weighted ego endpoint
        ego_ends = policy.means[:, 0, :, -1, :]            # (B, M, 2)
        w = policy.probs[:, 0].reshape((b, m, 1))
        ref = (ego_ends * w).sum(axis=1).reshape((b, 1, 2))
        offsets = self.offset_head(q_e).reshape((b, 1, self.cfg.n_def_points, 2))
        sampled = nn.deformable_sample(occ_feat.h_occ, ref, offsets,
                                       occ_feat.spec.world_to_cell_t)
        f_occ = self.occ_proj(sampled)

        cat = ad.concat([f_gt + f_agent, f_map, f_occ], axis=-1)
        return self.ffn(self.cat_proj(cat), ctx=run)


class EgoPlanner:
    def __init__(self, store: nn.ParamStore, cfg: ModelConfig, horizon: int):
        if cfg.plan_layers < 1:
            raise ConfigurationError(f"plan_layers must be >= 1, got {cfg.plan_layers}")
        d = cfg.embed_dim
        self.cfg = cfg
        self.horizon = horizon
        self.context_encoder = PlanContextEncoder(store, d, cfg.ego_status)
        self.fuse_mlp = nn.MLP(store, "planner.fuse_mlp", [2 * d, d, d])
        self.layers = [PlanInteractionLayer(store, f"planner.layer{i}", cfg, horizon)
                       for i in range(cfg.plan_layers)]
        self.traj_head = nn.MLP(store, "planner.traj_head", [d, d, horizon * 2])

    def build_plan_query(self, ego_mode_queries: Tensor, ctx_e: PlanContext) -> Tensor:
        """Max-pool over modes of MLP([ego reasoning features; plan context])."""
        b, m, d = ego_mode_queries.shape
        h = ad.broadcast_to(ctx_e.h_e, (b, m, d))
        fused = self.fuse_mlp(ad.concat([ego_mode_queries, h], axis=-1))
        return fused.max(axis=1, keepdims=True)   # (B, 1, D)

    def plan(self, q_e: Tensor, policy: GmmPolicy, queries_final: Tensor,
             ctx: ContextFeatures, occ_feat: OccFeature,
             run: nn.RunContext | None = None) -> PlanTrajectory:
        for layer in self.layers:
            q_e = layer(q_e, policy, queries_final, ctx, occ_feat, run)
        b = q_e.shape[0]
        tau = self.traj_head(q_e).reshape((b, self.horizon, 2))
        return PlanTrajectory(tau)


def plan_loss(tau: PlanTrajectory | Tensor, gt_future: Array) -> Tensor:
    """Mean over steps of squared Euclidean distance to the logged ego future."""
    t = tau.tau if isinstance(tau, PlanTrajectory) else tau
    gt = np.asarray(gt_future, dtype=np.float64)
    if gt.ndim == 2:
        gt = gt[None]
    if t.shape != gt.shape:
        raise ContractError(f"plan shape {t.shape} vs ground truth {gt.shape}")
    sq = ((t - Tensor(gt)) ** 2.0).sum(axis=-1)   # (B, T)
    return sq.mean()
