"""Full-stack model: context encoding, game-theoretic reasoning over a
constant-velocity occupancy prior, marginal-conditioned occupancy
prediction from the final policies, and the prediction-aware planner.

Execution order is one acyclic alternation: GTFormer first (its joint
features come from the constant-velocity prior), MS-OccFormer second
(conditioned on the final policies), Ego Planner last (conditioned on
both). Losses cover occupancy (BCE+Dice on channels and masks), the
per-level imitation NLL, the interactive collision term, and the plan L2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .config import TrainConfig
from .errors import NumericError
from .ego_planner import EgoPlanner, PlanTrajectory, plan_loss
from .gtformer import GmmPolicy, GTFormer, MotionQueries, OccupancyFusion, collision_loss, nll_loss
from .occformer import (AttentionMaskPyramid, MarginalFeatures, MarginalFusion, OccFormer,
                        PredictedOccupancy)
from .scene import (ConditionedOccupancy, ContextEncoder, ContextFeatures, GridSpec, Scenario,
                    constant_velocity_prior, grid_from_config, rasterize_gt_occupancy)

Array = np.ndarray


@dataclass
class ScenarioAssets:
    """Deterministic per-scenario arrays, computed once and reused across
    epochs (raw features, kinematic extracts, rasterized prior/labels)."""

    current_states: Array
    gt_future: Array
    future_valid: Array
    occ_prior: Array
    gt_occupancy: Array | None
    agent_rows: Array
    map_rows: Array
    sem_channels: Array
    goal: Array
    command: str
    tl_state: str
    ego_status: Array


@dataclass
class Batch:
    scenarios: list[Scenario]
    current_states: Array        # (B, N_A, 4)
    gt_futures: Array            # (B, N_A, T, 2)
    future_valid: Array          # (B, N_A, T)
    occ_prior: Array             # (B, T, H, W) constant-velocity rasterization
    gt_occupancy: Array | None   # (B, T, H, W, N_A) hard labels, when available
    agent_rows: Array | None = None
    map_rows: Array | None = None
    sem_channels: Array | None = None


@dataclass
class ModelOutput:
    context: ContextFeatures
    policies: list[GmmPolicy]
    queries_final: MotionQueries
    h_traj: MarginalFeatures
    occupancy: PredictedOccupancy
    masks: AttentionMaskPyramid
    plan: PlanTrajectory


class HppModel:
    def __init__(self, cfg: TrainConfig, store: nn.ParamStore | None = None):
        cfg.validate()
        self.cfg = cfg
        self.spec: GridSpec = grid_from_config(cfg.grid)
        self.store = store or nn.ParamStore(cfg.seed)
        mc = cfg.model
        coarse_factor = 2 ** mc.occ_levels
        self.coarse_spec = self.spec.coarse(coarse_factor)
        self.encoder = ContextEncoder(self.store, self.spec, mc.embed_dim, mc.pe_dim,
                                      cfg.generator.history_steps, coarse_factor)
        self.gtformer = GTFormer(self.store, mc, self.spec)
        self.occ_fusion_gt = OccupancyFusion(self.store, "gtformer.occ_fusion", mc.embed_dim,
                                             mc.pe_dim, self.coarse_spec)
        self.occformer = OccFormer(self.store, mc, self.spec)
        self.marginal_fusion = MarginalFusion(self.store, "occformer.marginal", mc.embed_dim,
                                              mc.pe_dim, self.spec.horizon_steps)
        self.occ_fusion_plan = OccupancyFusion(self.store, "planner.occ_fusion", mc.embed_dim,
                                               mc.pe_dim, self.coarse_spec)
        self.planner = EgoPlanner(self.store, mc, self.spec.horizon_steps)

    # -- data staging ------------------------------------------------------------

    def make_assets(self, scenario: Scenario, with_labels: bool = True,
                    labels: Array | None = None) -> ScenarioAssets:
        gt_occ = None
        if labels is not None:
            gt_occ = np.asarray(labels, dtype=np.float64)
        elif with_labels:
            gt_occ = rasterize_gt_occupancy(scenario, self.spec).conditioned
        return ScenarioAssets(
            current_states=scenario.current_states(),
            gt_future=scenario.future_array(),
            future_valid=scenario.future_valid(),
            occ_prior=constant_velocity_prior(scenario, self.spec),
            gt_occupancy=gt_occ,
            agent_rows=self.encoder.agent_features(scenario),
            map_rows=self.encoder.map_features(scenario),
            sem_channels=self.encoder.semantic_channels(scenario),
            goal=np.asarray(scenario.goal),
            command=scenario.command,
            tl_state=scenario.tl_state,
            ego_status=np.asarray(scenario.ego_status),
        )

    def batch_from_assets(self, scenarios: list[Scenario],
                          assets: list[ScenarioAssets]) -> Batch:
        have_labels = all(a.gt_occupancy is not None for a in assets)
        return Batch(
            scenarios,
            np.stack([a.current_states for a in assets]),
            np.stack([a.gt_future for a in assets]),
            np.stack([a.future_valid for a in assets]),
            np.stack([a.occ_prior for a in assets]),
            np.stack([a.gt_occupancy for a in assets]) if have_labels else None,
            agent_rows=np.stack([a.agent_rows for a in assets]),
            map_rows=np.stack([a.map_rows for a in assets]),
            sem_channels=np.stack([a.sem_channels for a in assets]),
        )

    def make_batch(self, scenarios: list[Scenario], with_labels: bool = True,
                   labels: Array | None = None) -> Batch:
        assets = [self.make_assets(s, with_labels,
                                   None if labels is None else labels[i])
                  for i, s in enumerate(scenarios)]
        return self.batch_from_assets(scenarios, assets)

    def _pool_to_coarse(self, grid: Tensor | Array) -> Tensor | Array:
        """(B, T, H, W) -> (B, T, H', W') by average pooling."""
        f = 2 ** self.cfg.model.occ_levels
        if isinstance(grid, Tensor):
            b, t, h, w = grid.shape
            r = grid.reshape((b, t, h // f, f, w // f, f))
            return r.mean(axis=(3, 5))
        b, t, h, w = grid.shape
        return grid.reshape(b, t, h // f, f, w // f, f).mean(axis=(3, 5))

    # -- forward -------------------------------------------------------------------

    def forward(self, batch: Batch, training: bool = False, seed: int = 0) -> ModelOutput:
        run = nn.RunContext(training=training, seed=seed) if training else None
        if batch.agent_rows is not None:
            ctx = self.encoder.encode_arrays(batch.agent_rows, batch.map_rows,
                                             batch.sem_channels)
        else:
            ctx = self.encoder.encode_batch(batch.scenarios)
        pyramid = self.occformer.build_query_pyramid(ctx.q_b)

        prior_coarse = self._pool_to_coarse(batch.occ_prior)
        h_occ_prior = self.occ_fusion_gt(prior_coarse, pyramid.levels[0])
        policies, queries_final = self.gtformer.rollout(ctx, h_occ_prior,
                                                        batch.current_states, run=run)

        h_traj = self.marginal_fusion(queries_final.features, policies[-1], ctx.q_a)
        masks = self.occformer.build_masks(pyramid, h_traj, self.cfg.model.mask_update_factor)
        finest = self.occformer.integrate(pyramid, h_traj, masks, run)
        occupancy = self.occformer.decode_conditioned_occupancy(finest, h_traj)

        goal = np.stack([np.asarray(s.goal) for s in batch.scenarios])
        commands = [s.command for s in batch.scenarios]
        tls = [s.tl_state for s in batch.scenarios]
        status = np.stack([np.asarray(s.ego_status) for s in batch.scenarios])
        ctx_e = self.planner.context_encoder(goal, commands, tls, status)
        q_e = self.planner.build_plan_query(queries_final.features[:, 0], ctx_e)
        occ_coarse_pred = self._pool_to_coarse(occupancy.joint)
        h_occ_plan = self.occ_fusion_plan(occ_coarse_pred, pyramid.levels[0])
        plan = self.planner.plan(q_e, policies[-1], queries_final.features, ctx,
                                 h_occ_plan, run)
        return ModelOutput(ctx, policies, queries_final, h_traj, occupancy, masks, plan)

    # -- losses ----------------------------------------------------------------------

    def losses(self, batch: Batch, out: ModelOutput) -> dict[str, Tensor]:
        from .occformer import occupancy_loss
        cfg = self.cfg
        terms: dict[str, Tensor] = {}
        if batch.gt_occupancy is not None:
            terms["occupancy"] = occupancy_loss(out.occupancy, out.masks, batch.gt_occupancy,
                                                cfg.lambda_dice, cfg.model.topk_fraction)
        terms["imitation"] = nll_loss(out.policies, batch.gt_futures, batch.future_valid)
        col = Tensor(np.zeros(()))
        for k, policy in enumerate(out.policies):
            prev = out.policies[k - 1] if k >= 1 else out.policies[0]
            col = col + collision_loss(policy, prev, cfg.d_col)
        terms["collision"] = col * cfg.lambda_col
        terms["plan"] = plan_loss(out.plan, batch.gt_futures[:, 0])
        total = None
        for name, term in terms.items():
            if not np.all(np.isfinite(term.data)):
                raise NumericError(f"non-finite loss term '{name}'")
            total = term if total is None else total + term
        terms["total"] = total
        return terms

    # -- persistence --------------------------------------------------------------

    def checkpoint_meta(self) -> dict[str, str]:
        mc = self.cfg.model
        return {"embed_dim": str(mc.embed_dim), "modes": str(mc.modes),
                "reasoning_levels": str(mc.reasoning_levels),
                "occ_levels": str(mc.occ_levels), "plan_layers": str(mc.plan_layers),
                "heads": str(mc.heads), "ego_status": str(mc.ego_status),
                "grid": f"{self.spec.height_cells}x{self.spec.width_cells}",
                "horizon": str(self.spec.horizon_steps)}

    def save(self, path: str) -> None:
        nn.save_checkpoint(path, self.store, self.checkpoint_meta())

    def load(self, path: str) -> None:
        from .errors import DataError
        state, meta = nn.load_checkpoint(path)
        want = self.checkpoint_meta()
        for key, val in want.items():
            if key in meta and meta[key] != val:
                raise DataError(f"checkpoint/config dim mismatch: {key}={meta[key]} "
                                f"in file, {val} in config")
        self.store.load_state_dict(state)
