"""Plan-context encoding, mode max-pool fusion, interaction stack, and the
plan loss."""

import numpy as np
import pytest

import hybridplan.autodiff as ad
import hybridplan.ego_planner as ep
import hybridplan.nn as nn
import hybridplan.scene as sc
from hybridplan.autodiff import Tensor, fd_check
from hybridplan.config import GeneratorConfig, GridConfig, ModelConfig, TrainConfig
from hybridplan.errors import ConfigurationError, ContractError
from hybridplan.gtformer import GmmPolicy
from hybridplan.model import HppModel


def small_cfg(**kw):
    cfg = TrainConfig()
    cfg.grid = GridConfig(16, 16, 1.0, 4, 0.5)
    cfg.generator = GeneratorConfig(n_agents=3)
    cfg.model = ModelConfig(embed_dim=16, heads=2, modes=2, reasoning_levels=2,
                            occ_levels=1, plan_layers=2, pe_dim=8, dropout=0.0,
                            window=4, shift=2, ffn_hidden_grid=8)
    for k, v in kw.items():
        setattr(cfg.model, k, v)
    return cfg


# -- plan context -----------------------------------------------------------------------

def test_context_inputs_layout_and_ego_slice():
    goal = np.array([[4.0, -8.0]])
    no_status = ep.plan_context_inputs(goal, ["left"], ["green"], None)
    with_status = ep.plan_context_inputs(goal, ["left"], ["green"], np.array([[5.0, 0.3]]))
    # toggling the flag changes only the trailing slice
    assert with_status.shape[1] == no_status.shape[1] + 2
    assert np.array_equal(with_status[0, :no_status.shape[1]], no_status[0])
    assert np.allclose(with_status[0, -2:], [0.5, 0.3])


def test_context_encoder_deterministic_and_zero_params():
    store = nn.ParamStore(0)
    enc = ep.PlanContextEncoder(store, 16, with_ego_status=False)
    goal = np.array([[1.0, 2.0]])
    a = enc(goal, ["straight"], ["none"], None).h_e.data
    b = enc(goal, ["straight"], ["none"], None).h_e.data
    assert np.array_equal(a, b)
    for t in store.tensors():
        t.data[:] = 0.0
    enc.mlp.layers[-1].b.data[:] = 0.7
    out = enc(goal, ["straight"], ["none"], None).h_e.data
    assert np.allclose(out, 0.7)


def test_context_rejects_unknown_tags():
    with pytest.raises(ConfigurationError):
        ep.plan_context_inputs(np.zeros((1, 2)), ["reverse"], ["green"], None)
    with pytest.raises(ConfigurationError):
        ep.plan_context_inputs(np.zeros((1, 2)), ["left"], ["purple"], None)


# -- plan query fusion --------------------------------------------------------------------

def make_planner(seed=0, modes=2):
    store = nn.ParamStore(seed)
    cfg = small_cfg().model
    cfg.modes = modes
    planner = ep.EgoPlanner(store, cfg, horizon=4)
    return store, planner


def test_build_plan_query_single_mode_identity():
    store, planner = make_planner(modes=1)
    rng = np.random.default_rng(0)
    q = Tensor(rng.standard_normal((1, 1, 16)))
    ctx_e = ep.PlanContext(Tensor(rng.standard_normal((1, 1, 16))))
    out = planner.build_plan_query(q, ctx_e)
    fused = planner.fuse_mlp(ad.concat([q, ctx_e.h_e], axis=-1))
    assert np.array_equal(out.data, fused.data)


def test_build_plan_query_duplicate_mode_invariant():
    # max-pool idempotence: duplicating a mode row leaves Q_E bit-identical
    store, planner = make_planner(1, modes=2)
    rng = np.random.default_rng(1)
    rows = rng.standard_normal((1, 2, 16))
    ctx_e = ep.PlanContext(Tensor(rng.standard_normal((1, 1, 16))))
    out2 = planner.build_plan_query(Tensor(rows), ctx_e)
    dup = np.concatenate([rows, rows[:, 1:]], axis=1)  # duplicate the last mode
    out3 = planner.build_plan_query(Tensor(dup), ctx_e)
    assert np.array_equal(out2.data, out3.data)


def test_build_plan_query_matches_elementwise_max_loop():
    store, planner = make_planner(2, modes=3)
    rng = np.random.default_rng(2)
    q = rng.standard_normal((1, 3, 16))
    ctx_e = ep.PlanContext(Tensor(rng.standard_normal((1, 1, 16))))
    out = planner.build_plan_query(Tensor(q), ctx_e).data
    h = np.broadcast_to(ctx_e.h_e.data, (1, 3, 16))
    fused = planner.fuse_mlp(Tensor(np.concatenate([q, h], axis=-1))).data
    want = np.max(fused, axis=1, keepdims=True)
    assert np.allclose(out, want, atol=1e-15)
    # mode permutation invariance, bit-exact
    perm = [2, 0, 1]
    out_p = planner.build_plan_query(Tensor(q[:, perm]), ctx_e).data
    assert np.array_equal(out, out_p)


# -- interaction stack ----------------------------------------------------------------------

def full_forward(seed=0, scen_seed=3, **kw):
    cfg = small_cfg(**kw)
    cfg.seed = seed
    model = HppModel(cfg)
    scens = [sc.generate_scenario(scen_seed, cfg.generator, cfg.grid)]
    batch = model.make_batch(scens)
    return model, scens, batch, model.forward(batch)


def test_plan_zero_head_gives_bias_trajectory():
    cfg = small_cfg()
    model = HppModel(cfg)
    for layer in model.planner.traj_head.layers:
        layer.w.data[:] = 0.0
        layer.b.data[:] = 0.0
    model.planner.traj_head.layers[-1].b.data[:] = 0.5
    scens = [sc.generate_scenario(1, cfg.generator, cfg.grid)]
    out = model.forward(model.make_batch(scens))
    assert np.allclose(out.plan.tau.data, 0.5)


def test_plan_ignores_far_neighbor_policies_zero_occ():
    # with every neighbor gated out (far away) and zero occupancy, the plan
    # depends only on ego features and context
    model, scens, batch, _ = full_forward(4, scen_seed=6)
    ctx = model.encoder.encode_batch(scens)
    pyramid = model.occformer.build_query_pyramid(ctx.q_b)
    occ_feat = model.occ_fusion_plan(np.zeros((1, 4, 16 // 2, 16 // 2)),
                                     pyramid.levels[0])
    rng = np.random.default_rng(0)
    q_e = Tensor(rng.standard_normal((1, 1, 16)))
    qf = Tensor(rng.standard_normal((1, 3, 2, 16)))

    def far_policy(shift):
        means = np.full((1, 3, 2, 4, 2), 100.0 + shift)
        means[0, 0] = 0.0  # ego stays near the origin
        return GmmPolicy(Tensor(means), Tensor(np.zeros_like(means)),
                         Tensor(np.full((1, 3, 2), 0.5)), 1)

    tau_a = model.planner.plan(q_e, far_policy(0.0), qf, ctx, occ_feat).tau.data
    tau_b = model.planner.plan(q_e, far_policy(50.0), qf, ctx, occ_feat).tau.data
    assert np.array_equal(tau_a, tau_b)


def test_plan_sensitive_to_near_neighbor_trajectories():
    model, scens, batch, out = full_forward(5, scen_seed=7)
    ctx = model.encoder.encode_batch(scens)
    pyramid = model.occformer.build_query_pyramid(ctx.q_b)
    occ_feat = model.occ_fusion_plan(model._pool_to_coarse(batch.occ_prior),
                                     pyramid.levels[0])
    rng = np.random.default_rng(1)
    q_e = Tensor(rng.standard_normal((1, 1, 16)))
    qf = Tensor(rng.standard_normal((1, 3, 2, 16)))

    def near_policy(offset):
        means = rng.uniform(-5, 5, (1, 3, 2, 4, 2)).copy()
        means[0, 1] += offset
        return GmmPolicy(Tensor(means), Tensor(np.zeros_like(means)),
                         Tensor(np.full((1, 3, 2), 0.5)), 1)

    rng = np.random.default_rng(1)
    pa = near_policy(0.0)
    rng = np.random.default_rng(1)
    pb = near_policy(2.0)   # perturb a neighbor within the 10 m gate
    tau_a = model.planner.plan(q_e, pa, qf, ctx, occ_feat).tau.data
    tau_b = model.planner.plan(q_e, pb, qf, ctx, occ_feat).tau.data
    assert not np.allclose(tau_a, tau_b)


def test_plan_deterministic_function():
    model, scens, batch, out1 = full_forward(6, scen_seed=8)
    out2 = model.forward(model.make_batch(scens))
    assert np.array_equal(out1.plan.tau.data, out2.plan.tau.data)


def test_plan_layers_config_error():
    cfg = small_cfg(plan_layers=0)
    with pytest.raises(ConfigurationError):
        HppModel(cfg)


# -- plan loss ---------------------------------------------------------------------------------

def test_plan_loss_zero_at_gt():
    tau = np.random.default_rng(0).standard_normal((1, 4, 2))
    assert ep.plan_loss(Tensor(tau.copy()), tau).item() == 0.0


def test_plan_loss_unit_offset_is_one():
    gt = np.zeros((1, 4, 2))
    tau = gt.copy()
    tau[..., 0] += 1.0   # 1 m offset at every step
    assert abs(ep.plan_loss(Tensor(tau), gt).item() - 1.0) < 1e-12


def test_plan_loss_nonnegative_and_fd():
    rng = np.random.default_rng(3)
    gt = rng.standard_normal((1, 4, 2))
    tau = rng.standard_normal((1, 4, 2))
    assert ep.plan_loss(Tensor(tau), gt).item() >= 0.0
    assert fd_check(lambda ts: ep.plan_loss(ts[0].reshape((1, 4, 2)), gt),
                    [tau.reshape(-1)], h=1e-6) < 1e-6


def test_plan_loss_shape_contract():
    with pytest.raises(ContractError):
        ep.plan_loss(Tensor(np.zeros((1, 4, 2))), np.zeros((1, 5, 2)))
