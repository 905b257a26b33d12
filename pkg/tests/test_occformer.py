"""Marginal fusion, query pyramid, mask prediction/update, step
integration vs a straight-line reimplementation, decoding, and the
occupancy loss against sort/loop oracles."""

import math

import numpy as np
import pytest

import hybridplan.autodiff as ad
import hybridplan.nn as nn
import hybridplan.occformer as of
import hybridplan.scene as sc
from hybridplan.autodiff import Tensor, fd_check
from hybridplan.config import GeneratorConfig, GridConfig, ModelConfig, TrainConfig
from hybridplan.errors import ConfigurationError, DataError
from hybridplan.gtformer import GmmPolicy
from hybridplan.model import HppModel


def make_occformer(seed=0, grid=8, levels=1, dim=8, horizon=3, n_agents=2, modes=2):
    store = nn.ParamStore(seed)
    spec = sc.GridSpec(grid, grid, 1.0, horizon, 0.5)
    cfg = ModelConfig(embed_dim=dim, heads=2, modes=modes, reasoning_levels=1,
                      occ_levels=levels, plan_layers=1, pe_dim=8, dropout=0.0,
                      window=4, shift=2, ffn_hidden_grid=8)
    occ = of.OccFormer(store, cfg, spec)
    fusion = of.MarginalFusion(store, "marg", dim, cfg.pe_dim, horizon)
    return store, spec, cfg, occ, fusion


def rand_policy(rng, n_agents, modes, horizon, probs=None):
    means = rng.uniform(-3, 3, (1, n_agents, modes, horizon, 2))
    log_stds = np.zeros_like(means)
    if probs is None:
        probs = rng.random((1, n_agents, modes))
        probs /= probs.sum(-1, keepdims=True)
    return GmmPolicy(Tensor(means), Tensor(log_stds), Tensor(np.asarray(probs, float)), 0)


# -- marginal fusion (Eq. 2) ----------------------------------------------------------

def test_fuse_marginal_one_hot_uses_single_mode():
    store, spec, cfg, occ, fusion = make_occformer()
    rng = np.random.default_rng(0)
    queries = Tensor(rng.standard_normal((1, 2, 2, 8)))
    q_a = Tensor(rng.standard_normal((1, 2, 8)))
    p_hot = np.zeros((1, 2, 2))
    p_hot[:, :, 1] = 1.0
    policy = rand_policy(rng, 2, 2, 3, probs=p_hot)
    out = fusion(queries, policy, q_a).features.data
    # oracle: only mode 1's term contributes
    pe = nn.sinusoidal_pe(policy.means, 8).data.reshape(1, 2, 2, 24)
    h_m = pe @ fusion.mode_fusion.traj_mlp.layers[0].w.data + \
        fusion.mode_fusion.traj_mlp.layers[0].b.data
    fused = (queries.data + h_m)[:, :, 1, :] + q_a.data
    steps = fused @ fusion.per_step.w.data + fusion.per_step.b.data
    want = steps.reshape(1, 2, 3, 8).transpose(0, 2, 1, 3)
    assert np.allclose(out, want, atol=1e-12)


def test_fuse_marginal_uniform_probs_mode_average():
    store, spec, cfg, occ, fusion = make_occformer(1)
    rng = np.random.default_rng(1)
    queries = Tensor(rng.standard_normal((1, 2, 2, 8)))
    q_a = Tensor(np.zeros((1, 2, 8)))
    uniform = np.full((1, 2, 2), 0.5)
    policy = rand_policy(rng, 2, 2, 3, probs=uniform)
    fused = fusion.mode_fusion.fused(queries, policy, q_a).data
    pe = nn.sinusoidal_pe(policy.means, 8).data.reshape(1, 2, 2, 24)
    h_m = pe @ fusion.mode_fusion.traj_mlp.layers[0].w.data + \
        fusion.mode_fusion.traj_mlp.layers[0].b.data
    want = 0.5 * (queries.data + h_m).sum(axis=2)
    assert np.allclose(fused, want, atol=1e-12)


def test_fuse_marginal_matches_loop_oracle():
    store, spec, cfg, occ, fusion = make_occformer(2)
    rng = np.random.default_rng(5)
    queries = Tensor(rng.standard_normal((1, 2, 2, 8)))
    q_a = Tensor(rng.standard_normal((1, 2, 8)))
    policy = rand_policy(rng, 2, 2, 3)
    out = fusion(queries, policy, q_a).features.data   # (1, T, N_A, D)
    w1 = fusion.mode_fusion.traj_mlp.layers[0]
    for a in range(2):
        fused = np.zeros(8)
        for m in range(2):
            pe = nn.sinusoidal_pe(policy.means.data[0, a, m], 8).data.reshape(-1)
            h_m = pe @ w1.w.data + w1.b.data
            fused += policy.probs.data[0, a, m] * (queries.data[0, a, m] + h_m)
        fused += q_a.data[0, a]
        steps = fused @ fusion.per_step.w.data + fusion.per_step.b.data
        for t in range(3):
            assert np.allclose(out[0, t, a], steps[t * 8:(t + 1) * 8], atol=1e-12)


# -- query pyramid ------------------------------------------------------------------------

def test_pyramid_constant_input_stays_constant():
    # constant finest-level queries stay constant at every pooled level
    store, spec, cfg, occ, _ = make_occformer(3, grid=8, levels=2)
    for layer in occ.query_mlp.layers:
        layer.w.data[:] = 0.0
    occ.query_mlp.layers[-1].b.data[:] = np.arange(8.0)
    q_b = Tensor(np.ones((1, 2, 2, 8)))
    pyr = occ.build_query_pyramid(q_b)
    for level in pyr.levels:
        assert np.allclose(level.data, np.arange(8.0), atol=1e-12)


def test_pyramid_level_zero_identity():
    store, spec, cfg, occ, _ = make_occformer(4, grid=8, levels=0)
    rng = np.random.default_rng(0)
    q_b = Tensor(rng.standard_normal((1, 8, 8, 8)))
    pyr = occ.build_query_pyramid(q_b)
    assert len(pyr.levels) == 1


def test_avg_pool_matches_hand_blocks():
    x = np.arange(16.0).reshape(1, 4, 4, 1)
    out = of.avg_pool2(Tensor(x)).data
    want = np.array([[[[x[0, i:i + 2, j:j + 2, 0].mean()] for j in (0, 2)] for i in (0, 2)]])
    assert np.allclose(out, want, atol=1e-15)


def test_pyramid_rejects_indivisible():
    store = nn.ParamStore(0)
    spec = sc.GridSpec(6, 6, 1.0, 2, 0.5)
    cfg = ModelConfig(embed_dim=8, heads=2, modes=2, occ_levels=2, pe_dim=8)
    with pytest.raises(ConfigurationError):
        of.OccFormer(store, cfg, spec)


# -- masks (Eqs. 4-5) ------------------------------------------------------------------------

def test_predict_mask_zero_features_half():
    store, spec, cfg, occ, fusion = make_occformer(5)
    h = of.MarginalFeatures(Tensor(np.zeros((1, 3, 2, 8))))
    q = Tensor(np.zeros((1, 8, 8, 8)))
    for mlp in occ.mask_mlps:
        mlp.w.data[:] = 0.0
        mlp.b.data[:] = 0.0
    m = occ.predict_mask(q, h, 0)
    assert np.allclose(m.data, 0.5)


def test_predict_mask_monotone_in_logit_scale():
    store, spec, cfg, occ, fusion = make_occformer(6)
    rng = np.random.default_rng(2)
    h = of.MarginalFeatures(Tensor(rng.standard_normal((1, 3, 2, 8))))
    q = rng.standard_normal((1, 8, 8, 8))
    m1 = occ.predict_mask(Tensor(q), h, 0).data
    m2 = occ.predict_mask(Tensor(q * 10.0), h, 0).data
    drift = np.where(m1 > 0.5, m2 - m1, m1 - m2)
    assert np.all(drift >= -1e-9)  # scaling pushes entries toward {0,1}


def test_predict_mask_matches_dot_loop():
    store, spec, cfg, occ, fusion = make_occformer(7)
    rng = np.random.default_rng(3)
    h = of.MarginalFeatures(Tensor(rng.standard_normal((1, 3, 2, 8))))
    q = Tensor(rng.standard_normal((1, 8, 8, 8)))
    m = occ.predict_mask(q, h, 0).data
    proj = h.features.data @ occ.mask_mlps[0].w.data + occ.mask_mlps[0].b.data
    for t in range(3):
        for i in range(8):
            for j in range(8):
                for a in range(2):
                    logit = q.data[0, i, j] @ proj[0, t, a]
                    want = 1.0 / (1.0 + math.exp(-logit))
                    assert abs(m[0, t, i, j, a] - want) < 1e-12


def test_update_mask_arithmetic():
    prev = Tensor(np.full((1, 1, 2, 2, 1), 0.4))
    hat = Tensor(np.full((1, 1, 4, 4, 1), 0.8))
    out = of.OccFormer.update_mask(prev, hat, 0.5)
    assert np.allclose(out.data, 0.6, atol=1e-15)


def test_update_mask_fixed_point_and_bounds():
    rng = np.random.default_rng(4)
    prev = rng.random((1, 2, 2, 2, 3))
    hat_equal = np.repeat(np.repeat(prev, 2, axis=2), 2, axis=3)
    out = of.OccFormer.update_mask(Tensor(prev), Tensor(hat_equal), 0.5)
    assert np.allclose(out.data, hat_equal, atol=1e-15)
    hat = rng.random((1, 2, 4, 4, 3))
    out = of.OccFormer.update_mask(Tensor(prev), Tensor(hat), 0.5).data
    up = np.repeat(np.repeat(prev, 2, axis=2), 2, axis=3)
    assert np.all(out <= np.maximum(up, hat) + 1e-15)
    assert np.all(out >= np.minimum(up, hat) - 1e-15)


def test_update_mask_contraction_property():
    rng = np.random.default_rng(8)
    for lam in (0.25, 0.5, 0.75):
        prev = rng.random((1, 1, 2, 2, 1))
        hat = rng.random((1, 1, 4, 4, 1))
        out = of.OccFormer.update_mask(Tensor(prev), Tensor(hat), lam).data
        up = np.repeat(np.repeat(prev, 2, axis=2), 2, axis=3)
        assert np.allclose(np.abs(out - hat), lam * np.abs(up - hat), atol=1e-12)


def test_update_mask_bad_factor():
    with pytest.raises(ConfigurationError):
        of.OccFormer.update_mask(Tensor(np.zeros((1, 1, 2, 2, 1))),
                                 Tensor(np.zeros((1, 1, 4, 4, 1))), 1.5)


# -- integration (Eq. 6) ------------------------------------------------------------------------

def test_integrate_neutral_mask_equals_unmasked():
    store, spec, cfg, occ, fusion = make_occformer(9, levels=0)
    rng = np.random.default_rng(0)
    state = [Tensor(rng.standard_normal((1, 8, 8, 8)))]
    h_t = Tensor(rng.standard_normal((1, 2, 8)))
    neutral = Tensor(np.full((1, 8, 8, 2), 0.5))   # logit(0.5) = 0 bias
    out_masked = occ.integrate_step(state, h_t, [neutral])[0].data
    attn, ffn = occ.blocks[0]
    flat = state[0].reshape((1, 64, 8))
    out_plain = ffn(attn(flat, h_t, h_t)).reshape((1, 8, 8, 8)).data
    assert np.allclose(out_masked, out_plain, atol=1e-12)


def test_integrate_single_agent_key():
    store, spec, cfg, occ, fusion = make_occformer(10, levels=0, n_agents=1)
    rng = np.random.default_rng(1)
    state = [Tensor(rng.standard_normal((1, 8, 8, 8)))]
    h_t = Tensor(rng.standard_normal((1, 1, 8)))
    mask = Tensor(np.full((1, 8, 8, 1), 0.9))
    out = occ.integrate_step(state, h_t, [mask])[0]
    # single key: attention output per query is that key's value projection,
    # independent of the mask bias
    attn, ffn = occ.blocks[0]
    flat = state[0].reshape((1, 64, 8))
    want = ffn(attn(flat, h_t, h_t)).reshape((1, 8, 8, 8)).data
    assert np.allclose(out.data, want, atol=1e-12)


def test_two_level_integration_matches_reference_reimplementation():
    store, spec, cfg, occ, fusion = make_occformer(11, grid=8, levels=1, horizon=2)
    rng = np.random.default_rng(6)
    q_b = Tensor(rng.standard_normal((1, 4, 4, 8)))
    pyramid = occ.build_query_pyramid(q_b)
    h_traj = of.MarginalFeatures(Tensor(rng.standard_normal((1, 2, 2, 8))))
    masks = occ.build_masks(pyramid, h_traj, 0.5)
    finest = occ.integrate(pyramid, h_traj, masks)

    # straight-line reimplementation: dense attention at the coarse level,
    # explicit window loop at the fine level
    from test_nn import brute_force_sw_mca
    state = [lvl.data.copy() for lvl in pyramid.levels]
    for t in range(2):
        h_t = h_traj.features.data[0, t]
        new_state = []
        for i, q in enumerate(state):
            attn, ffn = occ.blocks[i]
            m = masks.masks[i].data[0, t]
            bias = np.clip(np.log(m + 1e-12) - np.log(1 - m + 1e-12), -10, 10)
            if i == 0:
                flat = q.reshape(1, -1, 8)
                dense = attn(Tensor(flat[0]), Tensor(h_t), Tensor(h_t),
                             Tensor(bias.reshape(1, -1, 2)))
                upd = dense.data.reshape(q.shape)
            else:
                window = min(4, q.shape[1])
                shift = min(2, window - 1)
                upd = brute_force_sw_mca(q[0], h_t, window, shift, bias, attn)[None]
            new_state.append(ffn(Tensor(upd)).data)
        state = new_state
    assert np.max(np.abs(finest[-1].data - state[-1])) < 1e-10


def test_streaming_causality():
    # step-t output is bit-invariant to marginal features at t' > t
    store, spec, cfg, occ, fusion = make_occformer(12, horizon=3)
    rng = np.random.default_rng(7)
    q_b = Tensor(rng.standard_normal((1, 4, 4, 8)))
    h1 = rng.standard_normal((1, 3, 2, 8))
    h2 = h1.copy()
    h2[:, 2] += 5.0   # change only the last step
    pyr1 = occ.build_query_pyramid(q_b)
    m1 = occ.build_masks(pyr1, of.MarginalFeatures(Tensor(h1)), 0.5)
    f1 = occ.integrate(pyr1, of.MarginalFeatures(Tensor(h1)), m1)
    pyr2 = occ.build_query_pyramid(q_b)
    m2 = occ.build_masks(pyr2, of.MarginalFeatures(Tensor(h2)), 0.5)
    f2 = occ.integrate(pyr2, of.MarginalFeatures(Tensor(h2)), m2)
    d1 = occ.decode_conditioned_occupancy(f1, of.MarginalFeatures(Tensor(h1)))
    d2 = occ.decode_conditioned_occupancy(f2, of.MarginalFeatures(Tensor(h2)))
    assert np.array_equal(d1.probs.data[:, :2], d2.probs.data[:, :2])
    assert not np.allclose(d1.probs.data[:, 2], d2.probs.data[:, 2])


# -- decoding (Eq. 3) -----------------------------------------------------------------------------

def test_decode_zero_features_half_probability():
    store, spec, cfg, occ, fusion = make_occformer(13)
    occ.decode_mlp.w.data[:] = 0.0
    occ.decode_mlp.b.data[:] = 0.0
    states = [Tensor(np.zeros((1, 8, 8, 8))) for _ in range(3)]
    h = of.MarginalFeatures(Tensor(np.zeros((1, 3, 2, 8))))
    pred = occ.decode_conditioned_occupancy(states, h)
    assert np.allclose(pred.probs.data, 0.5)


def test_joint_is_exact_max_over_channels():
    store, spec, cfg, occ, fusion = make_occformer(14)
    rng = np.random.default_rng(9)
    states = [Tensor(rng.standard_normal((1, 8, 8, 8))) for _ in range(3)]
    h = of.MarginalFeatures(Tensor(rng.standard_normal((1, 3, 2, 8))))
    pred = occ.decode_conditioned_occupancy(states, h)
    assert np.array_equal(pred.joint.data, pred.probs.data.max(axis=-1))
    # explicit per-cell loop oracle
    p = pred.probs.data
    for t in range(3):
        for i in range(8):
            for j in range(8):
                assert pred.joint.data[0, t, i, j] == max(p[0, t, i, j, a] for a in range(2))


def test_mask_and_occupancy_ranges():
    for seed in range(3):
        store, spec, cfg, occ, fusion = make_occformer(20 + seed)
        rng = np.random.default_rng(seed)
        q_b = Tensor(rng.standard_normal((1, 4, 4, 8)) * 10)
        pyramid = occ.build_query_pyramid(q_b)
        h = of.MarginalFeatures(Tensor(rng.standard_normal((1, 3, 2, 8)) * 10))
        masks = occ.build_masks(pyramid, h, 0.5)
        for m in masks.masks:
            assert m.data.min() >= 0.0 and m.data.max() <= 1.0
        finest = occ.integrate(pyramid, h, masks)
        pred = occ.decode_conditioned_occupancy(finest, h)
        assert pred.probs.data.min() >= 0.0 and pred.probs.data.max() <= 1.0


# -- loss -------------------------------------------------------------------------------------------

def empty_masks():
    return of.AttentionMaskPyramid([])


def test_loss_perfect_prediction_zero_dice():
    rng = np.random.default_rng(0)
    gt = (rng.random((1, 2, 4, 4, 2)) > 0.6).astype(float)
    probs = Tensor(gt.copy())
    d = of._dice(probs, gt)
    assert abs(d.item()) < 1e-9


def test_loss_uniform_half_bce_is_ln2():
    gt = (np.random.default_rng(1).random((1, 2, 4, 4, 2)) > 0.5).astype(float)
    logits = Tensor(np.zeros((1, 2, 4, 4, 2)))
    val = of._topk_bce(logits, gt, 0.25)
    assert abs(val.item() - math.log(2.0)) < 1e-12


def test_topk_selection_matches_sort_oracle():
    rng = np.random.default_rng(2)
    logits = rng.standard_normal((1, 1, 4, 4, 1)) * 3
    gt = (rng.random((1, 1, 4, 4, 1)) > 0.5).astype(float)
    got = of._topk_bce(Tensor(logits), gt, 0.25).item()
    x = logits.reshape(-1)
    t = gt.reshape(-1)
    bce = np.maximum(x, 0) - x * t + np.log1p(np.exp(-np.abs(x)))
    k = max(1, int(round(0.25 * 16)))
    want = np.sort(bce)[-k:].mean()
    assert abs(got - want) < 1e-12


def test_occupancy_loss_rejects_soft_labels():
    store, spec, cfg, occ, fusion = make_occformer(15)
    pred = of.PredictedOccupancy(Tensor(np.zeros((1, 2, 4, 4, 2))),
                                 Tensor(np.full((1, 2, 4, 4, 2), 0.5)),
                                 Tensor(np.full((1, 2, 4, 4), 0.5)))
    with pytest.raises(DataError):
        of.occupancy_loss(pred, empty_masks(), np.full((1, 2, 4, 4, 2), 0.3))


def test_occupancy_loss_gradient_fd():
    rng = np.random.default_rng(3)
    gt = (rng.random((1, 2, 4, 4, 2)) > 0.7).astype(float)
    logits0 = rng.standard_normal((1, 2, 4, 4, 2))
    mask0 = rng.random((1, 2, 4, 4, 2)) * 0.8 + 0.1

    def f(ts):
        probs, joint = ad.sigmoid_with_max(ts[0])
        pred = of.PredictedOccupancy(ts[0], probs, joint)
        masks = of.AttentionMaskPyramid([ad.sigmoid(ts[1])])
        return of.occupancy_loss(pred, masks, gt, lambda_dice=5.0, topk_fraction=0.25)

    assert fd_check(f, [logits0, np.log(mask0 / (1 - mask0))], h=1e-6, sample=40) < 1e-4


# -- grid dump ------------------------------------------------------------------------------------

def test_grid_dump_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    grid = rng.random((2, 4, 4, 3)).astype(np.float32).astype(np.float64)
    path = str(tmp_path / "g.grid")
    of.save_grid_dump(path, grid)
    loaded = of.load_grid_dump(path)
    assert np.array_equal(loaded, grid)
    of.save_grid_dump(str(tmp_path / "g2.grid"), loaded)
    assert open(path, "rb").read() == open(str(tmp_path / "g2.grid"), "rb").read()


def test_grid_dump_truncated(tmp_path):
    path = str(tmp_path / "bad.grid")
    of.save_grid_dump(path, np.zeros((1, 2, 2, 1)))
    raw = open(path, "rb").read()
    open(path, "wb").write(raw[:-3])
    with pytest.raises(DataError):
        of.load_grid_dump(path)
