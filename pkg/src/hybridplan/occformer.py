"""Marginal-conditioned multi-scale occupancy prediction.

A pyramid of occupancy queries (coarsest to finest) is integrated with
per-step marginal features through a global (dense) stage at the coarsest
scale and shifted-window cross attention at finer scales, steered by a
learnable attention-mask pyramid that is refined scale by scale. The
finest integrated state is decoded into per-agent occupancy channels by
dot products, and the joint grid is their exact max.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .config import ModelConfig
from .errors import ConfigurationError, ContractError, DataError, ShapeError
from .gtformer import GmmPolicy, ModeFusion
from .scene import ConditionedOccupancy, GridSpec

Array = np.ndarray


@dataclass
class MarginalFeatures:
    """Per-horizon marginal features H_traj: (B, T, N_A, D)."""

    features: Tensor


@dataclass
class OccQueryPyramid:
    """Grid features per level, ordered coarsest -> finest; level i has
    extents (H/2^(L-i), W/2^(L-i))."""

    levels: list[Tensor]          # each (B, h_l, w_l, D)
    specs: list[GridSpec]


@dataclass
class AttentionMaskPyramid:
    """Per-level masks (B, T, h_l, w_l, N_A) in [0, 1], coarsest -> finest."""

    masks: list[Tensor]


@dataclass
class PredictedOccupancy:
    """Conditioned occupancy on the tape: logits plus derived probabilities."""

    logits: Tensor                # (B, T, H, W, N_A)
    probs: Tensor                 # sigmoid(logits)
    joint: Tensor                 # (B, T, H, W) = max over agents, exact

    def to_numpy(self, batch_index: int = 0) -> ConditionedOccupancy:
        return ConditionedOccupancy(self.probs.data[batch_index])


class MarginalFusion:
    """Eq.-2 marginal fusion with per-horizon projections MLP_{1:T}."""

    def __init__(self, store: nn.ParamStore, name: str, dim: int, pe_dim: int, horizon: int):
        self.mode_fusion = ModeFusion(store, f"{name}.modes", dim, pe_dim, horizon)
        self.per_step = nn.Linear(store, f"{name}.per_step", dim, horizon * dim)
        self.horizon = horizon
        self.dim = dim

    def __call__(self, queries: Tensor, policy: GmmPolicy, q_a: Tensor) -> MarginalFeatures:
        fused = self.mode_fusion.fused(queries, policy, q_a)     # (B, N_A, D)
        b, n_a, d = fused.shape
        steps = self.per_step(fused).reshape((b, n_a, self.horizon, d))
        return MarginalFeatures(steps.transpose((0, 2, 1, 3)))   # (B, T, N_A, D)


def avg_pool2(x: Tensor) -> Tensor:
    """Strided 2x average pooling over the two grid axes of (..., H, W, D)."""
    shape = x.shape
    h, w, d = shape[-3], shape[-2], shape[-1]
    if h % 2 or w % 2:
        raise ConfigurationError(f"grid extents ({h}, {w}) not divisible by 2")
    lead = shape[:-3]
    r = x.reshape(lead + (h // 2, 2, w // 2, 2, d))
    n = len(lead)
    return r.mean(axis=(n + 1, n + 3))


def upsample2(x: Tensor, axes: tuple[int, int]) -> Tensor:
    """Nearest-neighbor 2x upsampling along two axes (preserves [0,1])."""
    return ad.repeat2(ad.repeat2(x, axes[0]), axes[1])


class OccFormer:
    """Streaming multi-scale integration of occupancy with marginal features."""

    def __init__(self, store: nn.ParamStore, cfg: ModelConfig, spec: GridSpec):
        self.cfg = cfg
        self.spec = spec
        self.levels = cfg.occ_levels
        d = cfg.embed_dim
        self.specs = [spec.coarse(2 ** (self.levels - i)) if i < self.levels else spec
                      for i in range(self.levels + 1)]
        self.query_mlp = nn.MLP(store, "occformer.query_mlp", [cfg.pe_dim + d, d])
        self.mask_mlps = [nn.Linear(store, f"occformer.mask_mlp{i}", d, d)
                          for i in range(self.levels + 1)]
        self.blocks = [
            (nn.MultiHeadAttention(store, f"occformer.attn{i}", d, cfg.heads, cfg.dropout),
             nn.FFN(store, f"occformer.ffn{i}", d, cfg.ffn_hidden_grid, cfg.dropout))
            for i in range(self.levels + 1)
        ]
        self.decode_mlp = nn.Linear(store, "occformer.decode_mlp", d, d)
        self._pe_fine: Array | None = None

    # -- queries -------------------------------------------------------------

    def build_query_pyramid(self, q_b: Tensor) -> OccQueryPyramid:
        """Q_occ = MLP([PE(I_B); upsample(Q_B)]) at the finest grid, then
        repeated 2x average pooling down to the coarsest level."""
        spec = self.spec
        b = q_b.shape[0]
        factor = 2 ** self.levels
        if q_b.shape[1] * factor != spec.height_cells or q_b.shape[2] * factor != spec.width_cells:
            raise ShapeError(f"Q_B shape {q_b.shape} does not match coarse grid "
                             f"of ({spec.height_cells}, {spec.width_cells}) / {factor}")
        if self._pe_fine is None:
            self._pe_fine = nn.sinusoidal_pe(spec.centers_grid(), self.cfg.pe_dim).data
        up = q_b
        for _ in range(self.levels):
            up = upsample2(up, axes=(1, 2))
        pe = ad.broadcast_to(Tensor(self._pe_fine), (b,) + self._pe_fine.shape)
        finest = self.query_mlp(ad.concat([pe, up], axis=-1))
        levels = [finest]
        for _ in range(self.levels):
            levels.append(avg_pool2(levels[-1]))
        levels.reverse()  # coarsest first
        return OccQueryPyramid(levels, list(self.specs))

    # -- masks ----------------------------------------------------------------

    def predict_mask(self, q_level: Tensor, h_traj: MarginalFeatures, level: int) -> Tensor:
        """Eq. 4: sigmoid(Q_occ . MLP_l(H_traj)^T) -> (B, T, h, w, N_A)."""
        b, h, w, d = q_level.shape
        t, n_a = h_traj.features.shape[1], h_traj.features.shape[2]
        proj = self.mask_mlps[level](h_traj.features)            # (B, T, N_A, D)
        q_flat = q_level.reshape((b, 1, h * w, d))
        logits = q_flat @ proj.transpose((0, 1, 3, 2))           # (B, T, hw, N_A)
        return ad.sigmoid(logits).reshape((b, t, h, w, n_a))

    @staticmethod
    def update_mask(mask_prev: Tensor, mask_hat: Tensor, update_factor: float = 0.5) -> Tensor:
        """Eq. 5: convex combination with nearest-neighbor 2x upsampling."""
        if not 0.0 <= update_factor <= 1.0:
            raise ConfigurationError(f"mask update factor must lie in [0, 1], got {update_factor}")
        up = upsample2(mask_prev, axes=(2, 3))
        return up * update_factor + mask_hat * (1.0 - update_factor)

    def build_masks(self, pyramid: OccQueryPyramid, h_traj: MarginalFeatures,
                    update_factor: float) -> AttentionMaskPyramid:
        masks: list[Tensor] = []
        for i, q_level in enumerate(pyramid.levels):
            m_hat = self.predict_mask(q_level, h_traj, i)
            masks.append(m_hat if i == 0 else self.update_mask(masks[-1], m_hat, update_factor))
        return AttentionMaskPyramid(masks)

    # -- integration -----------------------------------------------------------

    def _mask_bias(self, mask_t: Tensor) -> Tensor:
        """Soft additive logit bias log(m / (1-m)) clamped to +/- the config bound."""
        return ad.logit_bias(mask_t, eps=1e-12, clamp=self.cfg.mask_bias_clamp)

    def integrate_step(self, state: list[Tensor], h_traj_t: Tensor,
                       masks_t: list[Tensor], run: nn.RunContext | None = None) -> list[Tensor]:
        """Eq. 6 for one timestep: dense attention at the coarsest level,
        SW-MCA at finer levels, each followed by its FFN."""
        if len(state) != self.levels + 1:
            raise ContractError("missing previous-step pyramid state")
        out: list[Tensor] = []
        for i, q_level in enumerate(state):
            attn, ffn = self.blocks[i]
            bias = self._mask_bias(masks_t[i])
            if i == 0:
                b, h, w, d = q_level.shape
                flat = q_level.reshape((b, h * w, d))
                dense_bias = bias.reshape((b, 1, h * w, bias.shape[-1]))
                upd = attn(flat, h_traj_t, h_traj_t, dense_bias, ctx=run).reshape(q_level.shape)
            else:
                window = min(self.cfg.window, q_level.shape[1], q_level.shape[2])
                shift = min(self.cfg.shift, window - 1)
                upd = nn.sw_mca(q_level, h_traj_t, window, shift, bias, attn=attn, ctx=run)
            out.append(ffn(upd, ctx=run))
        return out

    def integrate(self, pyramid: OccQueryPyramid, h_traj: MarginalFeatures,
                  masks: AttentionMaskPyramid, run: nn.RunContext | None = None
                  ) -> list[Tensor]:
        """Roll the recurrence over t = 1..T; returns the finest-level state
        per step, (B, h, w, D) each."""
        t_total = h_traj.features.shape[1]
        state = list(pyramid.levels)
        finest_states: list[Tensor] = []
        for t in range(t_total):
            h_t = h_traj.features[:, t]
            masks_t = [m[:, t] for m in masks.masks]
            state = self.integrate_step(state, h_t, masks_t, run)
            finest_states.append(state[-1])
        return finest_states

    # -- decoding ----------------------------------------------------------------

    def decode_conditioned_occupancy(self, finest_states: list[Tensor],
                                     h_traj: MarginalFeatures) -> PredictedOccupancy:
        """Eq. 3 per step from the finest integrated state; joint = exact max."""
        t_total = len(finest_states)
        if t_total != h_traj.features.shape[1]:
            raise ContractError("integration incomplete: state count != horizon")
        proj = self.decode_mlp(h_traj.features)       # (B, T, N_A, D)
        logits_steps = []
        for t, q in enumerate(finest_states):
            b, h, w, d = q.shape
            flat = q.reshape((b, h * w, d))
            lg = flat @ proj[:, t].transpose((0, 2, 1))   # (B, hw, N_A)
            logits_steps.append(lg.reshape((b, 1, h, w, lg.shape[-1])))
        logits = ad.concat(logits_steps, axis=1)
        probs, joint = ad.sigmoid_with_max(logits)
        return PredictedOccupancy(logits=logits, probs=probs, joint=joint)

    def forward(self, q_b: Tensor, queries_final, policy: GmmPolicy, q_a: Tensor,
                fusion: MarginalFusion, update_factor: float,
                run: nn.RunContext | None = None
                ) -> tuple[PredictedOccupancy, AttentionMaskPyramid, MarginalFeatures,
                           OccQueryPyramid]:
        h_traj = fusion(queries_final, policy, q_a)
        pyramid = self.build_query_pyramid(q_b)
        masks = self.build_masks(pyramid, h_traj, update_factor)
        finest = self.integrate(pyramid, h_traj, masks, run)
        pred = self.decode_conditioned_occupancy(finest, h_traj)
        return pred, masks, h_traj, pyramid


# -- loss --------------------------------------------------------------------------

def _topk_reduce(bce: Tensor, fraction: float) -> Tensor:
    """Mean of the hardest ``fraction`` of cells per frame per channel.

    bce: (B, T, h, w, C) elementwise loss. Selection runs on forward
    values; gradients flow through the selected terms only.
    """
    b, t, h, w, c = bce.shape
    cells = h * w
    k = max(1, int(round(fraction * cells)))
    flat = bce.reshape((b, t, cells, c)).transpose((0, 1, 3, 2))  # (B, T, C, cells)
    vals = flat.data
    thresh = np.partition(vals, cells - k, axis=-1)[..., cells - k:cells - k + 1]
    chosen = vals >= thresh
    # ties at the threshold can select extra cells; normalize by true count
    weights = chosen / chosen.sum(axis=-1, keepdims=True)
    return (flat * weights).sum() * (1.0 / (b * t * c))


def _topk_bce(logits: Tensor, gt: Array, fraction: float) -> Tensor:
    return _topk_reduce(ad.bce_with_logits(logits, gt), fraction)


def _dice(probs: Tensor, gt: Array, eps: float = 1e-6) -> Tensor:
    """Smooth Dice loss per frame per channel, averaged."""
    b, t, h, w, c = probs.shape
    p = probs.reshape((b, t, h * w, c))
    g = gt.reshape((b, t, h * w, c))
    inter = (p * g).sum(axis=2)
    denom = p.sum(axis=2) + Tensor(g.sum(axis=2))
    dice = 1.0 - (2.0 * inter + eps) / (denom + eps)
    return dice.mean()


def occupancy_loss(pred: PredictedOccupancy, masks: AttentionMaskPyramid,
                   gt: ConditionedOccupancy | Array, lambda_dice: float = 5.0,
                   topk_fraction: float = 0.25) -> Tensor:
    """Top-k BCE + lambda_dice * Dice over agent channels, plus the same pair
    on every mask level against max-pooled ground truth."""
    gt_arr = gt.conditioned if isinstance(gt, ConditionedOccupancy) else np.asarray(gt, float)
    if gt_arr.ndim == 4:
        gt_arr = gt_arr[None]
    if not np.all((gt_arr == 0.0) | (gt_arr == 1.0)):
        raise DataError("occupancy labels must be hard 0/1")
    if pred.logits.shape != gt_arr.shape:
        raise ShapeError(f"prediction shape {pred.logits.shape} vs labels {gt_arr.shape}")
    total = _topk_bce(pred.logits, gt_arr, topk_fraction) + lambda_dice * _dice(pred.probs, gt_arr)

    for mask in masks.masks:
        level_gt = gt_arr
        while level_gt.shape[2] > mask.shape[2]:
            b, t, h, w, c = level_gt.shape
            level_gt = level_gt.reshape(b, t, h // 2, 2, w // 2, 2, c).max(axis=(3, 5))
        total = total + _topk_reduce(ad.bce_probs(mask, level_gt), topk_fraction)
        total = total + lambda_dice * _dice(mask, level_gt)
    return total


def save_grid_dump(path: str, grid: Array) -> None:
    """Little-endian float32 dump, row-major (t, h, w, a), 4-extent header."""
    arr = np.asarray(grid)
    if arr.ndim != 4:
        raise DataError(f"grid dump expects a 4-D array, got shape {arr.shape}")
    with open(path, "wb") as f:
        f.write(np.array(arr.shape, dtype="<i8").tobytes())
        f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_grid_dump(path: str) -> Array:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise DataError(f"cannot read grid dump {path}: {e}") from e
    if len(raw) < 32:
        raise DataError(f"truncated grid dump: {path}")
    shape = tuple(np.frombuffer(raw[:32], dtype="<i8"))
    count = int(np.prod(shape))
    body = raw[32:]
    if len(body) != 4 * count:
        raise DataError(f"grid dump size mismatch in {path}: header {shape}, "
                        f"{len(body)} payload bytes")
    return np.frombuffer(body, dtype="<f4").reshape(shape).astype(np.float64)
