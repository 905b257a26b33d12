"""Gradient and semantics checks for the reverse-mode tape.

Every differentiable op is checked against central finite differences
(the independent oracle) at several seeds, per the engine's contract.
"""

import numpy as np
import pytest

import hybridplan.autodiff as ad
from hybridplan.autodiff import Tensor, backward, fd_check
from hybridplan.errors import ContractError, NumericError, ShapeError

SEEDS = [0, 1, 2, 3, 4]


def rnd(rng, *shape):
    return rng.standard_normal(shape)


@pytest.mark.parametrize("seed", SEEDS)
def test_elementwise_ops_fd(seed):
    rng = np.random.default_rng(seed)
    x = rnd(rng, 4, 3)
    y = rnd(rng, 4, 3)

    cases = [
        lambda ts: (ts[0] * ts[1] + ts[0]).sum(),
        lambda ts: (ts[0] * 2.0 - ts[1] / 3.0).mean(),
        lambda ts: ad.texp(ts[0] * 0.3).sum() + ad.tlog(ad.texp(ts[1])).sum(),
        lambda ts: ad.relu(ts[0]).sum() + ad.sigmoid(ts[1]).mean(),
        lambda ts: ad.tsqrt(ts[0] * ts[0] + 1.0).sum(),
        lambda ts: (ts[0] ** 3.0).sum() + (ts[1] ** 2.0).mean(),
    ]
    for f in cases:
        assert fd_check(f, [x, y]) < 1e-4


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_fd(seed):
    rng = np.random.default_rng(seed)
    a = rnd(rng, 5, 4)
    b = rnd(rng, 4, 3)
    assert fd_check(lambda ts: (ts[0] @ ts[1]).sum(), [a, b]) < 1e-7
    # batched with broadcast on the weight
    ab = rnd(rng, 2, 5, 4)
    assert fd_check(lambda ts: ((ts[0] @ ts[1]) ** 2.0).sum(), [ab, b]) < 1e-6


def test_matmul_shape_error():
    with pytest.raises(ShapeError):
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((4, 2)))


@pytest.mark.parametrize("seed", SEEDS)
def test_reductions_fd(seed):
    rng = np.random.default_rng(seed)
    x = rnd(rng, 3, 4, 2)
    assert fd_check(lambda ts: ts[0].sum(axis=1).mean(), [x]) < 1e-7
    assert fd_check(lambda ts: ts[0].mean(axis=(0, 2)).sum(), [x]) < 1e-7
    assert fd_check(lambda ts: (ts[0].max(axis=1) * 2.0).sum(), [x]) < 1e-6
    assert fd_check(lambda ts: ts[0].max(axis=0, keepdims=True).sum(), [x]) < 1e-6


def test_max_ties_route_to_first():
    x = Tensor(np.array([[1.0, 1.0, 0.0]]), requires_grad=True)
    backward(x.max(axis=1).sum())
    assert np.array_equal(x.grad, [[1.0, 0.0, 0.0]])


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_layernorm_fd(seed):
    rng = np.random.default_rng(seed)
    x = rnd(rng, 4, 5)
    w = rnd(rng, 4, 5)  # random functional; sum(y) and sum(y^2) are LN invariants
    assert fd_check(lambda ts: (ad.softmax(ts[0]) * np.arange(5.0)).sum(), [x]) < 1e-6
    assert fd_check(lambda ts: (ad.layer_norm(ts[0]) * w).sum(), [x]) < 1e-5


def test_softmax_rows_sum_to_one():
    rng = np.random.default_rng(7)
    s = ad.softmax(Tensor(rng.standard_normal((6, 9)) * 20.0))
    assert np.allclose(s.data.sum(axis=-1), 1.0, atol=1e-12)


def test_layer_norm_of_constant_vector_is_zero():
    out = ad.layer_norm(Tensor(np.full((3, 8), 4.2)))
    assert np.allclose(out.data, 0.0)


@pytest.mark.parametrize("seed", SEEDS)
def test_shape_ops_fd(seed):
    rng = np.random.default_rng(seed)
    x = rnd(rng, 2, 3, 4)
    y = rnd(rng, 2, 3, 4)
    assert fd_check(lambda ts: (ts[0].reshape(6, 4) @ np.ones((4, 2))).sum(), [x]) < 1e-7
    assert fd_check(lambda ts: (ts[0].transpose((2, 0, 1)) * 3.0).sum(), [x]) < 1e-7
    assert fd_check(lambda ts: (ad.concat([ts[0], ts[1]], axis=1) ** 2.0).sum(), [x, y]) < 1e-6
    assert fd_check(lambda ts: (ts[0][:, 1:, ::2] * 2.0).sum(), [x]) < 1e-7


@pytest.mark.parametrize("seed", SEEDS)
def test_gather_ops_fd(seed):
    rng = np.random.default_rng(seed)
    x = rnd(rng, 5, 3)
    idx = rng.integers(0, 5, size=7)
    assert fd_check(lambda ts: (ad.take_rows(ts[0], idx, axis=0) ** 2.0).sum(), [x]) < 1e-6


@pytest.mark.parametrize("seed", SEEDS)
def test_clip_and_bce_fd(seed):
    rng = np.random.default_rng(seed)
    x = rnd(rng, 4, 4) * 2.0
    t = (rng.random((4, 4)) > 0.5).astype(float)
    assert fd_check(lambda ts: ad.clip(ts[0], -1.0, 1.0).sum(), [x]) < 1e-6
    assert fd_check(lambda ts: ad.bce_with_logits(ts[0], t).sum(), [x]) < 1e-6


def test_bce_matches_naive_formula():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((5, 5)) * 3.0
    t = (rng.random((5, 5)) > 0.4).astype(float)
    got = ad.bce_with_logits(Tensor(x), t).data
    p = 1.0 / (1.0 + np.exp(-x))
    want = -(t * np.log(p) + (1 - t) * np.log1p(-p))
    assert np.allclose(got, want, atol=1e-12)


@pytest.mark.parametrize("seed", SEEDS)
def test_bilinear_sample_fd(seed):
    rng = np.random.default_rng(seed)
    grid = rnd(rng, 6, 7, 3)
    coords = rng.uniform(0.6, 4.4, size=(5, 2))

    assert fd_check(lambda ts: (ad.bilinear_sample(ts[0], ts[1]) ** 2.0).sum(),
                    [grid, coords]) < 1e-6


def test_bilinear_sample_exact_values():
    rng = np.random.default_rng(0)
    grid = rng.standard_normal((4, 4, 2))
    # exactly at a cell center -> that cell's vector
    out = ad.bilinear_sample(Tensor(grid), Tensor(np.array([[2.0, 3.0]])))
    assert np.allclose(out.data[0], grid[2, 3], atol=1e-15)
    # midpoint of 4 cells -> arithmetic mean
    out = ad.bilinear_sample(Tensor(grid), Tensor(np.array([[1.5, 2.5]])))
    want = grid[1:3, 2:4].mean(axis=(0, 1))
    assert np.allclose(out.data[0], want, atol=1e-15)
    # far outside -> fill value 0
    out = ad.bilinear_sample(Tensor(grid), Tensor(np.array([[40.0, -3.0]])))
    assert np.allclose(out.data[0], 0.0)


def test_bilinear_sample_random_against_scalar_oracle():
    rng = np.random.default_rng(9)
    grid = rng.standard_normal((5, 6, 3))

    def oracle(px, py):
        x0, y0 = int(np.floor(px)), int(np.floor(py))
        fx, fy = px - x0, py - y0
        acc = np.zeros(3)
        for dx, wx in ((0, 1 - fx), (1, fx)):
            for dy, wy in ((0, 1 - fy), (1, fy)):
                xi, yi = x0 + dx, y0 + dy
                v = grid[xi, yi] if 0 <= xi < 5 and 0 <= yi < 6 else 0.0
                acc = acc + wx * wy * v
        return acc

    pts = rng.uniform(0.0, 4.9, size=(50, 2))
    out = ad.bilinear_sample(Tensor(grid), Tensor(pts)).data
    for i, (px, py) in enumerate(pts):
        assert np.allclose(out[i], oracle(px, py), atol=1e-12)


def test_linear_map_gradient_exact():
    # linearity: analytic gradient matches FD essentially exactly
    rng = np.random.default_rng(1)
    w = rng.standard_normal((4, 3))
    err = fd_check(lambda ts: (ts[0] @ w).sum(), [rng.standard_normal((2, 4))], h=1e-5)
    assert err < 1e-9


def test_detached_input_has_no_grad():
    x = Tensor(np.ones(3), requires_grad=True)
    d = x.detach()
    y = (d * 2.0).sum() + (x * 3.0).sum()
    backward(y)
    assert d.grad is None
    assert np.allclose(x.grad, 3.0)


def test_backward_requires_tape_and_rejects_nan():
    with pytest.raises(ContractError):
        backward(Tensor(np.array(1.0)))
    x = Tensor(np.array([1.0, -1.0]), requires_grad=True)
    bad = ad.tlog(x)  # log(-1) -> nan
    with pytest.raises(NumericError):
        backward(bad.sum())


def test_nan_check_names_op():
    ad.set_nan_checks(True)
    try:
        with pytest.raises(NumericError, match="log"):
            ad.tlog(Tensor(np.array([-1.0])))
    finally:
        ad.set_nan_checks(False)


def test_grad_accumulation_across_uses():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = x * x + x * 3.0
    backward(y.sum())
    assert np.allclose(x.grad, 2 * 2.0 + 3.0)
