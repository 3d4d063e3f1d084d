import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from dnasforge import functional as F
from dnasforge.blocks import ConvBNReLU, Head, MBConvBlock, SkipBlock, ZeroBlock
from dnasforge.errors import DomainError, ShapeError
from dnasforge.rng import Rng
from dnasforge.spaces import toy_space
from dnasforge.supernet import (ArchitectureSample, FixedLayer, SearchLayer, SuperNet, gumbel_soft_mask,
                                gumbel_soft_mask_batch, theta_probs)
from dnasforge.tensor import Tensor, parameter

from helpers import TOL, grad_error

logits = arrays(np.float64, st.integers(2, 6), elements=st.floats(-20, 20))


def test_theta_probs_examples():
    assert np.allclose(theta_probs(np.zeros(3)), 1 / 3, atol=1e-15)
    assert np.allclose(theta_probs(np.array([1.7, 1.7 + np.log(2)])), [1 / 3, 2 / 3], atol=1e-15)
    big = theta_probs(np.array([1000.0, 0.0]))
    assert np.isfinite(big).all() and big[0] == 1.0


@settings(max_examples=60)
@given(logits, st.floats(-50, 50))
def test_theta_probs_shift_invariant(theta, c):
    p = theta_probs(theta)
    assert abs(p.sum() - 1) < 1e-12
    assert np.allclose(p, theta_probs(theta + c), atol=1e-12)


@settings(max_examples=60)
@given(logits, st.sampled_from([0.01, 0.1, 1.0, 10.0, 100.0]), st.integers(0, 2**32 - 1))
def test_soft_mask_on_simplex(theta, tau, seed):
    m = gumbel_soft_mask(Tensor(theta), tau, Rng(seed)).data
    assert abs(m.sum() - 1) <= 1e-6
    assert np.all(m >= 0) and np.all(m <= 1)


def test_soft_mask_pinned_noise_and_domain():
    for tau in (0.01, 1.0, 100.0):
        m = gumbel_soft_mask(Tensor(np.zeros(4)), tau, noise=np.zeros(4)).data
        assert np.allclose(m, 0.25, atol=1e-15)
    with pytest.raises(DomainError):
        gumbel_soft_mask(Tensor(np.zeros(2)), 0.0, Rng(0))


def test_soft_mask_temperature_limits():
    rng = Rng(7)
    theta = np.array([0.3, -1.2, 0.8, 0.1])
    for _ in range(20):
        g = rng.gumbel(4)
        top = np.sort(theta + g)
        if top[-1] - top[-2] < 1e-2:
            continue  # near-tie, not a generic draw
        hot = gumbel_soft_mask(Tensor(theta), 1e-4, noise=g).data
        flat = gumbel_soft_mask(Tensor(theta), 1e4, noise=g).data
        assert hot.max() > 1 - 1e-3
        assert flat.max() - flat.min() < 1e-3


def test_soft_mask_batch_matches_single_draws():
    rng = Rng(3)
    theta = np.array([2.0, 0.0, -1.0])
    noise = rng.gumbel((5, 3))
    batch = gumbel_soft_mask_batch(theta, 0.5, noise)
    for row, g in zip(batch, noise):
        assert np.allclose(row, gumbel_soft_mask(Tensor(theta), 0.5, noise=g).data, atol=1e-15)


def test_gumbel_argmax_matches_softmax_chi_square():
    theta = np.array([2.0, 0.0, 0.0])
    noise = Rng(11).gumbel((100_000, 3))
    counts = np.bincount(gumbel_soft_mask_batch(theta, 0.01, noise).argmax(axis=1), minlength=3)
    p = theta_probs(theta)
    assert np.all(np.abs(counts / counts.sum() - p) < 0.01)
    assert stats.chisquare(counts, counts.sum() * p).pvalue > 0.01


def test_gradient_estimator_variance_shrinks_with_draws():
    theta = parameter(np.array([0.5, 0.0, -0.5]))
    c = np.array([1.0, 3.0, -2.0])
    rng = Rng(5)

    def estimate(draws):
        theta.grad = None
        total = None
        for _ in range(draws):
            term = (gumbel_soft_mask(theta, 1.0, rng) * c).sum()
            total = term if total is None else total + term
        (total * (1.0 / draws)).backward()
        return theta.grad.copy()

    v1 = np.var([estimate(1) for _ in range(400)], axis=0).sum()
    v16 = np.var([estimate(16) for _ in range(400)], axis=0).sum()
    assert 1 / 32 < v16 / v1 < 1 / 8


def _identity_zero_net(shape=(2, 3, 3)):
    head = Head(shape, 2, pool="flatten")
    return SuperNet([SearchLayer("l0", [SkipBlock(shape), ZeroBlock(shape)])], head, shape)


def test_forward_soft_convex_combination():
    net = _identity_zero_net()
    x = np.random.default_rng(0).normal(size=(4, 2, 3, 3))
    half = [Tensor(np.array([0.5, 0.5]))]
    out_half, _ = net.forward_soft(x, 1.0, masks=half)
    out_zero, _ = net.forward_soft(np.zeros_like(x), 1.0, masks=half)
    out_full = net.forward_hard(net.arch_from_indices([0]), 0.5 * x)
    assert np.allclose(out_half.data, out_full.data, atol=1e-14)
    assert not np.allclose(out_half.data, out_zero.data)


def test_forward_soft_one_hot_equals_forward_hard_exactly():
    net = toy_space(("k3_e1", "k5_e1", "skip", "zero"), rng=Rng(2))
    x = np.random.default_rng(1).normal(size=(3, 1, 8, 8))
    for ix in ([0, 1, 2], [3, 0, 1], [2, 2, 2], [1, 3, 0]):
        arch = net.arch_from_indices(ix)
        soft, _ = net.forward_soft(x, 1.0, masks=net.one_hot_masks(arch), train=False)
        hard = net.forward_hard(arch, x, train=False)
        assert np.array_equal(soft.data, hard.data)


def test_forward_hard_distinct_archs_differ_and_skip_reduces_depth():
    net = toy_space(("k3_e1", "k5_e1", "skip"), rng=Rng(4))
    x = np.random.default_rng(2).normal(size=(2, 1, 8, 8))
    a = net.forward_hard(net.arch_from_indices([0, 0, 0]), x, train=False).data
    b = net.forward_hard(net.arch_from_indices([1, 0, 0]), x, train=False).data
    assert not np.allclose(a, b)
    skip_all = net.arch_from_indices([2, 2, 2])
    assert all(isinstance(blk, (SkipBlock, Head)) or blk.key.block_type != "mbconv"
               for blk in net.active_blocks(skip_all))
    assert sum(1 for blk in net.active_blocks(skip_all) if isinstance(blk, SkipBlock)) == 3
    with pytest.raises(IndexError):
        net.forward_hard(ArchitectureSample([0, 0, 5], ["", "", ""]), x)


def _theta_loss(net, x, y, noise, tau=0.7):
    def f(ts):
        masks = [gumbel_soft_mask(t, tau, noise=g) for t, g in zip(ts, noise)]
        return F.softmax_cross_entropy(net.forward_soft(x, tau, masks=masks, train=False)[0], y)
    return f


def test_theta_gradient_matches_finite_differences():
    net = toy_space(("k3_e1", "k5_e1", "zero"), rng=Rng(8))
    rng = Rng(9)
    for t in net.thetas():
        t.data[...] = rng.normal(size=t.shape)
    x = rng.normal(size=(4, 1, 8, 8))
    y = np.array([0, 1, 2, 3])
    noise = [rng.gumbel(t.shape) for t in net.thetas()]
    assert grad_error(_theta_loss(net, x, y, noise), net.thetas()) < TOL


def test_theta_gradient_zero_for_identical_candidates():
    shape = (2, 3, 3)
    net = SuperNet([SearchLayer("l0", [SkipBlock(shape), SkipBlock(shape), SkipBlock(shape)])],
                   Head(shape, 3, pool="flatten"), shape, rng=Rng(1))
    x = np.random.default_rng(0).normal(size=(5, 2, 3, 3))
    theta = net.thetas()[0]
    theta.data[...] = [0.4, -0.3, 1.1]
    loss = _theta_loss(net, x, np.array([0, 1, 2, 0, 1]), [Rng(2).gumbel(3)])([theta])
    loss.backward()
    assert np.abs(theta.grad).max() < 1e-12


def test_sample_and_argmax():
    layer = SearchLayer("l0", [SkipBlock((2, 3, 3)), SkipBlock((2, 3, 3)), ZeroBlock((2, 3, 3))])
    net = SuperNet([layer], Head((2, 3, 3), 2, pool="flatten"), (2, 3, 3))
    layer.theta.data[...] = [10.0, 0.0, 0.0]
    assert net.argmax_arch().indices == [0]
    rng = Rng(0)
    assert np.mean([net.sample_arch(rng).indices[0] == 0 for _ in range(1000)]) > 0.99

    layer.theta.data[...] = 0.0
    assert net.argmax_arch().indices == [0]
    layer.theta.data[...] = [0.0, 1.0, 1.0]
    assert net.argmax_arch().indices == [1]

    layer.theta.data[...] = 0.0
    draws = np.array([net.sample_arch(rng).indices[0] for _ in range(10_000)])
    assert np.all(np.abs(np.bincount(draws, minlength=3) / 10_000 - 1 / 3) < 0.02)


def test_sampling_is_seed_deterministic():
    net = toy_space(rng=Rng(0))
    for t in net.thetas():
        t.data[...] = [0.2, -0.1, 0.5]
    def draws():
        rng = Rng(42)
        return [net.sample_arch(rng).indices for _ in range(20)]

    assert draws() == draws()


def test_structure_validation():
    shape = (4, 6, 6)
    with pytest.raises(ValueError):
        SearchLayer("one", [SkipBlock(shape)])
    with pytest.raises(ValueError):
        SearchLayer("bad", [SkipBlock(shape), ZeroBlock(shape)], theta=parameter(np.zeros(3)))
    with pytest.raises(ShapeError):
        SuperNet([SearchLayer("l", [SkipBlock(shape), ConvBNReLU(shape, 8)])], Head(shape, 2), shape)
    with pytest.raises(ShapeError):
        SuperNet([FixedLayer("f", MBConvBlock(shape, 8, stride=2))], Head(shape, 2), shape)
    net = SuperNet([SearchLayer("l", [SkipBlock(shape), ZeroBlock(shape)])], Head(shape, 2), shape)
    with pytest.raises(ShapeError):
        net.forward_hard(net.arch_from_indices([0]), np.zeros((1, 3, 6, 6)))
    with pytest.raises(IndexError):
        net.arch_from_indices([2])
    with pytest.raises(ValueError):
        net.forward_soft(np.zeros((1, 4, 6, 6)), 1.0, masks=[])


def test_state_dict_round_trip_and_theta_snapshot():
    net = toy_space(rng=Rng(0))
    state = net.state_dict()
    snap = net.theta_snapshot()
    other = toy_space(rng=Rng(99))
    other.thetas()[0].data[0] = 3.0
    assert other.theta_snapshot() != snap
    other.load_state_dict(state)
    assert other.theta_snapshot() == snap
    x = np.random.default_rng(0).normal(size=(2, 1, 8, 8))
    arch = net.arch_from_indices([0, 1, 2])
    assert np.array_equal(net.forward_hard(arch, x, False).data, other.forward_hard(arch, x, False).data)


def test_architecture_json_round_trip():
    net = toy_space(rng=Rng(0))
    arch = net.arch_from_indices([2, 0, 1], seed=17)
    back = ArchitectureSample.from_json(arch.to_json())
    assert back == arch and back.signature == tuple(arch.keys)
