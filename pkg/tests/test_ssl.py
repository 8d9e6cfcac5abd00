import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from solider import tensor as T
from solider.nn import Linear, Module
from solider.ssl import (
    AugConfig,
    ProjectionHead,
    center_update,
    dino_loss,
    ema_update,
    make_views,
)
from solider.tensor import Tensor, default_dtype


def test_projection_head_shape_and_scale_invariance():
    head = ProjectionHead(16, np.random.default_rng(0), hidden=32, bottleneck=8, prototypes=12)
    x = np.random.default_rng(1).normal(size=(5, 16)).astype(np.float32)
    out = head(Tensor(x))
    assert out.shape == (5, 12)
    # prototype rows are unit-norm and the bottleneck is normalized, so
    # logits live in [-1, 1]
    assert np.abs(out.numpy()).max() <= 1.0 + 1e-5


def test_dino_loss_uniform_against_uniform():
    k = 8
    student = Tensor(np.zeros((4, k), dtype=np.float32))
    teacher = np.zeros((4, k))
    loss = dino_loss(student, teacher, np.zeros(k))
    assert math.isclose(loss.item(), math.log(k), rel_tol=1e-6)


def test_dino_loss_sharp_teacher_uniform_student():
    # a one-hot teacher against a uniform student still costs log K
    k = 6
    teacher = np.zeros((2, k))
    teacher[:, 3] = 50.0
    loss = dino_loss(Tensor(np.zeros((2, k), dtype=np.float32)), teacher, np.zeros(k))
    assert math.isclose(loss.item(), math.log(k), rel_tol=1e-5)


def test_teacher_probabilities_sum_to_one():
    # with a uniform student, loss = log(K) * sum_k P_t[k]; dividing the
    # loss by log K therefore recovers the teacher row mass
    k = 16
    rng = np.random.default_rng(2)
    with default_dtype(np.float64):
        for _ in range(10):
            teacher = rng.normal(0.0, 3.0, size=(3, k))
            center = rng.normal(0.0, 1.0, size=k)
            loss = dino_loss(Tensor(np.zeros((3, k))), teacher, center)
            assert math.isclose(loss.item() / math.log(k), 1.0, rel_tol=1e-6)


def test_centering_shifts_teacher_distribution():
    k = 4
    teacher = np.array([[10.0, 0.0, 0.0, 0.0]])
    student = Tensor(np.zeros((1, k), dtype=np.float32))
    centered = dino_loss(student, teacher, np.array([10.0, 0.0, 0.0, 0.0]))
    # centering by the logits themselves makes the teacher uniform again
    assert math.isclose(centered.item(), math.log(k), rel_tol=1e-5)


def test_no_gradient_reaches_teacher():
    k = 4
    student = Tensor(np.random.default_rng(3).normal(size=(2, k)).astype(np.float32),
                     requires_grad=True)
    teacher = Tensor(np.random.default_rng(4).normal(size=(2, k)).astype(np.float32),
                     requires_grad=True)
    dino_loss(student, teacher, np.zeros(k)).backward()
    assert student.grad is not None
    assert teacher.grad is None


def test_temperatures_validated():
    s = Tensor(np.zeros((1, 4), dtype=np.float32))
    with pytest.raises(ValueError, match="positive"):
        dino_loss(s, np.zeros((1, 4)), np.zeros(4), temp_s=0.0)
    with pytest.raises(ValueError, match="positive"):
        dino_loss(s, np.zeros((1, 4)), np.zeros(4), temp_t=-1.0)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_dino_loss_nonnegative(seed):
    rng = np.random.default_rng(seed)
    s = Tensor(rng.normal(0.0, 2.0, size=(3, 8)).astype(np.float32))
    t = rng.normal(0.0, 2.0, size=(3, 8))
    assert dino_loss(s, t, rng.normal(size=8)).item() >= 0.0


class _Pair(Module):
    def __init__(self, value):
        super().__init__()
        self.lin = Linear(2, 2, np.random.default_rng(0))
        self.lin.weight.data[...] = value
        self.lin.bias.data[...] = value


def test_ema_update_arithmetic():
    teacher, student = _Pair(1.0), _Pair(0.0)
    ema_update(teacher, student, 0.9)
    np.testing.assert_allclose(teacher.lin.weight.data, 0.9, rtol=1e-7)
    ema_update(teacher, student, 0.9)
    # exactly the same float ops as the implementation applies
    expected = np.float32(np.float32(0.9) * np.float32(0.9))
    np.testing.assert_array_equal(teacher.lin.weight.data,
                                  np.full((2, 2), expected, dtype=np.float32))


def test_ema_momentum_zero_copies_student():
    teacher, student = _Pair(5.0), _Pair(-3.0)
    ema_update(teacher, student, 0.0)
    np.testing.assert_array_equal(teacher.lin.weight.data, student.lin.weight.data)


def test_ema_momentum_range_checked():
    teacher, student = _Pair(1.0), _Pair(0.0)
    with pytest.raises(ValueError, match="momentum"):
        ema_update(teacher, student, 1.0)


def test_ema_structure_mismatch():
    teacher = _Pair(1.0)
    student = Linear(3, 3, np.random.default_rng(0))
    with pytest.raises(ValueError, match="structure mismatch"):
        ema_update(teacher, student, 0.9)


def test_ema_updates_buffers_too():
    from solider.nn import BatchNorm1d

    class _BN(Module):
        def __init__(self):
            super().__init__()
            self.bn = BatchNorm1d(2)

    teacher, student = _BN(), _BN()
    student.bn.running_mean[...] = 10.0
    ema_update(teacher, student, 0.9)
    np.testing.assert_allclose(teacher.bn.running_mean, 1.0, rtol=1e-6)


def test_center_update_converges_geometrically():
    mean = np.ones(4)
    center = np.zeros(4)
    for _ in range(100):
        center = center_update(center, np.tile(mean, (2, 1)), momentum=0.9)
    gap = np.abs(center - mean).max()
    assert gap < 0.9 ** 100 * (1.0 + 1e-9)


def test_center_update_momentum_edges():
    center = np.full(3, 2.0)
    batch = np.zeros((4, 3))
    np.testing.assert_array_equal(center_update(center, batch, momentum=1.0), center)
    np.testing.assert_array_equal(center_update(center, batch, momentum=0.0),
                                  batch.mean(axis=0))
    with pytest.raises(ValueError, match="momentum"):
        center_update(center, batch, momentum=1.5)


def test_center_update_shape_checked():
    with pytest.raises(T.ShapeError, match="center-update"):
        center_update(np.zeros(3), np.zeros((2, 5)))


def test_identity_augmentation_is_exact():
    imgs = np.random.default_rng(5).normal(size=(3, 3, 16, 8)).astype(np.float32)
    v1, v2 = make_views(imgs, AugConfig.identity(), np.random.default_rng(0))
    np.testing.assert_array_equal(v1, imgs)
    np.testing.assert_array_equal(v2, imgs)


def test_forced_hflip_reverses_columns():
    imgs = np.random.default_rng(6).normal(size=(2, 3, 8, 8)).astype(np.float32)
    aug = AugConfig(crop_scale_min=1.0, crop_scale_max=1.0, hflip_prob=1.0, jitter=0.0)
    v1, _ = make_views(imgs, aug, np.random.default_rng(0))
    np.testing.assert_array_equal(v1, imgs[:, :, :, ::-1])


def test_views_reproducible_and_distinct():
    imgs = np.random.default_rng(7).normal(size=(4, 3, 16, 16)).astype(np.float32)
    aug = AugConfig()
    a1, a2 = make_views(imgs, aug, np.random.default_rng(42))
    b1, b2 = make_views(imgs, aug, np.random.default_rng(42))
    np.testing.assert_array_equal(a1, b1)
    np.testing.assert_array_equal(a2, b2)
    assert np.abs(a1 - a2).max() > 1e-3


def test_views_preserve_shape_and_dtype():
    imgs = np.random.default_rng(8).normal(size=(2, 3, 32, 16)).astype(np.float32)
    v1, v2 = make_views(imgs, AugConfig(), np.random.default_rng(1))
    assert v1.shape == imgs.shape and v2.shape == imgs.shape
    assert v1.dtype == np.float32
