import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from semifl import augment
from semifl.augment import AugmentPolicy, IMAGE_OPS
from semifl.errors import ConfigError, StructuralError


def image(seed=0, shape=(8, 8, 3)):
    return np.random.default_rng(seed).random(shape)


def test_identity_weak_is_noop():
    x = np.arange(6.0)
    assert np.array_equal(augment.weak_augment(x, AugmentPolicy.identity(), np.random.default_rng(0)), x)


def test_symmetric_image_survives_flip_and_zero_pad_crop():
    half = image(1, (6, 3, 2))
    x = np.concatenate([half, half[:, ::-1]], axis=1)
    policy = AugmentPolicy(weak="image_flip_crop", pad=0, image_shape=x.shape)
    for s in range(10):
        assert np.array_equal(augment.weak_augment(x, policy, np.random.default_rng(s)), x)


def test_zero_pad_crop_is_at_most_a_flip():
    x = image(2)
    policy = AugmentPolicy(weak="image_flip_crop", pad=0, image_shape=x.shape)
    for s in range(10):
        out = augment.weak_augment(x, policy, np.random.default_rng(s))
        assert np.array_equal(out, x) or np.array_equal(out, x[:, ::-1])


def test_weak_image_requires_image_layout():
    with pytest.raises(StructuralError):
        augment.weak_augment(np.zeros(5), AugmentPolicy(weak="image_flip_crop"), np.random.default_rng(0))


def test_magnitude_zero_is_identity():
    x = image(3)
    policy = AugmentPolicy(strong=tuple((op, 0) for op in IMAGE_OPS), n_ops=3, image_shape=x.shape)
    assert np.array_equal(augment.strong_augment(x, policy, np.random.default_rng(0)), x)


def test_full_invert_is_an_involution():
    x = image(4)
    rng = np.random.default_rng(0)
    twice = augment.apply_op(augment.apply_op(x, "invert", 30, rng), "invert", 30, rng)
    assert np.allclose(twice, x, atol=1e-12)


def test_unknown_op():
    with pytest.raises(ConfigError):
        augment.apply_op(image(), "solarize", 10, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        AugmentPolicy(strong=(("solarize", 10),))


@pytest.mark.parametrize("family", ["images", "vectors"])
def test_displacement_grows_with_magnitude(family):
    rng = np.random.default_rng(0)
    means = []
    for m in (0, 10, 20, 30):
        if family == "images":
            policy = AugmentPolicy.for_images((8, 8, 3), magnitude=m)
            xs = [image(s) for s in range(100)]
        else:
            policy = AugmentPolicy.for_vectors(magnitude=m)
            xs = [np.random.default_rng(s).normal(size=16) for s in range(100)]
        means.append(np.mean([np.abs(augment.strong_augment(x, policy, rng) - x).mean() for x in xs]))
    assert means[0] == 0
    assert all(a <= b for a, b in zip(means, means[1:]))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 30), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_images_keep_shape_and_range(m, n_ops, seed):
    x = image(seed % 1000)
    policy = AugmentPolicy.for_images(x.shape, magnitude=m, n_ops=n_ops)
    rng = np.random.default_rng(seed)
    for out in (augment.strong_augment(x, policy, rng), augment.weak_augment(x, policy, rng)):
        assert out.shape == x.shape
        assert out.min() >= 0 and out.max() <= 1


def test_batch_helpers_keep_shape():
    rng = np.random.default_rng(0)
    X = rng.random((5, 8 * 8 * 3))
    policy = AugmentPolicy.for_images((8, 8, 3))
    assert augment.strong_augment_batch(X, policy, rng).shape == X.shape
    assert augment.weak_augment_batch(X, policy, rng).shape == X.shape
    V = rng.normal(size=(7, 4))
    vp = AugmentPolicy.for_vectors()
    assert augment.strong_augment_batch(V, vp, rng).shape == V.shape


def test_mixup_forced_lambdas():
    rng = np.random.default_rng(0)
    a, b = np.zeros((2, 3)), np.ones((2, 3))
    out, draw = augment.mixup(a, b, 0.75, rng, lambda_mix=1.0)
    assert np.array_equal(out, a) and draw.lambda_mix == 1.0
    out, _ = augment.mixup(a, b, 0.75, rng, lambda_mix=0.5)
    assert np.all(out == 0.5)
    with pytest.raises(StructuralError):
        augment.mixup(a, np.ones((3, 3)), 0.75, rng)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, (3, 2), elements=st.floats(-1e6, 1e6)),
       arrays(np.float64, (3, 2), elements=st.floats(-1e6, 1e6)), st.integers(0, 2**32 - 1))
def test_mixup_stays_in_the_interval_hull(a, b, seed):
    out, draw = augment.mixup(a, b, 0.75, np.random.default_rng(seed))
    assert 0 <= draw.lambda_mix <= 1
    lo, hi = np.minimum(a, b), np.maximum(a, b)
    slack = 1e-9 * (np.abs(a) + np.abs(b) + 1)
    assert np.all(out >= lo - slack) and np.all(out <= hi + slack)


@pytest.mark.parametrize("a", [0.2, 0.75, 4.0])
def test_lambda_mean_is_one_half(a):
    rng = np.random.default_rng(1)
    lams = [augment.draw_lambda(a, rng).lambda_mix for _ in range(10000)]
    assert abs(np.mean(lams) - 0.5) <= 0.02


def test_max_trick_flag():
    rng = np.random.default_rng(0)
    assert all(augment.draw_lambda(0.75, rng, use_max=True).lambda_mix >= 0.5 for _ in range(200))
