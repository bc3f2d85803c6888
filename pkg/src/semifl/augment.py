"""Weak/strong augmentation and Mixup.

Images are (H, W, C) arrays with values in [0, 1]; vectors are 1-D. Strong
ops take an integer magnitude in [0, 30]; magnitude 0 is the identity for
every op.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ConfigError, StructuralError

MAX_MAGNITUDE = 30

IMAGE_OPS = ("translate_x", "translate_y", "shear_x", "shear_y", "rotate",
             "brightness", "contrast", "invert", "cutout")
VECTOR_OPS = ("jitter", "mask")


@dataclass(frozen=True)
class AugmentPolicy:
    weak: str = "identity"  # identity | image_flip_crop | vector_jitter
    pad: int = 4
    jitter_std: float = 0.1
    strong: tuple[tuple[str, int], ...] = ()
    n_ops: int = 2
    image_shape: tuple[int, int, int] | None = None
    # vector strong ops: jitter std and mask probability at magnitude 30
    strong_jitter_std: float = 1.5
    strong_mask_prob: float = 0.3

    def __post_init__(self):
        if self.weak not in ("identity", "image_flip_crop", "vector_jitter"):
            raise ConfigError(f"unknown weak augmentation {self.weak!r}")
        if self.pad < 0 or self.jitter_std < 0:
            raise ConfigError("pad and jitter_std must be non-negative")
        strong = tuple((str(op), int(m)) for op, m in self.strong)
        object.__setattr__(self, "strong", strong)
        for op, m in strong:
            if op not in IMAGE_OPS + VECTOR_OPS:
                raise ConfigError(f"unknown strong op {op!r}")
            if not 0 <= m <= MAX_MAGNITUDE:
                raise ConfigError(f"magnitude {m} for {op} outside [0, {MAX_MAGNITUDE}]")
        if strong and self.n_ops < 1:
            raise ConfigError("n_ops must be >= 1")
        if self.image_shape is not None:
            object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))

    @classmethod
    def identity(cls) -> "AugmentPolicy":
        return cls()

    @classmethod
    def for_vectors(cls, jitter_std: float = 0.1, magnitude: int = 10, n_ops: int = 2) -> "AugmentPolicy":
        return cls(weak="vector_jitter", jitter_std=jitter_std,
                   strong=tuple((op, magnitude) for op in VECTOR_OPS), n_ops=n_ops)

    @classmethod
    def for_images(cls, image_shape, pad: int = 4, magnitude: int = 10, n_ops: int = 2) -> "AugmentPolicy":
        return cls(weak="image_flip_crop", pad=pad, image_shape=tuple(image_shape),
                   strong=tuple((op, magnitude) for op in IMAGE_OPS), n_ops=n_ops)


@dataclass(frozen=True)
class MixupDraw:
    lambda_mix: float
    a: float


# -- weak ------------------------------------------------------------------

def _require_image(x: np.ndarray) -> None:
    if x.ndim != 3:
        raise StructuralError(f"image op needs an (H, W, C) array, got shape {x.shape}")


def _require_vector(x: np.ndarray) -> None:
    if x.ndim != 1:
        raise StructuralError(f"vector op needs a 1-D array, got shape {x.shape}")


def flip_crop(x: np.ndarray, pad: int, rng: np.random.Generator) -> np.ndarray:
    _require_image(x)
    if rng.random() < 0.5:
        x = x[:, ::-1]
    h, w, _ = x.shape
    if pad:
        xp = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
        i, j = rng.integers(0, 2 * pad + 1, size=2)
        x = xp[i:i + h, j:j + w]
    return np.ascontiguousarray(x)


def weak_augment(x: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if policy.weak == "identity":
        return x.copy()
    if policy.weak == "image_flip_crop":
        return flip_crop(x, policy.pad, rng)
    _require_vector(x)
    return x + policy.jitter_std * rng.normal(size=x.shape)


# -- strong ----------------------------------------------------------------

def _sign(rng) -> float:
    return 1.0 if rng.random() < 0.5 else -1.0


def _affine(x: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    h, w, _ = x.shape
    center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    offset = center - matrix @ center
    return np.stack([ndimage.affine_transform(x[..., c], matrix, offset=offset, order=1, cval=0.0)
                     for c in range(x.shape[2])], axis=-1)


def _shift(x: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(x)
    h, w, _ = x.shape
    ys, yd = (slice(0, h - dy), slice(dy, h)) if dy >= 0 else (slice(-dy, h), slice(0, h + dy))
    xs, xd = (slice(0, w - dx), slice(dx, w)) if dx >= 0 else (slice(-dx, w), slice(0, w + dx))
    out[yd, xd] = x[ys, xs]
    return out


def apply_op(x: np.ndarray, op: str, magnitude: int, rng: np.random.Generator,
             policy: AugmentPolicy | None = None) -> np.ndarray:
    """Apply one strong op at ``magnitude``; images are clamped to [0, 1]."""
    if op not in IMAGE_OPS + VECTOR_OPS:
        raise ConfigError(f"unknown strong op {op!r}")
    level = magnitude / MAX_MAGNITUDE
    if op in VECTOR_OPS:
        _require_vector(x)
        policy = policy or AugmentPolicy()
        if level == 0:
            return x.copy()
        if op == "jitter":
            return x + level * policy.strong_jitter_std * rng.normal(size=x.shape)
        keep = rng.random(x.shape) >= level * policy.strong_mask_prob
        return x * keep
    _require_image(x)
    if level == 0:
        return x.copy()
    h, w, _ = x.shape
    if op == "translate_x":
        out = _shift(x, 0, int(_sign(rng) * round(level * 0.3 * w)))
    elif op == "translate_y":
        out = _shift(x, int(_sign(rng) * round(level * 0.3 * h)), 0)
    elif op == "shear_x":
        out = _affine(x, np.array([[1.0, 0.0], [_sign(rng) * 0.3 * level, 1.0]]))
    elif op == "shear_y":
        out = _affine(x, np.array([[1.0, _sign(rng) * 0.3 * level], [0.0, 1.0]]))
    elif op == "rotate":
        t = np.deg2rad(_sign(rng) * 30.0 * level)
        out = _affine(x, np.array([[np.cos(t), -np.sin(t)], [np.sin(t), np.cos(t)]]))
    elif op == "brightness":
        out = x * (1.0 + _sign(rng) * 0.9 * level)
    elif op == "contrast":
        mu = x.mean()
        out = mu + (1.0 + _sign(rng) * 0.9 * level) * (x - mu)
    elif op == "invert":
        out = x + level * (1.0 - 2.0 * x)
    else:  # cutout
        side = max(1, int(round(level * 0.5 * min(h, w))))
        cy, cx = rng.integers(0, h), rng.integers(0, w)
        out = x.copy()
        out[max(0, cy - side // 2):cy - side // 2 + side, max(0, cx - side // 2):cx - side // 2 + side] = 0.5
    return np.clip(out, 0.0, 1.0)


def strong_augment(x: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    """RandAugment-lite: ``n_ops`` ops drawn from the policy, each at its magnitude."""
    x = np.asarray(x, dtype=np.float64)
    if not policy.strong:
        return x.copy()
    ops = policy.strong
    replace = policy.n_ops > len(ops)
    for i in rng.choice(len(ops), size=policy.n_ops, replace=replace):
        op, m = ops[i]
        x = apply_op(x, op, m, rng, policy)
    return x


# -- batch helpers (flat feature rows) -------------------------------------

def _rows(X: np.ndarray, policy: AugmentPolicy, fn, rng) -> np.ndarray:
    if policy.image_shape is None:
        return np.stack([fn(r, policy, rng) for r in X])
    shape = policy.image_shape
    return np.stack([fn(r.reshape(shape), policy, rng).ravel() for r in X])


def weak_augment_batch(X: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if policy.weak == "identity":
        return X.copy()
    if policy.weak == "vector_jitter":
        return X + policy.jitter_std * rng.normal(size=X.shape)
    return _rows(X, policy, weak_augment, rng)


def strong_augment_batch(X: np.ndarray, policy: AugmentPolicy, rng: np.random.Generator) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if not policy.strong:
        return X.copy()
    if policy.image_shape is None and all(op in VECTOR_OPS for op, _ in policy.strong):
        # same distribution as strong_augment per row, vectorized
        out = X.copy()
        n, k = len(X), len(policy.strong)
        if policy.n_ops > k:
            picks = rng.integers(0, k, size=(n, policy.n_ops))
        else:
            picks = np.argsort(rng.random((n, k)), axis=1)[:, :policy.n_ops]
        for slot in range(policy.n_ops):
            for i, (op, m) in enumerate(policy.strong):
                rows = picks[:, slot] == i
                if not rows.any() or m == 0:
                    continue
                level = m / MAX_MAGNITUDE
                sub = out[rows]
                if op == "jitter":
                    sub = sub + level * policy.strong_jitter_std * rng.normal(size=sub.shape)
                else:
                    sub = sub * (rng.random(sub.shape) >= level * policy.strong_mask_prob)
                out[rows] = sub
        return out
    return _rows(X, policy, strong_augment, rng)


# -- mixup -----------------------------------------------------------------

def draw_lambda(a: float, rng: np.random.Generator, use_max: bool = False) -> MixupDraw:
    if not a > 0:
        raise ConfigError("mixup parameter a must be > 0")
    lam = float(rng.beta(a, a))
    if use_max:
        lam = max(lam, 1.0 - lam)
    return MixupDraw(lam, a)


def mixup(x_fix: np.ndarray, x_mix: np.ndarray, a: float, rng: np.random.Generator,
          lambda_mix: float | None = None, use_max: bool = False) -> tuple[np.ndarray, MixupDraw]:
    """``lambda * x_fix + (1 - lambda) * x_mix`` with one Beta(a, a) draw per batch."""
    x_fix, x_mix = np.asarray(x_fix), np.asarray(x_mix)
    if x_fix.shape != x_mix.shape:
        raise StructuralError(f"mixup batches differ in shape: {x_fix.shape} vs {x_mix.shape}")
    if lambda_mix is None:
        draw = draw_lambda(a, rng, use_max)
    else:
        if not 0.0 <= lambda_mix <= 1.0:
            raise ConfigError("lambda_mix must lie in [0, 1]")
        draw = MixupDraw(float(lambda_mix), a)
    lam = draw.lambda_mix
    return lam * x_fix + (1.0 - lam) * x_mix, draw
