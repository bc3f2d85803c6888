"""Small softmax classifier with static batch normalization.

The network is either an MLP (``hidden_dims``) or a two-block CNN stem
(``conv_channels`` with ``image_shape``) followed by the MLP head. Every
hidden block is ``linear/conv -> sBN -> ReLU``; conv blocks are followed by a
2x2 average pool. Gradients are derived by hand; there is no autodiff.

Normalization has two sources:

* ``"batch"`` -- standardize with the batch mean and biased (population)
  variance, as during local training;
* an :class:`SbnState` -- standardize with globally aggregated statistics,
  as during inference.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence, Union

import numpy as np

from .errors import DegenerateBatchError, NumericError, StructuralError

_ACTIVATIONS = ("relu",)


@dataclass(frozen=True)
class ModelConfig:
    input_dim: int
    hidden_dims: tuple[int, ...] = (64,)
    num_classes: int = 10
    sbn_epsilon: float = 1e-5
    activation: str = "relu"
    # (H, W, C) layout of a flattened input; enables the conv stem.
    image_shape: tuple[int, int, int] | None = None
    conv_channels: tuple[int, ...] = ()
    dtype: str = "float64"

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        if self.image_shape is not None:
            object.__setattr__(self, "image_shape", tuple(int(s) for s in self.image_shape))
        if self.num_classes < 2:
            raise StructuralError("num_classes must be >= 2")
        if self.input_dim < 1 or any(h < 1 for h in self.hidden_dims + self.conv_channels):
            raise StructuralError("all layer widths must be >= 1")
        if not self.sbn_epsilon > 0:
            raise StructuralError("sbn_epsilon must be > 0")
        if self.activation not in _ACTIVATIONS:
            raise StructuralError(f"unsupported activation {self.activation!r}")
        if self.dtype not in ("float64", "float32"):
            raise StructuralError("dtype must be float64 or float32")
        if self.conv_channels:
            if self.image_shape is None:
                raise StructuralError("conv_channels requires image_shape")
            if int(np.prod(self.image_shape)) != self.input_dim:
                raise StructuralError("image_shape does not match input_dim")
            h, w, _ = self.image_shape
            if min(h, w) < 2 ** len(self.conv_channels):
                raise StructuralError("image too small for the number of pooling stages")


class ParamSet:
    """Ordered mapping from parameter name to array, closed under linear combination."""

    __slots__ = ("_entries",)

    def __init__(self, entries: Mapping[str, np.ndarray] | Iterable[tuple[str, np.ndarray]] = ()):
        items = entries.items() if isinstance(entries, Mapping) else entries
        self._entries: dict[str, np.ndarray] = {str(k): np.asarray(v) for k, v in items}

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def __len__(self) -> int:
        return len(self._entries)

    def __repr__(self) -> str:
        body = ", ".join(f"{k}{tuple(v.shape)}" for k, v in self._entries.items())
        return f"ParamSet({body})"

    @property
    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def values(self):
        return self._entries.values()

    def shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(k, v.shape) for k, v in self._entries.items()]

    def copy(self) -> "ParamSet":
        return ParamSet((k, v.copy()) for k, v in self._entries.items())

    def zeros_like(self) -> "ParamSet":
        return ParamSet((k, np.zeros_like(v)) for k, v in self._entries.items())

    def astype(self, dtype) -> "ParamSet":
        return ParamSet((k, v.astype(dtype)) for k, v in self._entries.items())

    def check_compatible(self, other: "ParamSet") -> None:
        if self.shapes() != other.shapes():
            raise StructuralError(f"incompatible parameter sets: {self.shapes()} vs {other.shapes()}")

    def is_finite(self) -> bool:
        return all(np.isfinite(v).all() for v in self._entries.values())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self._entries.values()])

    def from_vector(self, vec: np.ndarray) -> "ParamSet":
        out, pos = [], 0
        for k, v in self._entries.items():
            out.append((k, np.asarray(vec[pos:pos + v.size]).reshape(v.shape).copy()))
            pos += v.size
        if pos != len(vec):
            raise StructuralError("vector length does not match parameter count")
        return ParamSet(out)

    def equal(self, other: "ParamSet") -> bool:
        return self.shapes() == other.shapes() and all(
            np.array_equal(a, other[k]) for k, a in self._entries.items()
        )

    def __add__(self, other: "ParamSet") -> "ParamSet":
        self.check_compatible(other)
        return ParamSet((k, v + other[k]) for k, v in self._entries.items())

    def __sub__(self, other: "ParamSet") -> "ParamSet":
        self.check_compatible(other)
        return ParamSet((k, v - other[k]) for k, v in self._entries.items())

    def __mul__(self, scalar: float) -> "ParamSet":
        return ParamSet((k, v * scalar) for k, v in self._entries.items())

    __rmul__ = __mul__


def linear_combine(sets: Sequence[ParamSet], coeffs: Sequence[float]) -> ParamSet:
    """Elementwise ``sum_i coeffs[i] * sets[i]``, accumulated left to right."""
    if not sets:
        raise StructuralError("linear_combine needs at least one parameter set")
    if len(sets) != len(coeffs):
        raise StructuralError("sets and coeffs differ in length")
    for s in sets[1:]:
        sets[0].check_compatible(s)
    out = {}
    for name in sets[0]:
        acc = coeffs[0] * sets[0][name]
        for c, s in zip(coeffs[1:], sets[1:]):
            acc = acc + c * s[name]
        out[name] = acc
    return ParamSet(out)


@dataclass
class SbnState:
    """Global normalization statistics, keyed by norm-layer name."""

    mean: dict[str, np.ndarray]
    var: dict[str, np.ndarray]
    sample_count: int
    epsilon: float = 1e-5

    def __post_init__(self):
        if set(self.mean) != set(self.var):
            raise StructuralError("mean and var cover different layers")
        for k, v in self.var.items():
            if v.shape != self.mean[k].shape:
                raise StructuralError(f"mean/var length mismatch for {k}")
            if np.any(v < 0):
                raise StructuralError(f"negative variance for {k}")
        if self.sample_count < 0:
            raise StructuralError("sample_count must be non-negative")


@dataclass
class MomentumState:
    velocity: ParamSet

    @classmethod
    def zeros(cls, params: ParamSet) -> "MomentumState":
        return cls(params.zeros_like())


NormSource = Union[str, SbnState]


def sgd_step(
    params: ParamSet,
    grad: ParamSet,
    lr: float,
    mstate: MomentumState,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
    nesterov: bool = False,
) -> tuple[ParamSet, MomentumState]:
    """One SGD step with L2 weight decay and (Nesterov) momentum.

    ``g = grad + wd * w``; ``v <- momentum * v + g``; the step direction is
    ``g + momentum * v`` with Nesterov, else ``v``.
    """
    params.check_compatible(grad)
    params.check_compatible(mstate.velocity)
    new_p, new_v = {}, {}
    for name, w in params.items():
        g = grad[name]
        if weight_decay:
            g = g + weight_decay * w
        v = momentum * mstate.velocity[name] + g
        step = g + momentum * v if nesterov else v
        new_p[name] = w - lr * step
        new_v[name] = v
    return ParamSet(new_p), MomentumState(ParamSet(new_v))


def pooled_statistics(
    counts: Sequence[int], means: Sequence[np.ndarray], variances: Sequence[np.ndarray]
) -> tuple[np.ndarray, np.ndarray, int]:
    """Combine per-party ``(N_m, mean_m, unbiased var_m)`` into global statistics.

    Returns the count-weighted mean, the pooled unbiased variance
    ``sum[(N_m - 1) var_m + N_m (mean_m - mean)^2] / (sum N_m - 1)``, and the
    total count.
    """
    from .errors import DegenerateStatisticsError

    counts = [int(n) for n in counts]
    total = sum(counts)
    if total <= 1:
        raise DegenerateStatisticsError(f"cannot pool statistics over {total} samples")
    means = [np.asarray(m, dtype=np.float64) for m in means]
    mu = sum(n * m for n, m in zip(counts, means)) / total
    ss = sum((n - 1) * np.asarray(v, dtype=np.float64) + n * (m - mu) ** 2
             for n, m, v in zip(counts, means, variances) if n > 0)
    return mu, ss / (total - 1), total


# -- layer kernels ---------------------------------------------------------

def _im2col(x: np.ndarray) -> np.ndarray:
    """(N, H, W, C) -> (N, H, W, 9*C) patches of a zero-padded 3x3 window."""
    n, h, w, c = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    # win: (N, H, W, C, 3, 3) -> (N, H, W, 3, 3, C)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n, h, w, 9 * c)


def _col2im(dcols: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    n, h, w, c = shape
    d = dcols.reshape(n, h, w, 3, 3, c)
    dxp = np.zeros((n, h + 2, w + 2, c), dtype=dcols.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, i:i + h, j:j + w, :] += d[:, :, :, i, j, :]
    return dxp[:, 1:-1, 1:-1, :]


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


class Model:
    """Stateless network definition; all methods are pure functions of their inputs."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.dtype = np.dtype(config.dtype)
        self._layers: list[tuple] = []
        self.norm_layers: list[tuple[str, int]] = []
        k = 0
        if config.conv_channels:
            h, w, cin = config.image_shape
            for i, cout in enumerate(config.conv_channels, 1):
                k += 1
                self._layers += [("conv", f"conv{i}", cin, cout), ("norm", f"norm{k}", cout),
                                 ("relu",), ("pool",)]
                self.norm_layers.append((f"norm{k}", cout))
                cin, h, w = cout, h // 2, w // 2
            self._layers.append(("flatten",))
            din = h * w * cin
        else:
            din = config.input_dim
        for i, width in enumerate(config.hidden_dims, 1):
            k += 1
            self._layers += [("dense", f"fc{i}", din, width, False), ("norm", f"norm{k}", width),
                             ("relu",)]
            self.norm_layers.append((f"norm{k}", width))
            din = width
        self._layers.append(("dense", "out", din, config.num_classes, True))
        self._shapes = self.init_params(np.random.default_rng(0)).shapes()

    # -- parameters --------------------------------------------------------

    def init_params(self, rng: np.random.Generator) -> ParamSet:
        """He-normal weights, unit gamma, zero beta and bias."""
        entries = []
        for layer in self._layers:
            kind = layer[0]
            if kind == "conv":
                _, name, cin, cout = layer
                entries.append((f"{name}.weight",
                                rng.normal(0.0, np.sqrt(2.0 / (9 * cin)), (3, 3, cin, cout))))
            elif kind == "dense":
                _, name, din, dout, bias = layer
                entries.append((f"{name}.weight", rng.normal(0.0, np.sqrt(2.0 / din), (din, dout))))
                if bias:
                    entries.append((f"{name}.bias", np.zeros(dout)))
            elif kind == "norm":
                _, name, width = layer
                entries += [(f"{name}.gamma", np.ones(width)), (f"{name}.beta", np.zeros(width))]
        return ParamSet((k, v.astype(self.dtype)) for k, v in entries)

    def _check_params(self, params: ParamSet) -> None:
        if params.shapes() != self._shapes:
            raise StructuralError(f"parameters do not match model: {params.shapes()} vs {self._shapes}")

    # -- forward / backward ------------------------------------------------

    def _input(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.config.input_dim:
            raise StructuralError(f"expected input (N, {self.config.input_dim}), got {x.shape}")
        if x.shape[0] == 0:
            raise StructuralError("empty input batch")
        if self.config.conv_channels:
            x = x.reshape((x.shape[0],) + self.config.image_shape)
        return x

    def _run(self, params: ParamSet, x: np.ndarray, norm: NormSource, stop_at: str | None = None):
        if isinstance(norm, str) and norm != "batch":
            raise StructuralError(f"unknown norm source {norm!r}")
        batch_mode = isinstance(norm, str)
        self._check_params(params)
        if batch_mode and x.shape[0] < 2:
            raise DegenerateBatchError("batch-mode normalization needs at least 2 samples")
        eps = self.config.sbn_epsilon
        h = x
        caches = []
        for layer in self._layers:
            kind = layer[0]
            if kind == "conv":
                name = layer[1]
                w = params[f"{name}.weight"]
                cols = _im2col(h)
                shape = h.shape
                h = cols @ w.reshape(-1, w.shape[-1])
                caches.append((cols, shape))
            elif kind == "dense":
                name, bias = layer[1], layer[4]
                caches.append(h)
                h = h @ params[f"{name}.weight"]
                if bias:
                    h = h + params[f"{name}.bias"]
            elif kind == "norm":
                name = layer[1]
                if stop_at == name:
                    return h
                axes = tuple(range(h.ndim - 1))
                if batch_mode:
                    mu = h.mean(axis=axes)
                    var = h.var(axis=axes)
                else:
                    if name not in norm.mean:
                        raise StructuralError(f"sBN state has no statistics for {name}")
                    mu, var = norm.mean[name], norm.var[name]
                    if mu.shape != (layer[2],):
                        raise StructuralError(f"sBN statistics for {name} have wrong length")
                inv = 1.0 / np.sqrt(var + eps)
                xhat = (h - mu) * inv
                h = xhat * params[f"{name}.gamma"] + params[f"{name}.beta"]
                caches.append((xhat, inv))
            elif kind == "relu":
                caches.append(h > 0)
                h = np.where(h > 0, h, 0.0).astype(h.dtype, copy=False)
            elif kind == "pool":
                n, hh, ww, c = h.shape
                caches.append(h.shape)
                h = h[:, : hh // 2 * 2, : ww // 2 * 2].reshape(n, hh // 2, 2, ww // 2, 2, c).mean(axis=(2, 4))
            elif kind == "flatten":
                caches.append(h.shape)
                h = h.reshape(h.shape[0], -1)
            if not np.isfinite(h).all():
                raise NumericError(layer[1] if len(layer) > 1 else kind)
        if stop_at is not None:
            raise StructuralError(f"no norm layer named {stop_at!r}")
        return h, caches, batch_mode

    def logits(self, params: ParamSet, x: np.ndarray, norm: NormSource = "batch") -> np.ndarray:
        return self._run(params, self._input(x), norm)[0]

    def forward(self, params: ParamSet, x: np.ndarray, norm: NormSource = "batch") -> np.ndarray:
        """Class probabilities, one row per input on the K-simplex."""
        return np.exp(_log_softmax(self.logits(params, x, norm)))

    def predict(self, params: ParamSet, x: np.ndarray, norm: NormSource, chunk: int = 4096) -> np.ndarray:
        """Argmax class over (possibly large) inputs; requires global statistics."""
        x = np.asarray(x)
        return np.concatenate([
            self.logits(params, x[i:i + chunk], norm).argmax(axis=1) for i in range(0, len(x), chunk)
        ])

    def loss_and_grad(
        self, params: ParamSet, x: np.ndarray, targets: np.ndarray, norm: NormSource = "batch"
    ) -> tuple[float, ParamSet]:
        """Mean cross entropy against convex target rows, and its gradient."""
        x = self._input(x)
        targets = np.asarray(targets, dtype=self.dtype)
        if targets.shape != (x.shape[0], self.config.num_classes):
            raise StructuralError(f"targets shape {targets.shape} does not match batch")
        z, caches, batch_mode = self._run(params, x, norm)
        logp = _log_softmax(z)
        n = x.shape[0]
        loss = float(-(targets * logp).sum() / n)
        if not np.isfinite(loss):
            raise NumericError("loss")
        dz = (np.exp(logp) * targets.sum(axis=1, keepdims=True) - targets) / n
        return loss, self._backward(params, dz, caches, batch_mode)

    def _backward(self, params: ParamSet, d: np.ndarray, caches: list, batch_mode: bool) -> ParamSet:
        grads: dict[str, np.ndarray] = {}
        for layer, cache in zip(reversed(self._layers), reversed(caches)):
            kind = layer[0]
            if kind == "dense":
                name, bias = layer[1], layer[4]
                grads[f"{name}.weight"] = cache.T @ d
                if bias:
                    grads[f"{name}.bias"] = d.sum(axis=0)
                d = d @ params[f"{name}.weight"].T
            elif kind == "conv":
                name = layer[1]
                cols, shape = cache
                w = params[f"{name}.weight"]
                cout = w.shape[-1]
                d2 = d.reshape(-1, cout)
                grads[f"{name}.weight"] = (cols.reshape(-1, cols.shape[-1]).T @ d2).reshape(w.shape)
                d = _col2im(d2 @ w.reshape(-1, cout).T, shape)
            elif kind == "norm":
                name = layer[1]
                xhat, inv = cache
                axes = tuple(range(d.ndim - 1))
                gamma = params[f"{name}.gamma"]
                grads[f"{name}.gamma"] = (d * xhat).sum(axis=axes)
                grads[f"{name}.beta"] = d.sum(axis=axes)
                dxhat = d * gamma
                if batch_mode:
                    m = d.size // d.shape[-1]
                    d = inv / m * (m * dxhat - dxhat.sum(axis=axes)
                                   - xhat * (dxhat * xhat).sum(axis=axes))
                else:
                    d = dxhat * inv
            elif kind == "relu":
                d = d * cache
            elif kind == "pool":
                n, hh, ww, c = cache
                up = np.repeat(np.repeat(d, 2, axis=1), 2, axis=2) * 0.25
                full = np.zeros(cache, dtype=d.dtype)
                full[:, : up.shape[1], : up.shape[2]] = up
                d = full
            elif kind == "flatten":
                d = d.reshape(cache)
        return ParamSet((k, grads[k]) for k in params)

    # -- statistics for static BN -----------------------------------------

    def layer_statistics(
        self, params: ParamSet, x: np.ndarray, stats_mode: str = "population", chunk: int = 2048
    ) -> SbnState:
        """Per-norm-layer statistics of ``x`` from one layerwise sweep.

        Each norm layer is standardized with the whole-dataset statistics of
        the layers before it, which is the full-batch training-mode forward
        pass evaluated in chunks. ``stats_mode`` selects the population or the
        unbiased (N - 1) variance for the returned state.
        """
        if stats_mode not in ("population", "unbiased"):
            raise StructuralError(f"unknown stats_mode {stats_mode!r}")
        x = np.asarray(x)
        if len(x) == 0:
            from .errors import DegenerateStatisticsError

            raise DegenerateStatisticsError("no samples for statistics")
        eps = self.config.sbn_epsilon
        mean: dict[str, np.ndarray] = {}
        pop: dict[str, np.ndarray] = {}
        unb: dict[str, np.ndarray] = {}
        for name, width in self.norm_layers:
            partial = SbnState(dict(mean), dict(pop), len(x), eps)
            n_tot, mu, m2 = 0, np.zeros(width), np.zeros(width)
            for i in range(0, len(x), chunk):
                h = self._run(params, self._input(x[i:i + chunk]), partial, stop_at=name)
                h = h.reshape(-1, width).astype(np.float64)
                n_b = h.shape[0]
                mu_b = h.mean(axis=0)
                m2_b = ((h - mu_b) ** 2).sum(axis=0)
                delta = mu_b - mu
                tot = n_tot + n_b
                mu = mu + delta * (n_b / tot)
                m2 = m2 + m2_b + delta ** 2 * (n_tot * n_b / tot)
                n_tot = tot
            mean[name] = mu.astype(self.dtype)
            pop[name] = (m2 / n_tot).astype(self.dtype)
            unb[name] = (m2 / (n_tot - 1) if n_tot > 1 else np.zeros(width)).astype(self.dtype)
        var = pop if stats_mode == "population" else unb
        return SbnState(mean, var, len(x), eps)

    def layer_counts(self, n_samples: int) -> dict[str, int]:
        """Number of normalized elements per channel for ``n_samples`` inputs."""
        counts = {}
        if self.config.conv_channels:
            h, w, _ = self.config.image_shape
            for i in range(len(self.config.conv_channels)):
                counts[f"norm{i + 1}"] = n_samples * h * w
                h, w = h // 2, w // 2
        for name, _ in self.norm_layers:
            counts.setdefault(name, n_samples)
        return counts


# -- checkpoints -----------------------------------------------------------

def _arr(a: np.ndarray) -> dict:
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "values": [float(v) for v in a.ravel()]}


def _unarr(d: dict) -> np.ndarray:
    return np.asarray(d["values"], dtype=np.float64).reshape(d["shape"])


def checkpoint_dict(params: ParamSet, sbn: SbnState | None = None) -> dict:
    out = {"params": [{"name": k, **_arr(v)} for k, v in params.items()]}
    if sbn is not None:
        out["sbn"] = {
            "epsilon": sbn.epsilon,
            "sample_count": sbn.sample_count,
            "layers": [{"name": k, "mean": _arr(sbn.mean[k]), "var": _arr(sbn.var[k])} for k in sbn.mean],
        }
    return out


def checkpoint_from_dict(d: dict) -> tuple[ParamSet, SbnState | None]:
    params = ParamSet((e["name"], _unarr(e)) for e in d["params"])
    sbn = None
    if d.get("sbn") is not None:
        s = d["sbn"]
        sbn = SbnState(
            {e["name"]: _unarr(e["mean"]) for e in s["layers"]},
            {e["name"]: _unarr(e["var"]) for e in s["layers"]},
            int(s["sample_count"]),
            float(s["epsilon"]),
        )
    return params, sbn


def save_checkpoint(path: str | Path, params: ParamSet, sbn: SbnState | None = None) -> None:
    # json writes floats with repr(), which round-trips float64 exactly
    Path(path).write_text(json.dumps(checkpoint_dict(params, sbn)))


def load_checkpoint(path: str | Path) -> tuple[ParamSet, SbnState | None]:
    return checkpoint_from_dict(json.loads(Path(path).read_text()))
