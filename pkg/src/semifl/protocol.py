"""SemiFL orchestration: server fine-tuning, pseudo-labeling clients, aggregation.

One communication round:

1. the server fine-tunes the global model on its labeled data;
2. static BN statistics are refreshed for the fine-tuned model;
3. a subset of clients is sampled; each pseudo-labels its data once with the
   received model, keeps confident rows (the "fix" set), resamples them with
   replacement (the "mix" set) and trains locally on the fix loss plus the
   Mixup loss;
4. the server averages the models it received and applies global momentum.

After the last round the server fine-tunes once more and refreshes the
statistics.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import augment
from .augment import AugmentPolicy
from .data import ClientShard, LabeledDataset, pseudo_label_accuracy
from .errors import (ConfigError, DegenerateStatisticsError, ProtocolError, ScheduleError, SemiFLError,
                     StructuralError)
from .model import (Model, MomentumState, ParamSet, SbnState, linear_combine, pooled_statistics,
                    sgd_step)

# stream tags for seed derivation
_INIT, _SERVER, _SAMPLE, _CLIENT, _FINAL = range(5)


@dataclass(frozen=True)
class ProtocolConfig:
    rounds: int = 800
    local_epochs: int = 5
    server_batch: int = 10
    client_batch: int = 10
    activity_rate: float = 0.1
    lr: float = 0.03
    local_momentum: float = 0.9
    weight_decay: float = 5e-4
    nesterov: bool = True
    global_momentum: float = 0.5
    threshold: float = 0.95
    mixup_a: float = 0.75
    loss_weight: float = 1.0
    scheduler: str = "cosine"
    sbn_variant: str = "server_only"
    fine_tune_labeled: bool = True
    pseudo_on_receipt: bool = True
    soft_targets: bool = False
    mixup_max: bool = False
    workers: int = 1

    def __post_init__(self):
        checks = [
            (self.rounds >= 0, "rounds must be >= 0"),
            (self.local_epochs >= 0, "local_epochs must be >= 0"),
            (self.server_batch >= 2 and self.client_batch >= 2, "batch sizes must be >= 2"),
            (0.0 < self.activity_rate <= 1.0, "activity_rate must be in (0, 1]"),
            (self.lr >= 0.0, "lr must be >= 0"),
            (0.0 <= self.local_momentum < 1.0, "local_momentum must be in [0, 1)"),
            (self.weight_decay >= 0.0, "weight_decay must be >= 0"),
            (0.0 <= self.global_momentum < 1.0, "global_momentum must be in [0, 1)"),
            (0.0 <= self.threshold <= 1.0, "threshold must be in [0, 1]"),
            (self.mixup_a > 0.0, "mixup_a must be > 0"),
            (self.loss_weight >= 0.0, "loss_weight must be >= 0"),
            (self.scheduler in ("cosine", "constant"), "scheduler must be cosine or constant"),
            (self.sbn_variant in ("server_only", "server_and_clients"),
             "sbn_variant must be server_only or server_and_clients"),
            (self.workers >= 1, "workers must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)


@dataclass
class PseudoDataset:
    x: np.ndarray
    y: np.ndarray           # targets, one-hot unless soft targets were requested
    confidence: np.ndarray
    index: np.ndarray       # source rows in the client shard

    def __len__(self) -> int:
        return len(self.x)

    def take(self, rows) -> "PseudoDataset":
        return PseudoDataset(self.x[rows], self.y[rows], self.confidence[rows], self.index[rows])


class _NoTransmission:
    """Returned by a client that has nothing confident to train on."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "NO_TRANSMISSION"

    def __bool__(self) -> bool:
        return False


NO_TRANSMISSION = _NoTransmission()


@dataclass
class RoundRecord:
    round: int
    test_accuracy: float
    pseudo_quantity: float | None
    pseudo_quality: float | None
    participating: int
    lr: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class FederatedSetup:
    """Everything a run needs besides the protocol hyperparameters."""

    model: Model
    server: LabeledDataset
    shards: list[ClientShard]
    test: LabeledDataset
    policy: AugmentPolicy = field(default_factory=AugmentPolicy)
    master_seed: int = 0
    init_params: ParamSet | None = None

    def initial_params(self) -> ParamSet:
        if self.init_params is not None:
            return self.init_params.copy()
        return self.model.init_params(stream(self.master_seed, _INIT))


@dataclass
class RunResult:
    records: list[RoundRecord]
    params: ParamSet
    sbn: SbnState
    final_accuracy: float


def stream(master_seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for ``(master_seed, *keys)``, independent of call order."""
    return np.random.default_rng(np.random.SeedSequence([int(master_seed) & (2**64 - 1), *map(int, keys)]))


# -- schedule and sampling -----------------------------------------------

def cosine_lr(lr0: float, t: float, total: float) -> float:
    """``lr0 * (1 + cos(pi * t / total)) / 2`` for ``0 <= t <= total``."""
    if t < 0 or t > total:
        raise ScheduleError(f"step {t} outside [0, {total}]")
    if total == 0:
        return float(lr0)
    return float(lr0) * (1.0 + math.cos(math.pi * t / total)) / 2.0


def round_lr(cfg: ProtocolConfig, t: int) -> float:
    """Learning rate for 1-based round ``t``; round 1 runs at the base rate.

    ``t = rounds + 1`` is the trailing fine-tune, which reuses the last round's rate.
    """
    if cfg.scheduler == "constant" or cfg.rounds == 0:
        return cfg.lr
    return cosine_lr(cfg.lr, min(t, cfg.rounds) - 1, cfg.rounds)


def sample_clients(num_clients: int, activity_rate: float, rng: np.random.Generator) -> np.ndarray:
    """``max(floor(C * M), 1)`` distinct client ids, uniformly at random, sorted."""
    if num_clients < 1:
        raise ConfigError("need at least one client")
    # tolerance guards against products such as 0.29 * 100 = 28.999999999999996
    k = max(int(math.floor(activity_rate * num_clients + 1e-9)), 1)
    k = min(k, num_clients)
    return np.sort(rng.choice(num_clients, size=k, replace=False))


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """One shuffled epoch as ``ceil(n / size)`` batches whose sizes differ by at most one.

    Balancing avoids a tiny trailing batch: batch-mode normalization over two
    or three rows has near-zero variance in some units and the gradient blows up.
    """
    if n == 0:
        return []
    perm = rng.permutation(n)
    return np.array_split(perm, -(-n // size))


def _chunks_like(perm: np.ndarray, template: list[np.ndarray]) -> list[np.ndarray]:
    out, pos = [], 0
    for b in template:
        out.append(perm[pos:pos + len(b)])
        pos += len(b)
    return out


# -- server ----------------------------------------------------------------

def server_update(model: Model, params: ParamSet, labeled: LabeledDataset, cfg: ProtocolConfig,
                  lr: float, policy: AugmentPolicy, rng: np.random.Generator,
                  mstate: MomentumState | None = None) -> ParamSet:
    """``local_epochs`` passes of weakly augmented mini-batch SGD on the labeled data.

    Momentum starts from zero unless ``mstate`` is given.
    """
    if len(labeled) == 0:
        raise ConfigError("server has no labeled data")
    mstate = mstate or MomentumState.zeros(params)
    for _ in range(cfg.local_epochs):
        for b in _batches(len(labeled), cfg.server_batch, rng):
            if len(b) < 2:
                continue
            xb = augment.weak_augment_batch(labeled.x[b], policy, rng)
            _, grad = model.loss_and_grad(params, xb, labeled.y[b], "batch")
            params, mstate = sgd_step(params, grad, lr, mstate, cfg.local_momentum,
                                      cfg.weight_decay, cfg.nesterov)
    return params


# -- static BN -------------------------------------------------------------

def client_statistics(model: Model, params: ParamSet, x: np.ndarray) -> SbnState:
    """What a client uploads for the global statistics: per-layer mean and unbiased variance."""
    return model.layer_statistics(params, x, stats_mode="unbiased")


def refresh_sbn(model: Model, params: ParamSet, variant: str, server_x: np.ndarray | None,
                client_stats: Sequence[SbnState] | None = None) -> SbnState:
    """Global sBN statistics for ``params``.

    ``server_only`` uses the population mean/variance of the server data.
    ``server_and_clients`` pools the server's and every client's
    ``(N, mean, unbiased var)`` with the pooled-variance formula.
    """
    if variant == "server_only":
        if server_x is None or len(server_x) == 0:
            raise DegenerateStatisticsError("server_only statistics need server data")
        return model.layer_statistics(params, server_x, stats_mode="population")
    if variant != "server_and_clients":
        raise ConfigError(f"unknown sbn variant {variant!r}")
    if client_stats is None:
        raise ConfigError("server_and_clients statistics need per-client statistics")
    parties = list(client_stats)
    if server_x is not None and len(server_x):
        parties.insert(0, client_statistics(model, params, server_x))
    parties = [p for p in parties if p.sample_count > 0]
    if not parties:
        raise DegenerateStatisticsError("no samples behind the requested statistics")
    mean, var = {}, {}
    for name, _ in model.norm_layers:
        counts = [model.layer_counts(p.sample_count)[name] for p in parties]
        mu, sigma2, _ = pooled_statistics(counts, [p.mean[name] for p in parties],
                                          [p.var[name] for p in parties])
        mean[name] = mu.astype(model.dtype)
        var[name] = sigma2.astype(model.dtype)
    return SbnState(mean, var, sum(p.sample_count for p in parties), model.config.sbn_epsilon)


# -- clients ---------------------------------------------------------------

def _targets(probs: np.ndarray, soft: bool) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    conf = probs.max(axis=1)
    hard = probs.argmax(axis=1)  # first maximum: ties go to the lowest class index
    y = probs.copy() if soft else np.eye(probs.shape[1])[hard]
    return conf, hard, y


def generate_pseudo(model: Model, params: ParamSet, sbn: SbnState, shard: ClientShard,
                    threshold: float, policy: AugmentPolicy, rng: np.random.Generator,
                    soft: bool = False) -> PseudoDataset:
    """The fix set: rows whose weakly augmented prediction has confidence >= threshold."""
    if len(shard) == 0:
        k = model.config.num_classes
        return PseudoDataset(np.empty((0, shard.x_u.shape[1])), np.empty((0, k)), np.empty(0),
                             np.empty(0, np.int64))
    xw = augment.weak_augment_batch(shard.x_u, policy, rng)
    probs = model.forward(params, xw, sbn)
    return select_confident(shard.x_u, probs, threshold, soft)


def select_confident(x: np.ndarray, probs: np.ndarray, threshold: float,
                     soft: bool = False) -> PseudoDataset:
    conf, _, y = _targets(probs, soft)
    keep = np.flatnonzero(conf >= threshold)
    return PseudoDataset(x[keep], y[keep], conf[keep], keep)


def build_mix(d_fix: PseudoDataset, rng: np.random.Generator) -> PseudoDataset:
    """Same-size resample of the fix set, with replacement."""
    if len(d_fix) == 0:
        raise ConfigError("cannot build a mix set from an empty fix set")
    return d_fix.take(rng.integers(0, len(d_fix), size=len(d_fix)))


def _local_step(model: Model, params: ParamSet, mstate: MomentumState, x_fix, y_fix, x_mix, y_mix,
                cfg: ProtocolConfig, lr: float, policy: AugmentPolicy,
                mix_rng: np.random.Generator, aug_rng: np.random.Generator):
    xs = augment.strong_augment_batch(x_fix, policy, aug_rng)
    _, grad = model.loss_and_grad(params, xs, y_fix, "batch")
    if cfg.loss_weight:
        x_mixed, draw = augment.mixup(x_fix, x_mix, cfg.mixup_a, mix_rng, use_max=cfg.mixup_max)
        lam = draw.lambda_mix
        # cross entropy is linear in the target, so the two mix terms share one pass
        target = lam * y_fix + (1.0 - lam) * y_mix
        xw = augment.weak_augment_batch(x_mixed, policy, aug_rng)
        _, g_mix = model.loss_and_grad(params, xw, target, "batch")
        grad = linear_combine([grad, g_mix], [1.0, cfg.loss_weight])
    return sgd_step(params, grad, lr, mstate, cfg.local_momentum, cfg.weight_decay, cfg.nesterov)


def client_update(model: Model, params: ParamSet, d_fix: PseudoDataset, d_mix: PseudoDataset | None,
                  cfg: ProtocolConfig, lr: float, policy: AugmentPolicy, rng: np.random.Generator):
    """Local training on fixed pseudo-labels; ``NO_TRANSMISSION`` when the fix set is empty.

    ``rng`` is split into three child streams: batch shuffling, Mixup draws
    and augmentation, so the batch order does not depend on the others.
    """
    if len(d_fix) == 0:
        return NO_TRANSMISSION
    if d_mix is None or len(d_mix) != len(d_fix):
        raise StructuralError("mix set must match the fix set in size")
    shuffle_rng, mix_rng, aug_rng = rng.spawn(3)
    mstate = MomentumState.zeros(params)
    n = len(d_fix)
    for _ in range(cfg.local_epochs):
        fix_b = _batches(n, cfg.client_batch, shuffle_rng)
        mix_b = _chunks_like(shuffle_rng.permutation(n), fix_b)
        for bf, bm in zip(fix_b, mix_b):
            if len(bf) < 2:
                continue
            params, mstate = _local_step(model, params, mstate, d_fix.x[bf], d_fix.y[bf],
                                         d_mix.x[bm], d_mix.y[bm], cfg, lr, policy, mix_rng, aug_rng)
    return params


def client_update_per_batch(model: Model, params: ParamSet, shard: ClientShard, cfg: ProtocolConfig,
                            lr: float, policy: AugmentPolicy, rng: np.random.Generator):
    """Local training that re-labels every batch with the current local model.

    Returns ``(params or NO_TRANSMISSION, log)`` where ``log`` holds the
    shard rows and labels of every confident pseudo-label generated, and the
    number of rows examined.
    """
    shuffle_rng, mix_rng, aug_rng = rng.spawn(3)
    mstate = MomentumState.zeros(params)
    idx_log, lab_log, examined, steps = [], [], 0, 0
    for _ in range(cfg.local_epochs):
        for b in _batches(len(shard), cfg.client_batch, shuffle_rng):
            if len(b) < 2:
                continue
            xb = shard.x_u[b]
            probs = model.forward(params, augment.weak_augment_batch(xb, policy, aug_rng), "batch")
            fix = select_confident(xb, probs, cfg.threshold, cfg.soft_targets)
            examined += len(b)
            idx_log.append(b[fix.index])
            lab_log.append(probs[fix.index].argmax(axis=1))
            if len(fix) < 2:
                continue
            mix = fix.take(mix_rng.integers(0, len(fix), size=len(fix)))
            params, mstate = _local_step(model, params, mstate, fix.x, fix.y, mix.x, mix.y,
                                         cfg, lr, policy, mix_rng, aug_rng)
            steps += 1
    log = (np.concatenate(idx_log) if idx_log else np.empty(0, np.int64),
           np.concatenate(lab_log) if lab_log else np.empty(0, np.int64), examined)
    return (params if steps else NO_TRANSMISSION), log


# -- aggregation -----------------------------------------------------------

def aggregate(received: Sequence[ParamSet]) -> ParamSet | None:
    """Unweighted mean of the received models; ``None`` (skip) when nothing arrived."""
    received = [r for r in received if r is not NO_TRANSMISSION]
    if not received:
        return None
    for r in received[1:]:
        received[0].check_compatible(r)
    return ParamSet((k, np.mean(np.stack([r[k] for r in received]), axis=0)) for k in received[0])


def apply_global_momentum(w_prev: ParamSet, w_agg: ParamSet, beta: float,
                          velocity: ParamSet) -> tuple[ParamSet, ParamSet]:
    """Server momentum on the pseudo-gradient ``w_prev - w_agg``.

    ``v' = beta * v + (w_prev - w_agg)`` and ``w_next = w_prev - v'``; with
    ``beta = 0`` this returns ``w_agg``.
    """
    w_prev.check_compatible(w_agg)
    w_prev.check_compatible(velocity)
    if beta == 0.0:
        return w_agg.copy(), w_prev - w_agg
    v = linear_combine([velocity, w_prev, w_agg], [beta, 1.0, -1.0])
    return w_prev - v, v


# -- orchestration ---------------------------------------------------------

def accuracy(model: Model, params: ParamSet, sbn: SbnState, data: LabeledDataset) -> float:
    return float((model.predict(params, data.x, sbn) == data.labels).mean())


def _statistics(setup: FederatedSetup, params: ParamSet, cfg: ProtocolConfig) -> SbnState:
    stats = None
    if cfg.sbn_variant == "server_and_clients":
        stats = [client_statistics(setup.model, params, s.x_u) for s in setup.shards if len(s) > 1]
    return refresh_sbn(setup.model, params, cfg.sbn_variant, setup.server.x, stats)


def _client_job(setup: FederatedSetup, cfg: ProtocolConfig, params: ParamSet, sbn: SbnState,
                lr: float, t: int, cid: int):
    shard = setup.shards[cid]
    rng = stream(setup.master_seed, _CLIENT, t, cid)
    try:
        if cfg.pseudo_on_receipt:
            label_rng, train_rng = rng.spawn(2)
            d_fix = generate_pseudo(setup.model, params, sbn, shard, cfg.threshold, setup.policy,
                                    label_rng, cfg.soft_targets)
            log = (d_fix.index, d_fix.y.argmax(axis=1) if len(d_fix) else np.empty(0, np.int64), len(shard))
            if len(d_fix) == 0:
                return NO_TRANSMISSION, log
            d_mix = build_mix(d_fix, label_rng)
            return client_update(setup.model, params, d_fix, d_mix, cfg, lr, setup.policy, train_rng), log
        return client_update_per_batch(setup.model, params, shard, cfg, lr, setup.policy, rng)
    except SemiFLError as exc:
        raise ProtocolError(t, cid, exc) from exc


def run_semifl(setup: FederatedSetup, cfg: ProtocolConfig, on_record=None) -> RunResult:
    """Run the full protocol; ``on_record`` is called with each RoundRecord as it completes.

    With ``fine_tune_labeled`` off the server never fine-tunes the global
    model (neither per round nor after the last round); it trains a copy in
    parallel with the clients and that copy joins the average. With ``pseudo_on_receipt`` off
    clients re-label every local batch with their evolving model.
    """
    model = setup.model
    params = setup.initial_params()
    velocity = params.zeros_like()
    records: list[RoundRecord] = []
    num_clients = len(setup.shards)
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for t in range(1, cfg.rounds + 1):
            lr = round_lr(cfg, t)
            server_rng = stream(setup.master_seed, _SERVER, t)
            if cfg.fine_tune_labeled:
                params = server_update(model, params, setup.server, cfg, lr, setup.policy, server_rng)
            sbn = _statistics(setup, params, cfg)
            ids = sample_clients(num_clients, cfg.activity_rate, stream(setup.master_seed, _SAMPLE, t))
            jobs = [(setup, cfg, params, sbn, lr, t, int(c)) for c in ids]
            results = list(pool.map(lambda a: _client_job(*a), jobs)) if pool else [_client_job(*a) for a in jobs]
            received = [w for w, _ in results if w is not NO_TRANSMISSION]
            kept = correct = examined = 0
            for cid, (_, (idx, labels, n_seen)) in zip(ids, results):
                c, k = pseudo_label_accuracy(setup.shards[int(cid)], idx, labels)
                correct, kept, examined = correct + c, kept + k, examined + n_seen
            participating = len(received)
            if not cfg.fine_tune_labeled:
                received.insert(0, server_update(model, params, setup.server, cfg, lr, setup.policy, server_rng))
            w_agg = aggregate(received)
            if w_agg is not None:
                params, velocity = apply_global_momentum(params, w_agg, cfg.global_momentum, velocity)
            acc = accuracy(model, params, _statistics(setup, params, cfg), setup.test)
            rec = RoundRecord(t, acc, kept / examined if examined else None,
                              correct / kept if kept else None, participating, lr)
            records.append(rec)
            if on_record is not None:
                on_record(rec)
    finally:
        if pool is not None:
            pool.shutdown()
    if cfg.fine_tune_labeled:
        lr = round_lr(cfg, cfg.rounds + 1)
        params = server_update(model, params, setup.server, cfg, lr, setup.policy,
                               stream(setup.master_seed, _FINAL))
    sbn = _statistics(setup, params, cfg)
    return RunResult(records, params, sbn, accuracy(model, params, sbn, setup.test))
