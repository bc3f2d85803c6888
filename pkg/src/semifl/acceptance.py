"""Acceptance checks, one function per criterion.

Each returns a :class:`CriterionResult`; :func:`run_all` prints one
PASS/FAIL line per criterion. The desk-scale runs behind criteria 5, 6 and 8
are computed once per process and shared.
"""
from __future__ import annotations

import math
import tempfile
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import data, harness, protocol, theory
from .augment import AugmentPolicy
from .model import Model, ModelConfig, MomentumState, ParamSet, pooled_statistics, sgd_step

DESK_CONFIG = """\
[experiment]
run_name = desk
kind = semifl

[dataset]
source = synth_blobs
n = 10000
dim = 50
num_classes = 10
separation = 5.0
test_n = 2000
n_server = 100

[partition]
mode = iid
num_clients = 20

[model]
hidden_dims = 64

[augment]
preset = vectors
jitter_std = 0.1
magnitude = 10
n_ops = 2

[protocol]
rounds = 50
local_epochs = 5
activity_rate = 0.25
scheduler = constant
"""
DESK_SEEDS = (0, 1, 2)

# arm name -> config overrides; "semifl_repeat" reruns "semifl" for the determinism check
DESK_ARMS = {
    "semifl": {},
    "semifl_repeat": {},
    "partial": {"experiment.kind": "partially_supervised"},
    "vanilla": {"experiment.kind": "vanilla_parallel"},
    "no_fine_tune": {"protocol.fine_tune_labeled": "false"},
    "per_batch_labels": {"protocol.pseudo_on_receipt": "false"},
    "sbn_clients": {"protocol.sbn_variant": "server_and_clients"},
}


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float
    limit_s: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status} criterion {self.number} ({self.name}): {self.detail} [{self.seconds:.1f}s / {self.limit_s:.0f}s]"


def _timed(number: int, name: str, limit_s: float, fn: Callable[[], tuple[bool, str]]) -> CriterionResult:
    start = time.perf_counter()
    ok, detail = fn()
    took = time.perf_counter() - start
    if took >= limit_s:
        ok, detail = False, detail + f"; runtime {took:.1f}s exceeds {limit_s:.0f}s"
    return CriterionResult(number, name, ok, detail, took, limit_s)


# -- 1 ---------------------------------------------------------------------

def criterion_1() -> CriterionResult:
    def body():
        rng = np.random.default_rng(1)
        worst_mean = 0.0
        for k in (1, 2, 3, 7, 16):
            sets = [ParamSet([("a", rng.normal(size=(4, 3))), ("b", rng.normal(size=5))]) for _ in range(k)]
            agg = protocol.aggregate(sets)
            for name in ("a", "b"):
                oracle = sum(s[name] for s in sets) / k
                worst_mean = max(worst_mean, float(np.abs(agg[name] - oracle).max()))
        _, var, _ = pooled_statistics([2, 2], [np.array([1.0]), np.array([5.0])], [np.array([2.0]), np.array([2.0])])
        fixture_err = abs(float(var[0]) - 20.0 / 3.0)
        worst_pool = 0.0
        for _ in range(50):
            parts = [rng.normal(rng.normal(), rng.uniform(0.1, 3), size=(int(rng.integers(2, 40)), 3))
                     for _ in range(int(rng.integers(1, 6)))]
            _, v, _ = pooled_statistics([len(p) for p in parts], [p.mean(0) for p in parts],
                                        [p.var(0, ddof=1) for p in parts])
            oracle = np.concatenate(parts).var(0, ddof=1)
            worst_pool = max(worst_pool, float(np.abs(v - oracle).max()))
        ok = worst_mean <= 1e-12 and fixture_err <= 1e-12 and worst_pool <= 1e-9
        return ok, f"mean err {worst_mean:.1e}, fixture err {fixture_err:.1e}, pooled err {worst_pool:.1e}"
    return _timed(1, "oracle algebra", 1.0, body)


# -- 2 ---------------------------------------------------------------------

def finite_difference_error(model: Model, params: ParamSet, x, y, norm, eps: float = 1e-6) -> float:
    """Largest per-tensor ``|analytic - numeric| / (|analytic| + |numeric|)`` (2-norms)."""
    _, grad = model.loss_and_grad(params, x, y, norm)
    worst = 0.0
    for name, w in params.items():
        num = np.zeros_like(w)
        for idx in np.ndindex(w.shape):
            hi, lo = params.copy(), params.copy()
            hi[name][idx] += eps
            lo[name][idx] -= eps
            num[idx] = (model.loss_and_grad(hi, x, y, norm)[0] - model.loss_and_grad(lo, x, y, norm)[0]) / (2 * eps)
        denom = np.linalg.norm(grad[name]) + np.linalg.norm(num)
        if denom > 0:
            worst = max(worst, float(np.linalg.norm(grad[name] - num) / denom))
    return worst


def gradient_configs(seed: int = 2):
    """Ten small model/batch configurations: MLPs and CNNs, batch and global normalization."""
    rng = np.random.default_rng(seed)
    for i in range(10):
        if i % 3 == 2:
            shape = (4, 4, int(rng.integers(1, 3)))
            cfg = ModelConfig(int(np.prod(shape)), (int(rng.integers(2, 5)),), int(rng.integers(2, 4)),
                              image_shape=shape, conv_channels=(2,))
        else:
            dims = tuple(int(h) for h in rng.integers(2, 6, size=int(rng.integers(1, 3))))
            cfg = ModelConfig(int(rng.integers(2, 6)), dims, int(rng.integers(2, 5)))
        model = Model(cfg)
        params = model.init_params(rng)
        n = int(rng.integers(3, 7))
        x = rng.normal(size=(n, cfg.input_dim))
        y = data.one_hot(rng.integers(0, cfg.num_classes, size=n), cfg.num_classes)
        norm = "batch" if i % 2 == 0 else model.layer_statistics(params, rng.normal(size=(20, cfg.input_dim)))
        yield model, params, x, y, norm


def criterion_2() -> CriterionResult:
    def body():
        errs = [finite_difference_error(*c) for c in gradient_configs()]
        return max(errs) <= 1e-4, f"max relative error {max(errs):.2e} over {len(errs)} configurations"
    return _timed(2, "gradient checks", 30.0, body)


# -- 3 ---------------------------------------------------------------------

def degenerate_round(seed: int = 3):
    """One client-phase round under C=1, M=1, E=1, lambda=0, tau=0, identity aug, beta_g=0.

    Returns ``(protocol_params, oracle_params)``. Both start from the
    fine-tuned global model; the oracle is a plain SGD epoch over the
    pseudo-labeled shard using the client's shuffle stream.
    """
    rng = np.random.default_rng(seed)
    n, d, k = 23, 5, 3
    model = Model(ModelConfig(d, (6,), k))
    server = data.LabeledDataset(rng.normal(size=(12, d)), data.one_hot(np.arange(12) % k, k))
    shard = data.ClientShard(0, rng.normal(size=(n, d)), data.one_hot(rng.integers(0, k, n), k))
    setup = protocol.FederatedSetup(model, server, [shard], server, AugmentPolicy.identity(), seed)
    cfg = protocol.ProtocolConfig(rounds=1, local_epochs=1, activity_rate=1.0, threshold=0.0, loss_weight=0.0,
                                  global_momentum=0.0, client_batch=4)
    lr = protocol.round_lr(cfg, 1)
    params = protocol.server_update(model, setup.initial_params(), server, cfg, lr, setup.policy,
                                    protocol.stream(seed, protocol._SERVER, 1))
    sbn = protocol.refresh_sbn(model, params, "server_only", server.x)
    w_client, _ = protocol._client_job(setup, cfg, params, sbn, lr, 1, 0)
    w_agg = protocol.aggregate([w_client])
    w_new, _ = protocol.apply_global_momentum(params, w_agg, 0.0, params.zeros_like())

    # oracle: label once with the received model, then one shuffled SGD epoch
    y = np.eye(k)[model.forward(params, shard.x_u, sbn).argmax(axis=1)]
    client_rng = protocol.stream(seed, protocol._CLIENT, 1, 0)
    shuffle_rng = client_rng.spawn(2)[1].spawn(3)[0]
    perm = shuffle_rng.permutation(n)
    w, ms = params.copy(), MomentumState.zeros(params)
    for b in np.array_split(perm, math.ceil(n / cfg.client_batch)):
        _, g = model.loss_and_grad(w, shard.x_u[b], y[b], "batch")
        w, ms = sgd_step(w, g, lr, ms, cfg.local_momentum, cfg.weight_decay, cfg.nesterov)
    return w_new, w


def criterion_3() -> CriterionResult:
    def body():
        got, oracle = degenerate_round()
        same = all(np.array_equal(got[k], oracle[k]) for k in oracle.names)
        diff = float(np.abs(got.to_vector() - oracle.to_vector()).max())
        return same, f"bitwise equal: {same} (max abs diff {diff:.1e})"
    return _timed(3, "protocol degeneracy", 10.0, body)


# -- 4 ---------------------------------------------------------------------

def label_skew(parts, labels, k: int) -> float:
    """Mean total-variation distance between client label distributions and the global one."""
    glob = np.bincount(labels, minlength=k) / len(labels)
    tv = [0.5 * np.abs(np.bincount(labels[p], minlength=k) / len(p) - glob).sum() for p in parts if len(p)]
    return float(np.mean(tv))


def criterion_4() -> CriterionResult:
    def body():
        k, per_class = 10, 100
        labels = np.repeat(np.arange(k), per_class)
        idx = np.arange(len(labels))
        iid_ok = kclass_ok = True
        share_dev = []
        wins = 0
        for seed in range(100):
            parts = data.partition(idx, labels, data.PartitionSpec("iid", 17, seed))
            sizes = [len(p) for p in parts]
            iid_ok &= max(sizes) - min(sizes) <= 1
            for p in data.partition(idx, labels, data.PartitionSpec("kclass", 10, seed, k=2)):
                counts = np.bincount(labels[p], minlength=k)
                held = counts[counts > 0]
                kclass_ok &= len(held) <= 2 and len(set(held.tolist())) == 1
            big = data.partition(idx, labels, data.PartitionSpec("dirichlet", 10, seed, alpha=1e6))
            share = np.median([np.bincount(labels[p], minlength=k).max() / len(p) for p in big])
            share_dev.append(abs(share - 1.0 / k))
            s01 = label_skew(data.partition(idx, labels, data.PartitionSpec("dirichlet", 10, seed, alpha=0.1)),
                             labels, k)
            s03 = label_skew(data.partition(idx, labels, data.PartitionSpec("dirichlet", 10, seed, alpha=0.3)),
                             labels, k)
            wins += s01 > s03
        dev = max(share_dev)
        ok = iid_ok and kclass_ok and dev <= 0.02 and wins >= 90
        return ok, (f"iid sizes ok: {iid_ok}; kclass ok: {kclass_ok}; dirichlet(1e6) max share dev {dev:.3f}; "
                    f"skew(0.1) > skew(0.3) in {wins}/100 seeds")
    return _timed(4, "partition invariants", 30.0, body)


# -- 5, 6, 8 -----------------------------------------------------------------

_DESK_CACHE: dict = {}


@dataclass
class DeskRun:
    final_accuracy: float
    records: list[dict]
    records_bytes: bytes
    seconds: float


def desk_config(overrides: dict | None = None, seed: int = 0) -> harness.ExperimentConfig:
    ov = {"experiment.master_seed": str(seed)}
    ov.update(overrides or {})
    return harness.parse_config(text=DESK_CONFIG, overrides=ov)


def desk_runs(seeds=DESK_SEEDS) -> dict[str, list[DeskRun]]:
    """Every desk arm for every seed, through the harness (cached per process)."""
    key = tuple(seeds)
    if key not in _DESK_CACHE:
        out = {arm: [] for arm in DESK_ARMS}
        with tempfile.TemporaryDirectory() as tmp:
            for seed in seeds:
                for arm, ov in DESK_ARMS.items():
                    start = time.perf_counter()
                    summary = harness.run(desk_config(ov, seed), Path(tmp) / f"{arm}-{seed}")
                    raw = summary.records_path.read_bytes()
                    out[arm].append(DeskRun(summary.final_accuracy, harness.read_records(summary.records_path),
                                            raw, time.perf_counter() - start))
        _DESK_CACHE[key] = out
    return _DESK_CACHE[key]


def _median_final(runs: list[DeskRun]) -> float:
    return float(np.median([r.final_accuracy for r in runs]))


def criterion_5() -> CriterionResult:
    runs = desk_runs()
    seconds = sum(r.seconds for arm in runs.values() for r in arm)
    med = {arm: _median_final(rs) for arm, rs in runs.items()}
    semifl, partial, vanilla = med["semifl"], med["partial"], med["vanilla"]
    a = semifl >= partial + 0.05
    b = vanilla <= semifl - 0.05
    # toggle matrix: (fine-tune, pseudo-on-receipt)
    matrix = {"off/off": med["vanilla"], "off/on": med["no_fine_tune"],
              "on/off": med["per_batch_labels"], "on/on": semifl}
    others = [v for name, v in matrix.items() if name != "on/on"]
    c = all(matrix["off/off"] <= v for v in matrix.values()) and all(semifl > v for v in others)
    full_order = sorted(matrix, key=matrix.get)
    q1 = float(np.median([r.records[0]["pseudo_quality"] for r in runs["semifl"]]))
    qt = float(np.median([r.records[-1]["pseudo_quality"] for r in runs["semifl"]]))
    d = qt > q1
    ok = a and b and c and d and seconds < 900
    detail = (f"(a) semifl {semifl:.4f} vs partial {partial:.4f}: {a}; (b) vanilla {vanilla:.4f}: {b}; "
              f"(c) toggles " + ", ".join(f"{n}={v:.4f}" for n, v in matrix.items())
              + f", ascending {full_order}: {c}; (d) quality round 1 {q1:.4f} -> round T {qt:.4f}: {d}")
    if seconds >= 900:
        detail += f"; runtime {seconds:.0f}s exceeds 900s"
    return CriterionResult(5, "desk-scale benefit", ok, detail, seconds, 900.0)


def criterion_6() -> CriterionResult:
    runs = desk_runs()
    gap = abs(_median_final(runs["semifl"]) - _median_final(runs["sbn_clients"]))
    return CriterionResult(6, "sBN variants", gap <= 0.02,
                           f"server_only {_median_final(runs['semifl']):.4f} vs server_and_clients "
                           f"{_median_final(runs['sbn_clients']):.4f}, gap {gap:.4f}",
                           sum(r.seconds for r in runs["sbn_clients"]), 900.0)


def criterion_8() -> CriterionResult:
    runs = desk_runs()

    def body():
        pairs = list(zip(runs["semifl"], runs["semifl_repeat"]))
        same = all(a.records_bytes == b.records_bytes and len(a.records_bytes) > 0 for a, b in pairs)
        return same, f"{len(pairs)} seed pairs byte-identical: {same}"
    return _timed(8, "determinism", 1.0, body)


# -- 7 ---------------------------------------------------------------------

def monotone_with_tolerance(values, errors, max_inversions: int = 1) -> tuple[bool, int]:
    """Non-increasing up to ``max_inversions`` rises, each no larger than one standard error."""
    rises = 0
    for i in range(len(values) - 1):
        up = values[i + 1] - values[i]
        if up > 0:
            if up > max(errors[i], errors[i + 1]):
                return False, rises + 1
            rises += 1
    return rises <= max_inversions, rises


def criterion_7() -> CriterionResult:
    def body():
        cfg = theory.TheoryConfig(zeta=0.5, n_u_grid=(200, 800, 3200, 12800))
        table = theory.rate_experiment(theory.SyntheticTask(), cfg, range(5))
        med = table.medians()
        ssl = [v["risk_ssl"] for v in med.values()]
        se = [v["se_ssl"] for v in med.values()]
        mono, rises = monotone_with_tolerance(ssl, se)
        last = med[12800]
        beats = last["risk_ssl"] < last["risk_labeled"]
        slope_ok = table.slope_fit is not None and table.slope_fit < 0
        ok = mono and beats and slope_ok
        return ok, (f"median risk_ssl {[round(v, 5) for v in ssl]} ({rises} rises): {mono}; at 12800 ssl "
                    f"{last['risk_ssl']:.5f} < labeled {last['risk_labeled']:.5f}: {beats}; slope "
                    f"{table.slope_fit:.3f} (theory -{table.theory_exponent:.3f}): {slope_ok}")
    return _timed(7, "theory rates", 300.0, body)


CRITERIA = {1: criterion_1, 2: criterion_2, 3: criterion_3, 4: criterion_4, 5: criterion_5, 6: criterion_6,
            7: criterion_7, 8: criterion_8}


def run_all(numbers=None, echo: bool = True) -> list[CriterionResult]:
    results = []
    for n in sorted(numbers or CRITERIA):
        res = CRITERIA[n]()
        if echo:
            print(res.line(), flush=True)
        results.append(res)
    return results
