"""Reference pipelines: centralized training on labels, and the parallel vanilla combination."""
from __future__ import annotations

import enum
from dataclasses import replace

from .data import LabeledDataset
from .errors import ConfigError
from .protocol import (_FINAL, _SERVER, FederatedSetup, ProtocolConfig, RoundRecord, RunResult, accuracy,
                       refresh_sbn, round_lr, run_semifl, server_update, stream)


class BaselineKind(enum.Enum):
    FULLY_SUPERVISED = "fully_supervised"
    PARTIALLY_SUPERVISED = "partially_supervised"
    VANILLA_PARALLEL = "vanilla_parallel"

    @classmethod
    def parse(cls, text: str) -> "BaselineKind":
        key = text.strip().lower().replace("-", "_")
        for kind in cls:
            if kind.value == key or kind.name.lower() == key:
                return kind
        raise ConfigError(f"unknown baseline {text!r}; choose from {[k.value for k in cls]}")


def _centralized(setup: FederatedSetup, labeled: LabeledDataset, cfg: ProtocolConfig, on_record=None) -> RunResult:
    """``rounds`` server updates on ``labeled`` plus the trailing one, with SemiFL's server streams.

    Statistics come from the training set, as in the server-only variant.
    When no client ever transmits, SemiFL follows exactly this path.
    """
    model = setup.model
    params = setup.initial_params()
    records = []
    for t in range(1, cfg.rounds + 1):
        lr = round_lr(cfg, t)
        params = server_update(model, params, labeled, cfg, lr, setup.policy, stream(setup.master_seed, _SERVER, t))
        sbn = refresh_sbn(model, params, "server_only", labeled.x)
        rec = RoundRecord(t, accuracy(model, params, sbn, setup.test), None, None, 0, lr)
        records.append(rec)
        if on_record is not None:
            on_record(rec)
    params = server_update(model, params, labeled, cfg, round_lr(cfg, cfg.rounds + 1), setup.policy,
                           stream(setup.master_seed, _FINAL))
    sbn = refresh_sbn(model, params, "server_only", labeled.x)
    return RunResult(records, params, sbn, accuracy(model, params, sbn, setup.test))


def run_partially_supervised(setup: FederatedSetup, cfg: ProtocolConfig, on_record=None) -> RunResult:
    """Server-only training on its labeled split: the floor SemiFL must beat."""
    return _centralized(setup, setup.server, cfg, on_record)


def run_fully_supervised(setup: FederatedSetup, cfg: ProtocolConfig, full: LabeledDataset,
                         on_record=None) -> RunResult:
    """The same pipeline on every label (server plus clients), the ceiling."""
    if full.x.shape[1:] != setup.server.x.shape[1:]:
        raise ConfigError("full dataset does not match the server's feature shape")
    return _centralized(setup, full, cfg, on_record)


def vanilla_config(cfg: ProtocolConfig) -> ProtocolConfig:
    return replace(cfg, fine_tune_labeled=False, pseudo_on_receipt=False)


def run_parallel_vanilla(setup: FederatedSetup, cfg: ProtocolConfig, on_record=None) -> RunResult:
    """Server and clients train in parallel; clients re-label each batch; all models are averaged."""
    return run_semifl(setup, vanilla_config(cfg), on_record)


def run_baseline(kind: BaselineKind, setup: FederatedSetup, cfg: ProtocolConfig,
                 full: LabeledDataset | None = None, on_record=None) -> RunResult:
    if kind is BaselineKind.FULLY_SUPERVISED:
        if full is None:
            raise ConfigError("fully supervised baseline needs the full labeled dataset")
        return run_fully_supervised(setup, cfg, full, on_record)
    if kind is BaselineKind.PARTIALLY_SUPERVISED:
        return run_partially_supervised(setup, cfg, on_record)
    return run_parallel_vanilla(setup, cfg, on_record)
