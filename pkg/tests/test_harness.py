import csv
import json
from pathlib import Path

import pytest

from semifl import acceptance, harness, theory
from semifl.errors import ConfigError, FormatError
from semifl.protocol import ProtocolConfig

ROOT = Path(__file__).resolve().parents[1]

TINY = """\
[experiment]
run_name = tiny
[dataset]
n = 600
dim = 8
num_classes = 3
test_n = 200
n_server = 30
[partition]
num_clients = 4
[model]
hidden_dims = 8
[protocol]
rounds = 2
local_epochs = 1
activity_rate = 0.5
"""


def test_empty_config_gives_defaults():
    cfg = harness.parse_config(text="")
    assert cfg.protocol == ProtocolConfig()
    p = cfg.protocol
    assert (p.rounds, p.lr, p.weight_decay, p.threshold, p.global_momentum) == (800, 0.03, 5e-4, 0.95, 0.5)
    assert (p.local_epochs, p.server_batch, p.client_batch, p.activity_rate) == (5, 10, 10, 0.1)
    assert p.scheduler == "cosine" and p.nesterov and p.mixup_a == 0.75 and p.loss_weight == 1.0


def test_empty_file(tmp_path):
    (tmp_path / "e.ini").write_text("")
    assert harness.parse_config(tmp_path / "e.ini") == harness.parse_config(text="")


def test_range_errors_name_the_key():
    with pytest.raises(ConfigError, match="threshold"):
        harness.parse_config(text="[protocol]\nthreshold = 1.5\n")
    with pytest.raises(ConfigError, match="rounds"):
        harness.parse_config(text="[protocol]\nrounds = many\n")


def test_unknown_keys_and_sections_are_rejected():
    with pytest.raises(ConfigError, match="learning_rate"):
        harness.parse_config(text="[protocol]\nlearning_rate = 0.1\n")
    with pytest.raises(ConfigError, match="optimizer"):
        harness.parse_config(text="[optimizer]\nlr = 0.1\n")
    with pytest.raises(ConfigError):
        harness.parse_config(text="[partition]\nseed = 3\n")


def test_override_wins_over_file():
    cfg = harness.parse_config(text="[protocol]\nlr = 0.1\n", overrides={"protocol.lr": "0.2"})
    assert cfg.protocol.lr == 0.2


def test_types_are_cast():
    cfg = harness.parse_config(text="[model]\nhidden_dims = 32, 16\n[protocol]\nnesterov = no\n"
                                    "[theory]\nn_u_grid = 100, 400\nseeds = 1,2\n")
    assert cfg.model.hidden_dims == (32, 16) and cfg.protocol.nesterov is False
    assert cfg.theory.config.n_u_grid == (100, 400) and cfg.theory.seeds == (1, 2)


def test_partition_seed_follows_master_seed():
    cfg = harness.parse_config(text="[experiment]\nmaster_seed = 9\n")
    assert cfg.partition.seed == 9


def test_config_hash_is_stable_and_sensitive():
    a = harness.parse_config(text=TINY)
    b = harness.parse_config(text=TINY)
    assert a.config_hash() == b.config_hash()
    assert a.config_hash() != a.with_seed(1).config_hash()


def test_desk_config_file_matches_the_acceptance_config():
    on_disk = harness.parse_config(ROOT / "configs" / "desk.ini")
    assert on_disk.config_hash() == acceptance.desk_config().config_hash()


def test_run_writes_artifacts_and_is_byte_deterministic(tmp_path):
    cfg = harness.parse_config(text=TINY)
    a = harness.run(cfg, tmp_path / "a" / "nested")
    b = harness.run(cfg, tmp_path / "b")
    for name in ("records.jsonl", "summary.csv", "checkpoint.json", "partition.json", "config.json"):
        assert (a.out_dir / name).exists()
    assert a.records_path.read_bytes() == b.records_path.read_bytes()
    assert (a.out_dir / "checkpoint.json").read_bytes() == (b.out_dir / "checkpoint.json").read_bytes()
    recs = harness.read_records(a.records_path)
    assert [r["round"] for r in recs] == [1, 2]
    assert a.best_accuracy >= a.final_accuracy and a.wall_clock < 60
    with open(a.out_dir / "summary.csv") as fh:
        row = next(csv.DictReader(fh))
    assert row["config_hash"] == cfg.config_hash() and row["rounds"] == "2"


@pytest.mark.parametrize("kind", ["partially_supervised", "fully_supervised", "vanilla_parallel"])
def test_baseline_kinds_run(tmp_path, kind):
    cfg = harness.parse_config(text=TINY, overrides={"experiment.kind": kind})
    s = harness.run(cfg, tmp_path)
    assert len(harness.read_records(s.records_path)) == 2


def test_output_root_from_environment(tmp_path, monkeypatch):
    monkeypatch.setenv(harness.OUTPUT_ROOT_ENV, str(tmp_path / "root"))
    cfg = harness.parse_config(text=TINY)
    assert harness.resolve_out_dir(cfg) == tmp_path / "root" / "tiny"
    assert harness.resolve_out_dir(cfg, tmp_path / "x") == tmp_path / "x"
    monkeypatch.delenv(harness.OUTPUT_ROOT_ENV)
    assert harness.resolve_out_dir(cfg) == Path("runs") / "tiny"


def test_theory_run_and_plot_series(tmp_path):
    cfg = harness.parse_config(text="[experiment]\nkind = theory\n[theory]\nn_u_grid = 100, 400\n"
                                    "mc_samples = 2000\nseeds = 0\n")
    s = harness.run(cfg, tmp_path / "th")
    with open(s.records_path) as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == theory.RateTable.CSV_COLUMNS and len(rows) == 3
    paths = harness.emit_plot_data(s.records_path, tmp_path / "plots")
    with open(paths["theory_risk"]) as fh:
        risk = list(csv.reader(fh))
    assert risk == rows
    assert paths["accuracy"].read_text() == "round,test_accuracy\n"


def test_plot_data_from_records(tmp_path):
    s = harness.run(harness.parse_config(text=TINY), tmp_path / "run")
    paths = harness.emit_plot_data(s.records_path, tmp_path / "plots")
    with open(paths["accuracy"]) as fh:
        acc = list(csv.reader(fh))
    assert acc[0] == ["round", "test_accuracy"] and [r[0] for r in acc[1:]] == ["1", "2"]
    assert paths["theory_risk"].read_text().strip() == ",".join(theory.RateTable.CSV_COLUMNS)


def test_empty_records_give_header_only_csvs(tmp_path):
    (tmp_path / "records.jsonl").write_text("")
    paths = harness.emit_plot_data(tmp_path / "records.jsonl", tmp_path / "out")
    assert paths["accuracy"].read_text() == "round,test_accuracy\n"
    assert paths["pseudo"].read_text() == "round,pseudo_quantity,pseudo_quality\n"


def test_malformed_records_report_the_line(tmp_path):
    good = json.dumps({"round": 1, "test_accuracy": 0.5, "pseudo_quantity": None, "pseudo_quality": None})
    (tmp_path / "bad.jsonl").write_text(good + "\n{not json\n")
    with pytest.raises(FormatError, match="line 2"):
        harness.read_records(tmp_path / "bad.jsonl")
    (tmp_path / "order.jsonl").write_text(good + "\n" + good + "\n")
    with pytest.raises(FormatError, match="line 2"):
        harness.read_records(tmp_path / "order.jsonl")
    (tmp_path / "keys.jsonl").write_text('{"round": 1}\n')
    with pytest.raises(FormatError, match="line 1"):
        harness.read_records(tmp_path / "keys.jsonl")


def test_malformed_rates(tmp_path):
    (tmp_path / "records.jsonl").write_text("")
    (tmp_path / "rates.csv").write_text("n_u,risk\n1,2\n")
    with pytest.raises(FormatError, match="line 1"):
        harness.emit_plot_data(tmp_path / "records.jsonl", tmp_path / "out")
