"""Command line: ``semifl run``, ``semifl plot-data`` and ``semifl acceptance``."""
from __future__ import annotations

import argparse
import sys

from . import harness
from .baselines import BaselineKind
from .errors import SemiFLError

_TOGGLES = {"fine_tune": "fine_tune_labeled", "fine_tune_labeled": "fine_tune_labeled",
            "pseudo_on_receipt": "pseudo_on_receipt"}


def _toggle(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError("expected NAME=BOOL")
    name, value = text.split("=", 1)
    if name not in _TOGGLES:
        raise argparse.ArgumentTypeError(f"unknown toggle {name!r}; choose fine_tune or pseudo_on_receipt")
    try:
        harness._to_bool(value)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None
    return f"protocol.{_TOGGLES[name]}", value


def _setting(text: str) -> tuple[str, str]:
    if "=" not in text or "." not in text.split("=", 1)[0]:
        raise argparse.ArgumentTypeError("expected SECTION.KEY=VALUE")
    key, value = text.split("=", 1)
    return key, value


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="semifl", description="Semi-supervised federated learning experiments")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment from a config file")
    r.add_argument("--config", required=True, help="INI config path")
    r.add_argument("--seed", type=int, help="override [experiment] master_seed")
    r.add_argument("--baseline", choices=[k.value for k in BaselineKind], help="run a baseline instead")
    r.add_argument("--toggle", type=_toggle, action="append", default=[],
                   help="fine_tune=<bool> or pseudo_on_receipt=<bool>; repeatable")
    r.add_argument("--set", dest="settings", type=_setting, action="append", default=[],
                   help="SECTION.KEY=VALUE override; repeatable")
    r.add_argument("--out", help="output directory (default: $%s or [experiment] output_dir, plus run_name)"
                   % harness.OUTPUT_ROOT_ENV)

    pd = sub.add_parser("plot-data", help="turn records into CSV series for plotting")
    pd.add_argument("--records", required=True, help="records.jsonl (or rates.csv)")
    pd.add_argument("--rates", help="rates.csv for the risk series (default: beside the records)")
    pd.add_argument("--out", required=True, help="output directory")

    a = sub.add_parser("acceptance", help="run the acceptance checks and print one line per criterion")
    a.add_argument("--criterion", type=int, action="append", choices=range(1, 9),
                   help="criterion number; repeatable (default: all)")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            overrides = dict(args.settings)
            if args.seed is not None:
                overrides["experiment.master_seed"] = str(args.seed)
            if args.baseline:
                overrides["experiment.kind"] = args.baseline
            overrides.update(dict(args.toggle))
            cfg = harness.parse_config(args.config, overrides)
            summary = harness.run(cfg, args.out)
            if summary.final_accuracy is not None:
                print(f"final_accuracy={summary.final_accuracy:.4f} best_accuracy={summary.best_accuracy:.4f} "
                      f"config_hash={summary.config_hash} out={summary.out_dir}")
            else:
                t = summary.extra["table"]
                print(f"slope_fit={t.slope_fit} theory_exponent={t.theory_exponent:.4f} "
                      f"config_hash={summary.config_hash} out={summary.out_dir}")
            return 0
        if args.command == "plot-data":
            paths = harness.emit_plot_data(args.records, args.out, args.rates)
            for name, path in paths.items():
                print(f"{name}: {path}")
            return 0
        from . import acceptance
        results = acceptance.run_all(args.criterion)
        return 0 if all(r.passed for r in results) else 1
    except (SemiFLError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
