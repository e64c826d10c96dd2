"""Command-line entry point.

Subcommands: generate, sweep, select, correlate, select-eval, cost,
linearize. Exit codes: 0 success, 2 configuration error, 3 run failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from fedehr import experiments
from fedehr.experiments import ConfigError, RunError
from fedehr.linearize import LinearizeStats, linearize_patient
from fedehr.synthdata import CodeDictionary, patient_from_json


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True,
                        help="experiment config JSON (or the built-in 'benchmark')")
    parser.add_argument("--out", default=None,
                        help="output directory (overrides the config)")
    parser.add_argument("--seed", type=int, default=None,
                        help="restrict to one experiment seed "
                             "(for generate: overrides the generation seed)")


def _load(args) -> experiments.ExperimentConfig:
    cfg = experiments.load_config(args.config, out_override=args.out)
    if args.seed is not None:
        if args.command == "generate":
            cfg.gen_seed = args.seed
        else:
            cfg.seeds = [args.seed]
    return cfg


def _apply_sweep_overrides(cfg, args):
    if args.algo:
        cfg.algorithms = [] if args.algo == "single" else [args.algo]
    if args.rounds is not None:
        cfg.max_rounds = args.rounds
    if args.patience is not None:
        cfg.patience = args.patience
    if args.mu is not None:
        cfg.mu = args.mu
    if args.host is not None:
        cfg.host = args.host
    if args.participants is not None:
        wanted = set(args.participants.split(","))
        known = {c.spec.client_id for c in cfg.clients}
        missing = wanted - known
        if missing:
            raise ConfigError(f"unknown participants: {sorted(missing)}")
        cfg.clients = [c for c in cfg.clients if c.spec.client_id in wanted]
    cfg.validate()
    return cfg


def cmd_linearize(args) -> int:
    with open(args.dict) as fh:
        nested = json.load(fh)
    entries = {
        (et, fn, int(code)): text
        for et, by_name in nested.items()
        for fn, by_code in by_name.items()
        for code, text in by_code.items()
    }
    dictionary = CodeDictionary(entries)
    stats = LinearizeStats()
    out_lines = []
    with open(args.infile) as fh:
        first = True
        for line in fh:
            if not line.strip():
                continue
            patient = patient_from_json(line)
            if not first:
                out_lines.append("")
            first = False
            out_lines.extend(r.text for r in linearize_patient(patient, dictionary, stats))
    Path(args.out).write_text("\n".join(out_lines) + "\n")
    print(f"linearized {stats.events} events "
          f"({stats.unmapped_codes} unmapped codes) -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedehr",
        description="Federated learning over text-linearized EHR events")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="generate the synthetic client datasets")
    _common(p)

    p = sub.add_parser("sweep", help="run the federation grid (Single + all "
                                     "subject subsets x algorithms x seeds)")
    _common(p)
    p.add_argument("--algo", choices=["single", "fedavg", "fedprox", "fedbn", "fedpxn"],
                   help="restrict the sweep to one algorithm")
    p.add_argument("--rounds", type=int, help="override max communication rounds")
    p.add_argument("--patience", type=int, help="override early-stop patience")
    p.add_argument("--mu", type=float, help="override the proximal weight")
    p.add_argument("--host", help="override the host client id")
    p.add_argument("--participants", help="comma-separated client ids to keep")
    p.add_argument("--workers", type=int, default=None,
                   help="process pool size for sweep cells")

    p = sub.add_parser("select", help="run the DP participant-selection protocol")
    _common(p)
    p.add_argument("--metric", choices=["cosine", "euclidean", "kl"],
                   help="restrict to one similarity metric")
    p.add_argument("--k", type=int, help="override the participant count K")
    p.add_argument("--epsilon", type=float, help="override the privacy budget")
    p.add_argument("--delta", type=float, help="override the failure probability")
    p.add_argument("--clip", type=float, help="override the clipping norm C")
    p.add_argument("--threshold", type=float, default=None,
                   help="select by score threshold instead of a fixed count")

    p = sub.add_parser("correlate", help="similarity vs performance-delta "
                                         "rank correlations")
    _common(p)

    p = sub.add_parser("select-eval", help="compare selected federations to "
                                           "all-clients/Average/Best baselines")
    _common(p)

    p = sub.add_parser("cost", help="evaluate the cost-savings ledger")
    p.add_argument("--ledger", required=True, help="ledger JSON file")

    p = sub.add_parser("linearize", help="linearize a client JSONL file to text")
    p.add_argument("--in", dest="infile", required=True, help="client JSONL file")
    p.add_argument("--dict", required=True, help="code dictionary JSON")
    p.add_argument("--out", required=True, help="output text file")

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "cost":
            print(json.dumps(experiments.cmd_cost(args.ledger), indent=2, sort_keys=True))
            return 0
        if args.command == "linearize":
            return cmd_linearize(args)

        cfg = _load(args)
        if args.command == "generate":
            meta = experiments.cmd_generate(cfg)
            print(f"wrote {len(meta)} clients to {Path(cfg.out_dir) / 'data'}")
            return 0
        if args.command == "sweep":
            cfg = _apply_sweep_overrides(cfg, args)
            if args.workers is not None:
                cfg.workers = args.workers
            result = experiments.cmd_sweep(cfg, echo=print)
            print(f"sweep complete: {len(result['executed'])} executed, "
                  f"{result['skipped']} already present")
            return 0
        if args.command == "select":
            if args.metric:
                cfg.selection_metrics = [args.metric]
            if args.k:
                cfg.k_values = [args.k]
            dp = cfg.dp
            dp = replace(dp, epsilon=args.epsilon) if args.epsilon else dp
            dp = replace(dp, delta=args.delta) if args.delta else dp
            dp = replace(dp, clip_norm=args.clip) if args.clip else dp
            cfg.dp = dp
            cfg.validate()
            experiments.cmd_select(cfg, echo=print, threshold=args.threshold)
            return 0
        if args.command == "correlate":
            experiments.cmd_correlate(cfg, echo=print)
            return 0
        if args.command == "select-eval":
            experiments.cmd_select_eval(cfg, echo=print)
            return 0
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (RunError, ValueError, OSError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
