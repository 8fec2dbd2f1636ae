"""Command-line entry point.

Verbs:
  run <config.json>            run every seed, write ledgers + checkpoints + summary
  compare <ledger...>          table of final accuracy / cost / rounds-to-target
  inspect-mask <mask-file>     print a JSON summary of a serialized mask
  report <ledger...>           render figures + summary CSV from ledgers

Exit codes: 0 ok, 1 configuration error, 2 runtime error. The output root can
be overridden with the SPARSEFED_OUTPUT_ROOT environment variable.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .config import load_config, save_config
from .engine import LocalState, run_experiment
from .errors import ConfigurationError
from .masks import LayerLayout, Mask
from .metrics import write_csv, write_jsonl
from .report import compare_ledgers, render_report, write_comparison

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _output_dir(cfg_dir: str) -> str:
    root = os.environ.get("SPARSEFED_OUTPUT_ROOT")
    if root:
        return os.path.join(root, cfg_dir)
    return cfg_dir


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    out_root = _output_dir(cfg.output_dir)
    os.makedirs(out_root, exist_ok=True)
    save_config(cfg, os.path.join(out_root, "config.json"))

    final_personalized, final_global = [], []
    for seed in cfg.seeds:
        seed_dir = os.path.join(out_root, f"seed_{seed}")
        os.makedirs(seed_dir, exist_ok=True)
        ledgers, state, _ = run_experiment(cfg, seed)
        write_csv(os.path.join(seed_dir, "ledger.csv"), ledgers)
        write_jsonl(os.path.join(seed_dir, "ledger.jsonl"), ledgers)
        if isinstance(state, LocalState):
            for k, params in enumerate(state.client_params):
                params.save(os.path.join(seed_dir, f"client_{k:03d}.model"))
        else:
            state.params.save(os.path.join(seed_dir, "global.model"))
            mask_dir = os.path.join(seed_dir, "masks")
            os.makedirs(mask_dir, exist_ok=True)
            with open(os.path.join(mask_dir, "layout.json"), "w") as fh:
                json.dump(state.params.layout.to_dict(), fh)
            for k, mask in enumerate(state.client_masks):
                with open(os.path.join(mask_dir, f"client_{k:03d}.mask"), "wb") as fh:
                    fh.write(mask.to_bytes())
        if ledgers:
            final_personalized.append(ledgers[-1].mean_personalized_acc)
            final_global.append(ledgers[-1].global_acc)
        print(f"seed {seed}: {len(ledgers)} rounds -> {seed_dir}")

    summary = {
        "seeds": list(cfg.seeds),
        "rounds": cfg.rounds,
        "strategy": cfg.strategy,
        "final_personalized_acc_mean": float(np.mean(final_personalized)) if final_personalized else None,
        "final_personalized_acc_std": float(np.std(final_personalized)) if final_personalized else None,
        "final_global_acc_mean": float(np.mean(final_global)) if final_global else None,
        "final_global_acc_std": float(np.std(final_global)) if final_global else None,
    }
    with open(os.path.join(out_root, "summary.json"), "w") as fh:
        json.dump(summary, fh, indent=2)
    print(f"summary -> {os.path.join(out_root, 'summary.json')}")
    return EXIT_OK


def cmd_compare(args) -> int:
    targets = [float(v) for v in args.targets.split(",")] if args.targets else [0.7, 0.75, 0.8]
    table = compare_ledgers(args.ledgers, targets, column=args.column)
    write_comparison(table, args.out, text_stream=sys.stdout)
    print(f"comparison csv -> {args.out}")
    return EXIT_OK


def cmd_inspect_mask(args) -> int:
    with open(args.layout) as fh:
        layout = LayerLayout.from_dict(json.load(fh))
    mask = Mask.from_bytes(open(args.mask, "rb").read(), layout)
    info = {
        "total_params": layout.total_count,
        "active": mask.active_count,
        "density": mask.active_count / layout.total_count,
        "layers": [
            {"kind": s.kind, "shape": list(s.shape), "count": s.count,
             "active": int(a), "density": int(a) / s.count}
            for s, a in zip(layout.layers, mask.active_per_layer)
        ],
    }
    if args.indices:
        info["debug"] = json.loads(mask.to_debug_json())
    print(json.dumps(info, indent=2))
    return EXIT_OK


def cmd_report(args) -> int:
    written = render_report(args.ledgers, args.out, labels=args.labels)
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sparsefed")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config")
    p_run.set_defaults(func=cmd_run)

    p_cmp = sub.add_parser("compare", help="compare ledger CSVs")
    p_cmp.add_argument("ledgers", nargs="+")
    p_cmp.add_argument("--targets", default="", help="comma-separated target accuracies")
    p_cmp.add_argument("--column", default="mean_personalized_acc")
    p_cmp.add_argument("--out", default="comparison.csv")
    p_cmp.set_defaults(func=cmd_compare)

    p_ins = sub.add_parser("inspect-mask", help="summarize a serialized mask")
    p_ins.add_argument("mask")
    p_ins.add_argument("--layout", required=True, help="layout.json written by run")
    p_ins.add_argument("--indices", action="store_true", help="include per-layer index lists")
    p_ins.set_defaults(func=cmd_inspect_mask)

    p_rep = sub.add_parser("report", help="render figures from ledger CSVs")
    p_rep.add_argument("ledgers", nargs="+")
    p_rep.add_argument("--out", default="report")
    p_rep.add_argument("--labels", nargs="*", default=None)
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
