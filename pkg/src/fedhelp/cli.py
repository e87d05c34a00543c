"""Command line entry point: ``fedhelp run|compare|warmup|verify``.

Failures print one JSON object ``{"error": ..., "type": ..., "field": ...}``
on stderr and exit with a nonzero status.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .config import PRESETS, ConfigError, parse_config, parse_dict

SEED_ENV = "FEDHELP_SEED"


def load_config(source):
    """A JSON file path, or the bare name of a built-in preset."""
    if not os.path.exists(source) and source in PRESETS:
        cfg = parse_dict({"preset": source})
    else:
        with open(source) as fh:
            cfg = parse_config(fh.read())
    seed = os.environ.get(SEED_ENV)
    if seed is not None and seed != "":
        try:
            cfg = cfg.replace(seed=int(seed))
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {seed!r}", "seed") from None
    return cfg


def _cmd_run(args):
    from .experiments import run

    cfg = load_config(args.config)
    summary = run(cfg, args.out, serial=args.serial)
    json.dump({"out": args.out or cfg.output_dir, "rounds_run": summary["rounds_run"],
               "Client Average": summary["Client Average"]}, sys.stdout, sort_keys=True)
    sys.stdout.write("\n")
    return 0


def _cmd_compare(args):
    from .experiments import compare

    out = args.out or os.path.join(args.run_dirs[0], "comparison.csv")
    header, rows = compare(args.run_dirs, out)
    print(",".join(header))
    for r in rows:
        print(",".join(f"{v:.4f}" if isinstance(v, float) else str(v) for v in r))
    return 0


def _cmd_warmup(args):
    from .experiments import cache_path, warmup

    cfg = load_config(args.config)
    cache = warmup(cfg, args.out)
    if cache is None:
        print(json.dumps({"cache": None, "reason": "config uses no oracles"}))
    else:
        print(json.dumps({"cache": cache_path(cfg, args.out), "oracles": list(cache.oracle_ids),
                          "entries": len(cache.datum_ids), "queries": dict(cache.query_counter)},
                         sort_keys=True))
    return 0


def _cmd_verify(args):
    from .verify import run_checks

    cfg = load_config(args.config)
    results = run_checks(cfg)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    return 0 if all(ok for _, ok, _ in results) else 1


def build_parser():
    p = argparse.ArgumentParser(prog="fedhelp", description="Cross-silo federated learning simulator.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("config", help="JSON config file or preset name")
    r.add_argument("--serial", action="store_true", help="run client rounds sequentially")
    r.add_argument("--out", help="output directory (default: the config's output_dir)")
    r.set_defaults(fn=_cmd_run)

    c = sub.add_parser("compare", help="tabulate final metrics of finished runs")
    c.add_argument("run_dirs", nargs="+")
    c.add_argument("--out", help="CSV path (default: <first run>/comparison.csv)")
    c.set_defaults(fn=_cmd_compare)

    w = sub.add_parser("warmup", help="query the oracles once and write the cache")
    w.add_argument("config")
    w.add_argument("--out", help="directory for the cache file")
    w.set_defaults(fn=_cmd_warmup)

    v = sub.add_parser("verify", help="run the invariant suite for a config")
    v.add_argument("config")
    v.set_defaults(fn=_cmd_verify)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except Exception as exc:
        err = {"error": str(exc), "type": type(exc).__name__}
        if getattr(exc, "field", None):
            err["field"] = exc.field
        sys.stderr.write(json.dumps(err, sort_keys=True) + "\n")
        return 2 if isinstance(exc, (ConfigError, FileNotFoundError, ValueError)) else 1


if __name__ == "__main__":
    sys.exit(main())
