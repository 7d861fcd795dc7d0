"""Command line entry point.

    feddwa run <config> [--out DIR]
    feddwa compare <config> --algos fedavg,feddwa+daloss [--out DIR]
    feddwa compare <config> --preset table3 [--out DIR]
    feddwa plotdata <metrics.csv> [--out DIR] [--scope global|local]
    feddwa validate <config>

Exit codes: 0 ok, 1 configuration error, 2 runtime error. The output
directory defaults to the config's ``output.dir``; ``FEDDWA_OUTPUT_DIR``
overrides it and ``--out`` overrides both.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import runner
from .config import parse_config
from .errors import ConfigError, InvalidInputError, NumericalError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2

log = logging.getLogger("feddwa")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="feddwa", description="Federated segmentation simulator")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("config")
    r.add_argument("--out", default=None)

    c = sub.add_parser("compare", help="run several algorithm variants on one config")
    c.add_argument("config")
    group = c.add_mutually_exclusive_group(required=True)
    group.add_argument("--algos", help="comma-separated variants, e.g. fedavg,feddwa+daloss")
    group.add_argument("--preset", choices=["table3"])
    c.add_argument("--out", default=None)

    d = sub.add_parser("plotdata", help="split a metrics file into per-client IoU series")
    d.add_argument("metrics")
    d.add_argument("--out", default=None)
    d.add_argument("--scope", default="global", choices=["global", "local"])

    v = sub.add_parser("validate", help="check a config and print it with defaults applied")
    v.add_argument("config")
    return p


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "plotdata":
            out = Path(args.out) if args.out else Path(args.metrics).parent / "plotdata"
            paths = runner.emit_plotdata(args.metrics, out, args.scope)
            log.info("wrote %d series to %s", len(paths), out)
            return EXIT_OK
        cfg = parse_config(args.config)
        if args.command == "validate":
            print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
            return EXIT_OK
        out_dir = runner.resolve_output_dir(cfg, args.out)
        if args.command == "run":
            summary = runner.run(cfg, out_dir)
            log.info("%s: mean final global IoU %s -> %s", cfg.algorithm, summary["mean_final_global_iou"], out_dir)
        else:
            if args.preset == "table3":
                variants, note = runner.TABLE3_VARIANTS, runner.TABLE3_NOTE
            else:
                variants, note = [a.strip() for a in args.algos.split(",") if a.strip()], None
            merged = runner.compare(cfg, variants, out_dir, note)
            for label, row in merged["results"].items():
                log.info("%-18s mean final global IoU %s", label, row["mean_final_global_iou"])
        return EXIT_OK
    except ConfigError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except NumericalError as exc:
        log.error("aborted: %s", exc)
        return EXIT_RUNTIME
    except (InvalidInputError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
