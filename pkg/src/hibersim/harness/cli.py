"""``hibersim`` command line."""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Optional, Sequence

from ..errors import AuditError, ConfigError, HibersimError
from .config import MODES, PRESETS, load_config
from .report import FORMATS, emit_report
from .scenario import compare_modes, run_scenario

log = logging.getLogger("hibersim")

EXIT_CONFIG = 2
EXIT_AUDIT = 3
EXIT_RUNTIME = 4


def _parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hibersim",
        description="Simulate Hibernate Container deflation/inflation and report memory and latency.",
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario")
    run.add_argument("--config", required=True, help="YAML/JSON config file or preset name")
    run.add_argument("--mode", choices=MODES)
    run.add_argument("--seed", type=int)
    run.add_argument("--report", help="write the report here instead of stdout")
    run.add_argument("--format", choices=FORMATS, default="json")

    cmp_ = sub.add_parser("compare", help="run a scenario under both swap-in modes")
    cmp_.add_argument("--config", required=True, help="YAML/JSON config file or preset name")
    cmp_.add_argument("--seed", type=int)
    cmp_.add_argument("--report")
    cmp_.add_argument("--format", choices=FORMATS, default="table")
    cmp_.add_argument("--parallel", type=int, default=1, metavar="N")

    sub.add_parser("presets", help="list bundled configs")
    return parser


def _output(text: str, path: Optional[str]) -> None:
    if path is None:
        sys.stdout.write(text)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        if args.command == "presets":
            for name, cfg in PRESETS.items():
                print(
                    f"{name:<24} init={cfg.init_pages} freed={cfg.freed_after_init_pages} "
                    f"file={cfg.file_backed_pages} ws={cfg.working_set_fraction}"
                )
            return 0
        config = load_config(args.config)
        if args.seed is not None:
            config = config.replace(seed=args.seed)
        if args.command == "run":
            report = run_scenario(config, mode=args.mode)
        else:
            report = compare_modes(config, parallel=args.parallel)
        _output(emit_report(report, args.format, args.report), args.report)
        if args.report:
            log.info("report written to %s", args.report)
        return 0
    except ConfigError as exc:
        print(f"hibersim: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except AuditError as exc:
        print(f"hibersim: invariant audit failed: {exc}", file=sys.stderr)
        return EXIT_AUDIT
    except (HibersimError, OSError) as exc:
        print(f"hibersim: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
