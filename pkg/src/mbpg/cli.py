"""Command-line entry point: ``mbpg --algo is-mbpg --env cartpole --seeds 1-10 --out runs/``."""
from __future__ import annotations

import logging
import sys

from .harness import ConfigError, _resolve, build_parser, export_suite, parse_seeds, run_suite

log = logging.getLogger("mbpg")


def main(argv=None) -> int:
    """Exit codes: 0 full success, 1 configuration error, 2 some seeds failed."""
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        ns = vars(build_parser().parse_args(sys.argv[1:] if argv is None else argv))
        cfg, extras = _resolve(ns)
        seeds = parse_seeds(extras["seeds"]) if "seeds" in extras else [cfg.seed]
        workers = int(extras.get("workers", 1))
        if workers < 1:
            raise ConfigError("workers", "must be >= 1")
    except ConfigError as exc:
        print(f"mbpg: config error: {exc}", file=sys.stderr)
        return 1

    result = run_suite(cfg, seeds, workers=workers)
    for seed, rec in zip(result.seeds, result.records):
        if rec is None:
            log.info("seed %d: FAILED (%s)", seed, result.failures[seed])
        else:
            last = rec.rows[-1]
            log.info("seed %d: %d iterations, %d probes, trailing-10 return %.2f",
                     seed, last.iteration, last.system_probes, rec.final_trailing_return())
    if "out" in extras:
        paths = export_suite(result, extras["out"], extras.get("format", "csv"))
        log.info("wrote %d files to %s", len(paths), extras["out"])
    return 2 if result.failures else 0


if __name__ == "__main__":
    sys.exit(main())
