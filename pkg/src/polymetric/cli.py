"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 numeric contract
violation, 3 property failure (selftest found a counterexample).
"""

import argparse
import sys

from .errors import ConfigError, NumericContractError, PropertyFailure
from .harness import (
    cmd_diagnose,
    cmd_selftest,
    cmd_simulate,
    cmd_sweep,
    load_run_config,
)


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="polymetric",
        description="Directed-polymer endpoint simulation and diagnostics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="run one temperature over all seeds")
    sim.add_argument("--config", required=True, help="TOML run configuration")
    sim.add_argument("--out", default=None, help="output directory override")

    swp = sub.add_parser("sweep", help="aggregate statistics across temperatures")
    swp.add_argument("--config", required=True, help="TOML run configuration")
    swp.add_argument("--out", default=None, help="output directory override")

    st = sub.add_parser("selftest", help="run the property suite")
    st.add_argument("--budget", type=int, default=200,
                    help="random instances per property (default 200)")

    dg = sub.add_parser("diagnose", help="evaluate grids on a stored snapshot")
    dg.add_argument("--snapshot", required=True, help="measure JSON file")
    dg.add_argument("--grids", required=True,
                    help="TOML config with kind = 'diagnose'")
    dg.add_argument("--out", default=None, help="output directory override")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            result = cmd_simulate(load_run_config(args.config), args.out)
            print(f"wrote {result['rows']} rows to {result['csv']}")
        elif args.command == "sweep":
            result = cmd_sweep(load_run_config(args.config), args.out)
            mono = result["monotonicity"]["nondecreasing"]
            print(f"wrote {len(result['rows'])} rows to {result['csv']}")
            print(f"lyapunov nondecreasing within margins: {mono}")
        elif args.command == "selftest":
            ok, lines = cmd_selftest(args.budget)
            for line in lines:
                print(line)
            if not ok:
                return 3
        else:
            result = cmd_diagnose(args.snapshot, load_run_config(args.grids),
                                  args.out)
            print(f"wrote {len(result['stats'])} statistics to {result['csv']}")
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except NumericContractError as e:
        print(f"numeric contract violation: {e}", file=sys.stderr)
        return 2
    except PropertyFailure as e:
        print(f"property failure: {e}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
