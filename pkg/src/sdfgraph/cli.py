"""Command line interface: map, simulate, evaluate, sweep."""

import argparse
import logging
import sys

from .pose_graph import STRATEGIES


def _parser():
    p = argparse.ArgumentParser(prog="sdfgraph", description="Submap-based SDF mapping back-end")
    p.add_argument("--threads", type=int, default=None, help="cap on numba worker threads")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    m = sub.add_parser("map", help="build a map from a dataset directory")
    m.add_argument("dataset")
    m.add_argument("--config", default=None, help="YAML mapper config")
    m.add_argument("--out", required=True)
    m.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    mode = m.add_mutually_exclusive_group()
    mode.add_argument("--sequential", dest="concurrent", action="store_false",
                      help="alternate front-end and back-end strictly (default)")
    mode.add_argument("--concurrent", dest="concurrent", action="store_true",
                      help="run the back-end in a worker thread")
    m.set_defaults(concurrent=False)

    s = sub.add_parser("simulate", help="render a scenario into a dataset")
    s.add_argument("scenario", help="scenario YAML path or bundled scenario name")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None,
                   help="overrides the scenario and drift seeds")

    e = sub.add_parser("evaluate", help="compare a map run against ground truth")
    e.add_argument("--map", required=True, dest="map_dir")
    e.add_argument("--truth", required=True, help="scenario YAML, dataset dir or pose CSV")
    e.add_argument("--out", default=None, help="report directory (defaults to the map dir)")

    w = sub.add_parser("sweep", help="back-end runs over sampling ratios and strategies")
    w.add_argument("scenario")
    w.add_argument("--ratios", type=float, nargs="+", default=[1.0, 0.5, 0.2, 0.1, 0.05])
    w.add_argument("--strategies", nargs="+", choices=STRATEGIES, default=["weighted"])
    w.add_argument("--trials", type=int, default=3)
    w.add_argument("--config", default=None)
    w.add_argument("--out", default="sweep.csv", help="output CSV")
    w.add_argument("--seed", type=int, default=None)
    return p


def main(argv=None):
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s", stream=sys.stderr)
    if args.threads is not None:
        import numba
        numba.set_num_threads(max(1, min(args.threads, numba.config.NUMBA_NUM_THREADS)))

    from . import pipeline

    if args.command == "map":
        return pipeline.run_map(args.dataset, args.config, args.out, args.seed, args.concurrent)
    if args.command == "simulate":
        return pipeline.run_simulate(args.scenario, args.out, args.seed)
    if args.command == "evaluate":
        return pipeline.run_evaluate(args.map_dir, args.truth, args.out)
    if args.trials < 1:
        print("error: --trials must be at least 1", file=sys.stderr)
        return 2
    return pipeline.run_sweep(args.scenario, args.ratios, args.strategies, args.trials, args.out,
                              args.config, args.seed)


if __name__ == "__main__":
    sys.exit(main())
