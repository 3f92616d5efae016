"""Command-line entry points.

``run`` executes a scenario end to end and writes the delimited outputs plus
rendered figures; ``verify-trace`` compares two trace files byte for byte;
``bench-bisection`` measures dispute-game round counts across topologies.
"""
from __future__ import annotations

import argparse
import logging
import random
import statistics
import sys

from .bisection import TraceResponder, run_game
from .dag import (
    DagError,
    chain_model,
    dag_index,
    execute,
    inception_model,
    make_faulty_evaluator,
    random_dag_model,
    random_tensor,
)
from .harness import ScenarioError, load_scenario, run_scenario, scenario_path
from .harness.report import write_outputs
from .harness.trace import TraceError, diff_traces

log = logging.getLogger("veriserve")


def cmd_run(args: argparse.Namespace) -> int:
    path = scenario_path(args.scenario)
    scenario = load_scenario(path)
    report, trace = run_scenario(scenario, seed=args.seed)
    paths = write_outputs(report, trace, args.out)
    print(f"scenario        {report.scenario_name}")
    print(f"seed            {report.seed}")
    print(f"requests served {report.requests_served}")
    print(f"payments        {report.payments_settled}")
    print(f"disputes        {len(report.disputes)}")
    honest = report.honest_dispute_record()
    print(f"honest wins     {honest['won_by_honest']}/{honest['disputes']}")
    print(f"conservation    {'ok' if report.conservation_ok else 'VIOLATED'}")
    print(f"trace digest    {report.trace_digest}")
    for kind in sorted(paths):
        print(f"wrote           {paths[kind]}")
    return 0


def cmd_verify_trace(args: argparse.Namespace) -> int:
    delta = diff_traces(args.a, args.b)
    if delta is None:
        print("equal")
        return 0
    print(f"divergence at line {delta['line']}")
    print(f"a: {delta['a']}")
    print(f"b: {delta['b']}")
    return 1


def _bench_model(topology: str, nodes: int, seed: int):
    if topology == "chain":
        return chain_model("bench", nodes, dim=4, seed=seed)
    if topology == "inception":
        if nodes < 4:
            raise DagError("malformed-model", "inception needs >= 4 nodes")
        interior = nodes - 2
        branches = min(4, interior)
        depths = [interior // branches] * branches
        for i in range(interior % branches):
            depths[i] += 1
        return inception_model("bench", dim=4, branch_depths=tuple(depths), seed=seed)
    return random_dag_model("bench", nodes, dim=4, seed=seed)


def cmd_bench_bisection(args: argparse.Namespace) -> int:
    rng = random.Random(args.seed)
    rounds: list = []
    skipped = 0
    for trial in range(args.trials):
        model = _bench_model(args.topology, args.nodes, seed=args.seed + trial)
        index = dag_index(model)
        input_tensor = random_tensor(rng, 4)
        honest = execute(model, input_tensor, index)
        fault_node = rng.randrange(1, model.n)
        node_dim = len(honest.values[fault_node])
        perturbation = tuple(rng.randrange(1, 1000) for _ in range(node_dim))
        faulty = make_faulty_evaluator(model, fault_node, perturbation, index)(input_tensor)
        if faulty.final_output == honest.final_output:
            skipped += 1  # the fault cancelled downstream; no dispute arises
            continue
        result = run_game(
            model, f"bench-{trial}", input_tensor,
            TraceResponder(faulty), TraceResponder(honest), index=index,
        )
        rounds.append(result.rounds)
    print(f"topology {args.topology}  nodes {args.nodes}  trials {args.trials}")
    if rounds:
        print(f"disputes {len(rounds)}  skipped {skipped}")
        print(f"rounds   min {min(rounds)}  mean {statistics.mean(rounds):.2f}  max {max(rounds)}")
    else:
        print(f"disputes 0  skipped {skipped}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="veriserve")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scenario and write report outputs")
    p_run.add_argument("--scenario", required=True,
                       help="scenario file, or the name of a bundled scenario")
    p_run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p_run.add_argument("--out", default="out", help="output directory")
    p_run.set_defaults(func=cmd_run)

    p_vt = sub.add_parser("verify-trace", help="compare two trace files")
    p_vt.add_argument("--a", required=True)
    p_vt.add_argument("--b", required=True)
    p_vt.set_defaults(func=cmd_verify_trace)

    p_bb = sub.add_parser("bench-bisection", help="measure dispute round counts")
    p_bb.add_argument("--nodes", type=int, default=64)
    p_bb.add_argument("--topology", choices=["chain", "inception", "random"], default="chain")
    p_bb.add_argument("--trials", type=int, default=20)
    p_bb.add_argument("--seed", type=int, default=0)
    p_bb.set_defaults(func=cmd_bench_bisection)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (ScenarioError, TraceError, DagError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
