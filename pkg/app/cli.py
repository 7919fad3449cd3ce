"""
# Command line

    dfedsim simulate       one experiment into its run directory
    dfedsim sweep          cartesian grid of experiments plus sweep.csv
    dfedsim topology-info  lambda, spectral gap and gossip-matrix report of a graph
    dfedsim bound          convergence-bound terms from a BoundInputs JSON file
    dfedsim estimate       probe estimates of L, sigma_l, sigma_g and beta for a config
    dfedsim serve          read-only HTTP inspection service

Every run flag defaults to "not given" so config file values survive unless a
flag overrides them. Exit codes: 0 ok, 2 configuration error, 3 divergence,
4 some sweep runs failed.
"""

import argparse
from pathlib import Path
from typing import Any, Sequence

from app import error, harness, logging, metrics, topology
from app.models import (
    Algorithm,
    BoundInputs,
    InitMode,
    ModelKind,
    PartitionKind,
    TopologyKind,
    TopologySpec,
)

logger = logging.get_logger()


def _choices(enum) -> list[str]:
    return [member.value for member in enum]


def _add_fed_flags(parser: argparse.ArgumentParser):
    fed = parser.add_argument_group("federated run")
    fed.add_argument("--algorithm", choices=_choices(Algorithm))
    fed.add_argument("--topology", choices=_choices(TopologyKind))
    fed.add_argument("--m", type=int, help="number of clients")
    fed.add_argument("--rounds", type=int, help="communication rounds T")
    fed.add_argument("--k", type=int, help="local iterations K per round")
    fed.add_argument("--q", type=int, help="gossip steps Q per round")
    fed.add_argument("--neighbors", type=int, help="partners per client, time_varying_k")
    fed.add_argument("--eta0", type=float)
    fed.add_argument("--eta-decay", type=float)
    fed.add_argument("--rho", type=float, help="SAM perturbation radius")
    fed.add_argument("--mu", type=float, help="momentum of dfedavgm")
    fed.add_argument("--batch-size", type=int)
    fed.add_argument("--sample-frac", type=float, help="client fraction of fedavg/fedsam")
    fed.add_argument("--server-lr", type=float)
    fed.add_argument("--seed", type=int)
    fed.add_argument("--init", choices=_choices(InitMode))
    fed.add_argument("--mgs-fresh-graph", action="store_const", const=True)
    fed.add_argument("--pure-gossip", action="store_const", const=True)

    data = parser.add_argument_group("data and model")
    data.add_argument("--partition", choices=_choices(PartitionKind))
    data.add_argument("--alpha", type=float, help="Dirichlet concentration")
    data.add_argument("--classes-per-client", type=int)
    data.add_argument("--model", choices=_choices(ModelKind))
    data.add_argument("--hidden", type=int)
    data.add_argument("--l2", type=float)
    data.add_argument("--n", type=int, help="synthetic dataset size")
    data.add_argument("--d", type=int, help="input dimension")
    data.add_argument("--classes", type=int)
    data.add_argument("--sep", type=float, help="class center separation")

    out = parser.add_argument_group("outputs")
    out.add_argument("--metric-every", type=int, help="Hessian probe and log cadence E")
    out.add_argument("--workers", type=int, help="threads for client updates")
    out.add_argument("--dump-topology", type=Path)
    out.add_argument("--dump-partition", type=Path)
    out.add_argument("--save-models", type=Path)
    out.add_argument("--force", action="store_const", const=True)


def _overrides(args: argparse.Namespace, exclude: tuple[str, ...] = ()) -> dict[str, Any]:
    return {
        name: getattr(args, name)
        for name in harness.OVERRIDE_PATHS
        if name not in exclude and getattr(args, name, None) is not None
    }


def _axes(raw: list[str]) -> dict[str, list[str]]:
    axes = {}
    for item in raw:
        name, sep, values = item.partition("=")
        if not sep or not name or not values:
            raise error.ErrorConfig(f"sweep axis must read NAME=v1,v2,..., got '{item}'")
        axes[name.strip()] = [value.strip() for value in values.split(",")]
    return axes


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dfedsim", description="Deterministic decentralized federated learning simulator"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    simulate = commands.add_parser("simulate", help="run one experiment")
    simulate.add_argument("--config", type=Path, help="ExperimentConfig JSON file")
    simulate.add_argument("--out", type=Path, help="run directory")
    _add_fed_flags(simulate)

    sweep = commands.add_parser("sweep", help="run a cartesian grid of experiments")
    sweep.add_argument("--config", type=Path, help="SweepSpec JSON file")
    sweep.add_argument(
        "--axis",
        action="append",
        default=[],
        metavar="NAME=V1,V2",
        help=f"sweep axis, one of {', '.join(harness.AXIS_FLAGS)}",
    )
    sweep.add_argument("--parallelism", type=int, default=1, help="concurrent runs")
    sweep.add_argument("--cap", type=int, help="largest allowed run count")
    sweep.add_argument("--out", type=Path, help="sweep root directory")
    _add_fed_flags(sweep)

    info = commands.add_parser("topology-info", help="inspect a gossip matrix")
    info.add_argument("--topology", choices=_choices(TopologyKind), required=True)
    info.add_argument("--m", type=int, required=True)
    info.add_argument("--neighbors", type=int)
    info.add_argument("--seed", type=int, default=0)
    info.add_argument("--round", type=int, default=0)
    info.add_argument("--json", action="store_true", help="print the full report as JSON")

    bound = commands.add_parser("bound", help="evaluate the convergence bound")
    bound.add_argument("--inputs", type=Path, required=True, help="BoundInputs JSON file")

    estimate = commands.add_parser("estimate", help="estimate the assumption constants")
    estimate.add_argument("--config", type=Path, help="ExperimentConfig JSON file")
    estimate.add_argument("--probes", type=int, default=harness.ESTIMATE_PROBES)
    _add_fed_flags(estimate)

    serve = commands.add_parser("serve", help="start the inspection API")
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--port", type=int, default=8000)

    return parser


# =========================================================================== #
#                                   COMMANDS                                  #
# =========================================================================== #


def cmd_simulate(args: argparse.Namespace) -> int:
    cfg = harness.parse_config(args.config, _overrides(args))
    return harness.run_experiment(cfg)


def cmd_sweep(args: argparse.Namespace) -> int:
    spec = harness.parse_sweep(
        args.config,
        _overrides(args, exclude=("out",)),
        _axes(args.axis),
        cap=args.cap,
        output_root=args.out,
    )
    frame = harness.run_sweep(spec, parallelism=args.parallelism)
    harness.check_sweep(frame)
    return harness.EXIT_OK


def cmd_topology_info(args: argparse.Namespace) -> int:
    spec = harness.validate(
        TopologySpec,
        {"kind": args.topology, "m": args.m, "k": args.neighbors, "seed": args.seed},
    )
    info = topology.topology_info(spec, args.round)

    if args.json:
        print(info.model_dump_json(by_alias=True, indent=2))
        return harness.EXIT_OK

    print(f"topology       {info.kind.value} (round {info.round})")
    print(f"clients        {info.m}")
    print(f"edges          {len(info.edges)}")
    print(f"lambda         {info.lam:.12g}")
    print(f"spectral gap   {info.spectral_gap:.12g}")
    for clause in info.validation.clauses:
        verdict = "pass" if clause.passed else "FAIL"
        print(f"  {clause.name.value:<12} {verdict}  deviation {clause.deviation:.3e}")
    return harness.EXIT_OK


def cmd_bound(args: argparse.Namespace) -> int:
    inputs = harness.validate(BoundInputs, harness.read_json(args.inputs))
    print(metrics.bound_terms(inputs).model_dump_json(indent=2))
    return harness.EXIT_OK


def cmd_estimate(args: argparse.Namespace) -> int:
    cfg = harness.parse_config(args.config, _overrides(args))
    print(harness.estimate_constants(cfg.fed, args.probes).model_dump_json(indent=2))
    return harness.EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    import uvicorn

    uvicorn.run("app.api:app", host=args.host, port=args.port)
    return harness.EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "sweep": cmd_sweep,
    "topology-info": cmd_topology_info,
    "bound": cmd_bound,
    "estimate": cmd_estimate,
    "serve": cmd_serve,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except error.ErrorSimulation as e:
        logger.error(e.detail)
        return e.exit_code
