"""Command-line entry point: ``dspi generate | run | sweep | check-instance``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import DspiError
from .garnet import GarnetSpec, generate_garnet, generate_garnet_ssp, generate_layered_ssp
from .harness import ExperimentConfig, load_config_file, apply_override, run_experiment, sweep
from .mdp import TabularMdp, save_mdp
from .ssp import ImproperWitness, SspMdp, check_all_proper, save_ssp


def _cmd_generate(args) -> int:
    if args.kind == "layered_ssp":
        inst = generate_layered_ssp(args.layers, args.width, args.m, args.seed, args.branching or 2)
    else:
        spec = GarnetSpec(args.n, args.m, args.branching or args.n, args.gamma, args.seed)
        inst = generate_garnet(spec) if args.kind == "garnet" else generate_garnet_ssp(spec, args.termination_prob)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(inst, TabularMdp):
        save_mdp(inst, out)
    else:
        save_ssp(inst, out)
    print(f"wrote {args.kind} instance with n={inst.n}, m={inst.m} to {out}")
    return 0


def _config(args) -> ExperimentConfig:
    doc = load_config_file(args.config) if args.config else {}
    for o in args.set or []:
        doc = apply_override(doc, o)
    if getattr(args, "out", None):
        doc = apply_override(doc, f"output.dir={json.dumps(str(args.out))}")
    return ExperimentConfig.from_dict(doc)


def _cmd_run(args) -> int:
    cfg = _config(args)
    res = run_experiment(cfg)
    for line in res.report.summary_lines():
        print(line)
    for note in res.report.notes:
        print(f"note: {note}")
    out = cfg.output_dir()
    if out is not None:
        print(f"trace and report written to {out}")
    return res.report.exit_code


def _parse_grid(items) -> dict:
    grid = {}
    for item in items or []:
        if "=" not in item:
            raise DspiError(f"grid entry {item!r} must look like key=v1,v2,...")
        key, values = item.split("=", 1)
        grid[key.strip()] = [json.loads(v) for v in values.split(",") if v.strip()]
    return grid


def _cmd_sweep(args) -> int:
    cfg = _config(args)
    rep = sweep(cfg, _parse_grid(args.grid), eps=args.eps, workers=args.workers)
    for c in rep.cells:
        status = "PASS" if c["within_budget"] and c["checks_passed"] else "FAIL"
        print(
            f"{status} cell {c['index']}: gamma={c['gamma']} beta={c['beta']} n={c['n']} m={c['m']} "
            f"seed={c['seed']} first_k={c['first_k']} budget={c['budget']}"
        )
    out = cfg.output_dir()
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        rep.to_csv(out / "sweep.csv")
        (out / "sweep.json").write_text(json.dumps(rep.to_dict(), indent=1))
        print(f"sweep results written to {out}")
    return 0 if rep.passed else 1


def _cmd_check_instance(args) -> int:
    doc = json.loads(Path(args.path).read_text())
    if "gamma" in doc:
        mdp = TabularMdp.from_dict(doc)
        print(f"valid MDP: n={mdp.n}, m={mdp.m}, gamma={mdp.gamma}")
        return 0
    ssp = SspMdp(doc["transition"], doc["reward"], require_proper=False)
    result = check_all_proper(ssp)
    if isinstance(result, ImproperWitness):
        print(
            f"improper: starting from state {result.state}, actions {result.actions.tolist()} "
            f"keep the chain inside {list(result.trap)} forever"
        )
        return 1
    norm = SspMdp(doc["transition"], doc["reward"]).weighted_norm
    print(
        f"valid SSP: n={ssp.n}, m={ssp.m}, every policy proper, max expected stages "
        f"{result.stages.max():.6g}, kappa={norm.kappa:.6g} (margin {norm.margin:g})"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dspi", description="Averaged and smoothed policy iteration toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a seeded random instance as JSON")
    g.add_argument("--kind", choices=("garnet", "garnet_ssp", "layered_ssp"), default="garnet")
    g.add_argument("--n", type=int, default=10)
    g.add_argument("--m", type=int, default=4)
    g.add_argument("--branching", type=int, default=None)
    g.add_argument("--gamma", type=float, default=0.9)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--termination-prob", type=float, default=0.2)
    g.add_argument("--layers", type=int, default=4)
    g.add_argument("--width", type=int, default=2)
    g.add_argument("--out", required=True)
    g.set_defaults(func=_cmd_generate)

    for name, func, help_text in (
        ("run", _cmd_run, "run one experiment and evaluate its checks"),
        ("sweep", _cmd_sweep, "run a parameter grid and compare against the iteration budget"),
    ):
        r = sub.add_parser(name, help=help_text)
        r.add_argument("config", nargs="?", help="TOML or JSON config file")
        r.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
        r.add_argument("--out", help="output directory (relative paths resolve under $DSPI_OUTPUT_ROOT)")
        r.set_defaults(func=func)
        if name == "sweep":
            r.add_argument("--grid", action="append", metavar="KEY=V1,V2", help="grid axis (gamma, beta, n, m, seed)")
            r.add_argument("--eps", type=float, default=1e-3)
            r.add_argument("--workers", type=int, default=1)

    c = sub.add_parser("check-instance", help="validate an MDP or SSP instance file")
    c.add_argument("path")
    c.set_defaults(func=_cmd_check_instance)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (DspiError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
