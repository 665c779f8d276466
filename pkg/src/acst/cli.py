"""Command-line front end: local store commands and the simulation harness.

Exit codes: 0 ok, 2 input error, 3 missing data, 4 experiment failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, resolve_config
from .content_store import ContentId, DiskBlockStore, MissingBlock, StoreError, assemble
from .harness import (PhaseFailed, ScenarioInvalid, effective_config, emit_report, emit_sweep,
                      load_scenario, run_scenario, sweep, sweep_table)

EXIT_OK, EXIT_INPUT, EXIT_MISSING, EXIT_EXPERIMENT = 0, 2, 3, 4

log = logging.getLogger("acst")


class InputError(Exception):
    pass


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file (falls back to $ACST_CONFIG)")
    parser.add_argument("--chunk-size", type=int, dest="chunk_size")
    parser.add_argument("--window", type=int)
    parser.add_argument("--seed", type=int)
    parser.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    _common(common)
    store = argparse.ArgumentParser(add_help=False)
    store.add_argument("--store", default=".acst", help="block store directory (default: .acst)")

    parser = argparse.ArgumentParser(prog="acst", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"acst {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("add", parents=[common, store], help="chunk a file into the store and pin it")
    p.add_argument("path")
    p = sub.add_parser("get", parents=[common, store], help="reassemble a root into a file")
    p.add_argument("root")
    p.add_argument("out_path")
    for name, text in (("pin", "pin a root whose blocks are local"), ("unpin", "remove a pin")):
        p = sub.add_parser(name, parents=[common, store], help=text)
        p.add_argument("root")
    sub.add_parser("gc", parents=[common, store], help="evict blocks not reachable from a pin")

    sim = sub.add_parser("sim", help="run simulated experiments").add_subparsers(dest="sim_command", required=True)
    out_opts = argparse.ArgumentParser(add_help=False)
    out_opts.add_argument("--out", default="reports", help="output directory (default: reports)")
    out_opts.add_argument("--plot", action="store_true", help="also render PNG figures")
    p = sim.add_parser("run", parents=[common, out_opts], help="run one scenario")
    p.add_argument("scenario")
    p.add_argument("--trace", action="store_true", help="write trace.log with every dispatched event")
    p = sim.add_parser("sweep", parents=[common, out_opts], help="sweep bandwidth or delay")
    p.add_argument("scenario")
    p.add_argument("--param", choices=["bandwidth", "delay"])
    p.add_argument("--values", help="comma-separated values (kbit/s or ms)")
    p.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    return parser


def _flags(args) -> dict:
    return {"chunk_size": args.chunk_size, "window": args.window, "seed": args.seed}


def _parse_root(text: str) -> ContentId:
    try:
        return ContentId.parse(text)
    except ValueError as exc:
        raise InputError(str(exc)) from None


def cmd_add(args) -> int:
    config = resolve_config(args.config, _flags(args))
    try:
        data = Path(args.path).read_bytes()
    except OSError as exc:
        raise InputError(f"cannot read {args.path}: {exc.strerror}") from None
    store = DiskBlockStore(args.store, config.max_block_bytes)
    root, added = store.add_bytes(data, config.chunk_size, config.fanout)
    store.pin(root)
    print(root)
    log.info("stored %d new block(s), %d bytes total", added, store.stored_bytes)
    return EXIT_OK


def cmd_get(args) -> int:
    root = _parse_root(args.root)
    store = DiskBlockStore(args.store)
    data = assemble(store, root)
    try:
        Path(args.out_path).write_bytes(data)
    except OSError as exc:
        raise InputError(f"cannot write {args.out_path}: {exc.strerror}") from None
    log.info("wrote %d bytes to %s", len(data), args.out_path)
    return EXIT_OK


def cmd_pin(args) -> int:
    DiskBlockStore(args.store).pin(_parse_root(args.root))
    return EXIT_OK


def cmd_unpin(args) -> int:
    DiskBlockStore(args.store).unpin(_parse_root(args.root))
    return EXIT_OK


def cmd_gc(args) -> int:
    print(DiskBlockStore(args.store).gc())
    return EXIT_OK


def _load(args):
    try:
        scenario = load_scenario(Path(args.scenario))
    except OSError as exc:
        raise InputError(f"cannot read {args.scenario}: {exc.strerror}") from None
    except ScenarioInvalid as exc:
        raise InputError(f"{args.scenario}: {exc}") from None
    base = resolve_config(args.config)
    config = effective_config(scenario, base, {"chunk_size": args.chunk_size, "window": args.window})
    seed = args.seed if args.seed is not None else scenario.seed
    return scenario, config, seed


def cmd_sim_run(args) -> int:
    scenario, config, seed = _load(args)
    report = run_scenario(scenario, seed, config=config, trace=args.trace, raise_on_failure=False)
    for path in emit_report(report, args.out):
        print(path)
    if args.plot:
        from .plotting import plot_peer_load
        print(plot_peer_load(report, Path(args.out) / "peer_load.png"))
    if not report["ok"]:
        failure = report["failure"]
        log.error("phase %s failed: %s", failure["phase"], failure["cause"])
        return EXIT_EXPERIMENT
    return EXIT_OK


def _parse_values(text: str) -> list[float]:
    try:
        values = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise InputError(f"--values must be comma-separated numbers, got {text!r}") from None
    if not values:
        raise InputError("--values is empty")
    return values


def cmd_sim_sweep(args) -> int:
    scenario, config, seed = _load(args)
    if args.param and args.values:
        param, values = args.param, _parse_values(args.values)
    elif scenario.sweep is not None and not (args.param or args.values):
        param, values = scenario.sweep.param, list(scenario.sweep.values)
    else:
        raise InputError("give both --param and --values, or a 'sweep' block in the scenario")
    rows = sweep(scenario, param, values, seed=seed, config=config, jobs=args.jobs)
    table = sweep_table(rows)
    emit_sweep(table, args.out, param)
    for value, report in rows:
        emit_report(report, Path(args.out) / f"{param}_{value:g}")
    if args.plot:
        from .plotting import plot_sweep
        plot_sweep(table, param, Path(args.out) / "sweep.png")
    sys.stdout.write((Path(args.out) / "sweep.csv").read_text())
    if param == "bandwidth":
        threshold = table["join_threshold"]
        log.info("least bandwidth with a successful join: %s",
                 "none" if threshold is None else f"{threshold:g} kbit/s")
    return EXIT_OK if all(r["ok"] for r in table["rows"]) else EXIT_EXPERIMENT


COMMANDS = {"add": cmd_add, "get": cmd_get, "pin": cmd_pin, "unpin": cmd_unpin, "gc": cmd_gc}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s: %(message)s", stream=sys.stderr, force=True)
    if args.command == "sim":
        handler = cmd_sim_run if args.sim_command == "run" else cmd_sim_sweep
    else:
        handler = COMMANDS[args.command]
    try:
        return handler(args)
    except (InputError, ConfigError) as exc:
        log.error("%s", exc)
        return EXIT_INPUT
    except MissingBlock as exc:
        log.error("missing data: %d block(s)", len(exc.cids))
        for cid in exc.cids:
            print(cid, file=sys.stderr)
        return EXIT_MISSING
    except StoreError as exc:
        log.error("%s", exc)
        return EXIT_MISSING
    except PhaseFailed as exc:
        log.error("%s", exc)
        return EXIT_EXPERIMENT
    except json.JSONDecodeError as exc:
        log.error("line %d column %d: %s", exc.lineno, exc.colno, exc.msg)
        return EXIT_INPUT
