"""Command line entry point ``fuzz``.

Exit codes: 0 success, 1 campaign aborted or check failed, 2 usage or
configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from typing import Optional, Sequence

from .bus import BusError
from .campaign import (
    BUNDLED,
    EXIT_ABORTED,
    EXIT_OK,
    EXIT_USAGE,
    ConfigError,
    config_from_dict,
    demo_config,
    load_campaign_spec,
    load_config,
)
from .feedback import classify_response
from .harness import TargetEndpoint, inject
from .knowledge import KINDS, KnowledgeError, RuleEntry, bundled_store_path, load_store
from .metrics import Ledger, MetricsError, compute_report, load_ledger, render_report
from .mutation import TestCase
from .protocol import ProtocolSpec, SpecError, enumerate_combos, load_bundled, load_spec
from .simulator import BUGS, SimulatorConfig, SimulatorServer

logger = logging.getLogger("icsfuzz")


class UsageError(Exception):
    pass


def _spec_from_ref(ref: str) -> ProtocolSpec:
    if ref.startswith(BUNDLED):
        return load_bundled(ref[len(BUNDLED):].removesuffix(".spec"))
    return load_spec(ref)


def _bugs(text: str) -> frozenset[str]:
    if text in ("", "none"):
        return frozenset()
    if text == "all":
        return frozenset(BUGS)
    names = frozenset(b.strip() for b in text.split(",") if b.strip())
    unknown = names - set(BUGS)
    if unknown:
        raise argparse.ArgumentTypeError(f"unknown bug(s): {', '.join(sorted(unknown))}; choose from {', '.join(BUGS)}")
    return names


# -- run ----------------------------------------------------------------------


def cmd_run(args: argparse.Namespace) -> int:
    from .campaign import run_campaign

    cfg = demo_config() if args.config == "demo" else load_config(args.config)
    if args.cases is not None:
        cfg.budget.mode, cfg.budget.cases = "cases", args.cases
    if args.cycles is not None:
        cfg.cycles = args.cycles
    if args.seed is not None:
        cfg.seed = args.seed
    if args.backend is not None:
        cfg.backend.kind = args.backend
    if args.processes:
        cfg.agents.transport = "tcp"
    started = time.monotonic()
    result = run_campaign(cfg, output=args.output)
    if result.report is not None:
        sys.stdout.write(render_report(result.report, args.format))
    logger.info("ledger: %s (%.1f s)", result.ledger_path, time.monotonic() - started)
    if result.error:
        print(f"campaign aborted: {result.error}", file=sys.stderr)
    return result.exit_code


# -- report -------------------------------------------------------------------


def _ledger_spec(ledger: Ledger, override: Optional[str]) -> Optional[ProtocolSpec]:
    ref = override or ledger.header.get("spec")
    if not ref:
        return None
    try:
        return _spec_from_ref(ref)
    except (OSError, KeyError, SpecError) as exc:
        logger.warning("coverage skipped, cannot load spec %s: %s", ref, exc)
        return None


def cmd_report(args: argparse.Namespace) -> int:
    ledger = load_ledger(args.ledger)
    report = compute_report(ledger, _ledger_spec(ledger, args.spec))
    sys.stdout.write(render_report(report, args.format))
    return EXIT_OK


# -- sim ----------------------------------------------------------------------


def cmd_sim(args: argparse.Namespace) -> int:
    config = SimulatorConfig(
        bugs_enabled=args.bugs,
        session_limit=args.session_limit,
        resource_channel=args.resource_channel,
        tick_ms=args.tick_ms,
    )
    server = SimulatorServer(config, args.host, args.port, event_log=args.event_log).start()
    print(f"simulator listening on {args.host}:{server.port} bugs={','.join(sorted(args.bugs)) or 'none'}", flush=True)
    try:
        while True:
            time.sleep(args.poll)
            if args.duration is not None:
                args.duration -= args.poll
                if args.duration <= 0:
                    break
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return EXIT_OK


# -- kb -----------------------------------------------------------------------


def cmd_kb_search(args: argparse.Namespace) -> int:
    store = load_store(args.store, args.threshold)
    results = store.retrieve(args.query, args.k)
    if args.json:
        print(json.dumps([{"score": r.score, **r.entry.to_dict()} for r in results], indent=2))
    else:
        for r in results:
            print(f"{r.score:.3f}  {r.entry.id}  {r.entry.title}")
        if not results:
            print("no entry above threshold")
    return EXIT_OK


def cmd_kb_add(args: argparse.Namespace) -> int:
    store = load_store(args.store)
    entry_id = args.id or store.next_id(f"{args.protocol}-{args.kind}-")
    if entry_id in store:
        raise UsageError(f"entry {entry_id} already exists")
    keywords = tuple(k.strip() for k in args.keywords.split(",") if k.strip())
    entry = RuleEntry(entry_id, args.protocol, args.kind, args.title, args.body, keywords, args.source)
    store.append(entry)
    print(entry_id)
    return EXIT_OK


# -- spec ---------------------------------------------------------------------


def cmd_spec_check(args: argparse.Namespace) -> int:
    spec = _spec_from_ref(args.spec)
    print(f"OK, {len(spec.fields)} fields, {len(enumerate_combos(spec))} combos")
    return EXIT_OK


# -- replay -------------------------------------------------------------------


def replay_window(ledger: Ledger, case_id: str, context: Optional[int] = None) -> list[dict]:
    """Case records to re-inject so the target reaches the state it had for ``case_id``.

    Without ``context`` the window starts after the last simulator restart
    preceding the case (or at the first case); the target case comes last.
    """
    cases = ledger.of("case")
    index = {r["case_id"]: i for i, r in enumerate(cases)}
    if case_id not in index:
        raise UsageError(f"case {case_id} is not in the ledger")
    at = index[case_id]
    if context is not None:
        start = max(0, at - context)
    else:
        start = 0
        for r in ledger.of("restart"):
            i = index.get(r["case_id"])
            if i is not None and i < at:
                start = max(start, i + 1)
    return cases[start : at + 1]


def cmd_replay(args: argparse.Namespace) -> int:
    ledger = load_ledger(args.ledger)
    header = ledger.header
    if not header:
        raise UsageError("ledger has no header record")
    cfg = config_from_dict(header["config"])
    cfg.spec = header["spec"]
    spec = load_campaign_spec(cfg)
    window = replay_window(ledger, args.case, args.context)
    recorded = {r["case_id"]: r for r in ledger.of("observation")}.get(args.case)
    t = cfg.target
    server = None
    if args.port is None:
        if t.simulator is None:
            raise UsageError("ledger target is external; pass --host/--port")
        sim = SimulatorConfig(
            bugs_enabled=frozenset(t.simulator.bugs),
            session_limit=t.simulator.session_limit,
            resource_channel=t.simulator.resource_channel,
            tick_ms=t.simulator.tick_ms,
        )
        server = SimulatorServer(sim, args.host, 0).start()
        port = server.port
    else:
        port = args.port
    timeout = args.timeout if args.timeout is not None else t.response_timeout_ms
    endpoint = TargetEndpoint(args.host, port, spec.protocol_id, t.connect_timeout_ms, timeout, t.max_retries, t.backoff_ms)
    try:
        for doc in window:
            case = TestCase.from_message(doc)
            obs = inject(case, endpoint, spec)
        cls = classify_response(obs, spec, delay_ms=cfg.feedback.delay_ms)
    finally:
        if server is not None:
            server.stop()
    print(f"replayed {len(window)} case(s); {args.case}: outcome={obs.outcome} liveness={obs.liveness_after} class={cls.cls} reason={cls.reason}")
    if recorded is None:
        print("no recorded observation to compare against")
        return EXIT_ABORTED
    print(f"recorded: outcome={recorded['outcome']} liveness={recorded['liveness_after']} class={recorded['class']} reason={recorded['reason']}")
    same = (cls.cls, cls.reason) == (recorded["class"], recorded["reason"])
    print("reproduced" if same else "not reproduced")
    return EXIT_OK if same else EXIT_ABORTED


# -- agent --------------------------------------------------------------------


def cmd_agent(args: argparse.Namespace) -> int:
    from .distributed import agent_main, parse_ports

    return agent_main(load_config(args.config), args.index, args.bus_host, parse_ports(args.bus_ports))


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fuzz", description="Multi-agent fuzzer for industrial control protocols.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (repeatable)")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a campaign from a config file ('demo' for the bundled one)")
    run.add_argument("config")
    run.add_argument("-o", "--output", help="output directory (default: config 'output')")
    run.add_argument("--cases", type=int, help="cases per cycle (switches to case-count budget)")
    run.add_argument("--cycles", type=int)
    run.add_argument("--seed", type=int, help="rng master seed")
    run.add_argument("--backend", choices=("deterministic", "random", "remote"))
    run.add_argument("--format", choices=("text", "structured"), default="text")
    run.add_argument("--processes", action="store_true", help="run mutation agents as separate processes over the TCP bus")
    run.set_defaults(func=cmd_run)

    ag = sub.add_parser("agent", help="run one mutation agent process against a bus broker")
    ag.add_argument("--config", required=True)
    ag.add_argument("--index", type=int, required=True)
    ag.add_argument("--bus-host", default="127.0.0.1")
    ag.add_argument("--bus-ports", required=True, help='JSON map, e.g. {"seed": 5555, "test_case": 5556, "response": 5557}')
    ag.set_defaults(func=cmd_agent)

    rep = sub.add_parser("report", help="compute metrics from a campaign ledger")
    rep.add_argument("ledger")
    rep.add_argument("--spec", help="spec file for coverage (default: from the ledger header)")
    rep.add_argument("--format", choices=("text", "structured"), default="text")
    rep.set_defaults(func=cmd_report)

    sim = sub.add_parser("sim", help="run the Modbus/TCP simulator in the foreground")
    sim.add_argument("--host", default="127.0.0.1")
    sim.add_argument("--port", type=int, default=5020)
    sim.add_argument("--bugs", type=_bugs, default=frozenset(), help="comma list, 'all' or 'none'")
    sim.add_argument("--session-limit", type=int, default=16)
    sim.add_argument("--resource-channel", action=argparse.BooleanOptionalAction, default=False)
    sim.add_argument("--tick-ms", type=float, default=None, help="simulated time per request (default: wall clock)")
    sim.add_argument("--event-log", help="JSONL file receiving one record per request")
    sim.add_argument("--duration", type=float, default=None, help="stop after this many seconds")
    sim.add_argument("--poll", type=float, default=0.2, help=argparse.SUPPRESS)
    sim.set_defaults(func=cmd_sim)

    kb = sub.add_parser("kb", help="inspect or extend a knowledge store")
    kbs = kb.add_subparsers(dest="kb_command", required=True)
    search = kbs.add_parser("search", help="ranked keyword retrieval")
    search.add_argument("query")
    search.add_argument("--store", default=str(bundled_store_path()))
    search.add_argument("-k", type=int, default=5)
    search.add_argument("--threshold", type=float, default=0.0)
    search.add_argument("--json", action="store_true")
    search.set_defaults(func=cmd_kb_search)
    add = kbs.add_parser("add", help="append an entry")
    add.add_argument("--store", required=True)
    add.add_argument("--id")
    add.add_argument("--protocol", required=True)
    add.add_argument("--kind", required=True, choices=sorted(KINDS))
    add.add_argument("--title", required=True)
    add.add_argument("--body", default="")
    add.add_argument("--keywords", required=True, help="comma separated")
    add.add_argument("--source", default="cli")
    add.set_defaults(func=cmd_kb_add)

    spec = sub.add_parser("spec", help="protocol spec tools")
    specs = spec.add_subparsers(dest="spec_command", required=True)
    check = specs.add_parser("check", help="parse and check a spec file")
    check.add_argument("spec", help="spec file or bundled:<protocol_id>")
    check.set_defaults(func=cmd_spec_check)

    rp = sub.add_parser("replay", help="re-inject a ledger case against a fresh target")
    rp.add_argument("ledger")
    rp.add_argument("--case", required=True)
    rp.add_argument("--context", type=int, default=None, help="preceding cases to replay first (default: since last restart)")
    rp.add_argument("--host", default="127.0.0.1")
    rp.add_argument("--port", type=int, default=None, help="external target; default starts a simulator from the ledger")
    rp.add_argument("--timeout", type=float, default=None, help="response timeout in ms")
    rp.set_defaults(func=cmd_replay)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    level = logging.WARNING - 10 * args.verbose
    logging.basicConfig(level=max(level, logging.DEBUG), format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, SpecError, KnowledgeError, FileNotFoundError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (MetricsError, BusError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ABORTED


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
