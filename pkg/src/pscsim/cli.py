"""Command line: scenario runner, control service, and thin protocol clients.

    pscsim run <scenario.json> [--until S] [--metrics out.csv] [--seed N]
    pscsim serve <scenario.json> --port N [--pace R] [--static DIR] [--until S]
    pscsim put <channel> <value> [--host H --port N]
    pscsim get <channel> [--host H --port N]
    pscsim cycle <ps> [--host H --port N]
    pscsim ramp <job.json> [--host H --port N]
    pscsim feedback on|off [--host H --port N]

Exit codes: 0 success, 1 configuration error, 2 runtime fault, 3 connection
error.  PSC_SIM_SEED overrides the scenario seed.
"""

from __future__ import annotations

import argparse
import json
import socket
import sys
import time

from .scenario import (ScenarioError, build_machine, load_scenario,
                       seed_from_env)
from .sim import s_to_ns


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ScenarioError as e:
        print("scenario error: %s" % e, file=sys.stderr)
        return 1
    except ConnectionError as e:
        print("connection error: %s" % e, file=sys.stderr)
        return 3
    except KeyboardInterrupt:
        return 0


def build_parser():
    p = argparse.ArgumentParser(prog="pscsim",
                                description="magnet power-supply control simulator")
    sub = p.add_subparsers(dest="cmd", required=True)

    run = sub.add_parser("run", help="run a scenario to completion")
    run.add_argument("scenario")
    run.add_argument("--until", type=float, default=None, metavar="S")
    run.add_argument("--metrics", default=None, metavar="CSV")
    run.add_argument("--seed", type=int, default=None)
    run.set_defaults(func=cmd_run)

    serve = sub.add_parser("serve", help="run with the client protocol listening")
    serve.add_argument("scenario")
    serve.add_argument("--port", type=int, default=7350)
    serve.add_argument("--host", default="127.0.0.1")
    serve.add_argument("--pace", type=float, default=1.0,
                       help="virtual seconds per wall second (default 1:1)")
    serve.add_argument("--static", default=None,
                       help="directory with console assets to serve over HTTP")
    serve.add_argument("--until", type=float, default=None, metavar="S")
    serve.add_argument("--seed", type=int, default=None)
    serve.set_defaults(func=cmd_serve)

    for name, nargs in (("put", 2), ("get", 1), ("cycle", 1), ("ramp", 1),
                        ("feedback", 1)):
        c = sub.add_parser(name)
        c.add_argument("args", nargs=nargs)
        c.add_argument("--host", default="127.0.0.1")
        c.add_argument("--port", type=int, default=7350)
        c.set_defaults(func={"put": cmd_put, "get": cmd_get, "cycle": cmd_cycle,
                             "ramp": cmd_ramp, "feedback": cmd_feedback}[name])
    return p


def _build(args):
    cfg = load_scenario(args.scenario)
    seed = args.seed if args.seed is not None else seed_from_env()
    return build_machine(cfg, seed_override=seed)


def cmd_run(args) -> int:
    cfg = load_scenario(args.scenario)
    if args.metrics:
        cfg.setdefault("run", {})["metrics_path"] = args.metrics
    seed = args.seed if args.seed is not None else seed_from_env()
    try:
        machine = build_machine(cfg, seed_override=seed)
    except ScenarioError:
        raise
    try:
        machine.run(args.until)
    except Exception as e:  # invariant violation: report as runtime fault
        print("runtime fault: %s" % e, file=sys.stderr)
        return 2
    finally:
        machine.close()
    print("ran %s to t=%.6f s, %d metric rows"
          % (args.scenario, machine.sim.now / 1e9, machine.metrics.rows))
    return 0


def cmd_serve(args) -> int:
    from .netserver import NetServer

    cfg = load_scenario(args.scenario)
    seed = args.seed if args.seed is not None else seed_from_env()
    machine = build_machine(cfg, seed_override=seed)
    net = NetServer(machine.sim, machine.server, port=args.port, host=args.host,
                    static_dir=args.static)
    net.start()
    print("serving on %s:%d (TCP json-lines, WebSocket /ws), pace %gx"
          % (args.host, net.port, args.pace), flush=True)
    sim = machine.sim
    until_ns = s_to_ns(args.until) if args.until is not None else None
    wall_start = time.monotonic()
    virt_start = sim.now
    try:
        while True:
            nxt = sim.next_due()
            if nxt is None:
                break
            if until_ns is not None and nxt > until_ns:
                sim.advance_until(until_ns)
                break
            lag = (nxt - virt_start) / 1e9 / args.pace - (time.monotonic() - wall_start)
            if lag > 0:
                time.sleep(min(lag, 0.05))
            sim.advance_until(nxt)
    except KeyboardInterrupt:
        pass
    finally:
        net.stop()
        machine.close()
    return 0


# -- protocol clients ---------------------------------------------------------------


def _request(args, msg) -> dict:
    try:
        sock = socket.create_connection((args.host, args.port), timeout=10)
    except OSError as e:
        raise ConnectionError(str(e))
    try:
        msg = dict(msg, id=1)
        sock.sendall(json.dumps(msg).encode() + b"\n")
        buf = b""
        while b"\n" not in buf:
            chunk = sock.recv(65536)
            if not chunk:
                raise ConnectionError("server closed the connection")
            buf += chunk
        return json.loads(buf.split(b"\n", 1)[0])
    finally:
        sock.close()


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text  # bare strings: on, off, local, ...


def _finish(reply) -> int:
    if reply.get("ok"):
        if "value" in reply:
            print(json.dumps(reply["value"]))
        return 0
    print("error: %s" % reply.get("error"), file=sys.stderr)
    return 2


def cmd_put(args) -> int:
    name, value = args.args
    return _finish(_request(args, {"op": "put", "name": name,
                                   "value": _parse_value(value)}))


def cmd_get(args) -> int:
    return _finish(_request(args, {"op": "get", "name": args.args[0]}))


def cmd_cycle(args) -> int:
    return _finish(_request(args, {"op": "put", "name": args.args[0] + ":CYCLE-CMD",
                                   "value": 1}))


def cmd_ramp(args) -> int:
    try:
        with open(args.args[0]) as fh:
            job = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        print("bad ramp file: %s" % e, file=sys.stderr)
        return 1
    return _finish(_request(args, {"op": "put", "name": "SYS:RAMP", "value": job}))


def cmd_feedback(args) -> int:
    state = args.args[0]
    if state not in ("on", "off"):
        print("feedback takes 'on' or 'off'", file=sys.stderr)
        return 1
    return _finish(_request(args, {"op": "put", "name": "SYS:FEEDBACK",
                                   "value": state}))


if __name__ == "__main__":
    sys.exit(main())
