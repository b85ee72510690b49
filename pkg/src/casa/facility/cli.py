"""The ``casa`` command line.

Exit codes: 0 success, 1 user error (bad input, denied, not found, usage),
2 internal or environmental failure.
"""

import argparse
import json
import os
import sys
import time

import yaml

from .. import wire
from ..authz import TokenIssuer
from ..errors import BadRequest, CasaError, Internal, Unavailable
from ..pipeline.datagen import gen_dataset
from ..pipeline.task import AnalysisSpec
from .config import load_config
from .core import Facility

USER_CODES = {"bad_request", "unauthorized", "expired", "not_found", "conflict", "too_large"}
DEFAULT_DATASET = "/store/agc"
DEFAULT_SPEC = {"selection": "pt > 30 && abs(eta) < 2.4", "variable": "mass", "bins": 50, "lo": 0.0, "hi": 250.0}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_help(sys.stderr)
        raise UsageError(message)


def _emit(args, doc, text=None):
    if args.output == "structured":
        print(json.dumps(doc, sort_keys=True))
    elif text is not None:
        print(text)
    else:
        print(yaml.safe_dump(doc, sort_keys=True, default_flow_style=False).rstrip())


def _config(args):
    return load_config(args.config)


def _admin(config):
    return wire.connect(f"tcp://{config.host}:{config.ports['admin']}", name="casa-cli")


def _user_token(args, config):
    if args.token:
        return args.token
    if args.user:
        path = os.path.join(config.credentials_dir, f"{args.user}.token")
        try:
            with open(path) as fh:
                return fh.read().strip()
        except FileNotFoundError:
            raise BadRequest(f"no credentials for {args.user!r} in {config.credentials_dir}") from None
    return None


def _load_spec(path):
    try:
        with open(path) as fh:
            doc = yaml.safe_load(fh)
    except FileNotFoundError:
        raise BadRequest(f"spec file {path} not found") from None
    except yaml.YAMLError as exc:
        raise BadRequest(f"spec file {path} is not valid YAML/JSON: {exc}") from None
    return AnalysisSpec.from_doc(doc)


# -- subcommands -------------------------------------------------------------

def cmd_up(args):
    config = _config(args)
    facility = Facility(config, transport="tcp").up()
    _emit(args, {"facility": config.facility, "addresses": facility.addresses,
                 "credentials": config.credentials_dir, "tick_mode": config.tick_mode},
          f"facility {config.facility} up: " + " ".join(f"{k}={v}" for k, v in sorted(facility.addresses.items())))
    sys.stdout.flush()
    if args.detach_after is not None:
        facility.start_clock()
        time.sleep(args.detach_after)
        facility.down()
        return 0
    facility.start_clock()
    try:
        while True:
            time.sleep(1.0)
    except KeyboardInterrupt:
        pass
    finally:
        facility.down()
    return 0


def cmd_status(args):
    config = _config(args)
    conn = _admin(config)
    try:
        doc = conn.request("facility.status")
        if args.graph:
            sched = wire.connect(doc["addresses"]["sched"], name="casa-cli")
            try:
                doc = sched.request("sched.status", {"graph_id": args.graph})
                doc.pop("result", None) if not args.result else None
            finally:
                sched.close()
    finally:
        conn.close()
    _emit(args, doc)
    return 0


def cmd_submit(args):
    spec = _load_spec(args.spec)  # parse errors surface here with their offset
    config = _config(args)
    token = _user_token(args, config)
    if token is None:
        raise BadRequest("submit needs --token or --user")
    conn = _admin(config)
    try:
        addresses = conn.request("facility.status")["addresses"]
    finally:
        conn.close()
    sched = wire.connect(addresses["sched"], name="casa-cli")
    try:
        graph = {"graph_id": args.graph_id or "", "dataset": spec.dataset, "n_partitions": args.partitions,
                 "map_spec": spec.to_doc(), "reduce": "histogram_merge"}
        graph_id = sched.request("sched.submit_graph", {"graph": graph, "token": token})["graph_id"]
        doc = {"graph_id": graph_id}
        if args.wait:
            deadline = time.monotonic() + args.timeout
            while True:
                doc = sched.request("sched.status", {"graph_id": graph_id})
                if doc["state"] in ("Done", "Failed") or time.monotonic() > deadline:
                    break
                time.sleep(0.1)
    finally:
        sched.close()
    _emit(args, doc, None if args.wait else graph_id)
    return 0 if doc.get("state") != "Failed" else 1


def cmd_token(args):
    config = _config(args)
    issuer = TokenIssuer(config.key, audience=config.facility, max_ttl=config.token_ttl, skew=config.skew)
    if args.token_cmd == "mint":
        token = issuer.mint(args.sub, args.cap, ttl=args.ttl or config.token_ttl,
                            session=args.session or config.session)
    else:
        token = args.token if args.token != "-" else sys.stdin.read().strip()
        token = issuer.renew(token, ttl=args.ttl or config.token_ttl)
    claims = issuer.verify(token)
    _emit(args, {"token": token, "claims": claims.to_doc()}, token)
    return 0


def _bench_spec(args):
    if args.spec:
        return _load_spec(args.spec)
    return AnalysisSpec.from_doc({
        "dataset": args.dataset, "selection": args.selection,
        "histogram": {"variable": args.variable, "n_bins": args.bins, "lo": args.lo, "hi": args.hi},
    })


def cmd_bench(args):
    spec = _bench_spec(args)
    config = _config(args)
    with Facility(config, transport="inproc") as facility:
        report = facility.bench(spec, args.repeats)
    if args.output == "structured":
        _emit(args, report)
        return 0
    print(f"dataset {report['dataset']}: {report['rows']} events in {report['partitions']} partitions")
    for run in report["runs"]:
        cache = run["cache"]
        print(f"run {run['run']}: {run['wall_s']:.3f} s, {run['events_per_s']:.0f} events/s, "
              f"{run['ticks']} ticks, peak workers {run['peak_workers']}, "
              f"origin {cache['bytes_from_origin']} B, cache {cache['bytes_from_cache']} B")
    if "cold_vs_warm" in report:
        cw = report["cold_vs_warm"]
        print(f"cold {cw['cold_s']:.3f} s vs warm {cw['warm_s']:.3f} s (x{cw['speedup']:.2f})")
    return 0


def cmd_reconcile(args):
    config = _config(args)
    conn = _admin(config)
    try:
        report = conn.request("facility.reconcile")
    finally:
        conn.close()
    _emit(args, report)
    return 0


def cmd_gen_dataset(args):
    out = args.out
    if out is None:
        config = _config(args)
        out = os.path.join(config.origin_root, args.name.lstrip("/"))
    manifest = gen_dataset(out, args.rows, args.partitions, args.seed)
    doc = {"path": out, "rows": manifest["rows"], "partitions": len(manifest["partitions"])}
    _emit(args, doc, f"wrote {doc['rows']} rows in {doc['partitions']} partitions to {out}")
    return 0


def cmd_worker(args):
    from ..worker import main as worker_main

    return worker_main(args.rest)


# -- parser ------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS keeps a subcommand's defaults from clobbering flags given before it.
    common.add_argument("--config", default=argparse.SUPPRESS,
                        help="facility config file (default: $CASA_CONFIG, else built-in defaults)")
    common.add_argument("--output", choices=("text", "structured"), default=argparse.SUPPRESS)

    parser = _Parser(prog="casa", description="Desk-scale analysis facility.", parents=[common])
    sub = parser.add_subparsers(dest="cmd", parser_class=_Parser)

    p = sub.add_parser("up", parents=[common], help="start every service and run the clock")
    p.add_argument("--detach-after", type=float, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_up)

    p = sub.add_parser("status", parents=[common], help="facility or graph status")
    p.add_argument("--graph")
    p.add_argument("--result", action="store_true", help="include the merged histogram")
    p.set_defaults(func=cmd_status)

    p = sub.add_parser("submit", parents=[common], help="submit an analysis spec")
    p.add_argument("--spec", required=True)
    p.add_argument("--token")
    p.add_argument("--user", help="read the token from the credentials directory")
    p.add_argument("--partitions", type=int, required=True)
    p.add_argument("--graph-id")
    p.add_argument("--wait", action="store_true")
    p.add_argument("--timeout", type=float, default=600.0)
    p.set_defaults(func=cmd_submit)

    p = sub.add_parser("token", parents=[common], help="mint or renew capability tokens")
    tsub = p.add_subparsers(dest="token_cmd", parser_class=_Parser, required=True)
    m = tsub.add_parser("mint", parents=[common])
    m.add_argument("--sub", required=True)
    m.add_argument("--cap", action="append", required=True, help="action:prefix, repeatable")
    m.add_argument("--ttl", type=int)
    m.add_argument("--session", type=int)
    r = tsub.add_parser("renew", parents=[common])
    r.add_argument("--token", required=True, help="token to renew, or - for stdin")
    r.add_argument("--ttl", type=int)
    p.set_defaults(func=cmd_token)

    p = sub.add_parser("bench", parents=[common], help="run an analysis repeatedly and report throughput")
    p.add_argument("--spec")
    p.add_argument("--dataset", default=DEFAULT_DATASET)
    p.add_argument("--selection", default=DEFAULT_SPEC["selection"])
    p.add_argument("--variable", default=DEFAULT_SPEC["variable"])
    p.add_argument("--bins", type=int, default=DEFAULT_SPEC["bins"])
    p.add_argument("--lo", type=float, default=DEFAULT_SPEC["lo"])
    p.add_argument("--hi", type=float, default=DEFAULT_SPEC["hi"])
    p.add_argument("--repeats", type=int, default=2)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("reconcile", parents=[common], help="make the running facility re-read its config")
    p.set_defaults(func=cmd_reconcile)

    p = sub.add_parser("gen-dataset", parents=[common], help="write a seeded synthetic dataset")
    p.add_argument("--rows", type=int, required=True)
    p.add_argument("--partitions", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--name", default=DEFAULT_DATASET, help="object path under the origin root")
    p.add_argument("--out", help="explicit output directory (overrides --name)")
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("worker", help="run a worker process (used by process launch mode)")
    p.add_argument("rest", nargs=argparse.REMAINDER)
    p.set_defaults(func=cmd_worker)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"casa: {exc}", file=sys.stderr)
        return 1
    args.config = getattr(args, "config", None)
    args.output = getattr(args, "output", "text")
    if getattr(args, "func", None) is None:
        parser.print_help(sys.stderr)
        return 1
    try:
        return args.func(args)
    except CasaError as exc:
        _report_error(args, exc)
        return 1 if exc.code in USER_CODES else 2
    except (ValueError, OSError) as exc:
        _report_error(args, BadRequest(str(exc)) if isinstance(exc, ValueError) else Unavailable(str(exc)))
        return 1 if isinstance(exc, ValueError) else 2
    except Exception as exc:  # noqa: BLE001
        _report_error(args, Internal(f"{type(exc).__name__}: {exc}"))
        return 2


def _report_error(args, exc):
    if getattr(args, "output", "text") == "structured":
        print(json.dumps({"error": exc.to_payload()}, sort_keys=True))
    else:
        print(f"casa: {exc.code}: {exc.message}", file=sys.stderr)


if __name__ == "__main__":
    sys.exit(main())
