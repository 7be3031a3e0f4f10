"""Command-line interface.

Every data/measurement/experiment command is a thin client of the HTTP API:
with --api it talks to a running service, otherwise it mounts the app
in-process over an ASGI transport, so no daemon is required. `serve` hosts
the TCP seller service directly and `api` hosts the HTTP service.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import shlex
import sys
from pathlib import Path

import httpx

from .protocol import DEFAULT_PORT

PROG = "fedmeasure"
DEFAULT_ADDR = f"127.0.0.1:{DEFAULT_PORT}"

MEASURE_COLUMNS = ["kind", "value", "error"]
SCREEN_COLUMNS = ["kind", "ratio", "mu_real", "accepted", "error"]
RANK_COLUMNS = [
    "record", "kind", "trial", "seller", "value", "rank", "dcg",
    "std_rank", "std_dcg", "is_iid", "ties", "warnings", "trials",
]
SWEEP_COLUMNS = [
    "record", "sweep", "kind", "corruption", "severity", "factor",
    "seller_points", "buyer_points", "trial", "value", "mean", "std", "trials",
]
CORRELATE_COLUMNS = [
    "record", "buyer", "seller", "test_metric", "skipped",
    "l2", "cosine", "correlation", "overlap", "volume", "robust_volume",
    "vendi", "dispersion", "difference", "kind", "mean", "buyers",
]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --- output -------------------------------------------------------------------


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(rows, columns, out_path, invocation: str) -> None:
    lines = [f"# {invocation}", ",".join(columns)]
    for row in rows:
        lines.append(",".join(_format_cell(row.get(col)) for col in columns))
    text = "\n".join(lines) + "\n"
    if out_path:
        Path(out_path).write_text(text)
    else:
        sys.stdout.write(text)


def _invocation() -> str:
    return " ".join(shlex.quote(a) for a in [PROG] + sys.argv[1:])


# --- API client -----------------------------------------------------------------


def api_request(api_url, path, payload) -> dict:
    async def go():
        if api_url:
            client = httpx.AsyncClient(base_url=api_url, timeout=httpx.Timeout(None))
        else:
            from .service import create_app

            client = httpx.AsyncClient(
                transport=httpx.ASGITransport(app=create_app()),
                base_url="http://fedmeasure.internal",
                timeout=httpx.Timeout(None),
            )
        async with client:
            return await client.post(path, json=payload)

    try:
        response = asyncio.run(go())
    except httpx.HTTPError as exc:
        raise RuntimeError(f"API request failed: {exc}") from exc
    if response.status_code >= 400:
        try:
            detail = response.json().get("detail", response.text)
        except ValueError:
            detail = response.text
        raise RuntimeError(f"API error ({response.status_code}): {detail}")
    return response.json()


def _scenario_payload(args) -> dict:
    path = Path(args.scenario)
    if not path.is_file():
        raise RuntimeError(f"scenario file not found: {args.scenario}")
    payload = {"scenario": json.loads(path.read_text())}
    if getattr(args, "seed", None) is not None:
        payload["seed"] = args.seed
    return payload


# --- commands -------------------------------------------------------------------


def cmd_gen(args) -> int:
    result = api_request(
        args.api,
        "/datasets/generate",
        {
            "out_path": args.out,
            "classes": args.classes,
            "dim": args.dim,
            "per_class": args.per_class,
            "mean_scale": args.mean_scale,
            "class_scale": args.class_scale,
            "seed": args.seed or 0,
            "labeled": not args.unlabeled,
        },
    )
    print(f"wrote {result['n']}x{result['dim']} embeddings to {result['path']}")
    return 0


def cmd_measure(args) -> int:
    result = api_request(
        args.api,
        "/measure",
        {
            "buyer_path": args.buyer,
            "seller_path": args.seller,
            "k": args.k,
            "center": args.center,
            "omega": args.omega,
        },
    )
    write_csv(result["values"], MEASURE_COLUMNS, args.out, _invocation())
    return 0


def cmd_serve(args) -> int:
    # Hosts the TCP seller service directly; not an API client.
    from .data import read_embeddings
    from .measures import MeasureConfig
    from .protocol import SellerConfig, SellerServer

    dataset = read_embeddings(args.data)
    seller_id = args.seller_id or Path(args.data).stem
    host, _, port = args.addr.rpartition(":")
    server = SellerServer(
        (host or "127.0.0.1", int(port)),
        dataset,
        SellerConfig(
            seller_id=seller_id,
            measure=MeasureConfig(center=args.center),
            keep_alive=args.keep_alive,
        ),
    )
    bound = server.address
    print(f"serving seller {seller_id!r} ({dataset.n}x{dataset.dim}) on {bound[0]}:{bound[1]}")
    sys.stdout.flush()
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.shutdown()
    return 0


def cmd_query(args) -> int:
    result = api_request(
        args.api,
        "/buyer/query",
        {
            "address": args.addr,
            "buyer_path": args.buyer,
            "k": args.k,
            "omega": args.omega,
            "center": args.center,
            "timeout_ms": args.timeout_ms,
        },
    )
    print(f"seller {result['seller_id']} answered query {result['query_id']} "
          f"with {result['n_points']} points")
    write_csv(result["values"], MEASURE_COLUMNS, args.out, _invocation())
    return 0


def cmd_decoy_test(args) -> int:
    result = api_request(
        args.api,
        "/buyer/screen",
        {
            "address": args.addr,
            "buyer_path": args.buyer,
            "decoys": args.decoys,
            "strategies": args.strategy,
            "foreign_paths": args.foreign or [],
            "quantile": args.quantile,
            "threshold": args.threshold,
            "seed": args.seed or 0,
            "k": args.k,
            "timeout_ms": args.timeout_ms,
        },
    )
    write_csv(result["verdicts"], SCREEN_COLUMNS, args.out, _invocation())
    return 0


def cmd_rank(args) -> int:
    payload = _scenario_payload(args)
    payload["minimize_difference"] = args.minimize_difference
    result = api_request(args.api, "/experiments/ranking", payload)
    write_csv(result["rows"], RANK_COLUMNS, args.out, _invocation())
    return 0


def cmd_sweep_duplicates(args) -> int:
    payload = _scenario_payload(args)
    payload["factors"] = args.factors
    result = api_request(args.api, "/experiments/duplicates", payload)
    write_csv(result["rows"], SWEEP_COLUMNS, args.out, _invocation())
    return 0


def cmd_sweep_noise(args) -> int:
    payload = _scenario_payload(args)
    payload["corruptions"] = args.kinds
    payload["severities"] = args.severities
    result = api_request(args.api, "/experiments/noise", payload)
    write_csv(result["rows"], SWEEP_COLUMNS, args.out, _invocation())
    return 0


def cmd_sweep_size(args) -> int:
    if (args.seller_sizes is None) == (args.buyer_sizes is None):
        raise UsageError("pass exactly one of --seller-sizes or --buyer-sizes")
    payload = _scenario_payload(args)
    payload["seller_sizes"] = args.seller_sizes
    payload["buyer_sizes"] = args.buyer_sizes
    result = api_request(args.api, "/experiments/size", payload)
    write_csv(result["rows"], SWEEP_COLUMNS, args.out, _invocation())
    return 0


def cmd_correlate(args) -> int:
    payload = _scenario_payload(args)
    payload["task"] = args.task
    result = api_request(args.api, "/experiments/correlation", payload)
    write_csv(result["rows"], CORRELATE_COLUMNS, args.out, _invocation())
    return 0


def cmd_api(args) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port, log_level="info")
    return 0


# --- argument wiring --------------------------------------------------------------


def _int_list(text: str) -> list:
    try:
        return [int(part) for part in text.replace(",", " ").split()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected integers, got {text!r}") from exc


def build_parser() -> _Parser:
    parser = _Parser(prog=PROG, description="Federated data measurements toolkit")
    parser.add_argument("--api", default=None, help="base URL of a running API service "
                        "(default: run the service in-process)")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, scenario=False, out=True):
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--format", choices=["csv"], default="csv")
        if out:
            p.add_argument("--out", default=None, help="output CSV path (default stdout)")
        if scenario:
            p.add_argument("--scenario", required=True, help="scenario JSON file")

    p = sub.add_parser("gen", help="generate a synthetic embedding file")
    common(p, out=False)
    p.add_argument("--out", required=True, help="output path (.csv for CSV, else binary)")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--dim", type=int, default=512)
    p.add_argument("--per-class", type=int, default=1000)
    p.add_argument("--mean-scale", type=float, default=1.0)
    p.add_argument("--class-scale", type=float, default=0.3)
    p.add_argument("--unlabeled", action="store_true")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("measure", help="compare a buyer file with a seller file")
    common(p)
    p.add_argument("--buyer", required=True)
    p.add_argument("--seller", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--center", action="store_true")
    p.add_argument("--omega", type=float, default=None)
    p.set_defaults(func=cmd_measure)

    p = sub.add_parser("serve", help="serve a seller dataset over TCP")
    common(p, out=False)
    p.add_argument("--data", required=True, help="embedding file to serve")
    p.add_argument("--addr", default=DEFAULT_ADDR)
    p.add_argument("--seller-id", default=None)
    p.add_argument("--center", action="store_true")
    p.add_argument("--keep-alive", action="store_true")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("query", help="query a running seller service")
    common(p)
    p.add_argument("--addr", default=DEFAULT_ADDR)
    p.add_argument("--buyer", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--omega", type=float, default=None)
    p.add_argument("--center", action="store_true")
    p.add_argument("--timeout-ms", type=int, default=5000)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("decoy-test", help="screen a seller with decoy queries")
    common(p)
    p.add_argument("--addr", default=DEFAULT_ADDR)
    p.add_argument("--buyer", required=True)
    p.add_argument("--decoys", type=int, default=4)
    p.add_argument(
        "--strategy",
        action="append",
        choices=["random_directions", "shuffled_buyer", "foreign_dataset"],
        default=None,
        help="decoy strategy (repeatable; default random_directions)",
    )
    p.add_argument("--foreign", action="append", default=None,
                   help="foreign embedding file (repeatable)")
    p.add_argument("--quantile", type=float, default=0.75)
    p.add_argument("--threshold", type=float, default=1.2)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--timeout-ms", type=int, default=5000)
    p.set_defaults(func=cmd_decoy_test)

    p = sub.add_parser("rank", help="run the seller-ranking experiment")
    common(p, scenario=True)
    p.add_argument("--minimize-difference", action="store_true",
                   help="rank the difference measure ascending instead")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("sweep-duplicates", help="duplication-factor sweep")
    common(p, scenario=True)
    p.add_argument("--factors", type=_int_list, default=[1, 10, 100, 200])
    p.set_defaults(func=cmd_sweep_duplicates)

    p = sub.add_parser("sweep-noise", help="corruption-severity sweep")
    common(p, scenario=True)
    p.add_argument("--kinds", nargs="+", default=["gaussian"],
                   choices=["gaussian", "scale", "mask", "shift"])
    p.add_argument("--severities", type=_int_list, default=[1, 2, 3, 4, 5])
    p.set_defaults(func=cmd_sweep_noise)

    p = sub.add_parser("sweep-size", help="seller/buyer size sweep")
    common(p, scenario=True)
    p.add_argument("--seller-sizes", type=_int_list, default=None)
    p.add_argument("--buyer-sizes", type=_int_list, default=None)
    p.set_defaults(func=cmd_sweep_size)

    p = sub.add_parser("correlate", help="measurement vs downstream-performance correlation")
    common(p, scenario=True)
    p.add_argument("--task", choices=["binary", "clustering"], default="clustering")
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("api", help="host the HTTP API service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_api)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 1
    try:
        if args.command == "decoy-test" and not args.strategy:
            args.strategy = ["random_directions"]
        return args.func(args)
    except UsageError as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 2
    except Exception as exc:
        print(f"{PROG}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
