"""Federated exchange: a seller service answers measurement queries over TCP
and a buyer client screens sellers with interleaved decoy queries.

Wire format: length-prefixed frames (u32 little-endian byte count) each
holding one UTF-8 JSON object. Query projections travel as a base64-encoded
little-endian float64 blob ("projection_b64"), which is lossless and keeps a
default 10 x 512 query under 64 KiB; plain nested arrays ("projection") are
accepted too. Reports use plain JSON numbers, which round-trip float64
exactly.
"""

from __future__ import annotations

import base64
import json
import logging
import socket
import socketserver
import struct
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .data import EmbeddingSet
from .linalg import quantile, random_orthonormal_rows
from .measures import (
    DEFAULT_K,
    HIGHER_IS_BETTER,
    MeasureConfig,
    MeasureKind,
    MeasurementReport,
    QueryMatrix,
    compute_query,
    default_omega,
    evaluate,
    orthonormality_defect,
    seller_report,
)
from .linalg import top_k_directions

log = logging.getLogger(__name__)

DEFAULT_PORT = 7431
FRAME_LIMIT = 16 * 1024 * 1024
SELLER_ORTHONORMAL_ATOL = 1e-6
DECOY_STRATEGIES = ("random_directions", "shuffled_buyer", "foreign_dataset")


class ProtocolError(Exception):
    """Base class for buyer/seller protocol failures."""


class FrameTooLarge(ProtocolError):
    pass


class SchemaError(ProtocolError):
    """The peer sent bytes that do not form a valid message."""


class SellerError(ProtocolError):
    """The seller answered with an error message."""


class SellerRejection(ProtocolError):
    """Validation failure the seller reports back to the client."""


# --- framing ----------------------------------------------------------------


def send_frame(sock: socket.socket, payload: bytes) -> None:
    if len(payload) > FRAME_LIMIT:
        raise FrameTooLarge(f"outgoing frame of {len(payload)} bytes exceeds limit")
    sock.sendall(struct.pack("<I", len(payload)) + payload)


def _recv_exact(sock: socket.socket, count: int) -> Optional[bytes]:
    chunks = []
    remaining = count
    while remaining:
        chunk = sock.recv(min(remaining, 1 << 16))
        if not chunk:
            if remaining == count and not chunks:
                return None  # clean EOF before any byte
            raise SchemaError("connection closed mid-frame (truncated reply)")
        chunks.append(chunk)
        remaining -= len(chunk)
    return b"".join(chunks)


def recv_frame(sock: socket.socket, limit: int = FRAME_LIMIT) -> Optional[bytes]:
    header = _recv_exact(sock, 4)
    if header is None:
        return None
    (length,) = struct.unpack("<I", header)
    if length > limit:
        raise FrameTooLarge(f"incoming frame of {length} bytes exceeds limit")
    payload = _recv_exact(sock, length)
    if payload is None:
        raise SchemaError("connection closed mid-frame (truncated reply)")
    return payload


def _dumps(obj) -> bytes:
    return json.dumps(obj, allow_nan=False, separators=(",", ":")).encode()


def _loads(payload: bytes) -> dict:
    try:
        obj = json.loads(payload.decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SchemaError(f"frame is not valid JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise SchemaError("message must be a JSON object")
    return obj


# --- messages ---------------------------------------------------------------


@dataclass(frozen=True)
class QueryMessage:
    query_id: str
    projection: np.ndarray  # k x d
    kinds: tuple = tuple(MeasureKind)
    omega: Optional[float] = None

    @property
    def k(self) -> int:
        return self.projection.shape[0]

    @property
    def dim(self) -> int:
        return self.projection.shape[1]

    @classmethod
    def from_query(cls, query: QueryMatrix, kinds=tuple(MeasureKind), omega=None):
        return cls(
            query_id=query.query_id,
            projection=query.directions,
            kinds=tuple(MeasureKind(k) for k in kinds),
            omega=omega,
        )

    def to_wire(self, compact: bool = True) -> dict:
        obj = {
            "type": "query",
            "query_id": self.query_id,
            "k": self.k,
            "d": self.dim,
            "kinds": [MeasureKind(k).value for k in self.kinds],
        }
        if compact:
            blob = np.ascontiguousarray(self.projection, dtype="<f8").tobytes()
            obj["projection_b64"] = base64.b64encode(blob).decode("ascii")
        else:
            obj["projection"] = [list(map(float, row)) for row in self.projection]
        if self.omega is not None:
            obj["omega"] = float(self.omega)
        return obj

    @classmethod
    def from_wire(cls, obj: dict) -> "QueryMessage":
        query_id = obj.get("query_id")
        k = obj.get("k")
        d = obj.get("d")
        if not isinstance(query_id, str) or not isinstance(k, int) or not isinstance(d, int):
            raise SchemaError("query requires string query_id and integer k, d")
        if k < 1 or d < 1:
            raise SchemaError("query k and d must be positive")
        if "projection_b64" in obj:
            try:
                blob = base64.b64decode(obj["projection_b64"], validate=True)
            except Exception as exc:
                raise SchemaError("projection_b64 is not valid base64") from exc
            if len(blob) != k * d * 8:
                raise SchemaError("projection_b64 size does not match k*d")
            projection = np.frombuffer(blob, dtype="<f8").reshape(k, d).astype(np.float64)
        elif "projection" in obj:
            projection = _matrix_field(obj["projection"], k, d, "projection")
        else:
            raise SchemaError("query is missing the projection")
        if not np.all(np.isfinite(projection)):
            raise SchemaError("projection contains non-finite values")
        kinds = obj.get("kinds", [k.value for k in MeasureKind])
        try:
            kinds = tuple(MeasureKind(k) for k in kinds)
        except ValueError as exc:
            raise SchemaError(f"unknown measure kind: {exc}") from exc
        omega = obj.get("omega")
        if omega is not None:
            omega = float(omega)
            if not omega > 0:
                raise SchemaError("omega must be positive")
        return cls(query_id=query_id, projection=projection, kinds=kinds, omega=omega)


@dataclass(frozen=True)
class ReportMessage:
    query_id: str
    seller_id: str
    n_points: int
    mean_vector: np.ndarray
    lambdas: np.ndarray
    projected_cov: np.ndarray
    values: dict

    def to_wire(self) -> dict:
        return {
            "type": "report",
            "query_id": self.query_id,
            "seller_id": self.seller_id,
            "n_points": int(self.n_points),
            "mean_vector": [float(v) for v in self.mean_vector],
            "lambdas": [float(v) for v in self.lambdas],
            "projected_cov": [list(map(float, row)) for row in self.projected_cov],
            "values": {MeasureKind(k).value: float(v) for k, v in self.values.items()},
        }

    @classmethod
    def from_wire(cls, obj: dict) -> "ReportMessage":
        try:
            query_id = obj["query_id"]
            seller_id = obj["seller_id"]
            n_points = obj["n_points"]
            lambdas = np.asarray(obj["lambdas"], dtype=np.float64)
            mean_vector = np.asarray(obj["mean_vector"], dtype=np.float64)
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"report is missing or mistypes a field: {exc}") from exc
        if not isinstance(query_id, str) or not isinstance(seller_id, str):
            raise SchemaError("report ids must be strings")
        if not isinstance(n_points, int) or n_points < 1:
            raise SchemaError("report n_points must be a positive integer")
        if lambdas.ndim != 1 or mean_vector.ndim != 1:
            raise SchemaError("report vectors have wrong shapes")
        k = lambdas.shape[0]
        cov = _matrix_field(obj.get("projected_cov"), k, k, "projected_cov")
        values_obj = obj.get("values", {})
        if not isinstance(values_obj, dict):
            raise SchemaError("report values must be an object")
        try:
            values = {MeasureKind(name): float(v) for name, v in values_obj.items()}
        except ValueError as exc:
            raise SchemaError(f"unknown measure kind in values: {exc}") from exc
        msg = cls(
            query_id=query_id,
            seller_id=seller_id,
            n_points=n_points,
            mean_vector=mean_vector,
            lambdas=lambdas,
            projected_cov=cov,
            values=values,
        )
        if not all(np.all(np.isfinite(a)) for a in (mean_vector, lambdas, cov)):
            raise SchemaError("report contains non-finite values")
        return msg

    def to_report(self) -> MeasurementReport:
        """Rebuild the measurement report the seller computed."""
        try:
            return MeasurementReport(
                mean_vector=self.mean_vector,
                lambdas=self.lambdas,
                projected_cov=self.projected_cov,
                volume=self.values[MeasureKind.VOLUME],
                robust_volume=self.values[MeasureKind.ROBUST_VOLUME],
                vendi=self.values[MeasureKind.VENDI],
                dispersion=self.values[MeasureKind.DISPERSION],
                n_points=self.n_points,
            )
        except KeyError as exc:
            raise SchemaError(f"report is missing seller-side value {exc}") from exc

    @classmethod
    def from_report(cls, report: MeasurementReport, query_id: str, seller_id: str):
        values = {
            MeasureKind.VOLUME: report.volume,
            MeasureKind.ROBUST_VOLUME: report.robust_volume,
            MeasureKind.VENDI: report.vendi,
            MeasureKind.DISPERSION: report.dispersion,
        }
        return cls(
            query_id=query_id,
            seller_id=seller_id,
            n_points=report.n_points,
            mean_vector=report.mean_vector,
            lambdas=report.lambdas,
            projected_cov=report.projected_cov,
            values=values,
        )


def _matrix_field(raw, rows: int, cols: int, name: str) -> np.ndarray:
    try:
        m = np.asarray(raw, dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{name} is not a numeric matrix") from exc
    if m.shape != (rows, cols):
        raise SchemaError(f"{name} has shape {m.shape}, expected {(rows, cols)}")
    return m


def error_wire(message: str) -> dict:
    return {"type": "error", "message": message}


def report_size_budget(d: int, k: int) -> int:
    """Upper bound on a serialized report: linear in d and k^2, never in n."""
    return 4096 + 32 * (d + k + k * k + 16)


# --- seller service ---------------------------------------------------------


@dataclass(frozen=True)
class SellerConfig:
    seller_id: str = "seller"
    measure: MeasureConfig = field(default_factory=MeasureConfig)
    keep_alive: bool = False
    frame_limit: int = FRAME_LIMIT


class _SellerHandler(socketserver.BaseRequestHandler):
    def handle(self):
        server = self.server  # _ThreadingServer carrying config + handle_payload
        while True:
            try:
                payload = recv_frame(self.request, server.config.frame_limit)
            except FrameTooLarge as exc:
                self._reply(error_wire(f"protocol error: {exc}"))
                return
            except (SchemaError, OSError):
                return
            if payload is None:
                return
            try:
                reply = server.handle_payload(payload)
            except ProtocolError as exc:
                reply = error_wire(str(exc))
            except Exception as exc:  # malformed input must not kill the server
                log.warning("seller %s rejected a query: %s", server.config.seller_id, exc)
                reply = error_wire(f"invalid query: {exc}")
            if not self._reply(reply):
                return
            if not server.config.keep_alive:
                return

    def _reply(self, obj: dict) -> bool:
        try:
            send_frame(self.request, _dumps(obj))
            return True
        except OSError:
            return False


class _ThreadingServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class SellerServer:
    """Serves measurement reports for one embedding set over TCP.

    The dataset is immutable and the measurement core is pure, so concurrent
    connections share it without locks.
    """

    def __init__(self, address, seller: EmbeddingSet, config: SellerConfig = SellerConfig()):
        self.seller = seller
        self.config = config
        host, port = _parse_address(address)
        self._server = _ThreadingServer((host, port), _SellerHandler)
        self._server.handle_payload = self.handle_payload  # type: ignore[attr-defined]
        self._server.config = config  # type: ignore[attr-defined]
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> tuple:
        return self._server.server_address[:2]

    def handle_payload(self, payload: bytes) -> dict:
        obj = _loads(payload)
        if obj.get("type") != "query":
            raise SchemaError(f"unsupported message type {obj.get('type')!r}")
        msg = QueryMessage.from_wire(obj)
        if msg.dim != self.seller.dim:
            raise SellerRejection(f"invalid query: dimension {msg.dim} != {self.seller.dim}")
        if msg.k > min(self.seller.n, self.seller.dim):
            raise SellerRejection("invalid query: k exceeds data rank")
        defect = orthonormality_defect(msg.projection)
        if defect > SELLER_ORTHONORMAL_ATOL:
            raise SellerRejection("invalid query: projection rows are not orthonormal")
        query = _as_query_matrix(msg.projection, msg.query_id, defect)
        cfg = self.config.measure
        if msg.omega is not None:
            cfg = MeasureConfig(center=cfg.center, jitter=cfg.jitter, omega=msg.omega)
        report = seller_report(self.seller, query, cfg)
        reply = ReportMessage.from_report(report, msg.query_id, self.config.seller_id).to_wire()
        payload_size = len(_dumps(reply))
        budget = report_size_budget(self.seller.dim, msg.k)
        assert payload_size <= budget, f"report frame {payload_size} exceeds budget {budget}"
        return reply

    def start(self) -> "SellerServer":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def serve_forever(self):
        self._server.serve_forever()

    def shutdown(self):
        self._server.shutdown()
        self._server.server_close()
        if self._thread is not None:
            self._thread.join(timeout=5)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.shutdown()


def _as_query_matrix(projection: np.ndarray, query_id: str, defect: float) -> QueryMatrix:
    # Absorb serialization rounding: snap to the nearest orthonormal frame
    # when the rows are orthonormal only to the looser network tolerance.
    from .measures import ORTHONORMAL_ATOL

    if defect > ORTHONORMAL_ATOL:
        u, _, vt = np.linalg.svd(projection, full_matrices=False)
        projection = u @ vt
    return QueryMatrix(directions=projection, query_id=query_id)


def serve_seller(address, seller: EmbeddingSet, config: SellerConfig = SellerConfig()) -> SellerServer:
    """Bind and start a seller service; returns the running server."""
    return SellerServer(address, seller, config).start()


def _parse_address(address) -> tuple:
    if isinstance(address, str):
        host, _, port = address.rpartition(":")
        if not host:
            raise ValueError(f"address {address!r} must look like host:port")
        return host, int(port)
    host, port = address
    return host, int(port)


# --- buyer client -----------------------------------------------------------


def query_seller(address, msg: QueryMessage, timeout: float = 5.0) -> ReportMessage:
    """Send one query and return the seller's report.

    Failures stay distinguishable: ConnectionRefusedError / TimeoutError from
    the socket layer, SchemaError for malformed replies, SellerError when the
    seller answers with an error message.
    """
    host, port = _parse_address(address)
    with socket.create_connection((host, port), timeout=timeout) as sock:
        sock.settimeout(timeout)
        send_frame(sock, _dumps(msg.to_wire()))
        payload = recv_frame(sock)
    if payload is None:
        raise SchemaError("seller closed the connection without replying")
    obj = _loads(payload)
    msg_type = obj.get("type")
    if msg_type == "error":
        raise SellerError(str(obj.get("message", "unspecified seller error")))
    if msg_type != "report":
        raise SchemaError(f"unexpected message type {msg_type!r}")
    report = ReportMessage.from_wire(obj)
    if report.query_id != msg.query_id:
        raise SchemaError("report echoes the wrong query_id")
    return report


# --- decoy queries and the honesty screen -----------------------------------


@dataclass(frozen=True)
class DecoyPlan:
    """How many false queries to send and how to judge the outcome."""

    num_decoys: int = 4
    strategies: tuple = ("random_directions",)
    quantile: float = 0.75
    threshold: float = 1.2

    def __post_init__(self):
        if self.num_decoys < 1:
            raise ValueError("a decoy plan needs at least one decoy")
        if not 0.0 <= self.quantile <= 1.0:
            raise ValueError("quantile must lie in [0, 1]")
        unknown = set(self.strategies) - set(DECOY_STRATEGIES)
        if unknown or not self.strategies:
            raise ValueError(f"unknown decoy strategies: {sorted(unknown)}")


@dataclass(frozen=True)
class Decoy:
    query: QueryMatrix
    reference: EmbeddingSet  # stands in for the buyer's data under this query
    strategy: str


def make_decoys(
    buyer: EmbeddingSet,
    plan: DecoyPlan,
    seed,
    k: int = DEFAULT_K,
    foreign: Optional[Sequence[EmbeddingSet]] = None,
) -> list:
    """Build orthonormal decoy queries plus the reference data that plays the
    buyer's role under each of them."""
    rng = np.random.default_rng(seed)
    foreign = list(foreign) if foreign else []
    foreign_used = 0
    decoys = []
    for i in range(plan.num_decoys):
        strategy = plan.strategies[i % len(plan.strategies)]
        if strategy == "random_directions":
            frame = random_orthonormal_rows(rng, k, buyer.dim)
            reference = EmbeddingSet(
                vectors=rng.standard_normal((buyer.n, buyer.dim)), name=f"random-{i}"
            )
            query = QueryMatrix(directions=frame)
        elif strategy == "shuffled_buyer":
            shuffled = buyer.vectors.copy()
            for col in range(shuffled.shape[1]):
                shuffled[:, col] = shuffled[rng.permutation(buyer.n), col]
            reference = EmbeddingSet(vectors=shuffled, name=f"shuffled-{i}")
            query = QueryMatrix(directions=top_k_directions(shuffled, k))
        else:  # foreign_dataset
            if foreign_used >= len(foreign):
                raise ValueError("foreign_dataset strategy needs one unused foreign set per decoy")
            reference = foreign[foreign_used]
            foreign_used += 1
            query = QueryMatrix(directions=top_k_directions(reference.vectors, k))
        decoys.append(Decoy(query=query, reference=reference, strategy=strategy))
    return decoys


def decoy_ratio(mu_real: float, mu_false: Sequence[float], q: float) -> float:
    """Eq-style screen statistic: real measurement over the q-quantile of the
    false-query measurements."""
    if len(mu_false) == 0:
        raise ValueError("no false-query measurements")
    denom = quantile(mu_false, q)
    if denom == 0.0:
        raise ValueError("degenerate decoy distribution: zero quantile")
    return float(mu_real) / float(denom)


@dataclass(frozen=True)
class ScreenResult:
    kind: MeasureKind
    ratio: float
    mu_real: float
    accepted: bool


def honesty_screen(
    real_pair,
    decoy_pairs,
    kind: MeasureKind,
    plan: DecoyPlan,
) -> ScreenResult:
    """Accept or reject a seller from its real and decoy measurements.

    Each pair is (buyer_side_report, seller_report) computed under the same
    query. For kinds where larger is better the seller passes when the ratio
    reaches the threshold; for the inverted "difference" kind the comparison
    flips (ratio at most 1/threshold).
    """
    kind = MeasureKind(kind)
    mu_real = evaluate(kind, real_pair[0], real_pair[1])
    mu_false = [evaluate(kind, b, s) for b, s in decoy_pairs]
    ratio = decoy_ratio(mu_real, mu_false, plan.quantile)
    if HIGHER_IS_BETTER[kind]:
        accepted = ratio >= plan.threshold
    else:
        accepted = ratio <= 1.0 / plan.threshold
    return ScreenResult(kind=kind, ratio=ratio, mu_real=mu_real, accepted=accepted)


def screen_seller(
    buyer: EmbeddingSet,
    fetch: Callable[[QueryMatrix, Optional[float]], MeasurementReport],
    plan: DecoyPlan,
    seed,
    k: int = DEFAULT_K,
    kinds=tuple(MeasureKind),
    foreign: Optional[Sequence[EmbeddingSet]] = None,
    config: MeasureConfig = MeasureConfig(),
) -> dict:
    """Run the full decoy screen against one seller.

    ``fetch(query, omega)`` obtains the seller's report for a query — either
    in-process or over the network. Real and decoy queries are sent in a
    seeded random order under fresh query ids, so the seller cannot tell
    which is which.
    """
    real_query = compute_query(buyer, k)
    decoys = make_decoys(buyer, plan, seed, k=k, foreign=foreign)
    rng = np.random.default_rng(seed)

    entries = [("real", real_query, buyer)] + [(d.strategy, d.query, d.reference) for d in decoys]
    order = rng.permutation(len(entries))

    seller_reports: dict = {}
    buyer_reports: dict = {}
    for idx in order:
        strategy, query, reference = entries[idx]
        omega = config.omega if config.omega is not None else default_omega(reference, query)
        local_cfg = MeasureConfig(center=config.center, jitter=config.jitter, omega=omega)
        seller_reports[idx] = fetch(query, omega)
        buyer_reports[idx] = seller_report(reference, query, local_cfg)

    real_pair = (buyer_reports[0], seller_reports[0])
    decoy_pairs = [(buyer_reports[i], seller_reports[i]) for i in range(1, len(entries))]
    return {
        MeasureKind(kind): honesty_screen(real_pair, decoy_pairs, kind, plan) for kind in kinds
    }
