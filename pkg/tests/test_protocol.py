import json
import socket
import struct
import threading

import numpy as np
import pytest

from fedmeasure.data import gaussian_mixture, random_mixture_spec
from fedmeasure.measures import (
    MeasureConfig,
    MeasureKind,
    compute_query,
    default_omega,
    seller_report,
)
from fedmeasure.protocol import (
    Decoy,
    DecoyPlan,
    QueryMessage,
    ReportMessage,
    SchemaError,
    SellerConfig,
    SellerError,
    decoy_ratio,
    honesty_screen,
    make_decoys,
    query_seller,
    screen_seller,
    serve_seller,
)


def make_set(seed=0, n=200, d=16, classes=4, name="seller"):
    spec = random_mixture_spec(num_classes=classes, dim=d, points_per_class=n // classes, seed=seed)
    dataset = gaussian_mixture(spec, name=name)
    return dataset


@pytest.fixture()
def seller_set():
    return make_set(seed=1)


@pytest.fixture()
def server(seller_set):
    srv = serve_seller(("127.0.0.1", 0), seller_set, SellerConfig(seller_id="s1"))
    yield srv
    srv.shutdown()


def raw_exchange(address, payload: bytes) -> dict:
    with socket.create_connection(address, timeout=5) as sock:
        sock.settimeout(5)
        sock.sendall(struct.pack("<I", len(payload)) + payload)
        header = sock.recv(4)
        (length,) = struct.unpack("<I", header)
        body = b""
        while len(body) < length:
            body += sock.recv(length - len(body))
    return json.loads(body.decode())


class TestWireMessages:
    def test_query_round_trip_compact_is_lossless(self):
        rng = np.random.default_rng(0)
        q = compute_query(make_set(seed=2), 4)
        msg = QueryMessage.from_query(q, omega=0.125)
        back = QueryMessage.from_wire(json.loads(json.dumps(msg.to_wire(compact=True))))
        assert back.query_id == q.query_id
        assert np.array_equal(back.projection, q.directions)
        assert back.omega == 0.125

    def test_query_round_trip_nested_arrays(self):
        q = compute_query(make_set(seed=3), 3)
        msg = QueryMessage.from_query(q)
        back = QueryMessage.from_wire(json.loads(json.dumps(msg.to_wire(compact=False))))
        assert np.array_equal(back.projection, q.directions)

    def test_default_query_under_64kib(self):
        spec = random_mixture_spec(num_classes=10, dim=512, points_per_class=10, seed=4)
        buyer = gaussian_mixture(spec)
        q = compute_query(buyer, 10)
        msg = QueryMessage.from_query(q, omega=0.1)
        payload = json.dumps(msg.to_wire()).encode()
        assert len(payload) < 64 * 1024

    def test_report_round_trip(self, seller_set):
        q = compute_query(seller_set, 4)
        report = seller_report(seller_set, q)
        msg = ReportMessage.from_report(report, q.query_id, "s1")
        back = ReportMessage.from_wire(json.loads(json.dumps(msg.to_wire())))
        rebuilt = back.to_report()
        np.testing.assert_array_equal(rebuilt.mean_vector, report.mean_vector)
        np.testing.assert_array_equal(rebuilt.projected_cov, report.projected_cov)
        assert rebuilt.volume == report.volume
        assert rebuilt.vendi == report.vendi

    def test_unknown_fields_ignored(self):
        q = compute_query(make_set(seed=5), 3)
        wire = QueryMessage.from_query(q).to_wire()
        wire["future_extension"] = {"x": 1}
        QueryMessage.from_wire(wire)  # must not raise

    def test_schema_violations(self):
        with pytest.raises(SchemaError):
            QueryMessage.from_wire({"type": "query", "query_id": "a", "k": 2, "d": 2})
        with pytest.raises(SchemaError):
            QueryMessage.from_wire(
                {"type": "query", "query_id": "a", "k": 2, "d": 2, "projection": [[1.0, 0.0]]}
            )
        with pytest.raises(SchemaError):
            ReportMessage.from_wire({"type": "report", "query_id": "a"})


class TestSellerService:
    def test_round_trip_matches_local_report(self, server, seller_set):
        buyer = make_set(seed=6, name="buyer")
        q = compute_query(buyer, 5)
        omega = default_omega(buyer, q)
        msg = QueryMessage.from_query(q, omega=omega)
        reply = query_seller(server.address, msg, timeout=5)
        assert reply.query_id == q.query_id
        assert reply.seller_id == "s1"
        local = seller_report(seller_set, q, MeasureConfig(omega=omega))
        remote = reply.to_report()
        np.testing.assert_allclose(remote.mean_vector, local.mean_vector, atol=1e-9)
        np.testing.assert_allclose(remote.lambdas, local.lambdas, atol=1e-9)
        np.testing.assert_allclose(remote.projected_cov, local.projected_cov, atol=1e-9)
        assert remote.volume == pytest.approx(local.volume, abs=1e-9)
        assert remote.robust_volume == pytest.approx(local.robust_volume, abs=1e-9)
        assert remote.vendi == pytest.approx(local.vendi, abs=1e-9)
        assert remote.dispersion == pytest.approx(local.dispersion, abs=1e-9)
        assert remote.n_points == seller_set.n

    def test_nested_array_projection_accepted(self, server):
        buyer = make_set(seed=7)
        q = compute_query(buyer, 3)
        payload = json.dumps(QueryMessage.from_query(q).to_wire(compact=False)).encode()
        obj = raw_exchange(server.address, payload)
        assert obj["type"] == "report"
        assert obj["query_id"] == q.query_id

    def test_non_orthonormal_projection_rejected(self, server):
        bad = np.ones((2, 16)) * 0.3
        wire = {
            "type": "query",
            "query_id": "bad",
            "k": 2,
            "d": 16,
            "projection": bad.tolist(),
        }
        obj = raw_exchange(server.address, json.dumps(wire).encode())
        assert obj["type"] == "error"
        assert "invalid query" in obj["message"]

    def test_dimension_mismatch_rejected(self, server):
        q = compute_query(make_set(seed=8, d=8), 3)
        with pytest.raises(SellerError, match="dimension"):
            query_seller(server.address, QueryMessage.from_query(q), timeout=5)

    def test_malformed_json_gets_error_and_connection_survives(self, server):
        obj = raw_exchange(server.address, b"this is not json")
        assert obj["type"] == "error"
        # The server keeps accepting fresh connections afterwards.
        q = compute_query(make_set(seed=9), 3)
        reply = query_seller(server.address, QueryMessage.from_query(q), timeout=5)
        assert reply.seller_id == "s1"

    def test_oversized_frame_rejected(self, seller_set):
        srv = serve_seller(
            ("127.0.0.1", 0), seller_set, SellerConfig(seller_id="s2", frame_limit=1024)
        )
        try:
            obj = raw_exchange(srv.address, b"x" * 2048)
            assert obj["type"] == "error"
            assert "protocol error" in obj["message"]
        finally:
            srv.shutdown()

    def test_replay_yields_identical_payload(self, server):
        q = compute_query(make_set(seed=10), 3)
        payload = json.dumps(QueryMessage.from_query(q).to_wire()).encode()
        a = raw_exchange(server.address, payload)
        b = raw_exchange(server.address, payload)
        assert json.dumps(a, sort_keys=True) == json.dumps(b, sort_keys=True)

    def test_concurrent_clients_get_correct_reports(self, server, seller_set):
        queries = [compute_query(make_set(seed=20 + i), 4) for i in range(8)]
        expected = [seller_report(seller_set, q) for q in queries]
        results = [None] * len(queries)
        errors = []

        def worker(i):
            try:
                results[i] = query_seller(
                    server.address, QueryMessage.from_query(queries[i]), timeout=10
                )
            except Exception as exc:  # pragma: no cover - failure reporting
                errors.append((i, exc))

        threads = [threading.Thread(target=worker, args=(i,)) for i in range(len(queries))]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert not errors
        for reply, q, want in zip(results, queries, expected):
            assert reply.query_id == q.query_id
            got = reply.to_report()
            np.testing.assert_allclose(got.projected_cov, want.projected_cov, atol=1e-9)

    def test_unreachable_port(self):
        q = compute_query(make_set(seed=11), 3)
        with socket.socket() as probe:
            probe.bind(("127.0.0.1", 0))
            dead_port = probe.getsockname()[1]
        with pytest.raises((ConnectionRefusedError, ConnectionError, OSError)):
            query_seller(("127.0.0.1", dead_port), QueryMessage.from_query(q), timeout=2)

    def test_truncated_reply_is_schema_error(self):
        # A fake "seller" that closes mid-frame.
        lst = socket.socket()
        lst.bind(("127.0.0.1", 0))
        lst.listen(1)

        def bad_seller():
            conn, _ = lst.accept()
            conn.recv(1 << 16)
            conn.sendall(struct.pack("<I", 100) + b"short")
            conn.close()

        t = threading.Thread(target=bad_seller, daemon=True)
        t.start()
        q = compute_query(make_set(seed=12), 3)
        try:
            with pytest.raises(SchemaError, match="truncated"):
                query_seller(lst.getsockname(), QueryMessage.from_query(q), timeout=5)
        finally:
            lst.close()


class TestDecoys:
    def test_decoys_are_orthonormal_and_deterministic(self):
        buyer = make_set(seed=13, d=24)
        plan = DecoyPlan(num_decoys=6, strategies=("random_directions", "shuffled_buyer"))
        a = make_decoys(buyer, plan, seed=5, k=4)
        b = make_decoys(buyer, plan, seed=5, k=4)
        for da, db in zip(a, b):
            defect = np.max(np.abs(da.query.directions @ da.query.directions.T - np.eye(4)))
            assert defect < 1e-8
            np.testing.assert_array_equal(da.query.directions, db.query.directions)

    def test_random_decoys_far_from_real_query(self):
        spec = random_mixture_spec(num_classes=10, dim=512, points_per_class=20, seed=14)
        buyer = gaussian_mixture(spec)
        real = compute_query(buyer, 4)
        hits = 0
        for seed in range(10):
            (decoy,) = make_decoys(buyer, DecoyPlan(num_decoys=1), seed=seed, k=4)
            overlap = np.abs(
                np.sum(real.directions * decoy.query.directions, axis=1)
            )
            if np.all(overlap < 0.5):
                hits += 1
        assert hits >= 9

    def test_foreign_strategy_requires_sets(self):
        buyer = make_set(seed=15)
        plan = DecoyPlan(num_decoys=2, strategies=("foreign_dataset",))
        with pytest.raises(ValueError, match="foreign"):
            make_decoys(buyer, plan, seed=0, k=3)

    def test_decoy_ratio_values(self):
        assert decoy_ratio(2.0, [1.0, 1.0, 1.0], 0.5) == pytest.approx(2.0)
        assert decoy_ratio(3.0, [1.0, 2.0, 4.0], 0.5) == pytest.approx(1.5)
        assert decoy_ratio(1.0, [1.0, 1.0], 0.9) == pytest.approx(1.0)
        with pytest.raises(ValueError, match="degenerate"):
            decoy_ratio(1.0, [0.0, 0.0], 0.5)
        with pytest.raises(ValueError):
            decoy_ratio(1.0, [], 0.5)


class TestHonestyScreen:
    def test_constant_cheater_rejected(self):
        buyer = make_set(seed=16)
        q = compute_query(buyer, 3)
        buyer_rep = seller_report(buyer, q)
        # A cheater replays identical seller-side values for every query.
        plan = DecoyPlan(num_decoys=3, quantile=0.5, threshold=1.2)
        real_pair = (buyer_rep, buyer_rep)
        decoy_pairs = [(buyer_rep, buyer_rep)] * 3
        result = honesty_screen(real_pair, decoy_pairs, MeasureKind.VENDI, plan)
        assert result.ratio == pytest.approx(1.0)
        assert not result.accepted

    def test_difference_orientation_inverts(self):
        def rep(lambdas):
            base = make_set(seed=17)
            q = compute_query(base, 2)
            r = seller_report(base, q)
            from fedmeasure.measures import MeasurementReport

            return MeasurementReport(
                mean_vector=r.mean_vector,
                lambdas=np.asarray(lambdas, dtype=float),
                projected_cov=r.projected_cov,
                volume=r.volume,
                robust_volume=r.robust_volume,
                vendi=r.vendi,
                dispersion=r.dispersion,
                n_points=r.n_points,
            )

        plan = DecoyPlan(num_decoys=2, quantile=0.5, threshold=1.2)
        buyer_rep = rep([2.0, 2.0])
        near = rep([1.9, 2.1])  # difference ~ 0.05: close spectra
        far = rep([0.4, 8.0])  # difference 0.775: far spectra
        # Honest: low difference on the real query, high on decoys -> accepted.
        res = honesty_screen((buyer_rep, near), [(buyer_rep, far)] * 2, MeasureKind.DIFFERENCE, plan)
        assert res.ratio < 1.0 / plan.threshold
        assert res.accepted
        # Constant spectra everywhere: ratio 1 -> rejected on the inverted kind.
        res = honesty_screen((buyer_rep, far), [(buyer_rep, far)] * 2, MeasureKind.DIFFERENCE, plan)
        assert res.ratio == pytest.approx(1.0)
        assert not res.accepted

    def test_screen_seller_local_honest(self):
        buyer = make_set(seed=18, n=120, d=16)
        seller = make_set(seed=19, n=400, d=16)  # same generator family
        plan = DecoyPlan(num_decoys=4, strategies=("random_directions",), quantile=0.5)

        def fetch(query, omega):
            return seller_report(seller, query, MeasureConfig(omega=omega))

        results = screen_seller(buyer, fetch, plan, seed=3, k=4, kinds=(MeasureKind.VENDI,))
        assert MeasureKind.VENDI in results
        assert np.isfinite(results[MeasureKind.VENDI].ratio)

    def test_screen_seller_remote_matches_local(self, server, seller_set):
        buyer = make_set(seed=20, name="buyer")
        plan = DecoyPlan(num_decoys=3, strategies=("shuffled_buyer",), quantile=0.5)

        def remote_fetch(query, omega):
            msg = QueryMessage.from_query(query, omega=omega)
            return query_seller(server.address, msg, timeout=5).to_report()

        def local_fetch(query, omega):
            return seller_report(seller_set, query, MeasureConfig(omega=omega))

        remote = screen_seller(buyer, remote_fetch, plan, seed=4, k=4)
        local = screen_seller(buyer, local_fetch, plan, seed=4, k=4)
        for kind in MeasureKind:
            assert remote[kind].ratio == pytest.approx(local[kind].ratio, abs=1e-9)
