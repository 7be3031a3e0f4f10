"""HTTP API wrapping the measurement core.

The service is stateless: every request carries what it needs. File paths
are resolved on the service host (client and service share a filesystem in
the single-machine setup); scenarios can be sent inline to avoid that
assumption. Seller exchanges still run over the raw TCP protocol — the
endpoints under /buyer act as the buyer-side client.
"""

from __future__ import annotations

from dataclasses import replace

from fastapi import FastAPI, HTTPException

from .. import __version__
from ..data import (
    EmbeddingFormatError,
    gaussian_mixture,
    random_mixture_spec,
    read_embeddings,
    write_embeddings,
)
from ..downstream import run_correlation_experiment
from ..marketplace import (
    Scenario,
    load_scenario,
    run_duplicate_sweep,
    run_noise_sweep,
    run_ranking,
    run_size_sweep,
    scenario_from_dict,
)
from ..measures import (
    MeasureConfig,
    MeasureKind,
    compute_query,
    default_omega,
    evaluate,
    seller_report,
)
from ..protocol import DecoyPlan, ProtocolError, QueryMessage, query_seller, screen_seller
from . import schemas


def _fail(exc: Exception) -> HTTPException:
    return HTTPException(status_code=400, detail=str(exc))


def _load_embeddings(path: str):
    try:
        return read_embeddings(path)
    except FileNotFoundError as exc:
        raise HTTPException(status_code=400, detail=f"no such file: {path}") from exc
    except EmbeddingFormatError as exc:
        raise _fail(exc) from exc


def _resolve_scenario(payload: schemas.ScenarioPayload) -> Scenario:
    if (payload.scenario is None) == (payload.scenario_path is None):
        raise HTTPException(
            status_code=400, detail="provide exactly one of scenario or scenario_path"
        )
    try:
        if payload.scenario is not None:
            scenario = scenario_from_dict(payload.scenario)
        else:
            scenario = load_scenario(payload.scenario_path)
    except FileNotFoundError as exc:
        raise HTTPException(status_code=400, detail=str(exc)) from exc
    except (ValueError, TypeError, KeyError) as exc:
        raise _fail(exc) from exc
    if payload.seed is not None:
        scenario = replace(scenario, seed=payload.seed)
    return scenario


def _measure_values(buyer_rep, seller_rep, jitter) -> list:
    values = []
    for kind in MeasureKind:
        try:
            values.append(
                schemas.MeasureValue(
                    kind=kind.value, value=evaluate(kind, buyer_rep, seller_rep, jitter)
                )
            )
        except ValueError as exc:
            values.append(schemas.MeasureValue(kind=kind.value, error=str(exc)))
    return values


def create_app() -> FastAPI:
    app = FastAPI(
        title="fedmeasure",
        version=__version__,
        description="Federated data measurements for seller selection",
    )

    @app.get("/health", response_model=schemas.HealthResponse)
    def health():
        return schemas.HealthResponse(status="ok", version=__version__)

    @app.post("/datasets/generate", response_model=schemas.GenerateResponse)
    def generate(req: schemas.GenerateRequest):
        try:
            spec = random_mixture_spec(
                num_classes=req.classes,
                dim=req.dim,
                mean_scale=req.mean_scale,
                class_scale=req.class_scale,
                points_per_class=req.per_class,
                seed=req.seed,
            )
            dataset = gaussian_mixture(spec)
            if not req.labeled:
                from ..data import EmbeddingSet

                dataset = EmbeddingSet(vectors=dataset.vectors, name=dataset.name)
            write_embeddings(dataset, req.out_path)
        except (ValueError, OSError) as exc:
            raise _fail(exc) from exc
        return schemas.GenerateResponse(
            path=req.out_path, n=dataset.n, dim=dataset.dim, classes=req.classes
        )

    @app.post("/measure", response_model=schemas.MeasureResponse)
    def measure(req: schemas.MeasureRequest):
        buyer = _load_embeddings(req.buyer_path)
        seller = _load_embeddings(req.seller_path)
        try:
            query = compute_query(buyer, req.k)
            omega = req.omega if req.omega is not None else default_omega(buyer, query)
            config = MeasureConfig(center=req.center, jitter=req.jitter, omega=omega)
            buyer_rep = seller_report(buyer, query, config)
            seller_rep = seller_report(seller, query, config)
        except ValueError as exc:
            raise _fail(exc) from exc
        return schemas.MeasureResponse(
            buyer_n=buyer.n,
            seller_n=seller.n,
            k=req.k,
            omega=omega,
            values=_measure_values(buyer_rep, seller_rep, req.jitter),
        )

    @app.post("/buyer/query", response_model=schemas.RemoteQueryResponse)
    def remote_query(req: schemas.RemoteQueryRequest):
        buyer = _load_embeddings(req.buyer_path)
        try:
            query = compute_query(buyer, req.k)
            omega = req.omega if req.omega is not None else default_omega(buyer, query)
            config = MeasureConfig(center=req.center, omega=omega)
            buyer_rep = seller_report(buyer, query, config)
            msg = QueryMessage.from_query(query, omega=omega)
            reply = query_seller(req.address, msg, timeout=req.timeout_ms / 1000.0)
            seller_rep = reply.to_report()
        except (ValueError, ProtocolError, OSError) as exc:
            raise _fail(exc) from exc
        return schemas.RemoteQueryResponse(
            seller_id=reply.seller_id,
            query_id=reply.query_id,
            n_points=reply.n_points,
            values=_measure_values(buyer_rep, seller_rep, config.jitter),
        )

    @app.post("/buyer/screen", response_model=schemas.ScreenResponse)
    def screen(req: schemas.ScreenRequest):
        buyer = _load_embeddings(req.buyer_path)
        foreign = [_load_embeddings(p) for p in req.foreign_paths]
        seller_ids = set()

        def fetch(query, omega):
            msg = QueryMessage.from_query(query, omega=omega)
            reply = query_seller(req.address, msg, timeout=req.timeout_ms / 1000.0)
            seller_ids.add(reply.seller_id)
            return reply.to_report()

        try:
            plan = DecoyPlan(
                num_decoys=req.decoys,
                strategies=tuple(req.strategies),
                quantile=req.quantile,
                threshold=req.threshold,
            )
        except ValueError as exc:
            raise _fail(exc) from exc

        verdicts = []
        try:
            results = screen_seller(
                buyer,
                fetch,
                plan,
                seed=req.seed,
                k=req.k,
                foreign=foreign or None,
                config=MeasureConfig(center=req.center),
            )
        except (ValueError, ProtocolError, OSError) as exc:
            raise _fail(exc) from exc
        for kind in MeasureKind:
            result = results.get(kind)
            if result is None:
                continue
            verdicts.append(
                schemas.ScreenVerdict(
                    kind=kind.value,
                    ratio=result.ratio,
                    mu_real=result.mu_real,
                    accepted=result.accepted,
                )
            )
        return schemas.ScreenResponse(
            seller_id=seller_ids.pop() if seller_ids else "", verdicts=verdicts
        )

    @app.post("/experiments/ranking", response_model=schemas.RowsResponse)
    def ranking(req: schemas.RankingRequest):
        scenario = _resolve_scenario(req)
        orientations = {MeasureKind.DIFFERENCE: False} if req.minimize_difference else None
        try:
            result = run_ranking(scenario, orientations=orientations)
        except ValueError as exc:
            raise _fail(exc) from exc
        return schemas.RowsResponse(rows=result.to_rows())

    @app.post("/experiments/duplicates", response_model=schemas.RowsResponse)
    def duplicates(req: schemas.DuplicateSweepRequest):
        scenario = _resolve_scenario(req)
        try:
            result = run_duplicate_sweep(scenario, factors=tuple(req.factors))
        except ValueError as exc:
            raise _fail(exc) from exc
        return schemas.RowsResponse(rows=result.to_rows())

    @app.post("/experiments/noise", response_model=schemas.RowsResponse)
    def noise(req: schemas.NoiseSweepRequest):
        scenario = _resolve_scenario(req)
        try:
            result = run_noise_sweep(
                scenario,
                corruption_kinds=tuple(req.corruptions),
                severities=tuple(req.severities),
            )
        except ValueError as exc:
            raise _fail(exc) from exc
        return schemas.RowsResponse(rows=result.to_rows())

    @app.post("/experiments/size", response_model=schemas.RowsResponse)
    def size(req: schemas.SizeSweepRequest):
        scenario = _resolve_scenario(req)
        try:
            result = run_size_sweep(
                scenario,
                seller_sizes=tuple(req.seller_sizes) if req.seller_sizes else None,
                buyer_sizes=tuple(req.buyer_sizes) if req.buyer_sizes else None,
            )
        except ValueError as exc:
            raise _fail(exc) from exc
        return schemas.RowsResponse(rows=result.to_rows())

    @app.post("/experiments/correlation", response_model=schemas.RowsResponse)
    def correlation(req: schemas.CorrelationRequest):
        scenario = _resolve_scenario(req)
        try:
            result = run_correlation_experiment(scenario, task=req.task)
        except ValueError as exc:
            raise _fail(exc) from exc
        return schemas.RowsResponse(rows=result.to_rows())

    return app
