"""HTTP facade over the validation suite.

Every endpoint is a stateless compute job: the request carries the model
(or a full problem document), the parameters, and the seed; the response
carries typed rows plus ready-to-write CSV text, so clients (including the
bundled CLI) never re-derive numbers.  Identical requests produce
byte-identical payloads.
"""

from __future__ import annotations

import functools

from fastapi import FastAPI, HTTPException

from . import __version__, combinat, dyson, em, estimator, history, reporting
from .linalg import SingularMatrixError
from .models import (BUILTIN_MODELS, SdeProblem, TimeGrid, model_by_name,
                     problem_from_dict, validate_bounds)
from .prng import PcgStream
from .schemas import (EmConvergenceRequest, EmConvergenceResponse,
                      EstimateRequest, EstimateResponse, HistoryRequest,
                      HistoryResponse, KhintchineRequest, KhintchineResponse,
                      ModelRequest, ReportRequest, ReportResponse,
                      SeriesErrorRequest, SeriesErrorResponse,
                      ValidateBoundsRequest, ValidateBoundsResponse)

app = FastAPI(title="qsdelab", version=__version__)

_BOUND_ERRORS = (history.BoundViolationError, dyson.ContainmentError,
                 estimator.ModeGatingError)
_CONFIG_ERRORS = (ValueError, KeyError, dyson.FeasibilityError,
                  estimator.PlanInfeasibleError, SingularMatrixError)


def _problem(req: ModelRequest) -> SdeProblem:
    if req.problem is not None:
        return problem_from_dict(req.problem)
    return model_by_name(req.model)


def _guard(fn):
    @functools.wraps(fn)
    def wrapped(req):
        try:
            return fn(req)
        except _BOUND_ERRORS as exc:
            raise HTTPException(
                status_code=409,
                detail={"category": "bound", "message": str(exc)}) from exc
        except _CONFIG_ERRORS as exc:
            raise HTTPException(
                status_code=422,
                detail={"category": "config", "message": str(exc)}) from exc
    return wrapped


@app.get("/health")
def health():
    return {"status": "ok", "version": __version__}


@app.get("/models")
def models_index():
    return {"models": sorted(BUILTIN_MODELS)}


@app.post("/validate-bounds", response_model=ValidateBoundsResponse)
@_guard
def validate_bounds_ep(req: ValidateBoundsRequest):
    p = _problem(req)
    report = validate_bounds(p, req.samples)
    rows = [{"name": c.name, "measured": c.measured, "declared": c.declared,
             "passed": c.passed} for c in report.checks]
    csv = reporting.csv_text(
        ("model", "check", "measured", "declared", "pass"),
        [(p.name, c.name, c.measured, c.declared, c.passed) for c in report.checks])
    return ValidateBoundsResponse(model=p.name, rows=rows,
                                  passed=report.passed, csv=csv)


_SERIES_CSV_HEADER = ("model", "eps_target", "K", "r", "M",
                      "measured_error", "bound", "pass")


def _series_response(rows):
    csv = reporting.csv_text(
        _SERIES_CSV_HEADER,
        [(w.model, w.eps_target, w.K, w.r, w.M, w.measured_error, w.bound,
          w.passed) for w in rows])
    return SeriesErrorResponse(
        rows=[w.__dict__ for w in rows], passed=all(w.passed for w in rows),
        csv=csv)


@app.post("/dyson-error", response_model=SeriesErrorResponse)
@_guard
def dyson_error_ep(req: SeriesErrorRequest):
    p = _problem(req)
    rows = []
    for eps in req.eps:
        K, r, M = dyson.choose_krm_phi(p, eps)
        K = max(K + req.k_offset, 0)
        rows.append(dyson.dyson_error_bound_check(p, TimeGrid(p.T, r, M), K, eps))
    return _series_response(rows)


@app.post("/covariance-error", response_model=SeriesErrorResponse)
@_guard
def covariance_error_ep(req: SeriesErrorRequest):
    p = _problem(req)
    rows = []
    for eps in req.eps:
        K, r, M = dyson.choose_krm_sigma(p, eps)
        K = max(K + req.k_offset, 0)
        rows.append(dyson.covariance_error_check(p, TimeGrid(p.T, r, M), K, eps))
    return _series_response(rows)


@app.post("/history", response_model=HistoryResponse)
@_guard
def history_ep(req: HistoryRequest):
    p = _problem(req)
    stream = PcgStream(seed=req.seed, stream_id=req.stream_id)
    params = history.history_params(p, req.eps, n_samples=req.n_samples,
                                    delta=req.delta)
    run = history.history_state(
        p, stream, req.sample, req.eps, padded=req.padded, R=req.R,
        qlss_mode=req.qlss_mode, sqrt_mode=req.sqrt_mode, params=params,
        raise_on_violation=False)
    csv = reporting.csv_text(
        ("step", "deviation"),
        [(k, float(v)) for k, v in enumerate(run.per_step)])
    return HistoryResponse(
        model=p.name, deviation=run.deviation, budget=run.budget,
        prefactor=run.state.prefactor, u_b=run.state.U_B,
        qlss_eps=run.state.qlss_eps, K=params.K, r=params.r, M=float(params.M),
        per_step=[float(v) for v in run.per_step],
        checks={k: bool(v) for k, v in run.checks.items()},
        passed=run.passed, csv=csv)


@app.post("/em-convergence", response_model=EmConvergenceResponse)
@_guard
def em_convergence_ep(req: EmConvergenceRequest):
    p = _problem(req)
    stream = PcgStream(seed=req.seed, stream_id=req.stream_id)
    report = em.strong_convergence(p, req.r_list, req.paths, stream)
    rows = [{"r": r, "rms_error": e, "slope_fit": report.slope}
            for r, e in report.rows]
    csv = reporting.csv_text(("r", "rms_error", "bound_slope_fit"),
                             [(r, e, report.slope) for r, e in report.rows])
    return EmConvergenceResponse(model=p.name, rows=rows, slope=report.slope,
                                 slope_band=[-1.2, -0.8],
                                 passed=report.passed(), csv=csv)


@app.post("/estimate", response_model=EstimateResponse)
@_guard
def estimate_ep(req: EstimateRequest):
    p = _problem(req)
    stream = PcgStream(seed=req.seed, stream_id=req.stream_id)
    if req.algorithm not in ("multi", "terminal", "em"):
        raise ValueError("algorithm must be multi, terminal, or em")

    c_st = 0.0
    if req.algorithm == "em":
        conv_stream = PcgStream(seed=req.seed, stream_id=req.stream_id + 1000)
        conv = em.strong_convergence(p, [8, 16, 32, 64], req.conv_paths, conv_stream)
        c_st = em.estimate_strong_constant(conv)

    # index validation must wait for the plan's step count, so plan with a
    # provisional tensor first (plans use only the order and the norm)
    doc = req.observable.model_dump()
    max_idx = max(max(e["idx"]) for e in doc["entries"])
    provisional = estimator.observable_from_dict(doc, max_idx + 1)

    eps = req.eps
    if eps is None:
        if req.eps_prime_target is None:
            raise ValueError("provide eps or eps_prime_target")
        eps = estimator.eps_from_relative(p, provisional, req.algorithm,
                                          req.eps_prime_target, c_st)

    if req.algorithm == "multi":
        plan = estimator.plan_multi_time(p, provisional, eps, req.delta)
    elif req.algorithm == "terminal":
        plan = estimator.plan_terminal(p, provisional, eps, req.delta)
    else:
        plan = estimator.plan_em(p, provisional, eps, req.delta, c_st)
    dims = p.N if req.algorithm == "terminal" else p.N * (plan.r + 1)
    C = estimator.observable_from_dict(doc, dims)

    if req.repeats == 1:
        if req.algorithm == "multi":
            rep = estimator.estimate_multi_time(p, C, eps, req.delta, stream,
                                                oe_mode=req.oe_mode, plan=plan)
        elif req.algorithm == "terminal":
            rep = estimator.estimate_terminal(p, C, eps, req.delta, stream,
                                              oe_mode=req.oe_mode, plan=plan)
        else:
            rep = estimator.estimate_em(p, C, eps, req.delta, stream, c_st,
                                        oe_mode=req.oe_mode, plan=plan)
        passed = rep.within_eps is not False
        return EstimateResponse(
            algorithm=req.algorithm, model=p.name, mu_hat=rep.mu_hat, eps=eps,
            delta=req.delta, plan=rep.plan.as_dict(), query_ledger=rep.ledger,
            truth=rep.truth, abs_error=rep.abs_error, repeats=1,
            coverage=None, passed=passed)

    cover = estimator.estimate_coverage(p, C, req.algorithm, eps, req.delta,
                                        stream, req.repeats, c_st, plan=plan)
    passed = cover.coverage >= 1.0 - req.delta
    return EstimateResponse(
        algorithm=req.algorithm, model=p.name, mu_hat=cover.mu_hats[0], eps=eps,
        delta=req.delta, plan=cover.plan.as_dict(),
        query_ledger=estimator.query_ledger(cover.plan),
        truth=cover.truth, abs_error=cover.abs_errors[0], repeats=req.repeats,
        coverage=cover.coverage, passed=passed)


@app.post("/check-khintchine", response_model=KhintchineResponse)
@_guard
def check_khintchine_ep(req: KhintchineRequest):
    rows = combinat.check_khintchine_bound(req.kmax, req.lmax)
    csv = reporting.csv_text(("k", "l", "count", "bound", "pass"),
                             [(w.k, w.l, w.count, w.bound, w.passed)
                              for w in rows])
    return KhintchineResponse(
        rows=[w.__dict__ for w in rows],
        passed=all(w.passed for w in rows), csv=csv)


@app.post("/report", response_model=ReportResponse)
@_guard
def report_ep(req: ReportRequest):
    p = _problem(req)
    sections = {}

    bounds = validate_bounds(p)
    sections["validate_bounds"] = {
        "passed": bounds.passed,
        "rows": [c.__dict__ for c in bounds.checks],
    }

    kh = combinat.check_khintchine_bound(3, 5)
    sections["khintchine"] = {"passed": all(w.passed for w in kh),
                              "rows": len(kh)}

    if p.dyson_capable:
        K, r, M = dyson.choose_krm_phi(p, 1e-2)
        row = dyson.dyson_error_bound_check(p, TimeGrid(p.T, r, M), K, 1e-2)
        sections["series_error"] = {"passed": row.passed,
                                    "measured": row.measured_error,
                                    "bound": row.bound}

    grid = TimeGrid(p.T, max(em.min_steps(p), 8))
    norms = em.em_norm_report(p, grid)
    sections["stepping_norms"] = {
        "passed": norms.passed, "skipped": norms.skipped,
        "rows": [list(row) for row in norms.rows],
    }

    passed = all(sec.get("passed", True) for sec in sections.values())
    return ReportResponse(model=p.name, sections=sections, passed=passed)
