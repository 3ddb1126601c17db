"""Command-line front end.

Commands: ``simulate``, ``fit``, ``predict``, ``bench-precond`` and
``spectrum``. Settings come from flags, then an optional JSON config file
(``--config``), then built-in defaults, in that order of precedence.

Exit codes: 0 on success, 1 on numerical failure (a diagnostics JSON is
printed to stderr), 2 on usage or input errors.
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import pandas as pd

from krylovgmm.inference import Backend, GroupedDesign, ModeNotConverged, ModelParams, nll, normal_matrix
from krylovgmm.krylov import CGBreakdown
from krylovgmm.optimizer import LineSearchFailure, OptimizerConfig, default_init, fit
from krylovgmm.oracle import OracleCapExceeded
from krylovgmm.prediction import PREDICTION_METHODS, FittedModel, PredictionSpec, predict, predict_response
from krylovgmm.preconditioners import PRECONDITIONER_KINDS, ZICBreakdown
from krylovgmm.simgen import SimConfig, simulate_dataset

__all__ = ["RunConfig", "main", "run", "UsageError"]

WORKERS_ENV = "KRYLOVGMM_WORKERS"
FLOAT_FMT = "%.17g"


class UsageError(Exception):
    """Bad flags, files or data; exit status 2."""


NUMERICAL_ERRORS = (
    FloatingPointError,
    np.linalg.LinAlgError,
    ArithmeticError,
    ModeNotConverged,
    CGBreakdown,
    LineSearchFailure,
    ZICBreakdown,
    OracleCapExceeded,
)


@dataclass
class RunConfig:
    """All settings of one command; defaults follow the customary experiment setup."""

    command: str = ""
    data: str | None = None
    new: str | None = None
    fit: str | None = None
    out: str | None = None
    out_test: str | None = None
    truth: str | None = None
    response: str = "y"
    fixed: str | None = None
    groups: str | None = None
    intercept: bool = True
    likelihood: str = "gaussian"
    backend: str = "krylov"
    preconditioner: str = "ssor"
    t: int = 50
    s: int = 1000
    k: int = 50
    rank: int = 50
    cg_tol: float = 1e-2
    cg_tol_pred: float = 1e-3
    seed: int = 0
    method: str = "alg1"
    optimizer: str = "lbfgs"
    max_iter: int = 1000
    std_errors: bool = False
    reps: int = 30
    preconditioners: str = "ssor,zic,diagonal,none"
    workers: int | None = None
    n: int = 1000
    m: str = "100,100"
    theta: str = "0.25,0.25"
    sigma2: float = 0.25
    design: str = "balanced"
    n_test: int = 0
    n_cov: int = 5
    include_eigenvalues: bool = False

    def backend_obj(self) -> Backend:
        return Backend(
            kind=self.backend,
            preconditioner=self.preconditioner,
            t=self.t,
            seed=self.seed,
            cg_tol=self.cg_tol,
            cg_tol_pred=self.cg_tol_pred,
            rank=self.rank,
        )


_FIELDS = {f.name: f for f in fields(RunConfig)}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="krylovgmm", description=__doc__.split("\n\n")[0])
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON file with default settings")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int, help=f"numba threads (also {WORKERS_ENV})")
        sp.add_argument("--out", help="output path")

    def model(sp):
        sp.add_argument("--data", help="training CSV")
        sp.add_argument("--response")
        sp.add_argument("--fixed", help="comma-separated covariate columns (default: all others)")
        sp.add_argument("--groups", help="comma-separated grouping columns (default: g1, g2, ...)")
        sp.add_argument("--no-intercept", dest="intercept", action="store_const", const=False)
        sp.add_argument("--likelihood", choices=["gaussian", "bernoulli"])
        sp.add_argument("--backend", choices=["krylov", "cholesky"])
        sp.add_argument("--preconditioner", choices=PRECONDITIONER_KINDS)
        sp.add_argument("--t", type=int, help="probe vectors for SLQ and STE")
        sp.add_argument("--rank", type=int, help="rank of low-rank preconditioners")
        sp.add_argument("--cg-tol", type=float)
        sp.add_argument("--cg-tol-pred", type=float)

    s = sub.add_parser("simulate", help="simulate a data set")
    common(s)
    s.add_argument("--n", type=int)
    s.add_argument("--m", help="levels per factor, comma-separated")
    s.add_argument("--theta", help="random-effect variances, comma-separated")
    s.add_argument("--sigma2", type=float)
    s.add_argument("--likelihood", choices=["gaussian", "bernoulli"])
    s.add_argument("--design", choices=["balanced", "biregular", "unbalanced"])
    s.add_argument("--n-test", type=int)
    s.add_argument("--n-cov", type=int)
    s.add_argument("--out-test", help="CSV for the test rows")
    s.add_argument("--truth", help="JSON with the true parameters")

    f = sub.add_parser("fit", help="estimate parameters")
    common(f)
    model(f)
    f.add_argument("--optimizer", choices=["lbfgs", "gd", "fisher"])
    f.add_argument("--max-iter", type=int)
    f.add_argument("--std-errors", action="store_const", const=True)

    pr = sub.add_parser("predict", help="predict for new rows")
    common(pr)
    model(pr)
    pr.add_argument("--fit", help="fit JSON written by the fit command")
    pr.add_argument("--new", help="CSV with prediction rows")
    pr.add_argument("--method", choices=PREDICTION_METHODS)
    pr.add_argument("--s", type=int, help="simulation or probe count")
    pr.add_argument("--k", type=int, help="Lanczos rank")

    b = sub.add_parser("bench-precond", help="repeat stochastic likelihood evaluations per preconditioner")
    common(b)
    model(b)
    b.add_argument("--fit", help="evaluate at these parameters (default: initial values)")
    b.add_argument("--reps", type=int)
    b.add_argument("--preconditioners", help="comma-separated kinds")

    sp_ = sub.add_parser("spectrum", help="spectra of preconditioned matrices with bound checks")
    common(sp_)
    model(sp_)
    sp_.add_argument("--fit", help="evaluate at these parameters (default: initial values)")
    sp_.add_argument("--preconditioners", help="comma-separated kinds")
    sp_.add_argument("--include-eigenvalues", action="store_const", const=True)
    return p


def resolve_config(argv: list[str] | None) -> RunConfig:
    """Parse flags and merge them over the config file and the defaults."""
    args = vars(_parser().parse_args(argv))
    cfg_path = args.pop("config", None)
    merged: dict = {}
    if cfg_path:
        try:
            file_cfg = json.loads(Path(cfg_path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {cfg_path}: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise UsageError(f"config {cfg_path} must hold a JSON object")
        for key, val in file_cfg.items():
            key = key.replace("-", "_")
            if key not in _FIELDS or key == "command":
                raise UsageError(f"config {cfg_path}: unknown key '{key}'")
            merged[key] = val
    merged.update({k: v for k, v in args.items() if v is not None})
    return RunConfig(**merged)


def _set_workers(cfg: RunConfig) -> None:
    n = cfg.workers
    if n is None and os.environ.get(WORKERS_ENV):
        try:
            n = int(os.environ[WORKERS_ENV])
        except ValueError as exc:
            raise UsageError(f"{WORKERS_ENV} must be an integer") from exc
    if n:
        import numba

        numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


def _split(s: str | None) -> list[str] | None:
    if s is None:
        return None
    return [c.strip() for c in s.split(",") if c.strip()]


def _floats(s, name) -> tuple[float, ...]:
    try:
        return tuple(float(v) for v in (s.split(",") if isinstance(s, str) else s))
    except ValueError as exc:
        raise UsageError(f"--{name} must be comma-separated numbers") from exc


def _ints(s, name) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in (s.split(",") if isinstance(s, str) else s))
    except ValueError as exc:
        raise UsageError(f"--{name} must be comma-separated integers") from exc


def _require(path: str | None, flag: str) -> Path:
    if not path:
        raise UsageError(f"--{flag} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"--{flag}: file not found: {path}")
    return p


def _columns(cfg: RunConfig, header: list[str], need_response: bool = True):
    groups = _split(cfg.groups)
    if groups is None:
        groups = sorted((c for c in header if re.fullmatch(r"g\d+", c)), key=lambda c: int(c[1:]))
        if not groups:
            raise UsageError("no grouping columns given and none named g1, g2, ...")
    fixed = _split(cfg.fixed)
    if fixed is None:
        fixed = [c for c in header if c != cfg.response and c not in groups]
    wanted = ([cfg.response] if need_response else []) + fixed + groups
    for c in wanted:
        if c not in header:
            raise UsageError(f"unknown column '{c}'")
    return fixed, groups


def _read_table(path: Path, cfg: RunConfig, need_response: bool = True):
    """Read a headered CSV; numeric columns are checked with line-precise messages."""
    header = list(pd.read_csv(path, nrows=0).columns)
    fixed, groups = _columns(cfg, header, need_response)
    df = pd.read_csv(path, dtype={g: str for g in groups})
    numeric = ([cfg.response] if need_response else []) + fixed
    for c in numeric:
        raw = df[c]
        vals = pd.to_numeric(raw, errors="coerce")
        bad = np.flatnonzero(vals.isna().to_numpy())
        if bad.size:
            i = int(bad[0])
            raise UsageError(f"{path} line {i + 2}: column '{c}' has non-numeric or missing value {raw.iloc[i]!r}")
        df[c] = vals.astype(float)
    return df, fixed, groups


def _design(df, cfg, fixed, groups) -> GroupedDesign:
    return GroupedDesign.from_frame(df, cfg.response, fixed, groups, intercept=cfg.intercept)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def write_json(path: str | None, obj) -> None:
    text = json.dumps(_jsonable(obj), indent=2, allow_nan=False) + "\n"
    if path:
        Path(path).write_text(text)
    else:
        sys.stdout.write(text)


def _write_csv(path: str | None, df: pd.DataFrame) -> None:
    if path:
        df.to_csv(path, index=False, float_format=FLOAT_FMT)
    else:
        df.to_csv(sys.stdout, index=False, float_format=FLOAT_FMT)


def _params_from_fit(path: Path, data: GroupedDesign, likelihood: str) -> ModelParams:
    rec = json.loads(path.read_text())
    try:
        theta = rec["theta"]
        beta = rec["beta"]
        lik = rec["model"]["likelihood"]
    except KeyError as exc:
        raise UsageError(f"{path}: missing key {exc}") from exc
    if lik != likelihood:
        raise UsageError(f"{path} was fitted with likelihood {lik!r}, not {likelihood!r}")
    if len(theta) != data.K or len(beta) != data.p:
        raise UsageError(f"{path} does not match the model dimensions of the data")
    if lik == "gaussian":
        return ModelParams.gaussian(theta, rec["sigma2"], beta)
    return ModelParams.bernoulli(theta, beta)


def _model_record(cfg: RunConfig, fixed, groups) -> dict:
    return {
        "response": cfg.response,
        "fixed": fixed,
        "groups": groups,
        "intercept": cfg.intercept,
        "likelihood": cfg.likelihood,
    }


def cmd_simulate(cfg: RunConfig) -> int:
    try:
        sc = SimConfig(
            n=cfg.n,
            m=_ints(cfg.m, "m"),
            theta=_floats(cfg.theta, "theta"),
            sigma2=cfg.sigma2,
            likelihood=cfg.likelihood,
            n_cov=cfg.n_cov,
            design=cfg.design,
            n_test=cfg.n_test,
            seed=cfg.seed,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    sim = simulate_dataset(sc)
    _write_csv(cfg.out, sim.frame("train"))
    if cfg.out_test:
        _write_csv(cfg.out_test, sim.frame("test"))
    if cfg.truth:
        truth = sim.truth()
        truth["re_test"] = sim.re_test
        write_json(cfg.truth, truth)
    return 0


def cmd_fit(cfg: RunConfig) -> int:
    df, fixed, groups = _read_table(_require(cfg.data, "data"), cfg)
    data = _design(df, cfg, fixed, groups)
    backend = cfg.backend_obj()
    res = fit(
        data,
        backend=backend,
        config=OptimizerConfig(method=cfg.optimizer, max_iter=cfg.max_iter),
        likelihood=cfg.likelihood,
        compute_std_errors=cfg.std_errors,
    )
    p = res.params
    names = p.names(data.covariate_names)
    values = np.concatenate([p.theta, p.aux, p.beta])
    out = {
        "model": _model_record(cfg, fixed, groups),
        "backend": asdict(backend),
        "optimizer": asdict(OptimizerConfig(method=cfg.optimizer, max_iter=cfg.max_iter)),
        "data": {"n": data.n, "m": data.m, "sizes": data.sizes},
        "estimates": dict(zip(names, values)),
        "theta": p.theta,
        "sigma2": p.sigma2 if p.likelihood == "gaussian" else None,
        "beta": p.beta,
        "std_errors": None if res.std_errors is None else dict(zip(names, res.std_errors)),
        "nll": res.nll,
        "nll_trace": res.nll_trace,
        "iterations": res.iterations,
        "n_evals": res.n_evals,
        "converged": res.converged,
        "reason": res.reason,
        "diagnostics": res.diagnostics,
        "timing": {"runtime_s": res.runtime},
    }
    write_json(cfg.out, out)
    return 0


def cmd_predict(cfg: RunConfig) -> int:
    fit_path = _require(cfg.fit, "fit")
    rec = json.loads(fit_path.read_text())
    mrec = rec.get("model", {})
    for key in ("response", "fixed", "groups", "intercept", "likelihood"):
        if key in mrec:
            val = mrec[key]
            setattr(cfg, key, ",".join(val) if isinstance(val, list) else val)
    df, fixed, groups = _read_table(_require(cfg.data, "data"), cfg)
    data = _design(df, cfg, fixed, groups)
    new_path = _require(cfg.new, "new")
    header = list(pd.read_csv(new_path, nrows=0).columns)
    has_resp = cfg.response in header
    new_df, _, _ = _read_table(new_path, cfg, need_response=has_resp)
    params = _params_from_fit(fit_path, data, cfg.likelihood)
    spec = PredictionSpec.from_labels(
        data,
        [new_df[g].to_numpy() for g in groups],
        new_df[fixed].to_numpy(dtype=float) if fixed else None,
        params.theta,
        intercept=cfg.intercept,
    )
    model = FittedModel(data, params, cfg.backend_obj())
    dist = predict(spec, model, method=cfg.method, s=cfg.s, k=cfg.k, seed=cfg.seed)
    predict_response(dist, params)
    out = pd.DataFrame(
        {
            "row": np.arange(spec.n_p),
            "mean": dist.mean,
            "var": dist.var,
            "re_mean": dist.re_mean,
            "response_mean": dist.response_mean,
            "response_var": dist.response_var,
        }
    )
    _write_csv(cfg.out, out)
    if dist.n_clamped:
        print(f"note: {dist.n_clamped} negative variance estimates clamped to 0", file=sys.stderr)
    return 0


def _eval_params(cfg: RunConfig, data: GroupedDesign) -> ModelParams:
    if cfg.fit:
        return _params_from_fit(_require(cfg.fit, "fit"), data, cfg.likelihood)
    return default_init(data, cfg.likelihood)


def _kinds(cfg: RunConfig) -> list[str]:
    kinds = _split(cfg.preconditioners) or []
    for k in kinds:
        if k not in PRECONDITIONER_KINDS:
            raise UsageError(f"unknown preconditioner '{k}'; choose from {', '.join(PRECONDITIONER_KINDS)}")
    return kinds


def cmd_bench(cfg: RunConfig) -> int:
    df, fixed, groups = _read_table(_require(cfg.data, "data"), cfg)
    data = _design(df, cfg, fixed, groups)
    params = _eval_params(cfg, data)
    kinds = _kinds(cfg)
    exact = None
    try:
        exact = nll(data, params, Backend(kind="cholesky"), need_grad=False).value
    except OracleCapExceeded:
        pass
    rows = []
    for kind in kinds:
        vals, times = [], []
        for r in range(cfg.reps):
            bk = cfg.backend_obj().with_(kind="krylov", preconditioner=kind, seed=cfg.seed + r)
            t0 = time.perf_counter()
            vals.append(nll(data, params, bk, need_grad=False).value)
            times.append(time.perf_counter() - t0)
        vals = np.asarray(vals)
        rows.append(
            {
                "preconditioner": kind,
                "likelihood": params.likelihood,
                "reps": cfg.reps,
                "mean": vals.mean(),
                "sd": vals.std(ddof=1) if vals.size > 1 else np.nan,
                "exact": np.nan if exact is None else exact,
                "bias": np.nan if exact is None else vals.mean() - exact,
                "time_mean": float(np.mean(times)),
                "time_sd": float(np.std(times, ddof=1)) if len(times) > 1 else np.nan,
            }
        )
    _write_csv(cfg.out, pd.DataFrame(rows))
    return 0


def cmd_spectrum(cfg: RunConfig) -> int:
    from krylovgmm.inference import find_mode
    from krylovgmm.spectral import compare_reports, design_info, preconditioned_spectrum, theorem_bound_report

    df, fixed, groups = _read_table(_require(cfg.data, "data"), cfg)
    data = _design(df, cfg, fixed, groups)
    params = _eval_params(cfg, data)
    if params.likelihood == "gaussian":
        w = np.full(data.n, 1.0 / params.sigma2)
        s2 = params.sigma2
    else:
        w = find_mode(data, params, Backend(kind="cholesky")).w
        s2 = None
    M = normal_matrix(data, params, w)
    info = design_info(data.Z, w, params.theta, s2)
    reports = {}
    for kind in _kinds(cfg):
        try:
            rep = preconditioned_spectrum(M, kind, info)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        theorem_bound_report(rep, info)
        reports[kind] = rep
    out = {
        "design": info.to_dict(),
        "reports": {k: r.to_dict(cfg.include_eigenvalues) for k, r in reports.items()},
    }
    if "ssor" in reports and "diagonal" in reports:
        out["comparison"] = [c.to_dict() for c in compare_reports(reports["ssor"], reports["diagonal"], info)]
    write_json(cfg.out, out)
    return 0


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "bench-precond": cmd_bench,
    "spectrum": cmd_spectrum,
}


def run(cfg: RunConfig) -> int:
    """Execute one command and map failures to exit codes."""
    try:
        _set_workers(cfg)
        return COMMANDS[cfg.command](cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NUMERICAL_ERRORS as exc:
        diag = {"error": type(exc).__name__, "message": str(exc), "command": cfg.command}
        print(json.dumps(diag), file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main(argv: list[str] | None = None) -> int:
    try:
        cfg = resolve_config(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return run(cfg)


if __name__ == "__main__":
    sys.exit(main())
