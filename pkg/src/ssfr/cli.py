"""Command-line driver.

Every subcommand reads an optional JSON config (``--config``); command-line
flags override the config, which overrides the built-in defaults.  Outputs
land in ``--out`` under fixed file names, and each run writes a
``manifest.json`` with digests of the effective config and the input files.

Exit codes: 0 success, 1 user or data error, 2 numerical failure.  Errors are
reported on stderr as a single ``E_CODE: message`` line.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import json
import logging
import platform
import sys
from pathlib import Path
from typing import Any

import numpy as np
import scipy

from . import __version__
from .analysis import coefficient_curves, contango_indicator, fitted_log_prices, functional_component, rmse_table
from .data import (
    AlignedDataset,
    DataError,
    IngestConfig,
    Tenor,
    align_panels,
    format_month,
    load_futures_csv,
    load_yields_csv,
    write_futures_csv,
    write_yields_csv,
)
from .kalman import FilterConfig, FilterError, FitConfig, FitResult, fit_mle, run_filter
from .kpca import KernelSpec, KpcaError, KpcaModel, factor_scores, fit_kpca
from .model import ModelParams, ParamError, build_matrices, simulate, simulate_yield_curves
from .rng import stream
from .stress import ShockScenario, StressConfig, StressError, bucket_report, stress_run

logger = logging.getLogger("ssfr")

DEFAULTS: dict[str, Any] = {
    "futures": None,
    "yields": None,
    "futures_tenors": None,
    "yield_tenors": [1, 3, 6, 9, 12],
    "yields_percent": False,
    "kernel": {"kind": "rbf", "bandwidth": None},
    "Q": 2,
    "eigen_tolerance": 1e-10,
    "center": False,
    "filter": {"a0": None, "P0": [[0.5, 0.0], [0.0, 0.5]], "symmetrize": True},
    "fit": {"n_starts": 8, "max_iter": 40000, "tol": 1e-8, "groups": None, "workers": 1},
    "seed": 0,
    "output": "out",
    "simulate": {
        "n_steps": 120,
        "start": "2010-01",
        "futures_tenors": list(range(1, 13)),
        "params": None,
    },
    "evaluate": {"ss_fit": None, "fr_fit": None, "filtered": False, "scale": "log", "short": 1, "long": 12},
    "stress": {"fit": None, "freeze_kpca": False, "freeze_bandwidth": False},
    "scenarios": [],
}

# truth used by `simulate` when no parameter file is given
DEFAULT_SIM_PARAMS = {
    "kappa_chi": 1.2, "kappa_xi": 0.25, "mu_xi": 1.0, "sigma_chi": 0.35, "sigma_xi": 0.2,
    "rho": 0.3, "lambda_chi": 0.05, "lambda_xi": 0.02,
}


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# config handling


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _set(cfg: dict, dotted: str, value: Any) -> None:
    if value is None:
        return
    *path, last = dotted.split(".")
    node = cfg
    for p in path:
        node = node.setdefault(p, {})
    node[last] = value


def load_config(args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"file not found: {path}")
        try:
            cfg = _merge(cfg, json.loads(path.read_text(encoding="utf-8")))
        except json.JSONDecodeError as exc:
            raise UsageError(f"invalid config JSON: {exc}") from None
    for dotted, attr in _OVERRIDES:
        _set(cfg, dotted, getattr(args, attr, None))
    if getattr(args, "kind", None) is not None:
        cfg["scenarios"] = [{
            "kind": args.kind, "start": args.start, "end": args.end,
            "multiplier": 2.0 if args.multiplier is None else args.multiplier,
        }]
    if getattr(args, "freeze_kpca", False):
        cfg["stress"]["freeze_kpca"] = True
    if getattr(args, "freeze_bandwidth", False):
        cfg["stress"]["freeze_bandwidth"] = True
    if getattr(args, "percent", False):
        cfg["yields_percent"] = True
    if cfg.get("seed") is None:
        raise UsageError("a seed is required")
    return cfg


_OVERRIDES = [
    ("futures", "futures"),
    ("yields", "yields"),
    ("output", "out"),
    ("seed", "seed"),
    ("Q", "Q"),
    ("kernel.bandwidth", "bandwidth"),
    ("kernel.kind", "kernel"),
    ("fit.n_starts", "n_starts"),
    ("fit.max_iter", "max_iter"),
    ("fit.tol", "tol"),
    ("fit.groups", "tie_groups"),
    ("fit.workers", "workers"),
    ("simulate.n_steps", "n_steps"),
    ("simulate.params", "params"),
    ("evaluate.ss_fit", "ss_fit"),
    ("evaluate.fr_fit", "fr_fit"),
    ("evaluate.scale", "scale"),
    ("stress.fit", "fit"),
]


def _digest_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _digest_file(path: str | Path) -> str:
    return _digest_bytes(Path(path).read_bytes())


def _canonical(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _write_json(path: Path, obj: Any) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_csv(path: Path, header: list[str], rows) -> None:
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def _fmt(v: Any) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def _write_manifest(out: Path, command: str, cfg: dict, inputs: list[str]) -> None:
    _write_json(out / "manifest.json", {
        "command": command,
        "config_digest": _digest_bytes(_canonical(cfg).encode()),
        "config": cfg,
        "inputs": {str(p): _digest_file(p) for p in inputs},
        "seed": cfg["seed"],
        "versions": {
            "ssfr": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": platform.python_version(),
        },
    })


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["output"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _kernel_spec(cfg: dict) -> KernelSpec:
    k = cfg["kernel"]
    return KernelSpec(k.get("kind", "rbf"), k.get("bandwidth"))


def _filter_config(cfg: dict) -> FilterConfig:
    f = cfg["filter"]
    return FilterConfig(a0=f.get("a0"), P0=np.asarray(f.get("P0"), dtype=float), symmetrize=bool(f.get("symmetrize", True)))


def _load_dataset(cfg: dict) -> AlignedDataset:
    if not cfg.get("futures") or not cfg.get("yields"):
        raise UsageError("both --futures and --yields are required")
    ft = cfg.get("futures_tenors")
    futures = load_futures_csv(cfg["futures"], IngestConfig(tenors=tuple(ft) if ft else None))
    yields = _load_yields(cfg)
    return align_panels(futures, yields)


def _load_yields(cfg: dict):
    if not cfg.get("yields"):
        raise UsageError("--yields is required")
    yt = cfg.get("yield_tenors")
    return load_yields_csv(cfg["yields"], IngestConfig(tenors=tuple(yt) if yt else None, percent=bool(cfg["yields_percent"])))


def _read_json(path: str | Path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"file not found: {path}")
    return json.loads(path.read_text(encoding="utf-8"))


def _factor_model_record(cfg: dict, model: KpcaModel) -> dict:
    return {
        "kind": model.spec.kind,
        "bandwidth": cfg["kernel"].get("bandwidth"),
        "resolved_bandwidth": model.spec.bandwidth,
        "Q": model.Q,
        "eigen_tolerance": cfg["eigen_tolerance"],
        "center": bool(cfg["center"]),
    }


def _refit_factor_model(record: dict, yields) -> KpcaModel:
    spec = KernelSpec(record["kind"], record.get("bandwidth"))
    return fit_kpca(yields, spec, int(record["Q"]), float(record["eigen_tolerance"]), bool(record["center"]))


# ---------------------------------------------------------------------------
# commands


def cmd_fit(cfg: dict) -> int:
    out = _out_dir(cfg)
    ds = _load_dataset(cfg)
    Q = int(cfg["Q"])
    scores, model = None, None
    if Q > 0:
        model = fit_kpca(ds.yields, _kernel_spec(cfg), Q, cfg["eigen_tolerance"], cfg["center"])
        scores = factor_scores(model, ds.yields)
    f = cfg["fit"]
    groups = tuple(f["groups"]) if f.get("groups") else None
    fcfg = FitConfig(
        Q=Q, n_starts=int(f["n_starts"]), seed=int(cfg["seed"]), max_iter=int(f["max_iter"]),
        tol=float(f["tol"]), groups=groups, workers=int(f.get("workers", 1)), filter=_filter_config(cfg),
    )
    result = fit_mle(ds, scores, fcfg, rng=stream(cfg["seed"], "optimizer_starts"))
    doc = result.to_dict()
    doc["tenors"] = [t.months for t in ds.futures.tenors]
    doc["dt"] = ds.dt
    if model is not None:
        doc["factor_model"] = _factor_model_record(cfg, model)
        _write_json(out / "kpca_model.json", model.to_dict())
    _write_json(out / "fit.json", doc)

    filt = run_filter(ds, result.params, scores, fcfg.filter)
    _write_csv(out / "filtered_states.csv", ["date", "chi", "xi"],
               ([format_month(d), a[0], a[1]] for d, a in zip(ds.dates, filt.a_filt)))
    _write_manifest(out, "fit", cfg, [cfg["futures"], cfg["yields"]])
    return 0


def _sim_params(cfg: dict, P: int) -> ModelParams:
    src = cfg["simulate"].get("params")
    if src is None:
        Q = int(cfg["Q"])
        gamma = np.zeros((P, Q))
        if Q > 0:
            # decaying loading on the first factor, opposite sign on the second
            w = np.linspace(1.0, 0.2, P)
            gamma[:, 0] = 3.0 * w
            if Q > 1:
                gamma[:, 1] = -2.0 * w[::-1]
        return ModelParams(**DEFAULT_SIM_PARAMS, meas_std=np.full(P, 0.02), Gamma=gamma)
    d = src if isinstance(src, dict) else _read_json(src)
    d = d.get("params", d)
    return ModelParams.from_dict(d)


def cmd_simulate(cfg: dict) -> int:
    out = _out_dir(cfg)
    s = cfg["simulate"]
    n, start = int(s["n_steps"]), s["start"]
    ftenors = tuple(Tenor(m) for m in s["futures_tenors"])
    ytenors = tuple(Tenor(m) for m in cfg["yield_tenors"])
    params = _sim_params(cfg, len(ftenors))

    yields = simulate_yield_curves(ytenors, n, seed=stream(cfg["seed"], "simulate_yields"), start=start)
    u = None
    if params.Q > 0:
        model = fit_kpca(yields, _kernel_spec(cfg), params.Q, cfg["eigen_tolerance"], cfg["center"])
        u = factor_scores(model, yields).U
    panel, states = simulate(params, ftenors, n, u_series=u, seed=stream(cfg["seed"], "simulate_states"), start=start)

    write_futures_csv(out / "futures.csv", panel)
    write_yields_csv(out / "yields.csv", yields)
    _write_csv(out / "states.csv", ["date", "chi", "xi"],
               ([format_month(d), x[0], x[1]] for d, x in zip(panel.dates, states)))
    _write_json(out / "true_params.json", params.to_dict())
    _write_manifest(out, "simulate", cfg, [])
    return 0


def cmd_extract_factors(cfg: dict) -> int:
    out = _out_dir(cfg)
    yields = _load_yields(cfg)
    Q = int(cfg["Q"])
    if Q < 1:
        raise UsageError("extract-factors needs Q >= 1")
    model = fit_kpca(yields, _kernel_spec(cfg), Q, cfg["eigen_tolerance"], cfg["center"])
    scores = factor_scores(model, yields)
    rows = scores.to_rows()
    with (out / "factors.csv").open("w", newline="", encoding="utf-8") as fh:
        csv.writer(fh, lineterminator="\n").writerows(rows)
    _write_json(out / "kpca_model.json", model.to_dict())
    _write_manifest(out, "extract-factors", cfg, [cfg["yields"]])
    return 0


def _load_fit(path: str | Path) -> tuple[FitResult, dict]:
    doc = _read_json(path)
    return FitResult.from_dict(doc), doc


def cmd_evaluate(cfg: dict) -> int:
    out = _out_dir(cfg)
    ev = cfg["evaluate"]
    if not ev.get("ss_fit") and not ev.get("fr_fit"):
        raise UsageError("evaluate needs --ss-fit and/or --fr-fit")
    if ev.get("scale", "log") not in ("log", "usd"):
        raise UsageError("scale must be 'log' or 'usd'")
    ds = _load_dataset(cfg)
    fcfg = _filter_config(cfg)
    tenors = ds.futures.tenors
    columns: dict[str, np.ndarray] = {}
    inputs = [cfg["futures"], cfg["yields"]]

    for label, key in (("ss", "ss_fit"), ("fr", "fr_fit")):
        if not ev.get(key):
            continue
        inputs.append(ev[key])
        fit, doc = _load_fit(ev[key])
        params = fit.params
        scores, model = None, None
        if params.Q > 0:
            model = _refit_factor_model(doc["factor_model"], ds.yields)
            scores = factor_scores(model, ds.yields)
        filt = run_filter(ds, params, scores, fcfg)
        m = build_matrices(params, tenors, ds.dt)
        y_hat = fitted_log_prices(filt, m, params.Gamma, scores, filtered=bool(ev.get("filtered")))
        y = ds.y
        if ev.get("scale") == "usd":
            y, y_hat = np.exp(y), np.exp(y_hat)
        columns[label] = rmse_table(y, y_hat).per_tenor
        if label == "fr" and model is not None:
            fc = functional_component(params.Gamma, scores)
            _write_csv(out / "functional_component.csv", ["date", *(t.label for t in tenors)],
                       ([format_month(d), *row] for d, row in zip(ds.dates, fc)))
            curves = coefficient_curves(params.Gamma, model)
            _write_csv(out / "coefficients.csv", ["tenor", *(t.label for t in tenors)],
                       ([yt.label, *curves.gamma_values[:, j]] for j, yt in enumerate(curves.tenor_grid)))

    labels = list(columns)
    rows = [[t.label, *(columns[k][i] for k in labels)] for i, t in enumerate(tenors)]
    rows.append(["mean", *(float(np.mean(columns[k])) for k in labels)])
    _write_csv(out / "rmse.csv", ["tenor", *(f"{k}_rmse" for k in labels)], rows)

    regime = contango_indicator(ds.yields, Tenor(int(ev["short"])), Tenor(int(ev["long"])))
    _write_csv(out / "regime.csv", ["date", "indicator"],
               ([format_month(d), r.value] for d, r in zip(ds.dates, regime)))
    _write_manifest(out, "evaluate", cfg, inputs)
    return 0


def cmd_stress(cfg: dict) -> int:
    out = _out_dir(cfg)
    st = cfg["stress"]
    if not st.get("fit"):
        raise UsageError("stress needs --fit")
    if not cfg["scenarios"]:
        raise UsageError("no shock scenario given (use --kind/--start or a config 'scenarios' list)")
    ds = _load_dataset(cfg)
    fit, doc = _load_fit(st["fit"])
    if fit.params.Q < 1 or "factor_model" not in doc:
        raise UsageError("stress testing needs a fit with Q > 0")
    rec = doc["factor_model"]
    scfg = StressConfig(
        kpca_spec=KernelSpec(rec["kind"], rec.get("bandwidth")),
        eigen_tolerance=float(rec["eigen_tolerance"]),
        center=bool(rec["center"]),
        freeze_kpca=bool(st.get("freeze_kpca")),
        freeze_bandwidth=bool(st.get("freeze_bandwidth")),
        filter=_filter_config(cfg),
    )
    scenarios = [ShockScenario(s["kind"], s["start"], s.get("end"), float(s.get("multiplier", 2.0))) for s in cfg["scenarios"]]
    for i, sc in enumerate(scenarios):
        target = out if len(scenarios) == 1 else out / f"scenario_{i + 1}"
        target.mkdir(parents=True, exist_ok=True)
        base, shocked = stress_run(ds, fit, sc, scfg)
        rep = bucket_report(base, shocked, ds.futures.tenors, dates=ds.dates)
        _write_csv(target / "stress_report.csv", ["date", "bucket", "mean_diff", "ci_low", "ci_high"], rep.rows())
        _write_json(target / "stress_metadata.json", {
            "scenario": sc.to_dict(),
            "ci_method": rep.ci_method,
            "units": "USD",
            "kpca": "frozen at base fit" if scfg.freeze_kpca else "refit on shocked yields",
            "bandwidth": "frozen at base value" if scfg.freeze_bandwidth else "re-derived per panel",
            "buckets": list(rep.buckets),
        })
    _write_manifest(out, "stress", cfg, [cfg["futures"], cfg["yields"], st["fit"]])
    return 0


COMMANDS = {
    "fit": cmd_fit,
    "simulate": cmd_simulate,
    "extract-factors": cmd_extract_factors,
    "evaluate": cmd_evaluate,
    "stress": cmd_stress,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ssfr", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, data: bool = True) -> None:
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--Q", "-Q", type=int, dest="Q", help="number of yield-curve factors (0 = pure two-factor model)")
        p.add_argument("--kernel", choices=["rbf", "linear"])
        p.add_argument("--bandwidth", type=float, help="rbf bandwidth (default: median heuristic)")
        if data:
            p.add_argument("--futures", help="futures price CSV (raw USD)")
            p.add_argument("--yields", help="yield CSV")
            p.add_argument("--percent", action="store_true", help="yields file is in percent")

    p = sub.add_parser("fit", help="maximum-likelihood fit")
    common(p)
    p.add_argument("--n-starts", type=int)
    p.add_argument("--max-iter", type=int)
    p.add_argument("--tol", type=float)
    p.add_argument("--tie-groups", type=lambda s: [int(x) for x in s.split(",")],
                   help="comma-separated noise group per futures tenor, e.g. 0,0,0,1,1,1")
    p.add_argument("--workers", type=int)

    p = sub.add_parser("simulate", help="write a synthetic futures/yield data set")
    common(p, data=False)
    p.add_argument("--n-steps", type=int)
    p.add_argument("--params", help="parameter JSON (a fit.json or true_params.json)")

    p = sub.add_parser("extract-factors", help="kernel PCA factor scores of a yield panel")
    common(p, data=False)
    p.add_argument("--yields", help="yield CSV")
    p.add_argument("--percent", action="store_true")

    p = sub.add_parser("evaluate", help="RMSE tables and diagnostic CSVs")
    common(p)
    p.add_argument("--ss-fit")
    p.add_argument("--fr-fit")
    p.add_argument("--scale", choices=["log", "usd"])

    p = sub.add_parser("stress", help="yield shock stress test")
    common(p)
    p.add_argument("--fit", help="fit.json of a functional-regression fit")
    p.add_argument("--kind", choices=["temporary", "permanent"])
    p.add_argument("--start")
    p.add_argument("--end")
    p.add_argument("--multiplier", type=float)
    p.add_argument("--freeze-kpca", action="store_true")
    p.add_argument("--freeze-bandwidth", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        return COMMANDS[args.command](cfg)
    except FileNotFoundError as exc:
        msg = str(exc) if str(exc).startswith("file not found") else f"file not found: {exc.filename}"
        print(f"E_IO: {msg}", file=sys.stderr)
        return 1
    except (FilterError, np.linalg.LinAlgError, ArithmeticError) as exc:
        print(f"E_NUMERIC: {exc}", file=sys.stderr)
        return 2
    except (UsageError, KeyError, TypeError) as exc:
        print(f"E_CONFIG: {exc}", file=sys.stderr)
        return 1
    except (DataError, KpcaError, ParamError, StressError, ValueError) as exc:
        print(f"E_DATA: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
