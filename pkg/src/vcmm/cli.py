"""Batch command-line front end: generate, fit, replicate, inspect.

Every option can also come from a JSON config file (``--config``): keys
are the long flag names with underscores, either at the top level or in a
section named after the subcommand.  Precedence: built-in defaults, then
top-level keys, then the subcommand section, then command-line flags.

Exit codes: 0 success, 2 configuration or input error, 3 non-convergence
(reports are still written), 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.stats import norm

from . import simgen
from .core import (
    NumericalError,
    PenaltySpec,
    RandomEffectCov,
    VCMMError,
)
from .distrib import (
    DEFAULT_BUDGET_C,
    MODES,
    PARTITION_MAGIC,
    MAGIC,
    budget_check,
    load_message,
    read_partition_binary,
    run_protocol,
)
from .estimator import METHODS, VARIANCE_UPDATES, FitConfig, FitResult, GibbsConfig, fisher_info
from .linalg import SvdMode
from .spline import TensorSplineBasis
from .suffstats import aggregate, compute_local

log = logging.getLogger("vcmm")

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGED, EXIT_NUMERICAL = 0, 2, 3, 4
OUT_ENV = "VCMM_OUT"
DEFAULT_OUT = "vcmm_out"
COMMANDS = ("generate", "fit", "replicate", "inspect")
SVD_KINDS = ("full", "truncated", "randomized")


class ConfigError(VCMMError):
    pass


def _int_list(v):
    if isinstance(v, str):
        return [int(x) for x in v.split(",") if x.strip()]
    return [int(x) for x in v]


def _str_list(v):
    if isinstance(v, str):
        return [x.strip() for x in v.split(",") if x.strip()]
    return [str(x) for x in v]


def _bool(v):
    if isinstance(v, bool):
        return v
    if isinstance(v, str) and v.lower() in ("true", "1", "yes", "false", "0", "no"):
        return v.lower() in ("true", "1", "yes")
    raise ValueError(f"not a boolean: {v!r}")


@dataclass(frozen=True)
class Option:
    name: str
    kind: object
    default: object
    help: str
    commands: tuple = COMMANDS


_SCEN = ("generate", "fit", "replicate")
_FIT = ("fit", "replicate")

OPTIONS = [
    Option("seed", int, 0, "random seed (replication r uses seed + r)"),
    Option("out", str, None, f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})"),
    Option("quiet", _bool, False, "only log warnings and errors"),
    Option("example", int, 1, "simulation scenario 1-4", _SCEN),
    Option("n", int, None, "training observations N (scenario default if unset)", _SCEN),
    Option("k", int, None, "number of partitions K", _SCEN),
    Option("q", int, None, "random-effect sites (example 2)", _SCEN),
    Option("levels", _int_list, None, "levels per random-effect factor, comma separated", _SCEN),
    Option("format", str, "text", "partition file format: text or binary", ("generate",)),
    Option("data", str, None, "dataset directory written by 'generate' (else simulate in memory)", ("fit",)),
    Option("basis", str, None, "spline basis JSON for datasets without truth.json", ("fit",)),
    Option("method", str, "ss", f"estimator: one of {', '.join(METHODS)}", ("fit",)),
    Option("reference", str, None, "also fit this method and report correlations against it", ("fit",)),
    Option("mode", str, None, f"run through the simulated protocol: {' or '.join(MODES)}", ("fit",)),
    Option("budget_c", float, DEFAULT_BUDGET_C, "budget constant c (scalars per parameter per node)", ("fit",)),
    Option("record", _bool, False, "persist every wire message under <out>/messages", ("fit",)),
    Option("methods", _str_list, ["direct", "ss"], "comma-separated methods; the first is the baseline", ("replicate",)),
    Option("reps", int, 100, "number of replications", ("replicate",)),
    Option("workers", int, 1, "parallel worker processes", ("replicate",)),
    Option("svd", str, None, f"spectral mode for method svd: {', '.join(SVD_KINDS)}", _FIT),
    Option("svd_rank", int, None, "retained rank for truncated/randomized modes", _FIT),
    Option("svd_tau", float, None, "relative truncation threshold", _FIT),
    Option("variance_update", str, None, "fixed or iterate (scenario default if unset)", _FIT),
    Option("max_iter", int, None, "maximum block sweeps", _FIT),
    Option("tol_grad", float, None, "gradient infinity-norm tolerance", _FIT),
    Option("tol_param", float, None, "parameter step tolerance", _FIT),
    Option("pivot_node", int, None, "pivot partition index for onestep", _FIT),
    Option("gibbs_iter", int, None, "kept Gibbs draws", _FIT),
    Option("gibbs_burn_in", int, None, "Gibbs burn-in draws", _FIT),
    Option("lam", float, None, "smoothing weight (cross-validated if unset)", _FIT),
    Option("cv", _bool, True, "cross-validate the smoothing weight when lam is unset", _FIT),
    Option("full", _bool, False, "include the full payload", ("inspect",)),
]
OPTION_BY_NAME = {o.name: o for o in OPTIONS}


# ---------------------------------------------------------------------------
# Argument parsing and config resolution
# ---------------------------------------------------------------------------


def _add_option(parser: argparse.ArgumentParser, opt: Option, suppress: bool) -> None:
    flag = "--" + opt.name.replace("_", "-")
    default = argparse.SUPPRESS if suppress else None
    if opt.kind is _bool:
        parser.add_argument(flag, dest=opt.name, action="store_const", const=True, default=default, help=opt.help)
        if opt.default is True:
            parser.add_argument(
                "--no-" + opt.name.replace("_", "-"), dest=opt.name, action="store_const", const=False, default=default
            )
    else:
        parser.add_argument(flag, dest=opt.name, default=default, help=opt.help)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vcmm", description="Distributed varying coefficient mixed models.")
    glob = [OPTION_BY_NAME[n] for n in ("seed", "out", "quiet")]

    def add_globals(p, suppress):
        p.add_argument("--config", dest="config", default=argparse.SUPPRESS if suppress else None, help="JSON config file")
        for opt in glob:
            _add_option(p, opt, suppress)

    add_globals(parser, False)
    sub = parser.add_subparsers(dest="command", required=True)
    for cmd in COMMANDS:
        sp = sub.add_parser(cmd, help=_COMMAND_HELP[cmd])
        add_globals(sp, True)
        for opt in OPTIONS:
            if cmd in opt.commands and opt.name not in ("seed", "out", "quiet"):
                _add_option(sp, opt, True)
        if cmd == "inspect":
            sp.add_argument("paths", nargs="+", help="wire message (.vcm) or binary partition (.vpt) files")
    return parser


_COMMAND_HELP = {
    "generate": "simulate a scenario and write partition files plus truth.json",
    "fit": "fit one dataset and write fit, metrics, ledger and coefficient-grid reports",
    "replicate": "run independent replications and write a mean (sd) table",
    "inspect": "dump wire messages or binary partitions human-readably",
}


def _coerce(opt: Option, value, source: str):
    if value is None:
        return None
    try:
        return opt.kind(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"--{opt.name.replace('_', '-')} ({source}): {exc}") from None


def resolve_config(command: str, ns: argparse.Namespace) -> dict:
    """Merge defaults, config file and flags into one validated dict."""
    cfg = {o.name: o.default for o in OPTIONS if command in o.commands}
    path = getattr(ns, "config", None)
    if path:
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"--config: cannot read {path}: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("--config: top level must be a JSON object")
        layers = [{k: v for k, v in doc.items() if k not in COMMANDS}, doc.get(command, {})]
        for k in doc:
            if k in COMMANDS and not isinstance(doc[k], dict):
                raise ConfigError(f"--config: section {k!r} must be an object")
        for sec in [k for k in doc if k in COMMANDS]:
            for key in doc[sec]:
                if key not in OPTION_BY_NAME or sec not in OPTION_BY_NAME[key].commands:
                    raise ConfigError(f"--config: unknown key {key!r} in section {sec!r}")
        for key in layers[0]:
            if key not in OPTION_BY_NAME:
                raise ConfigError(f"--config: unknown key {key!r}")
        for layer in layers:
            for key, value in layer.items():
                if key in cfg:
                    cfg[key] = _coerce(OPTION_BY_NAME[key], value, "config file")
    for key in list(cfg):
        value = getattr(ns, key, None)
        if value is not None:
            cfg[key] = _coerce(OPTION_BY_NAME[key], value, "command line")
    if cfg.get("out") is None:
        cfg["out"] = os.environ.get(OUT_ENV) or DEFAULT_OUT
    _validate(command, cfg)
    return cfg


def _check(cond: bool, flag: str, msg: str) -> None:
    if not cond:
        raise ConfigError(f"--{flag}: {msg}")


def _validate(command: str, cfg: dict) -> None:
    if "example" in cfg:
        _check(cfg["example"] in (1, 2, 3, 4), "example", f"must be one of 1, 2, 3, 4 (got {cfg['example']})")
        for key in ("n", "k", "q"):
            if cfg.get(key) is not None:
                _check(cfg[key] >= 1, key, f"must be >= 1 (got {cfg[key]})")
    if command == "generate":
        _check(cfg["format"] in ("text", "binary"), "format", f"must be text or binary (got {cfg['format']!r})")
    if command == "fit":
        _check(cfg["method"] in METHODS, "method", f"must be one of {', '.join(METHODS)} (got {cfg['method']!r})")
        if cfg["reference"] is not None:
            _check(cfg["reference"] in METHODS, "reference", f"must be one of {', '.join(METHODS)}")
        if cfg["mode"] is not None:
            _check(cfg["mode"] in MODES, "mode", f"must be one of {', '.join(MODES)} (got {cfg['mode']!r})")
            _check(cfg["method"] not in ("direct", "central"), "mode", f"method {cfg['method']!r} works on raw data")
            if cfg["mode"] == "onestep":
                _check(cfg["method"] == "onestep", "mode", "onestep mode needs --method onestep")
        _check(cfg["budget_c"] > 0, "budget-c", "must be > 0")
    if command == "replicate":
        _check(cfg["reps"] >= 1, "reps", "must be >= 1")
        _check(cfg["workers"] >= 1, "workers", "must be >= 1")
        _check(len(cfg["methods"]) >= 1, "methods", "needs at least one method")
        for m in cfg["methods"]:
            _check(m in METHODS, "methods", f"unknown method {m!r}")
    if command in _FIT:
        if cfg["svd"] is not None:
            _check(cfg["svd"] in SVD_KINDS, "svd", f"must be one of {', '.join(SVD_KINDS)} (got {cfg['svd']!r})")
        if cfg["variance_update"] is not None:
            _check(cfg["variance_update"] in VARIANCE_UPDATES, "variance-update", "must be fixed or iterate")
        if cfg["lam"] is not None:
            _check(cfg["lam"] >= 0, "lam", "must be >= 0")


# ---------------------------------------------------------------------------
# Shared helpers
# ---------------------------------------------------------------------------


def scenario_spec(cfg: dict, seed: int | None = None) -> simgen.ScenarioSpec:
    kw = {"example": cfg["example"], "seed": cfg["seed"] if seed is None else seed}
    for key, field_name in (("n", "N"), ("k", "K"), ("q", "q")):
        if cfg.get(key) is not None:
            kw[field_name] = cfg[key]
    if cfg.get("levels") is not None:
        kw["levels"] = tuple(cfg["levels"])
    try:
        return simgen.ScenarioSpec(**kw)
    except (VCMMError, ValueError, TypeError) as exc:
        raise ConfigError(f"scenario: {exc}") from None


def fit_overrides(cfg: dict, method: str, spec: simgen.ScenarioSpec | None) -> dict:
    """FitConfig keyword overrides from the flags that are set."""
    out = {}
    for key in ("max_iter", "tol_grad", "tol_param", "variance_update", "pivot_node"):
        if cfg.get(key) is not None:
            out[key] = cfg[key]
    if method == "svd" and (cfg.get("svd") is not None or cfg.get("svd_rank") is not None or cfg.get("svd_tau") is not None):
        base = simgen.truncation_mode(spec) if spec is not None and spec.example == 2 else SvdMode()
        kind = cfg.get("svd") or base.kind
        kw = {"kind": kind, "tau": base.tau, "rank": base.rank if kind != "full" else None}
        if cfg.get("svd_rank") is not None:
            kw["rank"] = cfg["svd_rank"]
        if cfg.get("svd_tau") is not None:
            kw["tau"] = cfg["svd_tau"]
            if cfg.get("svd_rank") is None:
                kw["rank"] = None
        try:
            out["svd_mode"] = SvdMode(**kw)
        except ValueError as exc:
            raise ConfigError(f"--svd: {exc}") from None
    if cfg.get("gibbs_iter") is not None or cfg.get("gibbs_burn_in") is not None:
        g = GibbsConfig()
        out["gibbs"] = GibbsConfig(
            n_iter=cfg.get("gibbs_iter") or g.n_iter,
            burn_in=g.burn_in if cfg.get("gibbs_burn_in") is None else cfg["gibbs_burn_in"],
            seed=cfg["seed"],
        )
    return out


def make_fit_config(cfg: dict, method: str, spec: simgen.ScenarioSpec | None) -> FitConfig:
    over = fit_overrides(cfg, method, spec)
    try:
        if spec is not None:
            return simgen.scenario_config(spec, method, **over)
        return FitConfig(method=method, **over)
    except (VCMMError, ValueError, TypeError) as exc:
        raise ConfigError(f"fit configuration: {exc}") from None


def coefficient_grid(fit: FitResult, basis: TensorSplineBasis, H: np.ndarray, level: float = 0.95):
    """Rows of [h, beta_k(h), lower_k, upper_k, ...] with pointwise normal bands."""
    th = fit.theta
    Q, pq = basis.Q, th.beta.size
    Phi = basis.evaluate(H)
    cov = None
    if fit.info_matrix is not None:
        try:
            cov = np.linalg.inv(fit.info_matrix)[:pq, :pq]
        except np.linalg.LinAlgError:
            cov = None
    z = norm.ppf(0.5 + level / 2)
    cols = [H]
    header = [f"h{j + 1}" for j in range(H.shape[1])]
    for k in range(pq // Q):
        sl = slice(k * Q, (k + 1) * Q)
        est = Phi @ th.beta[sl]
        if cov is not None:
            se = np.sqrt(np.maximum(np.einsum("ij,jk,ik->i", Phi, cov[sl, sl], Phi), 0.0))
        else:
            se = np.full(est.shape, np.nan)
        cols += [est[:, None], (est - z * se)[:, None], (est + z * se)[:, None]]
        header += [f"beta{k}", f"beta{k}_lower", f"beta{k}_upper"]
    return header, np.hstack(cols)


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=1, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not serializable: {type(o)}")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_generate(cfg: dict) -> int:
    spec = scenario_spec(cfg)
    parts, truth = simgen.generate(spec)
    out = Path(cfg["out"])
    paths = simgen.save_dataset(out, parts, truth, fmt=cfg["format"])
    log.info("wrote %d files to %s", len(paths), out)
    return EXIT_OK


def _load_inputs(cfg: dict):
    """(partitions, basis, truth, init, spec) from --data or an in-memory scenario."""
    if cfg["data"] is None:
        spec = scenario_spec(cfg)
        parts, truth = simgen.generate(spec)
        return parts, truth.basis, truth, simgen.scenario_init(parts, truth, cv=cfg["cv"], lam=cfg["lam"]), spec
    parts, truth = simgen.load_dataset(cfg["data"])
    if truth is not None:
        init = simgen.scenario_init(parts, truth, cv=cfg["cv"], lam=cfg["lam"])
        return parts, truth.basis, truth, init, truth.spec
    if cfg["basis"] is None:
        raise ConfigError("--basis: required for a dataset without truth.json")
    try:
        basis = TensorSplineBasis.load(cfg["basis"])
    except (OSError, json.JSONDecodeError, KeyError) as exc:
        raise ConfigError(f"--basis: cannot read {cfg['basis']}: {exc}") from None
    agg = aggregate([compute_local(p, basis) for p in parts])
    template = RandomEffectCov.isotropic(1.0, parts[0].q)
    init = simgen.initial_params(agg, basis, template, PenaltySpec())
    lam = cfg["lam"]
    if lam is None:
        lam = simgen.cv_select_lambda(parts, basis, init, seed=cfg["seed"])[0] if cfg["cv"] else 1e-3
    init = replace(init, penalty=PenaltySpec("ridge", float(lam)))
    return parts, basis, None, init, None


def _run_fit(parts, basis, init, fcfg: FitConfig, mode, record_dir):
    if mode is None:
        res, ledger = simgen.fit_method(parts, basis, init, fcfg), None
    else:
        res, ledger = run_protocol(parts, basis, init, fcfg, mode=mode, record_dir=record_dir)
    if res.info_matrix is None:
        res.info_matrix = fisher_info(aggregate([compute_local(p, basis) for p in parts]), res.theta)
    return res, ledger


def cmd_fit(cfg: dict) -> int:
    parts, basis, truth, init, spec = _load_inputs(cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    fcfg = make_fit_config(cfg, cfg["method"], spec)
    record = out / "messages" if cfg["record"] else None
    res, ledger = _run_fit(parts, basis, init, fcfg, cfg["mode"], record)

    doc = {"fit": res.to_dict(), "config": {k: v for k, v in cfg.items()}, "penalty_lambda": init.penalty.lam}
    H = simgen.eval_grid(basis.M)
    header, grid = coefficient_grid(res, basis, H)
    _write_csv(out / "beta_grid.csv", header, grid)

    if ledger is not None:
        report = budget_check(ledger, cfg["budget_c"])
        _write_json(out / "ledger.json", {"ledger": ledger.to_dict(), "budget": report.to_dict()})
        doc["budget_passed"] = report.passed
        log.info("budget c=%g: %s (margin %.1f scalars)", report.c, "pass" if report.passed else "FAIL", report.margin)

    if cfg["reference"] is not None:
        rcfg = make_fit_config(cfg, cfg["reference"], spec)
        ref, _ = _run_fit(parts, basis, init, rcfg, None, None)
        _, ref_grid = coefficient_grid(ref, basis, H)
        M = H.shape[1]
        corr = {
            f"beta{k}": simgen.safe_corr(grid[:, M + 3 * k], ref_grid[:, M + 3 * k]) for k in range(res.theta.beta.size // basis.Q)
        }
        corr["alpha"] = simgen.safe_corr(res.theta.alpha, ref.theta.alpha)
        doc["reference"] = {
            "method": ref.method,
            "converged": ref.converged,
            "elapsed_seconds": ref.elapsed,
            "correlation": corr,
            "max_abs_diff": {
                "theta": float(np.max(np.abs(res.theta.theta - ref.theta.theta), initial=0.0)),
                "sigma2_eps": abs(res.theta.sigma2_eps - ref.theta.sigma2_eps),
                "sigma_alpha": float(np.max(np.abs(res.theta.sigma_alpha.values - ref.theta.sigma_alpha.values))),
            },
        }
        if truth is not None:
            doc["reference"]["metrics"] = simgen.evaluate(ref, truth).scalars()
        log.info("correlation with %s: %s", ref.method, ", ".join(f"{k}={v:.6f}" for k, v in corr.items()))

    if truth is not None:
        metrics = simgen.evaluate(res, truth).scalars()
        doc["metrics"] = metrics
        _write_csv(out / "metrics.csv", ["metric", "value"], sorted(metrics.items()))
    _write_json(out / "fit.json", doc)
    log.info(
        "%s: %s after %d iterations in %.3fs; reports in %s",
        res.method,
        "converged" if res.converged else "NOT converged",
        res.iterations,
        res.elapsed,
        out,
    )
    return EXIT_OK if res.converged else EXIT_NONCONVERGED


def cmd_replicate(cfg: dict) -> int:
    spec = scenario_spec(cfg)
    methods = cfg["methods"]
    overrides = {m: fit_overrides(cfg, m, spec) for m in methods}
    for m in methods:
        make_fit_config(cfg, m, spec)  # validate before the long run
    table = simgen.replicate(
        spec,
        methods,
        cfg["reps"],
        cfg_overrides=overrides,
        cv=cfg["cv"],
        lam=cfg["lam"],
        progress=lambda r: log.info("replication %d/%d done", r + 1, cfg["reps"]),
        workers=cfg["workers"],
    )
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    table.to_csv(out / "table.csv")
    corr = {m: table.correlations(methods[0], m) for m in methods[1:]}
    totals = {m: float(sum(r.elapsed for r in table.reports[m])) for m in methods}
    _write_json(
        out / "summary.json",
        {
            "scenario": spec.to_dict(),
            "reps": table.reps,
            "methods": methods,
            "summary": table.summary(),
            "correlations_vs_" + methods[0]: corr,
            "total_time_seconds": totals,
            "lambdas": table.lambdas,
        },
    )
    if log.isEnabledFor(logging.INFO):
        rows = table.to_rows()
        widths = [max(len(r[j]) for r in rows) for j in range(len(rows[0]))]
        for r in rows:
            print("  ".join(c.ljust(w) for c, w in zip(r, widths)))
    converged = all(r.converged for m in methods for r in table.reports[m])
    return EXIT_OK if converged else EXIT_NONCONVERGED


def inspect_file(path, full: bool = False) -> dict:
    p = Path(path)
    with open(p, "rb") as fh:
        magic = fh.read(4)
    if magic == MAGIC:
        msg = load_message(p)
        doc = {"file": str(p), "type": "wire_message", **msg.describe()}
        v = msg.payload
        doc["payload_summary"] = {"min": float(v.min()), "max": float(v.max()), "sum": float(v.sum())} if v.size else {}
        if full:
            doc["payload"] = v.tolist()
        return doc
    if magic == PARTITION_MAGIC:
        part = read_partition_binary(p)
        doc = {"file": str(p), "type": "partition", "partition_id": part.partition_id, "n": part.n,
               "p": part.p, "M": part.M, "q": part.q}
        if part.n:
            doc["y_mean"] = float(part.y.mean())
            doc["h_range"] = [part.H.min(axis=0).tolist(), part.H.max(axis=0).tolist()]
        if full:
            doc["rows"] = np.column_stack([part.y, part.X, part.H, part.Z]).tolist()
        return doc
    raise VCMMError(f"{p}: not a wire message or binary partition (magic {magic!r})")


def cmd_inspect(cfg: dict, paths) -> int:
    for path in paths:
        print(json.dumps(inspect_file(path, cfg["full"]), indent=1))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    try:
        cfg = resolve_config(ns.command, ns)
    except ConfigError as exc:
        print(f"vcmm {ns.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(
        level=logging.WARNING if cfg["quiet"] else logging.INFO, format="%(levelname)s %(message)s", force=True
    )
    try:
        if ns.command == "generate":
            return cmd_generate(cfg)
        if ns.command == "fit":
            return cmd_fit(cfg)
        if ns.command == "replicate":
            return cmd_replicate(cfg)
        return cmd_inspect(cfg, ns.paths)
    except ConfigError as exc:
        print(f"vcmm {ns.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"vcmm {ns.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (VCMMError, OSError) as exc:
        print(f"vcmm {ns.command}: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
