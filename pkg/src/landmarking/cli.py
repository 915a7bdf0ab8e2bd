"""Command-line front end.

All times are in years. Settings come from an optional flat ``key=value``
config file; command-line flags override it. Every output table starts with a
``# config_sha256=...`` comment and every JSON output carries ``config_hash``.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .data import Subject, build_landmark, load_dataset, write_dataset
from .errors import ConfigError, LandmarkingError
from .evaluation import CVScheme, evaluate
from .gp import DEFAULT_EPSILON, CovarianceParams, FitOptions, TrendSpec, fit_gp
from .prediction import Method, PipelineConfig, run_pipeline, subject_path
from .revival import fit_revival, marginal_survival, revival_mean_curves
from .sim import SimConfig, simulate
from .survival import kaplan_meier, reverse_km

log = logging.getLogger("landmarking")

COMMANDS = ("fit-longitudinal", "fit-revival", "predict", "evaluate", "simulate", "km")
NEEDS_DATA = {"fit-longitudinal", "fit-revival", "predict", "evaluate", "km"}

SIM_KEYS = {
    "n_subjects": int, "max_time": float, "baseline_hazard": float, "beta": float,
    "censoring_rate": float, "p_treated": float, "dt": float, "visit_rate": float,
    "schedule": str, "placebo_intercept": float, "placebo_slope": float,
    "treated_intercept": float, "treated_slope": float, "sigma1_sq": float,
    "sigma2_sq": float, "lambda_decay": float, "sigma3_sq": float,
}


@dataclass
class RunConfig:
    s: float = 3.0
    w: float = 2.0
    tau: float = 9.0
    epsilon: float = DEFAULT_EPSILON
    methods: str = "all"
    cv: str = "loo"
    k: int = 10
    seed: int = 0
    workers: int = 1
    restarts: int = 3
    exclude_baseline: bool = True
    adjust_arm: bool = False
    per_arm_km: bool = True
    shared_noise: bool = False
    data_long: str | None = None
    data_surv: str | None = None
    target_long: str | None = None
    target_surv: str | None = None
    out: str = "."
    curve_death_times: str = "2,4,6,8"
    sim: dict = field(default_factory=dict)

    @property
    def method_list(self) -> tuple[Method, ...]:
        return Method.parse(self.methods)

    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(self.s, self.w, self.tau, self.epsilon, self.exclude_baseline,
                              self.adjust_arm, self.per_arm_km, self.shared_noise,
                              FitOptions(restarts=self.restarts, seed=self.seed))

    def scheme(self) -> CVScheme:
        return CVScheme.loo() if self.cv == "loo" else CVScheme.kfold(self.k, self.seed)

    def sim_config(self) -> SimConfig:
        base = SimConfig(seed=self.seed)
        kw, trend, cov = {}, [list(p) for p in base.trend], base.cov.to_dict()
        for key, value in self.sim.items():
            if key == "schedule":
                kw["schedule"] = tuple(float(x) for x in value.split(",") if x.strip())
            elif key in ("placebo_intercept", "placebo_slope", "treated_intercept", "treated_slope"):
                arm = 0 if key.startswith("placebo") else 1
                trend[arm][0 if key.endswith("intercept") else 1] = value
            elif key in cov:
                cov[key] = value
            else:
                kw[key] = value
        return replace(base, trend=tuple(tuple(p) for p in trend), cov=CovarianceParams(**cov), **kw)


_TYPES = {f.name: f.type for f in fields(RunConfig)}
_BOOL = {"exclude_baseline", "adjust_arm", "per_arm_km", "shared_noise"}
_INT = {"k", "seed", "workers", "restarts"}
_FLOAT = {"s", "w", "tau", "epsilon"}


def _coerce(key: str, value: str, violations: list[str]):
    try:
        if key in _BOOL:
            low = value.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return low in ("true", "1", "yes")
        if key in _INT:
            return int(value)
        if key in _FLOAT:
            return float(value)
    except ValueError:
        violations.append(f"{key}: cannot parse {value!r}")
        return None
    return value.strip()


def _coerce_sim(key: str, value: str, violations: list[str]):
    kind = SIM_KEYS.get(key)
    if kind is None:
        violations.append(f"unknown simulation key {key!r}")
        return None
    try:
        return value.strip() if kind is str else kind(value)
    except ValueError:
        violations.append(f"{key}: cannot parse {value!r}")
        return None


def read_config_file(path: str | Path) -> dict[str, str]:
    """Parse a flat ``key=value`` file; blank lines and ``#`` comments are ignored."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError([f"{path}:{lineno}: expected key=value, got {line!r}"])
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def resolve_config(command: str, file_values: dict[str, str], flag_values: dict,
                   set_values: Sequence[str] = ()) -> RunConfig:
    """Merge config file and flags (flags win), then validate everything at once."""
    violations: list[str] = []
    cfg = RunConfig()
    updates, sim = {}, {}
    for key, value in file_values.items():
        if key.startswith("sim."):
            key = key[4:]
        if key in _TYPES and key != "sim":
            updates[key] = _coerce(key, value, violations)
        elif key in SIM_KEYS:
            sim[key] = _coerce_sim(key, value, violations)
        else:
            violations.append(f"unknown config key {key!r}")
    for item in set_values:
        if "=" not in item:
            violations.append(f"--set expects KEY=VALUE, got {item!r}")
            continue
        key, value = item.split("=", 1)
        key = key.strip().replace("-", "_")
        sim[key] = _coerce_sim(key, value, violations)
    updates.update({k: v for k, v in flag_values.items() if v is not None})
    cfg = replace(cfg, **updates, sim=sim)
    violations += validate(command, cfg)
    if violations:
        raise ConfigError(violations)
    return cfg


def validate(command: str, cfg: RunConfig) -> list[str]:
    bad = []
    if not (isinstance(cfg.s, float) and cfg.s >= 0):
        bad.append(f"s must be >= 0 (got {cfg.s})")
    if not (isinstance(cfg.w, float) and cfg.w > 0):
        bad.append(f"w must be > 0 (got {cfg.w})")
    if not (isinstance(cfg.tau, float) and cfg.tau > 0):
        bad.append(f"tau must be > 0 (got {cfg.tau})")
    if not (isinstance(cfg.epsilon, float) and cfg.epsilon > 0):
        bad.append(f"epsilon must be > 0 (got {cfg.epsilon})")
    methods: tuple[Method, ...] = ()
    try:
        methods = cfg.method_list
        if not methods:
            bad.append("methods must name at least one method")
    except LandmarkingError as exc:
        bad.append(str(exc))
    revival = command in ("fit-revival",) or (command in ("predict", "evaluate")
                                              and any(m.uses_revival for m in methods))
    if revival and all(isinstance(v, float) for v in (cfg.s, cfg.w, cfg.tau)) and cfg.s + cfg.w > cfg.tau:
        bad.append(f"s + w <= tau is required for revival methods (got {cfg.s} + {cfg.w} > {cfg.tau})")
    if cfg.cv not in ("loo", "kfold"):
        bad.append(f"cv must be 'loo' or 'kfold' (got {cfg.cv!r})")
    if cfg.cv == "kfold" and not (isinstance(cfg.k, int) and cfg.k >= 2):
        bad.append(f"k must be >= 2 for k-fold CV (got {cfg.k})")
    if not (isinstance(cfg.workers, int) and cfg.workers >= 1):
        bad.append(f"workers must be >= 1 (got {cfg.workers})")
    if not (isinstance(cfg.restarts, int) and cfg.restarts >= 0):
        bad.append(f"restarts must be >= 0 (got {cfg.restarts})")
    if not isinstance(cfg.seed, int):
        bad.append("seed must be an integer")
    if command in NEEDS_DATA:
        for key in ("data_long", "data_surv"):
            path = getattr(cfg, key)
            if not path:
                bad.append(f"--{key.replace('_', '-')} is required for {command}")
            elif not Path(path).is_file():
                bad.append(f"--{key.replace('_', '-')}: no such file {path!r}")
    if (cfg.target_long is None) != (cfg.target_surv is None):
        bad.append("--target-long and --target-surv must be given together")
    if command == "fit-revival":
        try:
            _death_times(cfg)
        except ValueError:
            bad.append(f"curve_death_times must be a comma-separated list of numbers (got {cfg.curve_death_times!r})")
    if command == "simulate" and not any(b.startswith("sim") for b in bad):
        try:
            cfg.sim_config().validate()
        except ConfigError as exc:
            bad += exc.violations
        except (TypeError, ValueError) as exc:
            bad.append(f"invalid simulation settings: {exc}")
    return bad


def _death_times(cfg: RunConfig) -> list[float]:
    return [float(x) for x in cfg.curve_death_times.split(",") if x.strip()]


def _file_digest(path: str | None) -> str | None:
    if not path:
        return None
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def config_record(command: str, cfg: RunConfig) -> dict:
    """Everything the outputs depend on: settings plus input file digests (not paths)."""
    rec = asdict(cfg)
    for key in ("data_long", "data_surv", "target_long", "target_surv", "out", "workers"):
        rec.pop(key)
    rec["sim"] = dict(sorted(cfg.sim.items()))
    rec["command"] = command
    rec["inputs"] = {key: _file_digest(getattr(cfg, key))
                     for key in ("data_long", "data_surv", "target_long", "target_surv")}
    rec["version"] = __version__
    return rec


def config_hash(record: dict) -> str:
    return hashlib.sha256(json.dumps(record, sort_keys=True).encode()).hexdigest()


def _clean(obj):
    """JSON-safe copy: non-finite floats become null, numpy scalars become Python numbers."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


class Output:
    def __init__(self, directory: str, digest: str, record: dict):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.digest = digest
        self.record = record
        self.written: list[str] = []

    def json(self, name: str, payload: dict) -> None:
        body = {"config_hash": self.digest, "config": self.record, **payload}
        text = json.dumps(_clean(body), indent=2, allow_nan=False) + "\n"
        self._write(name, text)

    def csv(self, name: str, header: Sequence[str], rows) -> None:
        lines = [f"# config_sha256={self.digest}\n"]
        buf = _Lines()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(header)
        for row in rows:
            wr.writerow([_cell(v) for v in row])
        self._write(name, "".join(lines + buf.parts))

    def text(self, name: str, body: str) -> None:
        self._write(name, f"# config_sha256={self.digest}\n{body}")

    def _write(self, name: str, text: str) -> None:
        (self.dir / name).write_text(text, encoding="utf-8", newline="")
        self.written.append(name)


class _Lines:
    def __init__(self):
        self.parts: list[str] = []

    def write(self, s):
        self.parts.append(s)


def _cell(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def _load(cfg: RunConfig) -> list[Subject]:
    return load_dataset(cfg.data_long, cfg.data_surv)


def cmd_fit_longitudinal(cfg: RunConfig, out: Output) -> None:
    pipe = cfg.pipeline()
    fit = fit_gp(_load(cfg), TrendSpec("arm_linear", cfg.epsilon), pipe.options())
    out.json("gp_fit.json", {"model": fit.to_dict()})


def cmd_fit_revival(cfg: RunConfig, out: Output) -> None:
    pipe = cfg.pipeline()
    subjects = _load(cfg)
    model = fit_revival(subjects, cfg.tau, cfg.epsilon, pipe.options(), cfg.shared_noise)
    marg = marginal_survival(subjects, cfg.s, cfg.tau, cfg.per_arm_km)
    marg_d = {str(a): m.to_dict() for a, m in marg.items()} if isinstance(marg, dict) else marg.to_dict()
    out.json("revival_model.json", {"model": model.to_dict(), "marginal": marg_d})
    rows = revival_mean_curves(model, _death_times(cfg))
    out.csv("revival_means.csv", ("arm", "curve", "time", "mean"), rows)


def _targets(cfg: RunConfig) -> list[Subject] | None:
    if cfg.target_long is None:
        return None
    targets = load_dataset(cfg.target_long, cfg.target_surv)
    return [sub for sub in targets if sub.event_time >= cfg.s and sub.history(cfg.s)]


def cmd_predict(cfg: RunConfig, out: Output) -> None:
    subjects = _load(cfg)
    methods = cfg.method_list
    pipe = cfg.pipeline()
    targets = _targets(cfg)
    models, trained, results = run_pipeline(subjects, methods, pipe, predict_for=targets)
    flat = sorted((r for m in methods for r in results[m]), key=lambda r: (r.subject_id, r.method.value))
    out.csv("predictions.csv", ("id", "method", "pi_hat"),
            ((r.subject_id, r.method.value, r.pi_hat) for r in flat))
    cox = {m.value: trained[m].cox.to_dict() for m in methods if trained[m].cox is not None}
    out.json("predictions.json", {"s": cfg.s, "w": cfg.w, "cox": cox,
                                  "predictions": [r.to_dict() for r in flat]})
    grid = trained[methods[0]].event_grid
    pool = targets if targets is not None else build_landmark(subjects, cfg.s, cfg.w).subjects
    rows = []
    for sub in sorted(pool, key=lambda x: x.id):
        for m in methods:
            if m is Method.DIRECT_REVIVAL:
                continue
            path = subject_path(m, sub, cfg.s, grid, models)
            rows.extend((sub.id, m.value, t, v) for t, v in zip(path.times, path.values))
    out.csv("paths.csv", ("id", "method", "time", "value"), rows)


def cmd_evaluate(cfg: RunConfig, out: Output) -> None:
    subjects = _load(cfg)
    methods = cfg.method_list
    report, cv = evaluate(subjects, methods, cfg.scheme(), cfg.pipeline(), workers=cfg.workers)
    out.json("evaluation.json", {"report": report.to_dict()})
    out.text("evaluation.txt", report.format_table())
    rows = sorted((sid, m.value, p) for m in methods for sid, p in cv[m].items())
    out.csv("cv_predictions.csv", ("id", "method", "pi_hat"), rows)


def cmd_simulate(cfg: RunConfig, out: Output) -> None:
    subjects = simulate(cfg.sim_config())
    write_dataset(subjects, out.dir / "longitudinal.csv", out.dir / "survival.csv",
                  comment=f"config_sha256={out.digest}")
    out.written += ["longitudinal.csv", "survival.csv"]


def _step_rows(curves):
    for group, fn in curves:
        yield group, 0.0, fn.initial
        for t, v in zip(fn.times, fn.values):
            yield group, t, v


def cmd_km(cfg: RunConfig, out: Output) -> None:
    subjects = _load(cfg)
    t = np.array([sub.event_time for sub in subjects])
    d = np.array([sub.status for sub in subjects])
    arm = np.array([sub.arm for sub in subjects])
    for name, est in (("km_survival.csv", kaplan_meier), ("km_censoring.csv", reverse_km)):
        by_arm = est(t, d, arm)
        curves = [("all", est(t, d))] + [(str(a), by_arm[a]) for a in sorted(by_arm)]
        out.csv(name, ("group", "time", "value"), _step_rows(curves))


HANDLERS = {
    "fit-longitudinal": cmd_fit_longitudinal,
    "fit-revival": cmd_fit_revival,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "simulate": cmd_simulate,
    "km": cmd_km,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="landmarking",
        description="Dynamic survival prediction from longitudinal markers. All times are in years.")
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global")
    g.add_argument("--data-long", help="longitudinal CSV (id,time,value[,occasion])")
    g.add_argument("--data-surv", help="survival CSV (id,survtime,status,arm)")
    g.add_argument("--config", help="flat key=value config file; flags override it")
    g.add_argument("--out", help="output directory (default: current directory)")
    g.add_argument("--seed", type=int, help="random seed")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    m = common.add_argument_group("model")
    m.add_argument("--s", type=float, help="landmark time (default 3)")
    m.add_argument("--w", type=float, help="prediction window (default 2)")
    m.add_argument("--tau", type=float, help="revival observation limit (default 9)")
    m.add_argument("--epsilon", type=float, help="offset in log(u + epsilon), years (default 1 day)")
    m.add_argument("--methods", help="comma list of LOCF,BLUP,XHAT_GP,XHAT_REVIVAL,DIRECT_REVIVAL or 'all'")
    m.add_argument("--cv", help="cross-validation scheme: loo or kfold")
    m.add_argument("--k", type=int, help="number of folds for kfold (default 10)")
    m.add_argument("--workers", type=int, help="parallel CV worker processes (default 1)")
    m.add_argument("--restarts", type=int, help="optimizer restarts (default 3)")
    for flag in ("exclude-baseline", "adjust-arm", "per-arm-km", "shared-noise"):
        m.add_argument(f"--{flag}", action=argparse.BooleanOptionalAction, default=None)
    m.add_argument("--target-long", help="predict for these subjects instead of the landmark cohort")
    m.add_argument("--target-surv", help="survival file that goes with --target-long")
    m.add_argument("--curve-death-times", help="death times for revival mean curves (comma list)")
    m.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="simulation setting, e.g. n_subjects=500 or baseline_hazard=0.5")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


def _flag_values(ns: argparse.Namespace) -> dict:
    keys = ("s", "w", "tau", "epsilon", "methods", "cv", "k", "workers", "restarts", "seed",
            "exclude_baseline", "adjust_arm", "per_arm_km", "shared_noise", "data_long",
            "data_surv", "target_long", "target_surv", "out", "curve_death_times")
    return {k: getattr(ns, k) for k in keys}


def _fail(kind: str, message: str, violations: Sequence[str] = (), code: int = 1) -> int:
    payload = {"error": kind, "message": message}
    if violations:
        payload["violations"] = list(violations)
    sys.stderr.write(json.dumps(payload) + "\n")
    return code


def main(argv: Sequence[str] | None = None) -> int:
    ns = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if ns.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        file_values = read_config_file(ns.config) if ns.config else {}
        cfg = resolve_config(ns.command, file_values, _flag_values(ns), ns.set)
        record = config_record(ns.command, cfg)
        out = Output(cfg.out, config_hash(record), record)
        HANDLERS[ns.command](cfg, out)
    except ConfigError as exc:
        return _fail("ConfigError", "invalid configuration", exc.violations, code=2)
    except LandmarkingError as exc:
        return _fail(type(exc).__name__, str(exc))
    except OSError as exc:
        return _fail("OSError", str(exc))
    log.info("wrote %s", ", ".join(out.written))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
