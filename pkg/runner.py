"""
Experiment runner: validates configs, drives the estimators, writes
self-contained JSON reports and records every run in the ledger.
"""

import copy
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from bound_engine import (
    THEOREMS,
    BoundReport,
    CheckReport,
    CheckRow,
    Ingredients,
    estimate_moments,
    estimate_r_terms,
    lemma_3_1_check,
    lemma_3_2_check,
    proposition_3_1_check,
    sigma_lambda,
    theorem_bound,
)
from config import config
from database import RateFitRecord, RunRecord, get_db
from empirics import (
    EmpiricalDistance,
    RateFit,
    Verdict,
    dominance_verdict,
    kolmogorov_distance,
    nonuniform_profile,
    rate_fit,
    write_profile_csv,
)
from errors import UsageError
from fields import FieldModel, derive_seed, model_from_spec
from logger import log_info, log_warning
from neighborhoods import Level, NeighborhoodSystem, from_dict as system_from_dict, kappa_stats, load_system
from stein_kernels import k_integral_identity, smoothed_indicator, smoothed_indicator_mean, stein_solution

SCHEMA = 1
STREAM_RATE = 41

# Theorems that consume r-terms, and which ones
_R_TERMS_FOR = {
    "2.1": ("r1", "r2", "r3", "r4", "r5", "r6"),
    "2.3": ("r2", "r3", "r7", "r8", "r9", "r10", "r11", "r12"),
}
_MOMENT_THEOREMS = {"2.2", "2.4", "2.5-rate", "2.6u", "2.6n-rate", "2.7u", "2.7n-rate"}


# =============================================================================
# CONFIG
# =============================================================================

@dataclass
class ExperimentConfig:
    """One reproducible experiment."""
    model: Dict[str, Any]
    seed: int
    replicates: int
    system: Any = "derive"
    theorems: List[str] = field(default_factory=list)
    delta: float = 1e-3
    zgrid: Optional[List[float]] = None
    p: Optional[float] = None
    z: float = 0.0
    sizes: Optional[List[int]] = None
    intervals: Optional[List[Tuple[float, float]]] = None
    out_dir: str = "out"

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise UsageError("config must be a JSON object")
        schema = doc.get("schema", SCHEMA)
        if schema != SCHEMA:
            raise UsageError(f"unsupported schema {schema}", "schema")
        for key in ("model", "seed", "replicates"):
            if key not in doc:
                raise UsageError("required", key)
        if not isinstance(doc["model"], dict) or "kind" not in doc["model"]:
            raise UsageError("must be an object with a 'kind'", "model")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known - {"schema"}
        if unknown:
            raise UsageError(f"unknown keys {sorted(unknown)}", "config")
        cfg = cls(
            model=copy.deepcopy(doc["model"]),
            seed=doc["seed"],
            replicates=doc["replicates"],
            system=copy.deepcopy(doc.get("system", "derive")),
            theorems=list(doc.get("theorems", [])),
            delta=doc.get("delta", config.delta),
            zgrid=doc.get("zgrid"),
            p=doc.get("p"),
            z=doc.get("z", 0.0),
            sizes=doc.get("sizes"),
            intervals=[tuple(iv) for iv in doc["intervals"]] if doc.get("intervals") else None,
            out_dir=doc.get("out_dir", config.out_dir),
        )
        cfg.validate()
        return cfg

    def validate(self):
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise UsageError("must be a non-negative integer", "seed")
        if not isinstance(self.replicates, int) or self.replicates < 1:
            raise UsageError("must be >= 1", "replicates")
        for i, theorem in enumerate(self.theorems):
            if theorem not in THEOREMS:
                raise UsageError(f"unknown theorem {theorem!r}", f"theorems[{i}]")
        if not 0 < self.delta < 1:
            raise UsageError("must lie in (0, 1)", "delta")
        if self.zgrid is not None and not all(math.isfinite(z) for z in self.zgrid):
            raise UsageError("must be finite", "zgrid")
        if self.sizes is not None and any(int(n) < 1 for n in self.sizes):
            raise UsageError("sizes must be positive", "sizes")
        if self.intervals is not None:
            for i, (a, b) in enumerate(self.intervals):
                if a > b:
                    raise UsageError("a > b", f"intervals[{i}]")
        if not (self.system == "derive" or isinstance(self.system, (dict, str))):
            raise UsageError("must be 'derive', a system document or a path", "system")

    def to_dict(self) -> Dict[str, Any]:
        return {
            'schema': SCHEMA,
            'model': self.model,
            'system': self.system,
            'theorems': list(self.theorems),
            'replicates': self.replicates,
            'seed': self.seed,
            'delta': self.delta,
            'zgrid': self.zgrid,
            'p': self.p,
            'z': self.z,
            'sizes': self.sizes,
            'intervals': [list(iv) for iv in self.intervals] if self.intervals else None,
            'out_dir': self.out_dir,
        }


def load_experiment(path: str) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise UsageError(f"no such file {path}", "--config")
    except json.JSONDecodeError as e:
        raise UsageError(f"invalid JSON: {e}", "--config")
    return ExperimentConfig.from_dict(doc)


def content_hash(doc: Any) -> str:
    """Short sha256 of canonical JSON."""
    canonical = json.dumps(doc, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def config_hash(cfg: ExperimentConfig) -> str:
    doc = cfg.to_dict()
    doc.pop('out_dir')
    return content_hash(doc)


# =============================================================================
# REPORT
# =============================================================================

@dataclass
class ExperimentReport:
    """Everything a run produced, with the config that reproduces it."""
    command: str
    config: ExperimentConfig
    config_hash: str
    model_hash: str
    model: Dict[str, Any] = field(default_factory=dict)
    distance: Optional[EmpiricalDistance] = None
    bounds: List[BoundReport] = field(default_factory=list)
    verdicts: List[Verdict] = field(default_factory=list)
    rate: Optional[RateFit] = None
    rate_table: Optional[pd.DataFrame] = None
    checks: List[Dict[str, Any]] = field(default_factory=list)
    wall_time: float = 0.0
    threads: int = field(default_factory=lambda: config.threads)
    path: Optional[Path] = None

    @property
    def passed(self) -> bool:
        verdicts_ok = all(v.passed for v in self.verdicts)
        checks_ok = all(check.get('holds', True) for check in self.checks)
        return verdicts_ok and checks_ok

    @property
    def exit_status(self) -> int:
        return 0 if self.passed else 1

    def to_dict(self) -> Dict[str, Any]:
        return {
            'schema': SCHEMA,
            'command': self.command,
            'software_version': config.software_version,
            'config': self.config.to_dict(),
            'config_hash': self.config_hash,
            'model_hash': self.model_hash,
            'model': self.model,
            'distance': self.distance.to_dict() if self.distance else None,
            'bounds': [b.to_dict() for b in self.bounds],
            'verdicts': [v.to_dict() for v in self.verdicts],
            'rate': self.rate.to_dict() if self.rate else None,
            'rate_table': self.rate_table.to_dict(orient='records') if self.rate_table is not None else None,
            'checks': self.checks,
            'passed': self.passed,
            'wall_time': self.wall_time,
            'threads': self.threads,
        }

    def write(self, out_dir: Optional[str] = None) -> Path:
        directory = Path(out_dir or self.config.out_dir)
        directory.mkdir(parents=True, exist_ok=True)
        path = directory / f"{self.command}_{self.config_hash}.json"
        path.write_text(json.dumps(self.to_dict(), indent=2, default=_json_default), encoding="utf-8")
        self.path = path
        if self.distance is not None and self.distance.profile is not None:
            write_profile_csv(self.distance, directory / f"{self.command}_{self.config_hash}_profile.csv")
        if self.rate_table is not None:
            self.rate_table.to_csv(directory / f"rate_{self.config_hash}.csv", index=False,
                                   columns=['n', 'ks', 'dkw'])
        log_info(f"Report written to {path}")
        return path


def _json_default(value):
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"not JSON serializable: {type(value).__name__}")


# =============================================================================
# BUILDING BLOCKS
# =============================================================================

def build_model(cfg: ExperimentConfig) -> Tuple[FieldModel, NeighborhoodSystem]:
    model = model_from_spec(cfg.model)
    if cfg.system == "derive":
        return model, model.system
    system = system_from_dict(cfg.system) if isinstance(cfg.system, dict) else load_system(cfg.system)
    if system.n != model.n:
        raise UsageError(f"system has {system.n} indices, model has {model.n}", "system")
    return model, system


def _default_p(theorem: str) -> float:
    return 4.0 if theorem == "2.2" else 3.0


class _IngredientCache:
    """Estimates each ingredient at most once per run."""

    def __init__(self, cfg: ExperimentConfig, model: FieldModel, system: NeighborhoodSystem):
        self.cfg = cfg
        self.model = model
        self.system = system
        self._moments: Dict[float, Any] = {}
        self._r_terms = None
        self._sigma = None
        self._kappas = None

    def r_terms(self, theorems: Sequence[str]):
        if self._r_terms is None:
            wanted = sorted({t for th in theorems for t in _R_TERMS_FOR.get(th, ())}, key=lambda t: int(t[1:]))
            if wanted:
                self._r_terms = estimate_r_terms(self.model, self.system, self.cfg.replicates,
                                                 self.cfg.seed, terms=wanted)
        return self._r_terms

    def moments(self, p: float):
        if p not in self._moments:
            self._moments[p] = estimate_moments(self.model, self.system, p, self.cfg.replicates, self.cfg.seed)
        return self._moments[p]

    def kappas(self):
        if self._kappas is None:
            self._kappas = kappa_stats(self.system)
        return self._kappas

    def sigma(self):
        if self._sigma is None:
            self._sigma = sigma_lambda(self.model, self.system, self.cfg.seed)
        return self._sigma

    def ingredients(self, theorem: str, all_theorems: Sequence[str]) -> Tuple[Ingredients, Optional[float]]:
        model, system = self.model, self.system
        meta = model.metadata
        ing = Ingredients(n=model.n, z=float(self.cfg.z), kappas=self.kappas())
        if theorem in _R_TERMS_FOR:
            ing.r_terms = self.r_terms(all_theorems)
        if theorem == "2.3":
            ing.sigma = self.sigma()
        p = None
        if theorem in _MOMENT_THEOREMS:
            p = float(self.cfg.p) if self.cfg.p is not None else _default_p(theorem)
            ing.moments = self.moments(p)
        if system.lattice is not None:
            shape, m = system.lattice
            ing.m, ing.dimension = m, len(shape)
        ing.max_degree = meta.get('max_degree', meta.get('degree'))
        ing.vertices = meta.get('vertices', model.n)
        if 'sigma2' in meta:
            ing.count_sigma = math.sqrt(meta['sigma2'])
        return ing, p


# =============================================================================
# COMMANDS
# =============================================================================

def run(cfg: ExperimentConfig, command: str = "bounds", write: bool = True) -> ExperimentReport:
    """
    Distances, bounds and verdicts for one model.

    Deterministic given the config; exit status 0 iff every checkable
    verdict passes.
    """
    started = time.perf_counter()
    model, system = build_model(cfg)
    report = ExperimentReport(
        command=command,
        config=cfg,
        config_hash=config_hash(cfg),
        model_hash=content_hash(cfg.model),
        model=model.to_dict(),
    )
    log_info(f"run {command}: {model.kind} n={model.n} level={system.level.value} seed={cfg.seed}")

    if cfg.zgrid is not None:
        report.distance = nonuniform_profile(model, cfg.replicates, cfg.seed, cfg.zgrid, cfg.delta)
    else:
        report.distance = kolmogorov_distance(model, cfg.replicates, cfg.seed, cfg.delta)

    cache = _IngredientCache(cfg, model, system)
    for theorem in cfg.theorems:
        ing, p = cache.ingredients(theorem, cfg.theorems)
        bound = theorem_bound(theorem, ing, p)
        report.bounds.append(bound)
        if not bound.c_free:
            report.verdicts.append(dominance_verdict(report.distance, bound))

    report.wall_time = time.perf_counter() - started
    if write:
        report.write()
        _record_runs(report)
    return report


def _resize_spec(spec: Dict[str, Any], n: int) -> Dict[str, Any]:
    """The same model family at size n."""
    out = copy.deepcopy(spec)
    kind = spec.get("kind")
    if kind in ("iid", "erickson"):
        out["n"] = n
    elif kind == "moving_sum":
        if len(spec.get("shape", [])) != 1:
            raise UsageError("size ladders need a one-dimensional shape", "model.shape")
        out["shape"] = [n]
    elif kind in ("local_maxima", "edge_sum"):
        graph = spec.get("graph", {})
        family = next((k for k in ("cycle", "path", "complete") if k in graph), None)
        if family is None:
            raise UsageError("size ladders need a cycle, path or complete graph", "model.graph")
        out["graph"] = {family: n}
    else:
        raise UsageError(f"unknown kind {kind!r}", "model.kind")
    return out


def run_rate_study(cfg: ExperimentConfig, write: bool = True) -> ExperimentReport:
    """Kolmogorov distance along a size ladder and the fitted log-log slope."""
    if not cfg.sizes or len(cfg.sizes) < 3:
        raise UsageError("a rate study needs at least 3 sizes", "sizes")
    started = time.perf_counter()
    report = ExperimentReport(
        command="rate",
        config=cfg,
        config_hash=config_hash(cfg),
        model_hash=content_hash(cfg.model),
        model={'kind': cfg.model.get("kind")},
    )
    rows = []
    for k, n in enumerate(cfg.sizes):
        model = model_from_spec(_resize_spec(cfg.model, int(n)))
        size_seed = int(derive_seed(cfg.seed, STREAM_RATE, k).generate_state(1)[0])
        distance = kolmogorov_distance(model, cfg.replicates, size_seed, cfg.delta)
        rows.append({'n': int(n), 'ks': distance.ks, 'dkw': distance.dkw_radius})
        log_info(f"rate study n={n}: ks={distance.ks:.5g} ({distance.mode})")

    table = pd.DataFrame(rows, columns=['n', 'ks', 'dkw'])
    positive = table[table['ks'] > 0]
    if len(positive) < len(table):
        log_warning("rate study: dropping sizes with zero distance from the fit")
    report.rate = rate_fit([(r.n, r.ks, 1.0) for r in positive.itertuples()])
    report.rate_table = table
    report.wall_time = time.perf_counter() - started

    if write:
        report.write()
        get_db().insert_rate_fit(RateFitRecord(
            id=None,
            timestamp=datetime.now(),
            config_hash=report.config_hash,
            model_kind=str(cfg.model.get("kind")),
            sizes=",".join(str(n) for n in cfg.sizes),
            slope=report.rate.slope,
            slope_low=report.rate.slope_ci[0],
            slope_high=report.rate.slope_ci[1],
            intercept=report.rate.intercept,
        ))
    return report


def stein_property_suite(
    zs: Sequence[float] = (-2.0, 0.0, 2.0),
    alphas: Sequence[float] = (0.1, 1.0),
    grid: Optional[np.ndarray] = None,
    step: float = 1e-5,
) -> CheckReport:
    """0 ≤ f ≤ 1, |f′| ≤ 1 and the equation residual, by central differences away from the kinks."""
    grid = np.linspace(-8.0, 8.0, 321) if grid is None else np.asarray(grid, dtype=np.float64)
    rows: List[CheckRow] = []
    for z in zs:
        for alpha in alphas:
            kinks = np.minimum(np.abs(grid - z), np.abs(grid - z - alpha))
            w = grid[kinks > 1e-3]
            f = stein_solution(z, alpha, w)
            slope = (stein_solution(z, alpha, w + step) - stein_solution(z, alpha, w - step)) / (2 * step)
            residual = slope - w * f - smoothed_indicator(z, alpha, w) + smoothed_indicator_mean(z, alpha)
            tag = f"z={z:g},alpha={alpha:g}"
            rows.append(CheckRow(f"f>=0[{tag}]", -float(f.min()), 0.0, "<="))
            rows.append(CheckRow(f"f<=1[{tag}]", float(f.max()), 1.0, "<="))
            rows.append(CheckRow(f"|f'|<=1[{tag}]", float(np.abs(slope).max()), 1.0 + 1e-3, "<="))
            rows.append(CheckRow(f"residual[{tag}]", float(np.abs(residual).max()), 1e-6, "<="))
    return CheckReport("stein_solution", rows, {'points': int(len(grid)), 'step': step})


def _default_intervals(seed: int, count: int = 20) -> List[Tuple[float, float]]:
    rng = np.random.Generator(np.random.PCG64(derive_seed(seed, STREAM_RATE + 1, 0)))
    ends = np.sort(rng.uniform(-3.0, 3.0, size=(count, 2)), axis=1)
    return [(float(a), float(b)) for a, b in ends]


def run_verify(cfg: ExperimentConfig, write: bool = True) -> ExperimentReport:
    """Moment inequality, concentration, identity and Stein-solution suites."""
    started = time.perf_counter()
    model, system = build_model(cfg)
    report = ExperimentReport(
        command="verify",
        config=cfg,
        config_hash=config_hash(cfg),
        model_hash=content_hash(cfg.model),
        model=model.to_dict(),
    )

    identity = k_integral_identity(model, cfg.replicates, cfg.seed)
    tolerance = 1e-10 if identity.is_exact else 4 * identity.se
    report.checks.append({
        'check': 'kernel_integral_identity',
        'value': identity.to_dict(),
        'holds': abs(identity.value - 1.0) <= max(tolerance, 1e-10),
    })

    if model.can_enumerate:
        if system.level.covers(Level.LD3):
            report.checks.append(lemma_3_1_check(model, system).to_dict())
        if system.level.covers(Level.LD4STAR):
            report.checks.append(lemma_3_2_check(model, system).to_dict())
    else:
        log_warning("verify: moment inequality suites need an enumerable model, skipped")

    intervals = cfg.intervals or _default_intervals(cfg.seed)
    report.checks.append(
        proposition_3_1_check(model, system, intervals, cfg.replicates, cfg.seed).to_dict()
    )
    report.checks.append(stein_property_suite().to_dict())

    report.wall_time = time.perf_counter() - started
    if write:
        report.write()
        _record_runs(report)
    return report


def _record_runs(report: ExperimentReport):
    db = get_db()
    now = datetime.now()
    path = str(report.path) if report.path else None
    distance = report.distance
    base = dict(
        id=None, timestamp=now, command=report.command, config_hash=report.config_hash,
        ks=distance.ks if distance else None,
        dkw_radius=distance.dkw_radius if distance else None,
        report_path=path,
    )
    verdicts = {v.theorem: v for v in report.verdicts}
    if not report.bounds:
        db.insert_run(RunRecord(theorem=None, bound=None, bound_se=None,
                                verdict=None if report.passed else "FAIL", **base))
    for bound in report.bounds:
        verdict = verdicts.get(bound.theorem)
        db.insert_run(RunRecord(
            theorem=bound.theorem, bound=bound.value, bound_se=bound.se,
            verdict=verdict.label if verdict else "C-FREE", **base,
        ))


def format_report(doc: Dict[str, Any]) -> str:
    """Human-readable summary of a JSON report."""
    lines = [
        f"{doc.get('command')} | config {doc.get('config_hash')} | {doc.get('software_version')}",
        f"model: {doc.get('model', {}).get('kind')} n={doc.get('model', {}).get('n')}",
    ]
    distance = doc.get('distance')
    if distance:
        lines.append(f"KS = {distance['ks']:.6g} ± {distance['dkw_radius']:.3g} ({distance['mode']}, "
                     f"{distance['replicates']} replicates)")
    for bound in doc.get('bounds', []):
        tag = " [C-free]" if bound['c_free'] else ""
        lines.append(f"  {bound['theorem']:>10}: {bound['value']:.6g} ± {bound['se']:.3g}{tag}")
    for verdict in doc.get('verdicts', []):
        lines.append(f"  {verdict['theorem']:>10}: {verdict['verdict']} (margin {verdict['margin']:.4g})")
    rate = doc.get('rate')
    if rate:
        lo, hi = rate['slope_ci']
        lines.append(f"slope = {rate['slope']:.4f}  [{lo:.4f}, {hi:.4f}]")
    for check in doc.get('checks', []):
        lines.append(f"  {check.get('check')}: {'holds' if check.get('holds') else 'FAILS'}")
    lines.append(f"passed: {doc.get('passed')}  wall time: {doc.get('wall_time', 0):.2f}s "
                 f"on {doc.get('threads', 1)} thread(s)")
    return "\n".join(lines)
