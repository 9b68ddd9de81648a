"""Config-driven experiments: replicates, paired policy comparisons and persistence.

A replicate is a pure function of ``(config, replicate_id)``: the replicate
seed is ``base_seed XOR replicate_id`` and every random consumer gets its own
child stream, so results do not depend on thread count or scheduling.
"""

from __future__ import annotations

import copy
import csv
import io
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import yaml

from .dynamics import (
    NoiseModel,
    PerturbationConfig,
    SystemSpec,
    epoch_schedule,
    sample_noise_block,
    update_times,
)
from .errors import AdaptiveLQRError, ConfigurationError
from .estimation import ConstraintSet, excitation_report
from .metrics import RegretRecord, coupled_regret, decomposition_check
from .policies import POLICY_KINDS, bootstrap_stabilizer, make_policy
from .presets import preset, random_stable_system
from .riccati import CostPair, DynamicsPair
from .seeding import replicate_seed, streams

CSV_COLUMNS = (
    "replicate_id", "seed", "t", "epoch", "regret", "norm_regret_thm3",
    "est_err_sq", "norm_err_thm3", "policy", "fallback_flag",
)
THREADS_ENV = "ADAPTIVE_LQR_THREADS"
ADAPTIVE_KINDS = ("perturbed_greedy", "restricted_greedy", "rce", "ts")
# the telescoping oracle is O(n^2); skip it on longer runs
ORACLE_MAX_HORIZON = 2000

_DEFAULT_POLICY = {
    "kind": "perturbed_greedy",
    "perturbation": {},
    # None: known-B0 subspace for restricted_greedy, unconstrained otherwise
    "constraint": None,
    "v_scale": 0.0,
    "sigma_rce": 1.0,
    "ts_ridge": 1.0,
    "ts_scale": 1.0,
}
_DEFAULT_BOOTSTRAP = {"n0": 17, "input_scale": 1.0, "rounds": 5, "certify_draws": 10}


def _merge(defaults, given, section):
    given = dict(given or {})
    unknown = set(given) - set(defaults)
    if unknown:
        raise ConfigurationError(f"unknown {section} keys: {sorted(unknown)}")
    out = copy.deepcopy(defaults)
    out.update(given)
    return out


@dataclass
class ExperimentConfig:
    """Resolved experiment description; key names match the YAML schema."""

    system: dict = field(default_factory=lambda: {"preset": "paper-eq11"})
    noise: dict = field(default_factory=lambda: {"family": "gaussian", "scale": 1.0})
    policy: dict = field(default_factory=lambda: dict(_DEFAULT_POLICY))
    policies: list = field(default_factory=list)
    bootstrap: dict = field(default_factory=lambda: dict(_DEFAULT_BOOTSTRAP))
    horizon: int = 10_000
    replicates: int = 1
    base_seed: int = 0
    record_every: int = 100
    oracle_checks: bool = False
    delta: float = 1.0

    def __post_init__(self):
        self.policy = _merge(_DEFAULT_POLICY, self.policy, "policy")
        self.bootstrap = _merge(_DEFAULT_BOOTSTRAP, self.bootstrap, "bootstrap")
        self.policies = list(self.policies or [])

    # ---- construction

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigurationError("config must be a mapping")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**data)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path) -> "ExperimentConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigurationError(f"config {path} is not valid YAML: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def with_overrides(self, **kw) -> "ExperimentConfig":
        data = self.to_dict()
        data.update({k: v for k, v in kw.items() if v is not None})
        return ExperimentConfig.from_dict(data)

    # ---- resolved objects

    @cached_property
    def system_spec(self) -> SystemSpec:
        s = dict(self.system)
        if "preset" in s:
            theta, cost = preset(s["preset"])
        elif "random" in s:
            g = dict(s["random"])
            rng = np.random.default_rng(int(g.get("seed", 0)))
            theta, cost = random_stable_system(int(g["p"]), int(g["r"]), rng, float(g.get("radius", 0.9)))
        elif {"A", "B", "Q", "R"} <= set(s):
            theta, cost = DynamicsPair(np.array(s["A"]), np.array(s["B"])), CostPair(np.array(s["Q"]), np.array(s["R"]))
        else:
            raise ConfigurationError("system needs 'preset', 'random' or inline A, B, Q, R")
        try:
            return SystemSpec(theta, cost)
        except ArithmeticError as exc:
            raise ConfigurationError(f"true system is not stabilizable: {exc}") from exc

    @cached_property
    def noise_model(self) -> NoiseModel:
        n = dict(self.noise)
        p = self.system_spec.p
        cov = n.pop("covariance", None)
        scale = float(n.pop("scale", 1.0))
        cov = scale * np.eye(p) if cov is None else np.asarray(cov, dtype=float)
        model = NoiseModel(covariance=cov, **n)
        if model.p != p:
            raise ConfigurationError(f"noise covariance must be {p}x{p}")
        return model

    @property
    def alpha(self) -> float:
        return self.noise_model.tail_exponent

    def perturbation(self, kind: str | None = None) -> PerturbationConfig:
        kind = kind or self.policy["kind"]
        pc = dict(self.policy["perturbation"])
        pc.setdefault("mode", "restricted" if kind == "restricted_greedy" else "algorithm1")
        return PerturbationConfig(**pc)

    def constraint(self) -> ConstraintSet:
        c = self.policy["constraint"]
        if c in (None, "none"):
            return ConstraintSet()
        if c == "known_input_matrix":
            return ConstraintSet.known_input_matrix(self.system_spec.theta0.B)
        if isinstance(c, dict) and "support" in c:
            return ConstraintSet.from_support(np.asarray(c["support"], dtype=bool))
        raise ConfigurationError(f"unknown constraint {c!r}")

    def kinds(self) -> list:
        return self.policies or [self.policy["kind"]]

    def record_times(self) -> list:
        n = self.horizon
        if self.record_every <= 0:
            return []
        gamma = self.perturbation().gamma
        times = set(update_times(gamma, n)) | set(range(self.record_every, n + 1, self.record_every)) | {n}
        return sorted(times)

    def validate(self) -> dict:
        """Check the whole config; returns a feasibility summary."""
        if not isinstance(self.horizon, int) or self.horizon < 1:
            raise ConfigurationError("horizon must be an integer >= 1")
        if not isinstance(self.replicates, int) or self.replicates < 1:
            raise ConfigurationError("replicates must be an integer >= 1")
        if not isinstance(self.base_seed, int) or self.base_seed < 0:
            raise ConfigurationError("base_seed must be a nonnegative integer")
        if not isinstance(self.record_every, int) or self.record_every < 0:
            raise ConfigurationError("record_every must be a nonnegative integer")
        if self.delta <= 0:
            raise ConfigurationError("delta must be positive")
        for k in self.kinds():
            if k not in POLICY_KINDS:
                raise ConfigurationError(f"unknown policy kind {k!r}; choose from {POLICY_KINDS}")
        spec = self.system_spec
        self.noise_model
        report = {"p": spec.p, "r": spec.r, "horizon": self.horizon, "replicates": self.replicates,
                  "policies": self.kinds(), "perturbation": {}}
        for k in self.kinds():
            report["perturbation"][k] = self.perturbation(k).validate(spec.r)
        c = self.constraint()
        if not c.contains(spec.theta0.theta):
            raise ConfigurationError("true parameter lies outside the configured constraint set")
        if self.bootstrap["n0"] < spec.p + spec.r:
            raise ConfigurationError(f"bootstrap n0 must be >= p + r = {spec.p + spec.r}")
        return report


# --------------------------------------------------------------------------
# running


@dataclass
class ReplicateResult:
    replicate_id: int
    seed: int
    policy: str
    records: list
    diagnostics: dict
    wall_time: float = field(default=0.0, compare=False)

    @property
    def fallback_flag(self) -> bool:
        return bool(self.diagnostics.get("fallback", False))


def _perturbation_energy(cfg: PerturbationConfig, r: int, n: int) -> list:
    """Per-epoch summed perturbation covariances over ``t = 0..n-2``."""
    if n < 2:
        return []
    ep = epoch_schedule(cfg.gamma, n - 2)
    ms, counts = np.unique(ep, return_counts=True)
    return [c * cfg.covariance(int(m), r) for m, c in zip(ms, counts)]


def run_replicate(cfg: ExperimentConfig, replicate_id: int, kind: str | None = None) -> ReplicateResult:
    start = time.perf_counter()
    kind = kind or cfg.policy["kind"]
    seed = replicate_seed(cfg.base_seed, replicate_id)
    rngs = streams(seed)
    spec = cfg.system_spec
    n = cfg.horizon
    noise = sample_noise_block(cfg.noise_model, 1, n, rngs["noise"])
    pert = cfg.perturbation(kind)
    diag = {"fallback": False}
    boot = None
    if kind in ADAPTIVE_KINDS:
        b = cfg.bootstrap
        boot = bootstrap_stabilizer(spec, int(b["n0"]), rngs["bootstrap"], cfg.noise_model,
                                    float(b["input_scale"]), int(b["rounds"]), int(b["certify_draws"]))
        diag.update(fallback=boot.fallback, bootstrap_rounds=boot.rounds, bootstrap_samples=boot.samples)
    policy = make_policy(
        kind, spec, rngs, bootstrap=boot, perturbation=pert,
        constraint=cfg.constraint() if kind == "restricted_greedy" and cfg.policy["constraint"] is not None else None,
        v_scale=float(cfg.policy["v_scale"]), sigma_rce=float(cfg.policy["sigma_rce"]),
        ts_ridge=float(cfg.policy["ts_ridge"]), ts_scale=float(cfg.policy["ts_scale"]),
    )
    run = coupled_regret(spec, policy, noise, cfg.record_times(), alpha=cfg.alpha, delta=cfg.delta, seed=seed)
    traj = run.trajectory
    diag["riccati_failures"] = sum(e["event"] == "riccati_failure" for e in policy.events)
    diag["max_state_norm"] = float(np.max(np.linalg.norm(traj.x, axis=1)))
    diag["final_regret"] = float(run.regret[-1])
    est = getattr(policy, "estimator", None)
    if est is not None and kind != "optimal":
        history = _perturbation_energy(pert, spec.r, n) if kind in ("perturbed_greedy", "restricted_greedy") else []
        rep = excitation_report(est, cfg.noise_model, history, traj, spec)
        diag["excitation"] = {k: (bool(v) if isinstance(v, (bool, np.bool_)) else float(v)) for k, v in asdict(rep).items()}
    if cfg.oracle_checks:
        if n <= ORACLE_MAX_HORIZON:
            chk = decomposition_check(spec, traj, seed)
            diag["oracle"] = {"direct": chk["direct"], "telescoping": chk["telescoping"],
                              "closed_form": chk["terms"].total}
        else:
            diag["oracle"] = "skipped: horizon above %d" % ORACLE_MAX_HORIZON
    return ReplicateResult(replicate_id, seed, kind, run.records, diag, time.perf_counter() - start)


def resolve_threads(threads: int | None) -> int:
    if threads is None:
        env = os.environ.get(THREADS_ENV)
        if env:
            try:
                threads = int(env)
            except ValueError:
                raise ConfigurationError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
        else:
            threads = 1
    if threads < 1:
        raise ConfigurationError("threads must be >= 1")
    return threads


def run_experiment(cfg: ExperimentConfig, threads: int | None = None, kind: str | None = None) -> list:
    """All replicates of one policy, ordered by ``replicate_id``."""
    cfg.validate()
    threads = resolve_threads(threads)
    ids = range(cfg.replicates)
    if threads == 1:
        return [run_replicate(cfg, i, kind) for i in ids]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda i: run_replicate(cfg, i, kind), ids))


def _finite(a):
    a = np.asarray(a, dtype=float)
    return a[np.isfinite(a)]


def replicate_sup_stats(result: ReplicateResult) -> dict:
    """``sup_t t^{-1/2} R_t`` and ``sup_t t^{1/2} err_t^2`` over records with ``t >= 3``."""
    recs = [r for r in result.records if r.t >= 3]
    reg = _finite([r.regret / math.sqrt(r.t) for r in recs])
    err = _finite([r.est_err_sq * math.sqrt(r.t) for r in recs])
    return {"sup_regret": float(reg.max()) if reg.size else math.nan,
            "sup_error": float(err.max()) if err.size else math.nan}


def compare_policies(cfg: ExperimentConfig, kinds=None, threads: int | None = None):
    """Paired comparison: every policy sees the same replicate seeds.

    Returns ``(results by kind, summary)``.  The summary holds, per policy,
    the per-replicate sup statistics with their quartiles and, per recorded
    ``t``, the max over replicates of ``t^{-1/2} R_t`` and ``t^{1/2} err^2``.
    """
    kinds = list(kinds or cfg.kinds())
    if len(kinds) < 2:
        raise ConfigurationError("compare needs at least two policies")
    results = {k: run_experiment(cfg, threads, k) for k in kinds}
    summary = {}
    for k, res in results.items():
        sups = [replicate_sup_stats(r) for r in res]
        sr = np.array([s["sup_regret"] for s in sups])
        se = np.array([s["sup_error"] for s in sups])
        by_t = {}
        for r in res:
            for rec in r.records:
                if rec.t < 3:
                    continue
                cur = by_t.setdefault(rec.t, [-math.inf, -math.inf])
                cur[0] = max(cur[0], rec.regret / math.sqrt(rec.t))
                if math.isfinite(rec.est_err_sq):
                    cur[1] = max(cur[1], rec.est_err_sq * math.sqrt(rec.t))
        summary[k] = {
            "sup_regret": sr.tolist(),
            "sup_error": se.tolist(),
            "sup_regret_quartiles": _quartiles(sr),
            "sup_error_quartiles": _quartiles(se),
            "max_over_replicates": {
                t: {"regret": v[0], "error": v[1] if math.isfinite(v[1]) else math.nan}
                for t, v in sorted(by_t.items())
            },
            "fallbacks": int(sum(r.fallback_flag for r in res)),
        }
    return results, summary


def _quartiles(a):
    a = _finite(a)
    if not a.size:
        return [math.nan] * 3
    return [float(x) for x in np.percentile(a, [25, 50, 75])]


# --------------------------------------------------------------------------
# persistence


def _csv_rows(results):
    for res in results:
        for rec in res.records:
            yield [res.replicate_id, res.seed, rec.t, rec.epoch, repr(rec.regret), repr(rec.norm_regret_thm3),
                   repr(rec.est_err_sq), repr(rec.norm_err_thm3), res.policy, int(res.fallback_flag)]


def to_csv(results) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    w.writerows(_csv_rows(results))
    return buf.getvalue()


def _jsonable(x):
    if isinstance(x, float):
        return None if not math.isfinite(x) else x
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, np.integer, np.bool_)):
        return _jsonable(x.item())
    return x


def to_json(results, cfg: ExperimentConfig | None = None, summary: dict | None = None) -> str:
    doc = {
        "config": cfg.to_dict() if cfg is not None else None,
        "replicates": [
            {
                "replicate_id": r.replicate_id,
                "seed": r.seed,
                "policy": r.policy,
                "diagnostics": r.diagnostics,
                "records": [asdict(rec) for rec in r.records],
            }
            for r in results
        ],
    }
    if summary is not None:
        doc["summary"] = summary
    return json.dumps(_jsonable(doc), indent=1, sort_keys=True) + "\n"


def _nan(x):
    return math.nan if x is None else x


def from_json(text: str) -> list:
    """Inverse of :func:`to_json` for the replicate list (``wall_time`` is not stored)."""
    doc = json.loads(text)
    out = []
    for r in doc["replicates"]:
        recs = [RegretRecord(int(d["t"]), int(d["epoch"]), _nan(d["regret"]), _nan(d["norm_regret_thm3"]),
                             _nan(d["est_err_sq"]), _nan(d["norm_err_thm3"])) for d in r["records"]]
        out.append(ReplicateResult(r["replicate_id"], r["seed"], r["policy"], recs, _restore(r["diagnostics"])))
    return out


def _restore(d):
    if isinstance(d, dict):
        return {k: _restore(v) for k, v in d.items()}
    if d is None:
        return math.nan
    return d


def emit(results, fmt: str, path, cfg: ExperimentConfig | None = None, summary: dict | None = None) -> Path:
    """Write results as CSV or JSON; returns the path written."""
    if fmt not in ("csv", "json"):
        raise ConfigurationError(f"unknown format {fmt!r}")
    results = list(results)
    if not results:
        raise ConfigurationError("no results to emit")
    text = to_csv(results) if fmt == "csv" else to_json(results, cfg, summary)
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise AdaptiveLQRError(f"cannot write {path}: {exc}") from exc
    return path
