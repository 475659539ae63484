"""Experiment orchestration: config files, replicated coupled runs, sweeps,
the psi check and CSV / JSON-lines output.

Seeding: replication ``r`` of any sweep point uses the instance seed
``derive_seed(master, "instance", r)`` and the run seed
``derive_seed(master, "run", r)``.  Neither depends on the sweep point, so
different points (and different policies) share common random numbers.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
import subprocess
import time
import typing
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from .coupling import (DISAGREE, CouplingAssertionError, check_elliptical_potential,
                       bad_round_bound, count_bad_rounds, psi_samples, run_coupled)
from .env import InfeasibleInstanceError, Instance, InstanceConfig, generate_instance
from .policies import LEARNED, PolicyConfig, PolicyKind
from .streams import derive_seed

log = logging.getLogger(__name__)

CURVE_COLUMNS = ["policy", "sweep_key", "rep", "t", "Q", "Q_star"]
SUMMARY_COLUMNS = ["policy", "sweep_key", "mean_final_Q", "std_final_Q", "mean_regret",
                   "bad_rounds", "elliptic_lhs", "elliptic_rhs"]
PSI_COLUMNS = ["t", "T", "seed", "psi", "divergence_event"]
REGRET_COLUMNS = ["policy", "rep", "t", "Q", "Q_star"]
ASSERTION_COLUMNS = ["policy", "sweep_key", "rep", "check", "lhs", "rhs", "ok"]
BAND_COLUMNS = ["policy", "sweep_key", "t", "mean_Q", "std_Q", "mean_Q_star"]

ALL_POLICIES = [k.value for k in PolicyKind]
SWEEP_AXES = {"sweep_slack": "slack", "sweep_K": "K", "sweep_d": "d"}


class ConfigError(ValueError):
    pass


class AssertionBreach(RuntimeError):
    pass


@dataclass
class ExperimentConfig:
    # horizon and replication
    T: int = 5000
    reps: int = 10
    seed: int = 0
    policies: list[str] = field(default_factory=lambda: ["CQB_EPS", "CQB_OPT", "RANDOM", "OPTIMAL"])
    # instance
    d: int = 5
    K: int = 5
    lam: float = 0.7
    slack: float = 0.1
    kappa: float = 10.0
    lambda0: float = 1.0
    R: float = 0.25
    S: Optional[float] = None
    sigma0_sq: Optional[float] = None
    context: str = "synthetic"
    normalize: Optional[bool] = None
    standardize: bool = False
    slack_mode: str = "conditioned"
    n_validation: int = 10_000
    min_acceptance: float = 0.05
    max_attempts: int = 1000
    # policy knobs, applied to every policy that reads them
    eps_rate: Optional[float] = None
    tau: Optional[int] = None
    tau_mode: str = "PRACTICAL"
    tau_C: float = 3e-4
    C3: float = 1.0
    ts_R: float = 0.25
    delta: Optional[float] = None
    beta_scale: float = 1.0
    # sweep axes (empty: no sweep)
    sweep_slack: list[float] = field(default_factory=list)
    sweep_K: list[int] = field(default_factory=list)
    sweep_d: list[int] = field(default_factory=list)
    # runtime checks
    assert_elliptic: bool = False
    assert_bad_rounds: bool = False
    assert_psi: bool = False
    # psi check grid
    psi_samples: int = 10_000
    psi_T_max: int = 200
    psi_d_max: int = 3
    psi_K_max: int = 3
    psi_per_path: int = 10
    psi_policies: list[str] = field(default_factory=lambda: [p for p in ALL_POLICIES])
    # output
    out: str = "results"
    workers: int = 1

    def validate(self) -> None:
        errs = []
        if self.T < 1:
            errs.append("T: must be >= 1")
        if self.reps < 1:
            errs.append("reps: must be >= 1")
        if not 0.0 <= self.lam <= 1.0:
            errs.append("lam: must lie in [0, 1]")
        if self.slack <= 0:
            errs.append("slack: must be positive")
        if self.kappa <= 0 or self.lambda0 <= 0:
            errs.append("kappa/lambda0: must be positive")
        if self.workers < 1:
            errs.append("workers: must be >= 1")
        if self.slack_mode not in ("conditioned", "raw"):
            errs.append("slack_mode: expected 'conditioned' or 'raw'")
        for i, name in enumerate(self.policies):
            if name not in ALL_POLICIES:
                errs.append(f"policies[{i}]: unknown policy {name!r}")
        for i, name in enumerate(self.psi_policies):
            if name not in ALL_POLICIES:
                errs.append(f"psi_policies[{i}]: unknown policy {name!r}")
        try:
            from .policies import TauMode
            TauMode(self.tau_mode)
        except ValueError:
            errs.append(f"tau_mode: unknown mode {self.tau_mode!r}")
        if self.psi_T_max < 3:
            errs.append("psi_T_max: must be >= 3")
        if errs:
            raise ConfigError("; ".join(errs))

    def instance_config(self, **override) -> InstanceConfig:
        names = {f.name for f in fields(InstanceConfig)}
        kw = {n: getattr(self, n) for n in names}
        kw.update(override)
        return InstanceConfig(**kw)

    def policy_config(self, name: str) -> PolicyConfig:
        return PolicyConfig(name, eps_rate=self.eps_rate, tau=self.tau, tau_mode=self.tau_mode,
                            tau_C=self.tau_C, C3=self.C3, ts_R=self.ts_R, delta=self.delta,
                            beta_scale=self.beta_scale)

    def sweep_points(self) -> list[tuple[str, dict]]:
        """Cross product of the non-empty axes as ``(sweep_key, overrides)``."""
        points: list[tuple[str, dict]] = [("base", {})]
        for key, attr in SWEEP_AXES.items():
            values = getattr(self, key)
            if not values:
                continue
            nxt = []
            for label, over in points:
                for v in values:
                    lab = f"{attr}={v}" if label == "base" else f"{label};{attr}={v}"
                    nxt.append((lab, {**over, attr: v}))
            points = nxt
        return points


# ---------------------------------------------------------------------------
# config file: one ``key = value`` per line, ``#`` comments, lists comma-separated


def _coerce(name: str, tp, raw: str):
    raw = raw.strip()
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:  # Optional[X]
        if raw.lower() in ("", "none", "null"):
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _coerce(name, inner, raw)
    if origin is list:
        if raw == "":
            return []
        return [_coerce(name, args[0], part) for part in raw.split(",")]
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(float(raw)) if "e" in raw.lower() else int(raw, 0)
        if tp is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {getattr(tp, '__name__', tp)}") from None


def _hints():
    return typing.get_type_hints(ExperimentConfig)


def parse_config_text(text: str, source: str = "<config>") -> dict:
    hints = _hints()
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in hints:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, hints[key], value)
    return out


def normalize_policy_names(names) -> list[str]:
    return [str(n).strip().upper().replace("-", "_") for n in names if str(n).strip()]


def build_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> ExperimentConfig:
    """Defaults, then the file, then ``overrides`` (CLI flags)."""
    values: dict = {}
    if path is not None:
        values.update(parse_config_text(Path(path).read_text(), source=str(path)))
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = v
    for key in ("policies", "psi_policies"):
        if key in values:
            values[key] = normalize_policy_names(values[key])
    cfg = ExperimentConfig(**values)
    cfg.validate()
    return cfg


def config_to_text(cfg: ExperimentConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, list):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name} = {'none' if v is None else v}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# one unit of work: (sweep point, policy, rep)


def instance_seed(master: int, rep: int) -> int:
    return derive_seed(master, "instance", rep)


def run_seed(master: int, rep: int) -> int:
    return derive_seed(master, "run", rep)


@dataclass
class UnitResult:
    policy: str
    sweep_key: str
    rep: int
    q: list
    q_star: list
    bad_rounds: Optional[int] = None
    bad_round_bound: Optional[float] = None
    elliptic_lhs: Optional[float] = None
    elliptic_rhs: Optional[float] = None
    elliptic_ok: Optional[bool] = None
    seconds: float = 0.0


_INSTANCE_CACHE: dict = {}


def _instance(cfg: ExperimentConfig, over: dict, rep: int) -> Instance:
    icfg = cfg.instance_config(**over)
    key = (repr(icfg), cfg.seed, rep)
    if key not in _INSTANCE_CACHE:
        if len(_INSTANCE_CACHE) > 64:
            _INSTANCE_CACHE.clear()
        _INSTANCE_CACHE[key] = generate_instance(icfg, instance_seed(cfg.seed, rep))
    return _INSTANCE_CACHE[key]


def run_unit(cfg: ExperimentConfig, sweep_key: str, over: dict, policy: str, rep: int) -> UnitResult:
    t0 = time.perf_counter()
    inst = _instance(cfg, over, rep)
    pcfg = cfg.policy_config(policy).resolve(inst, cfg.T)
    needs_trace = pcfg.kind in LEARNED
    alg, opt = run_coupled(pcfg, inst, cfg.T, run_seed(cfg.seed, rep), record=needs_trace)
    res = UnitResult(policy, sweep_key, rep, alg.q, opt.q)
    if needs_trace:
        res.bad_rounds = count_bad_rounds(alg, inst.slack)
        res.bad_round_bound = bad_round_bound(inst, cfg.T, pcfg.delta)
        res.elliptic_lhs, res.elliptic_rhs, res.elliptic_ok = check_elliptical_potential(alg, inst)
    res.seconds = time.perf_counter() - t0
    return res


def _run_unit_args(args):
    return run_unit(*args)


def _map(fn, items, workers: int):
    # ordered results either way, so output files do not depend on scheduling
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=1))


# ---------------------------------------------------------------------------
# experiments


@dataclass
class ExperimentResult:
    units: list[UnitResult]
    skipped: list[tuple[str, str]]
    breaches: list[str]
    files: dict
    seconds: float = 0.0

    def group(self, policy: str, sweep_key: str = "base") -> list[UnitResult]:
        return [u for u in self.units if u.policy == policy and u.sweep_key == sweep_key]

    def mean_curve(self, policy: str, sweep_key: str = "base") -> np.ndarray:
        return np.mean([u.q for u in self.group(policy, sweep_key)], axis=0)


def _feasible_points(cfg: ExperimentConfig):
    ok, skipped = [], []
    for key, over in cfg.sweep_points():
        try:
            for rep in range(cfg.reps):
                inst = _instance(cfg, over, rep)
                for name in cfg.policies:
                    cfg.policy_config(name).resolve(inst, cfg.T)
        except (InfeasibleInstanceError, ValueError) as exc:
            warnings.warn(f"sweep point {key} skipped: {exc}")
            skipped.append((key, str(exc)))
            continue
        ok.append((key, over))
    return ok, skipped


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(round(v, 12))
    return str(v)


def summary_rows(units: list[UnitResult], skipped=()) -> list[list[str]]:
    groups: dict = {}
    for u in units:
        groups.setdefault((u.sweep_key, u.policy), []).append(u)
    rows = []
    for (key, policy), us in groups.items():
        finals = np.array([u.q[-1] for u in us], float)
        regrets = finals - np.array([u.q_star[-1] for u in us], float)
        std = float(finals.std(ddof=1)) if len(finals) > 1 else 0.0
        learned = us[0].bad_rounds is not None
        bad = float(np.mean([u.bad_rounds for u in us])) if learned else None
        lhs = float(np.mean([u.elliptic_lhs for u in us])) if learned else None
        rhs = float(np.mean([u.elliptic_rhs for u in us])) if learned else None
        rows.append([policy, key, _fmt(float(finals.mean())), _fmt(std), _fmt(float(regrets.mean())),
                     _fmt(bad), _fmt(lhs), _fmt(rhs)])
    for key, reason in skipped:
        rows.append(["INFEASIBLE", key, "", "", "", "", "", ""])
    return rows


def band_rows(units: list[UnitResult]):
    """Per-round mean and std (ddof=1, 0 for a single rep) of Q across reps."""
    groups: dict = {}
    for u in units:
        groups.setdefault((u.policy, u.sweep_key), []).append(u)
    for (policy, key), us in groups.items():
        q = np.array([u.q for u in us], float)
        qs = np.array([u.q_star for u in us], float)
        std = q.std(axis=0, ddof=1) if len(us) > 1 else np.zeros(q.shape[1])
        for t in range(q.shape[1]):
            yield [policy, key, t + 1, _fmt(float(q[:, t].mean())), _fmt(float(std[t])),
                   _fmt(float(qs[:, t].mean()))]


def _write_csv(path: Path, header, rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _git_hash() -> Optional[str]:
    try:
        out = subprocess.run(["git", "rev-parse", "HEAD"], capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).resolve().parent)
        return out.stdout.strip() or None
    except (OSError, subprocess.SubprocessError):
        return None


def write_meta(path: Path, command: str, cfg: ExperimentConfig, **extra) -> None:
    rec = {"command": command, "config": dataclasses.asdict(cfg), "git": _git_hash(),
           "time": time.strftime("%Y-%m-%dT%H:%M:%S"), **extra}
    with path.open("a") as fh:
        fh.write(json.dumps(rec, sort_keys=True, default=str) + "\n")


def _assertion_rows(units: list[UnitResult], cfg: ExperimentConfig):
    rows, breaches = [], []
    for u in units:
        if u.bad_rounds is None:
            continue
        if cfg.assert_elliptic:
            rows.append([u.policy, u.sweep_key, u.rep, "elliptical_potential",
                         _fmt(u.elliptic_lhs), _fmt(u.elliptic_rhs), int(u.elliptic_ok)])
            if not u.elliptic_ok:
                breaches.append(f"elliptical potential: {u.policy} {u.sweep_key} rep {u.rep}")
        if cfg.assert_bad_rounds and u.policy == PolicyKind.CQB_OPT.value:
            ok = u.bad_rounds <= u.bad_round_bound
            rows.append([u.policy, u.sweep_key, u.rep, "bad_rounds", u.bad_rounds,
                         _fmt(u.bad_round_bound), int(ok)])
            if not ok:
                breaches.append(f"bad-round bound: {u.policy} {u.sweep_key} rep {u.rep}")
    return rows, breaches


def run_sweep(cfg: ExperimentConfig, write: bool = True) -> ExperimentResult:
    """Every (sweep point, policy, rep); infeasible points become warning rows."""
    t0 = time.perf_counter()
    points, skipped = _feasible_points(cfg)
    jobs = [(cfg, key, over, name, rep)
            for key, over in points for name in cfg.policies for rep in range(cfg.reps)]
    units = _map(_run_unit_args, jobs, cfg.workers)
    arows, breaches = _assertion_rows(units, cfg)
    res = ExperimentResult(units, skipped, breaches, {}, time.perf_counter() - t0)
    if write:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        curve_rows = ([u.policy, u.sweep_key, u.rep, t + 1, q, qs]
                      for u in units for t, (q, qs) in enumerate(zip(u.q, u.q_star)))
        res.files = {"curves": out / "curves.csv", "bands": out / "bands.csv",
                     "summary": out / "summary.csv", "assertions": out / "assertions.csv",
                     "meta": out / "meta.jsonl"}
        _write_csv(res.files["curves"], CURVE_COLUMNS, curve_rows)
        _write_csv(res.files["bands"], BAND_COLUMNS, band_rows(units))
        if [k for k, _ in points] == ["base"]:
            # single configuration: the regret report needs no sweep key
            res.files["regret"] = out / "regret.csv"
            _write_csv(res.files["regret"], REGRET_COLUMNS,
                       ([u.policy, u.rep, t + 1, q, qs] for u in units
                        for t, (q, qs) in enumerate(zip(u.q, u.q_star))))
        _write_csv(res.files["summary"], SUMMARY_COLUMNS, summary_rows(units, skipped))
        _write_csv(res.files["assertions"], ASSERTION_COLUMNS, arows)
        write_meta(res.files["meta"], "sweep" if cfg.sweep_points()[0][0] != "base" else "run", cfg,
                   seconds=round(res.seconds, 3), skipped=[k for k, _ in skipped], breaches=breaches,
                   unit_seconds=[round(u.seconds, 3) for u in units])
    if breaches:
        raise AssertionBreach("; ".join(breaches))
    return res


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> ExperimentResult:
    """Replicated coupled runs at a single configuration (sweep axes ignored)."""
    single = dataclasses.replace(cfg, sweep_slack=[], sweep_K=[], sweep_d=[])
    return run_sweep(single, write=write)


# ---------------------------------------------------------------------------
# psi check


@dataclass
class PsiReport:
    samples: list
    violations: list[str]
    histogram: dict  # (event, psi) -> count
    seconds: float = 0.0

    def ok(self) -> bool:
        return not self.violations


def _psi_path(args):
    cfg, path_id = args
    rng = np.random.default_rng(derive_seed(cfg.seed, "psi-grid", path_id))
    seed = derive_seed(cfg.seed, "psi-path", path_id)
    policy = cfg.psi_policies[path_id % len(cfg.psi_policies)]
    for attempt in range(100):
        d = int(rng.integers(1, cfg.psi_d_max + 1))
        K = int(rng.integers(1, cfg.psi_K_max + 1))
        T = int(rng.integers(max(3, cfg.psi_T_max // 4), cfg.psi_T_max + 1))
        lam = float(rng.uniform(0.2, 0.6))
        slack = 0.05
        icfg = InstanceConfig(d=d, K=K, lam=lam, slack=slack, kappa=cfg.kappa, lambda0=cfg.lambda0,
                              n_validation=2000, normalize=True)
        try:
            inst = generate_instance(icfg, derive_seed(seed, "instance", attempt))
            pcfg = PolicyConfig(policy, tau_mode="EXPLICIT" if policy == "CQB_EPS" else "PRACTICAL",
                                tau=int(rng.integers(0, T // 2)), eps_rate=0.02)
            pcfg.resolve(inst, T)
        except (InfeasibleInstanceError, ValueError):
            continue
        n = min(cfg.psi_per_path, T - 1)
        ts = rng.choice(np.arange(1, T), size=n, replace=False)
        return psi_samples(pcfg, inst, T, ts, seed)
    raise InfeasibleInstanceError(f"psi grid: no feasible instance for path {path_id}")


def psi_check(cfg: ExperimentConfig, write: bool = True) -> PsiReport:
    """Sample psi(t, T) over random small instances and mixed policies."""
    t0 = time.perf_counter()
    n_paths = math.ceil(cfg.psi_samples / cfg.psi_per_path)
    violations = []
    samples = []
    try:
        for batch in _map(_psi_path, [(cfg, i) for i in range(n_paths)], cfg.workers):
            samples.extend(batch)
    except CouplingAssertionError as exc:
        violations.append(str(exc))
    samples = samples[:cfg.psi_samples]
    hist: dict = {}
    for s in samples:
        hist[(s.divergence_event, s.value)] = hist.get((s.divergence_event, s.value), 0) + 1
        for v in s.violations():
            violations.append(f"seed {s.seed} t {s.t}: {v}")
    rep = PsiReport(samples, violations, hist, time.perf_counter() - t0)
    if write:
        out = Path(cfg.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "psi.csv", PSI_COLUMNS,
                   ([s.t, s.T, s.seed, s.value, s.divergence_event] for s in samples))
        _write_csv(out / "psi_histogram.csv", ["divergence_event", "psi", "count"],
                   ([e, v, c] for (e, v), c in sorted(hist.items())))
        write_meta(out / "meta.jsonl", "psi-check", cfg, seconds=round(rep.seconds, 3),
                   n_samples=len(samples), n_violations=len(violations))
    return rep


def format_histogram(hist: dict) -> str:
    lines = ["event                      psi=-1   psi=0   psi=1"]
    for event in ("AGREE_00", "AGREE_11", DISAGREE, "NONE"):
        c = [hist.get((event, v), 0) for v in (-1, 0, 1)]
        lines.append(f"{event:<26} {c[0]:>6} {c[1]:>7} {c[2]:>7}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# validate: config lint plus a feasibility dry run


def validate(cfg: ExperimentConfig) -> list[str]:
    """Return human-readable report lines; raises ConfigError on the first hard failure."""
    lines = [f"config ok: T={cfg.T} reps={cfg.reps} policies={','.join(cfg.policies)}"]
    problems = []
    for key, over in cfg.sweep_points():
        for rep in range(cfg.reps):
            try:
                inst = generate_instance(cfg.instance_config(**over), instance_seed(cfg.seed, rep))
            except (InfeasibleInstanceError, ValueError) as exc:
                problems.append(f"{key} rep {rep}: {exc}")
                continue
            c = inst.certificate
            lines.append(f"{key} rep {rep}: feasible after {c['attempts']} draws, "
                         f"acceptance {c['acceptance_rate']:.3f}, S={inst.S:g}")
            for name in cfg.policies:
                try:
                    p = cfg.policy_config(name).resolve(inst, cfg.T)
                except ValueError as exc:
                    problems.append(f"{key} rep {rep} {name}: {exc}")
                    continue
                if p.kind is PolicyKind.CQB_EPS and rep == 0:
                    lines.append(f"{key}: CQB_EPS tau={p.tau} eps_rate={p.eps_rate:.4g}")
    if problems:
        raise ConfigError("; ".join(problems))
    return lines
