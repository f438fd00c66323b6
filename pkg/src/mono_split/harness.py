"""Experiment orchestration: config parsing, trial fan-out, CSV output, table presets."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import __version__
from .experiments import GeneratorError, build_problem, load_instance
from .metrics import confidence_interval, error_to_solution, gap_estimate, residual
from .oracles import rng_stream
from .schedules import BatchSchedule, ScheduleError, StepRule, practical_step
from .solvers import ConfigurationError, NumericalDivergence, SolverConfig, run_saa, solve

AGGREGATE_HEADER = ("solver", "L", "trials", "error_mean", "ci_low", "ci_high", "time_mean_s", "evals", "seed")
TRACE_HEADER = ("k", "N_k", "gamma", "cum_evals", "residual", "error", "elapsed_s")
METRICS = ("residual", "error", "gap")
GAP_PROBES = 256


class ConfigError(ValueError):
    """Malformed experiment configuration; the message names the field or line."""


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class ExperimentConfig:
    problem: dict
    solvers: tuple
    n_trials: int = 2
    output_dir: str = "out"
    metrics: tuple = ("residual",)
    level: float = 0.95
    seed: int = 0
    L_label: Optional[str] = None


def _fail(where, message):
    raise ConfigError(f"{where}: {message}")


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    """Parse a YAML (or JSON, which YAML accepts) experiment document."""
    try:
        doc = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark
        line = f"line {mark.line + 1}, column {mark.column + 1}" if mark else "unknown position"
        raise ConfigError(f"{source}: parse error at {line}: {exc.problem}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: parse error: {exc}") from None
    if not isinstance(doc, dict):
        _fail(source, "top level must be a mapping")
    known = {"problem", "solvers", "n_trials", "output_dir", "metrics", "level", "seed", "L_label"}
    unknown = set(doc) - known
    if unknown:
        _fail(source, f"unknown fields {sorted(unknown)}")

    problem = doc.get("problem")
    if not isinstance(problem, dict):
        _fail(f"{source}: problem", "missing or not a mapping")
    if ("instance" in problem) == ("generator" in problem):
        _fail(f"{source}: problem", "give exactly one of 'generator' or 'instance'")
    if "instance" in problem:
        path = Path(problem["instance"])
        if not path.is_absolute():
            path = Path(source).parent / path
        try:
            problem = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            _fail(f"{source}: problem.instance", str(exc))
    else:
        problem = {"generator": problem["generator"], "params": dict(problem.get("params") or {})}

    blocks = doc.get("solvers")
    if not isinstance(blocks, list) or not blocks:
        _fail(f"{source}: solvers", "need a non-empty list of solver blocks")
    solvers = []
    for i, block in enumerate(blocks):
        where = f"{source}: solvers[{i}]"
        if not isinstance(block, dict):
            _fail(where, "solver block must be a mapping")
        try:
            solvers.append(SolverConfig.from_dict(block))
        except (ConfigurationError, ScheduleError, TypeError, KeyError) as exc:
            _fail(where, str(exc))
    labels = [s.label for s in solvers]
    if len(set(labels)) != len(labels):
        _fail(f"{source}: solvers", "solver names must be unique (set 'name')")

    n_trials = doc.get("n_trials", 2)
    if not isinstance(n_trials, int) or n_trials < 1:
        _fail(f"{source}: n_trials", "must be a positive integer")
    metrics = doc.get("metrics", ["residual"])
    if isinstance(metrics, str):
        metrics = [metrics]
    bad = [m for m in metrics if m not in METRICS]
    if bad or not metrics:
        _fail(f"{source}: metrics", f"must be a non-empty subset of {list(METRICS)}")
    level = doc.get("level", 0.95)
    if not isinstance(level, (int, float)) or not 0 < level < 1:
        _fail(f"{source}: level", "must lie in (0, 1)")
    if n_trials < 2:
        _fail(f"{source}: n_trials", "confidence intervals need at least 2 trials")
    seed = doc.get("seed", 0)
    if not isinstance(seed, int):
        _fail(f"{source}: seed", "must be an integer")
    return ExperimentConfig(problem=problem, solvers=tuple(solvers), n_trials=n_trials,
                            output_dir=str(doc.get("output_dir", "out")), metrics=tuple(metrics),
                            level=float(level), seed=seed,
                            L_label=None if doc.get("L_label") is None else str(doc["L_label"]))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return parse_config_text(text, str(path))


# ---------------------------------------------------------------- trial execution


@dataclass(frozen=True)
class Task:
    group: str
    solver: str
    L_label: str
    problem: dict
    config: dict
    trial: int
    metric: str = "residual"
    trace_path: Optional[str] = None


@dataclass
class TrialResult:
    group: str
    solver: str
    L_label: str
    trial: int
    seed: int
    value: float
    wall_seconds: float
    evals: int
    diverged: bool = False
    message: str = ""


_PROBLEM_CACHE: dict = {}


def problem_from_doc(doc: dict):
    key = json.dumps(doc, sort_keys=True)
    if key not in _PROBLEM_CACHE:
        if "derived" in doc:
            _PROBLEM_CACHE[key] = load_instance(doc)
        else:
            _PROBLEM_CACHE[key] = build_problem(doc["generator"], doc.get("params", {}))
    return _PROBLEM_CACHE[key]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    v = float(v)
    if math.isnan(v):
        return "nan"
    return f"{v:.6e}"


def write_trace(path, records) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(TRACE_HEADER)
    for r in records:
        w.writerow([r.k, r.N_k, _fmt(r.gamma), r.cum_evals, _fmt(r.residual), _fmt(r.error), _fmt(r.elapsed_s)])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def _score(problem, x, metric, gamma_res, seed):
    if metric == "residual":
        return residual(problem, x, gamma_res)
    if metric == "error":
        return error_to_solution(problem, x)
    return gap_estimate(problem, x, GAP_PROBES, rng_stream(seed, 0, 5)).value


def run_task(task: Task) -> TrialResult:
    problem = problem_from_doc(task.problem)
    config = SolverConfig.from_dict(task.config)
    gamma_res = config.residual_gamma or practical_step(problem.lipschitz_L)
    out = TrialResult(task.group, task.solver, task.L_label, task.trial, config.seed,
                      math.nan, math.nan, config.eval_budget)
    try:
        if config.scheme == "saa":
            res = run_saa(problem, config.nu_samples, config)
            x, out.wall_seconds, out.evals = res.solution, res.wall_seconds, config.nu_samples
            records = None
        else:
            trace = solve(problem, config)
            x, out.wall_seconds, out.evals = trace.final_iterate, trace.elapsed_s, trace.cum_evals
            if task.metric == "gap":
                x = trace.averaged_iterate
            records = trace.records
        out.value = _score(problem, x, task.metric, gamma_res, config.seed)
    except NumericalDivergence as exc:
        out.diverged, out.message = True, str(exc)
        records = exc.trace.records if exc.trace is not None else None
    if task.trace_path and records is not None:
        write_trace(task.trace_path, records)
    return out


def _jobs(jobs: Optional[int]) -> int:
    if jobs is None:
        env = os.environ.get("MONO_SPLIT_JOBS")
        if env:
            try:
                jobs = int(env)
            except ValueError:
                raise ConfigError(f"MONO_SPLIT_JOBS must be an integer, got {env!r}") from None
        else:
            jobs = os.cpu_count() or 1
    return max(1, int(jobs))


def run_tasks(tasks, jobs: Optional[int] = None) -> list:
    """Run tasks on a bounded process pool; results come back sorted by (group, solver, L, trial)."""
    n = min(_jobs(jobs), len(tasks)) if tasks else 1
    if n == 1:
        results = [run_task(t) for t in tasks]
    else:
        with ProcessPoolExecutor(max_workers=n) as pool:
            results = list(pool.map(run_task, tasks, chunksize=1))
    return sorted(results, key=lambda r: (r.group, r.solver, _label_key(r.L_label), r.trial))


def _label_key(label):
    try:
        return (0, float(label), label)
    except ValueError:
        return (1, 0.0, label)


# ---------------------------------------------------------------- aggregation


@dataclass
class ResultRow:
    solver: str
    L: str
    trials: int
    error_mean: float
    ci_low: float
    ci_high: float
    time_mean_s: float
    evals: int
    seed: int
    diverged: int = 0

    def cells(self) -> list:
        return [self.solver, self.L, str(self.trials), _fmt(self.error_mean), _fmt(self.ci_low),
                _fmt(self.ci_high), _fmt(self.time_mean_s), str(self.evals), str(self.seed)]


def aggregate(results, seed_base: int, level: float = 0.95) -> dict:
    """Group trial results into ``{group: [ResultRow, ...]}``; diverged trials are dropped and counted."""
    groups: dict = {}
    for r in results:
        groups.setdefault(r.group, {}).setdefault((r.solver, r.L_label), []).append(r)
    out = {}
    for group, rows in groups.items():
        out[group] = []
        for (solver, label), trials in rows.items():
            ok = [t for t in trials if not t.diverged]
            vals = [t.value for t in ok]
            mean = float(np.mean(vals)) if vals else math.nan
            lo = hi = math.nan
            if len(vals) >= 2:
                lo, hi = confidence_interval(vals, level)
            wall = float(np.mean([t.wall_seconds for t in ok])) if ok else math.nan
            evals = int(max(t.evals for t in trials))
            out[group].append(ResultRow(solver, label, len(ok), mean, lo, hi, wall, evals, seed_base,
                                        len(trials) - len(ok)))
    return out


def write_aggregate(path, rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(AGGREGATE_HEADER)
    for row in rows:
        w.writerow(row.cells())
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def write_metadata(path, payload: dict) -> None:
    payload = {"version": __version__, "trial_seed_rule": "seed = seed_base + trial_index", **payload}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, default=str), encoding="utf-8")


# ---------------------------------------------------------------- run from a config


@dataclass
class RunOutcome:
    rows: dict
    results: list
    all_diverged: bool
    output_dir: Path


def _safe(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_." else "_" for c in name)


def run_experiment(config: ExperimentConfig, output_dir=None, jobs=None) -> RunOutcome:
    out = Path(output_dir or config.output_dir)
    (out / "traces").mkdir(parents=True, exist_ok=True)
    try:
        problem = problem_from_doc(config.problem)
    except (GeneratorError, TypeError, KeyError, ValueError) as exc:
        raise ConfigError(f"problem: {exc}") from None
    label = config.L_label or f"{problem.lipschitz_L:.6g}"
    metric = config.metrics[0]
    if metric == "error" and problem.known_solution is None:
        raise ConfigError("metrics: 'error' needs a problem with a known solution")
    if metric == "gap" and (problem.domain_bound_DT is None):
        raise ConfigError("metrics: 'gap' needs a bounded domain")
    tasks = []
    for solver in config.solvers:
        for t in range(config.n_trials):
            seed = config.seed + t
            cfg = solver.to_dict()
            cfg["seed"] = seed
            trace = out / "traces" / f"{_safe(solver.label)}_trial{t:03d}.csv"
            tasks.append(Task("aggregate", solver.label, label, config.problem, cfg, t, metric, str(trace)))
    results = run_tasks(tasks, jobs)
    rows = aggregate(results, config.seed, config.level)
    write_aggregate(out / "aggregate.csv", rows["aggregate"])
    write_metadata(out / "metadata.json", {
        "seed_base": config.seed, "n_trials": config.n_trials, "metric": metric,
        "problem": config.problem, "solvers": [s.to_dict() for s in config.solvers],
        "diverged_trials": [asdict(r) for r in results if r.diverged],
    })
    return RunOutcome(rows, results, bool(results) and all(r.diverged for r in results), out)


# ---------------------------------------------------------------- table presets

TABLE_L = (1e1, 1e2, 1e3, 1e4)
TABLE4_NU = (1000, 2000, 4000, 10000, 20000)


@dataclass
class Preset:
    name: str
    title: str
    tasks: list = field(default_factory=list)
    groups: dict = field(default_factory=dict)


def _label(L: float) -> str:
    return f"{L:.0e}".replace("e+0", "e")


def cournot_doc(L_label: float, *, J: int, merely_monotone: bool, complicated: bool = False,
                seed: int = 0) -> dict:
    """Cournot instance whose row label is ``L_label``; the sweep runs through ``epsilon = 1/L_label``."""
    return {"generator": "cournot",
            "params": {"J": J, "epsilon": 1.0 / L_label, "merely_monotone": merely_monotone,
                       "complicated_set": complicated, "seed": seed}}


def _solver_pair(problem_doc, merely, budget, residual_policy):
    problem = problem_from_doc(problem_doc)
    gamma = practical_step(problem.lipschitz_L)
    sched = BatchSchedule.polynomial(1.01) if merely else BatchSchedule.geometric(1, 1 / 1.01)
    vr = SolverConfig("vr_smfbs", StepRule.constant(gamma), sched, budget, name="vr_smfbs")
    sa = SolverConfig("sa", StepRule.diminishing(1.0, 0.5), eval_budget=budget, name="sa")
    if residual_policy == "scheme":
        vr = SolverConfig(**{**vr.__dict__, "residual_gamma": gamma})
        sa = SolverConfig(**{**sa.__dict__, "residual_gamma": 1.0})
    return vr, sa


def _add_trials(preset, group, solver_cfg, label, doc, trials, seed, trace_dir):
    for t in range(trials):
        cfg = solver_cfg.to_dict()
        cfg["seed"] = seed + t
        trace = None
        if trace_dir is None:
            # only the final iterate is scored, so skip the per-iteration residuals
            cfg["record_every"] = cfg["eval_budget"] + 1
        else:
            trace = str(Path(trace_dir) / f"{group}_{solver_cfg.label}_L{label}_trial{t:03d}.csv")
        preset.tasks.append(Task(group, solver_cfg.label, label, doc, cfg, t, "residual", trace))


def build_preset(table: str, scale: float = 1.0, seed: int = 0, J: int = 20, trials: int = 20,
                 residual_policy: str = "common", trace_dir=None) -> Preset:
    if not 0 < scale <= 1:
        raise ConfigError("scale must lie in (0, 1]")
    if residual_policy not in ("common", "scheme"):
        raise ConfigError("residual policy must be 'common' or 'scheme'")
    if table in ("table2", "table3"):
        merely = table == "table2"
        kind = "merely monotone" if merely else "strongly monotone"
        budget = max(2, round(20000 * scale))
        small = max(2, round(2000 * scale))
        preset = Preset(table, f"{kind}, {budget} evaluations")
        for L in TABLE_L:
            doc = cournot_doc(L, J=J, merely_monotone=merely)
            for cfg in _solver_pair(doc, merely, budget, residual_policy):
                _add_trials(preset, table, cfg, _label(L), doc, trials, seed, trace_dir)
        L = 1e2 if merely else 1e3
        doc = cournot_doc(L, J=J, merely_monotone=merely, complicated=True)
        group = f"{table}_complicated"
        for cfg in _solver_pair(doc, merely, small, residual_policy):
            _add_trials(preset, group, cfg, _label(L), doc, trials, seed, trace_dir)
        preset.groups = {table: f"{kind}, {budget} evaluations",
                         group: f"complicated set, {kind}, {small} evaluations"}
        return preset
    if table == "table4":
        preset = Preset(table, "SAA against vr-SMFBS")
        nus = [max(2, round(nu * scale)) for nu in TABLE4_NU]
        for merely, group in ((False, "table4_strongly"), (True, "table4_monotone")):
            doc = cournot_doc(1e1, J=J, merely_monotone=merely)
            for nu in nus:
                vr, _ = _solver_pair(doc, merely, nu, residual_policy)
                saa = SolverConfig("saa", eval_budget=nu, nu_samples=nu, name="saa",
                                   residual_gamma=vr.residual_gamma)
                for cfg in (saa, vr):
                    _add_trials(preset, group, cfg, str(nu), doc, trials, seed, trace_dir)
            preset.groups[group] = ("strongly" if not merely else "merely") + " monotone, L label 1e1"
        return preset
    raise ConfigError(f"unknown table {table!r}; choose table2, table3 or table4")


COLUMN_ORDER = ("saa", "vr_smfbs", "sa")
ERROR_NOTE = "error = residual |x - P(x - gamma A(x))| of the final iterate, mean over trials, 95% CI"


def format_table(group_title: str, rows, first_col: str = "L") -> str:
    """Side-by-side text table, one line per L (or nu) with both solvers."""
    by_label: dict = {}
    solvers: list = []
    for row in rows:
        by_label.setdefault(row.L, {})[row.solver] = row
        if row.solver not in solvers:
            solvers.append(row.solver)
    solvers.sort(key=lambda s: (COLUMN_ORDER.index(s) if s in COLUMN_ORDER else len(COLUMN_ORDER), s))
    head = f"{first_col:>8} | " + " | ".join(f"{s:^44}" for s in solvers)
    sub = f"{'':>8} | " + " | ".join(f"{'error':>9} {'time/s':>9} {'CI':>24}" for _ in solvers)
    lines = [group_title, head, sub, "-" * len(sub)]
    for label in sorted(by_label, key=lambda s: _label_key(s)):
        cells = []
        for s in solvers:
            r = by_label[label].get(s)
            if r is None:
                cells.append(f"{'-':>44}")
                continue
            ci = f"[{r.ci_low:.1e},{r.ci_high:.1e}]"
            flag = f" ({r.diverged} diverged)" if r.diverged else ""
            cells.append(f"{r.error_mean:>9.1e} {r.time_mean_s:>9.3f} {ci:>24}{flag}")
        lines.append(f"{label:>8} | " + " | ".join(cells))
    return "\n".join(lines)


def run_preset(preset: Preset, out_dir, jobs=None, seed: int = 0, level: float = 0.95) -> RunOutcome:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = run_tasks(preset.tasks, jobs)
    rows = aggregate(results, seed, level)
    texts = []
    for group, title in preset.groups.items():
        write_aggregate(out / f"{group}.csv", rows.get(group, []))
        texts.append(format_table(title, rows.get(group, []), "nu" if preset.name == "table4" else "L"))
    texts.append(ERROR_NOTE)
    (out / f"{preset.name}.txt").write_text("\n\n".join(texts) + "\n", encoding="utf-8")
    write_metadata(out / "metadata.json", {
        "table": preset.name, "seed_base": seed, "groups": preset.groups,
        "diverged_trials": [asdict(r) for r in results if r.diverged],
    })
    all_div = bool(results) and all(r.diverged for r in results)
    return RunOutcome(rows, results, all_div, out)
