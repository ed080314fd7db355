"""Command-line experiment runner.

Subcommands::

    agpush run CONFIG [--output DIR] [--set section.key=value ...]
    agpush sweep CONFIG --field section.key --values v1,v2,... [--output DIR]
    agpush analyze RUN_DIR
    agpush validate [CONFIG] [--schedule FILE [--graph FILE]]

Exit codes: 0 success, 2 invalid configuration or input files, 3 failure
while running, 4 some sweep cells failed.

A configuration is an INI file with the sections ``[graph]``,
``[schedule]``, ``[objective]``, ``[policy]`` and ``[run]``; the accepted
keys and their defaults are listed in ``SCHEMA`` and printed by
``agpush validate --show-defaults``.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import io
import json
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from .agp import POLICY_KINDS, StepSizePolicy, run_agp, read_run_csv, write_run_csv
from .analysis import (
    bias_report,
    estimate_consensus_constants,
    rate_diagnostics,
    reweighted_weights,
    write_report,
)
from .errors import AgpError, BoundViolated, ConfigError, MissingArtifacts
from .objectives import (
    LogisticObjective,
    generate_least_squares_partition,
    generate_logistic_partition,
    generate_synthetic_partition,
    global_minimizer,
    read_dataset_csv,
    read_quadratics_csv,
    write_dataset_csv,
    write_quadratics_csv,
)
from .runtime import STOP_RULES, read_event_log, reconstruct_schedule, run_threaded, write_event_log
from .schedule import (
    RateRatio,
    generate_schedule,
    half_slow_multipliers,
    minimal_tau_msg,
    read_schedule,
    verify_bounds,
    write_schedule,
)
from .topology import (
    augment,
    complete_graph,
    erdos_renyi_graph,
    fig1_graph,
    read_edge_list,
    ring_graph,
    write_edge_list,
)

log = logging.getLogger("agpush")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_PARTIAL = 0, 2, 3, 4

GRAPH_KINDS = ("ring", "complete", "erdos_renyi", "fig1", "file")
SCHEDULE_POLICIES = ("semi_synchronous", "uniform_random", "rate_ratio")
OBJECTIVE_KINDS = ("quadratic", "least_squares", "logistic")
BACKENDS = ("simulate", "threaded")


# ---------------------------------------------------------------- value parsers

def _int(v: str) -> int:
    return int(v)


def _float(v: str) -> float:
    return float(v)


def _bool(v: str) -> bool:
    s = v.strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def _str(v: str) -> str:
    return v.strip()


def _opt_int(v: str) -> int | None:
    return None if v.strip() in ("", "none") else int(v)


def _int_or_auto(v: str) -> int | str:
    return "auto" if v.strip() == "auto" else int(v)


def _floats(v: str) -> tuple[float, ...]:
    return tuple(float(t) for t in v.replace(" ", "").split(",") if t)


def _ints_or_half_slow(v: str) -> tuple[int, ...] | str:
    s = v.strip()
    if s in ("", "half_slow"):
        return s
    return tuple(int(t) for t in s.replace(" ", "").split(",") if t)


def _choice(*options):
    def parse(v: str) -> str:
        s = v.strip()
        if s not in options:
            raise ValueError(f"{s!r} is not one of {', '.join(options)}")
        return s
    return parse


# (parser, default) per key; defaults are stored as text so that a config
# round-trips through INI unchanged
SCHEMA: dict[str, dict[str, tuple]] = {
    "graph": {
        "kind": (_choice(*GRAPH_KINDS), "ring"),
        "n": (_int, "4"),
        "p": (_float, "0.5"),
        "seed": (_int, "0"),
        "path": (_str, ""),
    },
    "schedule": {
        "policy": (_choice(*SCHEDULE_POLICIES), "semi_synchronous"),
        "K": (_int, "1000"),
        "tau_proc_max": (_int, "1"),
        "tau_msg_max": (_int_or_auto, "0"),
        "multipliers": (_ints_or_half_slow, ""),
        "activation_prob": (_float, "0.5"),
        "seed": (_int, "0"),
    },
    "objective": {
        "kind": (_choice(*OBJECTIVE_KINDS), "quadratic"),
        "d": (_int, "5"),
        "samples_per_agent": (_int, "20"),
        "condition_targets": (_floats, ""),
        "kappa_range": (_floats, "3,37"),
        "minimizer_spread": (_float, "1.0"),
        "noise": (_float, "0.1"),
        "n_classes": (_int, "3"),
        "lam": (_float, "0.1"),
        "seed": (_int, "0"),
        "path": (_str, ""),
    },
    "policy": {
        "kind": (_choice(*POLICY_KINDS), "diminishing"),
        "B": (_float, "1.0"),
        "theta": (_float, "0.6"),
        "w": (_floats, ""),
        "K": (_opt_int, ""),
        "enforce_bound": (_bool, "false"),
    },
    "run": {
        "backend": (_choice(*BACKENDS), "simulate"),
        "output": (_str, "run"),
        "x0": (_choice("zeros", "normal"), "zeros"),
        "x0_seed": (_int, "0"),
        "probe_K": (_int, "0"),
        "check_bound": (_bool, "true"),
        "stop": (_int, "100"),
        "stop_rule": (_choice(*STOP_RULES), "slowest"),
        "straggler_delays": (_floats, ""),
        "tau_proc_cap": (_opt_int, ""),
        "compute_s": (_float, "0.0002"),
        "inbox_capacity": (_opt_int, ""),
        "watchdog_s": (_float, "30"),
    },
}


@dataclass
class ExperimentConfig:
    """Raw text values per section and key, plus their parsed counterparts."""

    raw: dict[str, dict[str, str]]
    values: dict[str, dict[str, object]] = field(default_factory=dict)

    @classmethod
    def defaults(cls) -> ExperimentConfig:
        return cls({sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}).validated()

    @classmethod
    def from_ini(cls, text: str, source: str = "<config>") -> ExperimentConfig:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            cp.read_string(text, source=source)
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc}") from None
        raw = {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}
        for sec in cp.sections():
            if sec not in SCHEMA:
                raise ConfigError(f"{source}: unknown section [{sec}]")
            for k, v in cp[sec].items():
                if k not in SCHEMA[sec]:
                    raise ConfigError(f"{source}: unknown key {k!r} in [{sec}]")
                raw[sec][k] = v
        return cls(raw).validated()

    @classmethod
    def from_file(cls, path: str | Path) -> ExperimentConfig:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} not found")
        return cls.from_ini(p.read_text(), source=str(p))

    def validated(self) -> ExperimentConfig:
        values = {}
        for sec, keys in SCHEMA.items():
            values[sec] = {}
            for k, (parse, _) in keys.items():
                try:
                    values[sec][k] = parse(self.raw[sec][k])
                except ValueError as exc:
                    raise ConfigError(f"[{sec}] {k} = {self.raw[sec][k]!r}: {exc}") from None
        self.values = values
        self._check()
        return self

    def _check(self) -> None:
        g, s, o, p, r = (self.values[k] for k in ("graph", "schedule", "objective", "policy", "run"))
        if g["kind"] == "file" and not g["path"]:
            raise ConfigError("[graph] kind = file needs a path")
        if g["kind"] not in ("file", "fig1") and g["n"] < 1:
            raise ConfigError("[graph] n must be positive")
        if s["K"] < 1:
            raise ConfigError("[schedule] K must be positive")
        if s["tau_msg_max"] == "auto" and s["policy"] != "rate_ratio":
            raise ConfigError("[schedule] tau_msg_max = auto only applies to rate_ratio schedules")
        if s["policy"] == "rate_ratio" and not s["multipliers"]:
            raise ConfigError("[schedule] rate_ratio needs multipliers (a list or half_slow)")
        if o["d"] < 1:
            raise ConfigError("[objective] d must be positive")
        if r["probe_K"] < 0:
            raise ConfigError("[run] probe_K must be >= 0")
        if r["stop"] < 1:
            raise ConfigError("[run] stop must be positive")
        try:
            self.policy()
        except ValueError as exc:
            raise ConfigError(f"[policy] {exc}") from None

    def get(self, dotted: str):
        sec, key = self._split(dotted)
        return self.values[sec][key]

    @staticmethod
    def _split(dotted: str) -> tuple[str, str]:
        sec, _, key = dotted.partition(".")
        if sec not in SCHEMA or key not in SCHEMA[sec]:
            raise ConfigError(f"unknown field {dotted!r}; expected section.key, e.g. policy.theta")
        return sec, key

    def with_value(self, dotted: str, value: str) -> ExperimentConfig:
        sec, key = self._split(dotted)
        raw = {s: dict(kv) for s, kv in self.raw.items()}
        raw[sec][key] = str(value)
        return ExperimentConfig(raw).validated()

    def to_ini(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        for sec in SCHEMA:
            cp[sec] = self.raw[sec]
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()

    def policy(self) -> StepSizePolicy:
        p = self.values["policy"]
        return StepSizePolicy(kind=p["kind"], B=p["B"], theta=p["theta"], w=p["w"] or None, K=p["K"])


# ---------------------------------------------------------------- building blocks

def build_graph(cfg: ExperimentConfig):
    g = cfg.values["graph"]
    kind = g["kind"]
    if kind == "ring":
        return ring_graph(g["n"])
    if kind == "complete":
        return complete_graph(g["n"])
    if kind == "erdos_renyi":
        return erdos_renyi_graph(g["n"], g["p"], g["seed"])
    if kind == "fig1":
        return fig1_graph()
    return read_edge_list(g["path"])


def build_objectives(cfg: ExperimentConfig, n: int):
    o = cfg.values["objective"]
    if o["kind"] == "quadratic" and o["path"]:
        objs = read_quadratics_csv(o["path"])
        if len(objs) != n:
            raise ConfigError(f"{o['path']} holds {len(objs)} agents, graph has {n}")
        return objs
    if o["kind"] == "logistic":
        return generate_logistic_partition(n, o["samples_per_agent"], o["d"], o["n_classes"], o["lam"], o["seed"])
    targets = o["condition_targets"]
    if not targets:
        rng_ = o["kappa_range"] or (1.0,)
        lo, hi = rng_[0], rng_[-1]
        targets = tuple(np.linspace(lo, hi, n))
    gen = generate_synthetic_partition if o["kind"] == "quadratic" else generate_least_squares_partition
    return gen(n, o["d"], o["samples_per_agent"], targets, o["seed"], o["minimizer_spread"], o["noise"])


def build_schedule(cfg: ExperimentConfig, g):
    s = cfg.values["schedule"]
    policy = s["policy"]
    tau_msg = s["tau_msg_max"]
    if policy == "rate_ratio":
        m = s["multipliers"]
        m = half_slow_multipliers(g.n, s["tau_proc_max"]) if m == "half_slow" else m
        policy = RateRatio(tuple(m))
        if tau_msg == "auto":
            tau_msg = minimal_tau_msg(policy.multipliers, g)
    return generate_schedule(
        g.n, s["K"], s["tau_proc_max"], tau_msg, policy,
        seed=s["seed"], graph=g, activation_prob=s["activation_prob"],
    )


def build_x0(cfg: ExperimentConfig, n: int, d: int) -> np.ndarray:
    r = cfg.values["run"]
    if r["x0"] == "normal":
        return np.random.default_rng(r["x0_seed"]).standard_normal((n, d))
    return np.zeros((n, d))


# ---------------------------------------------------------------- atomic file output

def _atomic_write(path: Path, write) -> None:
    """Call ``write(tmp_path)`` then rename over ``path``."""
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    try:
        write(tmp)
        os.replace(tmp, path)
    finally:
        if tmp.exists():
            tmp.unlink()


def _atomic_text(path: Path, text: str) -> None:
    _atomic_write(path, lambda p: p.write_text(text))


def _atomic_report(stem: Path, bias, rates, extra) -> None:
    tmp = stem.with_name(f".{stem.name}.{os.getpid()}.tmp")
    try:
        write_report(tmp, bias, rates, extra)
        for suffix in (".csv", ".txt"):
            os.replace(tmp.with_suffix(suffix), stem.with_suffix(suffix))
    finally:
        for suffix in (".csv", ".txt"):
            if tmp.with_suffix(suffix).exists():
                tmp.with_suffix(suffix).unlink()


# ---------------------------------------------------------------- run

def _policy_dict(pol: StepSizePolicy) -> dict:
    return {"kind": pol.kind, "B": pol.B, "theta": pol.theta,
            "w": list(pol.w) if pol.w is not None else None, "K": pol.K}


def _write_objectives(out: Path, objs) -> dict:
    if isinstance(objs[0], LogisticObjective):
        data = out / "data"
        data.mkdir(exist_ok=True)
        for i, o in enumerate(objs):
            _atomic_write(data / f"agent_{i + 1}.csv", lambda p, o=o: write_dataset_csv(o.X, o.labels, p))
        return {"format": "logistic", "lam": objs[0].lam, "n_classes": objs[0].n_classes}
    _atomic_write(out / "objectives.csv", lambda p: write_quadratics_csv(objs, p))
    return {"format": "quadratics"}


def execute(cfg: ExperimentConfig, out: Path | None = None) -> dict:
    """Build, run and analyse one experiment; returns the report metrics.

    Configuration problems raise ``ConfigError`` (or another validation
    error) before anything runs; failures during the run propagate as they
    are. The caller maps both onto exit codes.
    """
    out = Path(out if out is not None else cfg.values["run"]["output"])
    r = cfg.values["run"]
    try:
        g = build_graph(cfg)
        objs = build_objectives(cfg, g.n)
        x0 = build_x0(cfg, g.n, objs[0].dim)
        policy = cfg.policy()
        sched = build_schedule(cfg, g) if r["backend"] == "simulate" else None
    except (AgpError, ValueError, OSError) as exc:
        raise _Invalid(exc) from exc

    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": 1,
        "backend": r["backend"],
        "n": g.n,
        "d": objs[0].dim,
        "x0": x0.tolist(),
        "probe_K": r["probe_K"],
        "check_bound": r["check_bound"],
    }
    if r["backend"] == "simulate":
        run = run_agp(augment(g, sched.tau_msg_max), sched, objs, x0, policy,
                      enforce_theoretical_bound=cfg.values["policy"]["enforce_bound"])
    else:
        res = run_threaded(
            g, objs, policy, r["stop"],
            straggler_delays=r["straggler_delays"] or None,
            tau_proc_cap=r["tau_proc_cap"],
            seed=r["x0_seed"],
            x0=x0,
            inbox_capacity=r["inbox_capacity"],
            watchdog_s=r["watchdog_s"],
            compute_s=r["compute_s"],
            stop_rule=r["stop_rule"],
        )
        sched = res.schedule
        run = run_agp(augment(g, sched.tau_msg_max), sched, objs, res.x0, res.policy)
        _atomic_write(out / "events.csv", lambda p: write_event_log(res.log, p))
        dx, dy = res.conservation_defect()
        meta["threaded"] = {
            "stop": r["stop"],
            "stop_rule": r["stop_rule"],
            "tau_proc_cap": r["tau_proc_cap"],
            "straggler_delays": list(r["straggler_delays"]),
            "xbar_final": res.xbar.tolist(),
            "conservation_defect_x": dx,
            "conservation_defect_y": dy,
            "wall_s": res.wall_s,
        }
    meta["K"] = sched.K
    meta["policy"] = _policy_dict(run.policy)
    meta["grad_norm_max"] = run.grad_norm_max
    meta["schedule"] = {"K": sched.K, "tau_proc_max": sched.tau_proc_max,
                        "tau_msg_max": sched.tau_msg_max, "seed": sched.seed}
    meta["objective"] = _write_objectives(out, objs)

    _atomic_text(out / "config.ini", cfg.to_ini())
    _atomic_write(out / "graph.txt", lambda p: write_edge_list(g, p))
    _atomic_write(out / "schedule.txt", lambda p: write_schedule(sched, p))
    _atomic_write(out / "trajectory.csv", lambda p: write_run_csv(run, p))
    _atomic_text(out / "metadata.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return analyze_directory(out)


class _Invalid(Exception):
    """Wraps a validation failure raised while building an experiment."""

    def __init__(self, exc: BaseException):
        super().__init__(str(exc))
        self.exc = exc


# ---------------------------------------------------------------- analyze

def _load_objectives(run_dir: Path, meta: dict):
    obj_meta = meta.get("objective", {})
    if obj_meta.get("format") == "logistic":
        objs = []
        for i in range(meta["n"]):
            path = run_dir / "data" / f"agent_{i + 1}.csv"
            if not path.is_file():
                raise MissingArtifacts(f"{path} is missing")
            X, labels = read_dataset_csv(path)
            objs.append(LogisticObjective(X, labels, obj_meta["n_classes"], obj_meta["lam"]))
        return objs
    path = run_dir / "objectives.csv"
    if not path.is_file():
        raise MissingArtifacts(f"{path} is missing")
    return read_quadratics_csv(path)


def analyze_directory(run_dir: str | Path) -> dict:
    """Write ``report.csv``, ``report.txt`` and ``curve.csv`` for a finished run directory.

    Raises ``BoundViolated`` after writing the report when the bias bound
    fails and the run asked for the check.
    """
    run_dir = Path(run_dir)
    for name in ("metadata.json", "trajectory.csv"):
        if not (run_dir / name).is_file():
            raise MissingArtifacts(f"{run_dir / name} is missing")
    try:
        meta = json.loads((run_dir / "metadata.json").read_text())
    except json.JSONDecodeError as exc:
        raise ValueError(f"{run_dir / 'metadata.json'}: {exc}") from None
    table = read_run_csv(run_dir / "trajectory.csv")
    objs = _load_objectives(run_dir, meta)
    if table.n != len(objs) or table.xbar.shape[1] != objs[0].dim:
        raise ValueError(f"{run_dir}: trajectory shape does not match the stored objectives")

    pol = meta["policy"]
    run = SimpleNamespace(
        xbar=table.xbar,
        alpha_delta=table.alpha_delta,
        K=table.K,
        n=table.n,
        grad_norm_max=meta["grad_norm_max"],
        policy=StepSizePolicy(kind=pol["kind"], B=pol["B"], theta=pol["theta"], w=pol["w"], K=pol["K"]),
    )
    rw = reweighted_weights(run, objs)
    bias = bias_report(rw, objs, check=False)

    consts = None
    sched = None
    if (run_dir / "schedule.txt").is_file():
        sched = read_schedule(run_dir / "schedule.txt")
    g = read_edge_list(run_dir / "graph.txt") if (run_dir / "graph.txt").is_file() else None
    if meta.get("probe_K", 0) > 0:
        if sched is None or g is None:
            raise MissingArtifacts(f"{run_dir}: the rate certificate needs schedule.txt and graph.txt")
        consts = estimate_consensus_constants(augment(g, sched.tau_msg_max), sched, meta["probe_K"])
    rates = rate_diagnostics(run, rw, objs, consensus_constants=consts, x0=np.asarray(meta["x0"]))

    x_star = global_minimizer(objs)
    dist = np.linalg.norm(table.xbar - x_star, axis=1)
    dist_K = np.linalg.norm(table.xbar - bias.x_star_K, axis=1)
    cons = np.abs(table.z - table.xbar[:, None, :]).sum(axis=2).max(axis=1)
    extra = {
        "K": table.K,
        "n": table.n,
        "final_dist_x_star": float(dist[-1]),
        "final_dist_x_star_K": float(dist_K[-1]),
        "final_consensus_error": float(cons[-1]),
    }
    if consts is not None:
        extra.update(consensus_C=consts.C, consensus_q=consts.q)
    if sched is not None and g is not None:
        rep = verify_bounds(sched, g)
        extra.update(schedule_bounds_ok=rep.ok, max_proc_gap=rep.max_observed_proc_gap,
                     max_msg_delay=rep.max_observed_msg_delay)
    if meta.get("backend") == "threaded":
        if not (run_dir / "events.csv").is_file():
            raise MissingArtifacts(f"{run_dir / 'events.csv'} is missing")
        recon = reconstruct_schedule(read_event_log(run_dir / "events.csv"))
        rep = verify_bounds(recon, g)
        th = meta["threaded"]
        extra.update(
            reconstructed_bounds_ok=rep.ok,
            reconstructed_K=recon.K,
            reconstructed_max_proc_gap=rep.max_observed_proc_gap,
            reconstructed_max_msg_delay=rep.max_observed_msg_delay,
            replay_xbar_gap=float(np.abs(np.asarray(th["xbar_final"]) - table.xbar[-1]).max()),
            conservation_defect_x=th["conservation_defect_x"],
            conservation_defect_y=th["conservation_defect_y"],
        )

    _atomic_report(run_dir / "report", bias, rates, extra)

    def write_curve(p):
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["k", "dist_x_star", "dist_x_star_K", "consensus_error", "bias_bound"])
            for k in range(table.K + 1):
                w.writerow([k, f"{dist[k]:.17g}", f"{dist_K[k]:.17g}", f"{cons[k]:.17g}", f"{bias.bound:.17g}"])
    _atomic_write(run_dir / "curve.csv", write_curve)

    metrics = {
        "delta_K": bias.delta_K,
        "S_bar": bias.S_bar,
        "kappa": bias.kappa,
        "bound": bias.bound,
        "actual": bias.actual,
        "bound_holds": bias.holds,
        "mean_sq_err": rates.mean_sq_err,
        "loglog_slope": rates.loglog_slope,
        "certificate": rates.certificate,
        **extra,
    }
    if meta.get("check_bound", True) and not bias.holds:
        raise BoundViolated(f"minimiser distance {bias.actual:.6g} exceeds bound {bias.bound:.6g}")
    return metrics


# ---------------------------------------------------------------- sweep

SWEEP_COLUMNS = ("delta_K", "bound", "actual", "bound_holds", "mean_sq_err", "loglog_slope",
                 "certificate", "final_dist_x_star", "final_dist_x_star_K", "final_consensus_error")


def _sweep_cell(ini: str, out: str) -> dict:
    """One isolated sweep cell; never raises so failures come back as rows."""
    try:
        cfg = ExperimentConfig.from_ini(ini)
        return {"status": "ok", **execute(cfg, Path(out))}
    except _Invalid as exc:
        return {"status": f"invalid: {type(exc.exc).__name__}: {exc}"}
    except Exception as exc:  # reported per cell
        return {"status": f"failed: {type(exc).__name__}: {exc}"}


def sweep(cfg: ExperimentConfig, field_name: str, values, out: Path, workers: int | None = None) -> list[dict]:
    """Run one experiment per value of ``field_name`` and aggregate their metrics.

    Every value is validated before any cell runs. Cells write into
    ``out/cell_<NN>``; the aggregate goes to ``out/sweep.csv`` and the stacked
    per-cell curves to ``out/curves.csv``.
    """
    values = [str(v).strip() for v in values]
    if not values or any(v == "" for v in values):
        raise ConfigError("a sweep needs a non-empty list of values")
    cells = [cfg.with_value(field_name, v) for v in values]
    out.mkdir(parents=True, exist_ok=True)
    dirs = [out / f"cell_{i:02d}" for i in range(len(cells))]
    inis = [c.with_value("run.output", str(d)).to_ini() for c, d in zip(cells, dirs)]
    workers = workers or min(len(cells), os.cpu_count() or 1)
    if workers == 1:
        rows = [_sweep_cell(ini, str(d)) for ini, d in zip(inis, dirs)]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(_sweep_cell, inis, map(str, dirs)))
    for v, d, row in zip(values, dirs, rows):
        row["value"] = v
        row["cell"] = d.name

    def write_table(p):
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["cell", field_name, "status", *SWEEP_COLUMNS])
            for row in rows:
                w.writerow([row["cell"], row["value"], row["status"]]
                           + ["" if row.get(c) is None else _fmt_cell(row.get(c)) for c in SWEEP_COLUMNS])
    _atomic_write(out / "sweep.csv", write_table)

    def write_curves(p):
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([field_name, "k", "dist_x_star", "dist_x_star_K", "consensus_error", "bias_bound"])
            for row, d in zip(rows, dirs):
                if row["status"] != "ok":
                    continue
                with open(d / "curve.csv", newline="") as src:
                    r = csv.reader(src)
                    next(r)
                    for rec in r:
                        w.writerow([row["value"], *rec])
    _atomic_write(out / "curves.csv", write_curves)
    return rows


def _fmt_cell(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    return str(v)


# ---------------------------------------------------------------- command handlers

def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig.defaults()
    overrides = list(getattr(args, "set", None) or [])
    for flag, dotted in _POLICY_FLAGS:
        v = getattr(args, flag, None)
        if v is not None:
            overrides.append(f"{dotted}={v}")
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects section.key=value, got {item!r}")
        cfg = cfg.with_value(key.strip(), value.strip())
    return cfg


def cmd_run(args) -> int:
    try:
        cfg = _load_config(args)
        if args.backend:
            cfg = cfg.with_value("run.backend", args.backend)
        if args.output:
            cfg = cfg.with_value("run.output", args.output)
    except AgpError as exc:
        return _fail(EXIT_INVALID, exc)
    try:
        metrics = execute(cfg)
    except _Invalid as exc:
        return _fail(EXIT_INVALID, exc.exc)
    except Exception as exc:
        return _fail(EXIT_RUNTIME, exc)
    out = Path(cfg.values["run"]["output"])
    print(f"wrote {out}: actual={metrics['actual']:.6g} bound={metrics['bound']:.6g} "
          f"final_dist_x_star={metrics['final_dist_x_star']:.6g}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    try:
        cfg = _load_config(args)
        values = [v for v in args.values.split(",")] if args.values.strip() else []
        out = Path(args.output or cfg.values["run"]["output"])
        if not values:
            raise ConfigError("a sweep needs a non-empty list of values")
        rows = sweep(cfg, args.field, values, out, workers=args.workers)
    except AgpError as exc:
        return _fail(EXIT_INVALID, exc)
    failed = [r for r in rows if r["status"] != "ok"]
    for r in failed:
        print(f"cell {r['cell']} ({args.field}={r['value']}): {r['status']}", file=sys.stderr)
    print(f"wrote {out / 'sweep.csv'}: {len(rows) - len(failed)}/{len(rows)} cells ok")
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_analyze(args) -> int:
    try:
        metrics = analyze_directory(args.run_dir)
    except (MissingArtifacts, ValueError, KeyError) as exc:
        return _fail(EXIT_INVALID, exc)
    except Exception as exc:
        return _fail(EXIT_RUNTIME, exc)
    print(f"wrote {Path(args.run_dir) / 'report.txt'}: actual={metrics['actual']:.6g} bound={metrics['bound']:.6g}")
    return EXIT_OK


def cmd_validate(args) -> int:
    if args.show_defaults:
        print(ExperimentConfig.defaults().to_ini(), end="")
        return EXIT_OK
    try:
        if args.schedule:
            s = read_schedule(args.schedule)
            g = read_edge_list(args.graph, n=s.n) if args.graph else None
            rep = verify_bounds(s, g)
            print(f"schedule n={s.n} K={s.K} max_proc_gap={rep.max_observed_proc_gap} "
                  f"max_msg_delay={rep.max_observed_msg_delay}")
            for v in rep.violations:
                print(f"violation: {v}", file=sys.stderr)
            if not rep.ok:
                return EXIT_INVALID
        if args.config or not args.schedule:
            cfg = _load_config(args)
            g = build_graph(cfg)
            objs = build_objectives(cfg, g.n)
            if cfg.values["run"]["backend"] == "simulate":
                s = build_schedule(cfg, g)
                pol = cfg.policy().resolve(s)
                print(f"config ok: n={g.n} d={objs[0].dim} K={s.K} tau_bar={s.tau_bar} policy={pol.kind}")
            else:
                print(f"config ok: n={g.n} d={objs[0].dim} backend=threaded")
    except (AgpError, ValueError, OSError) as exc:
        return _fail(EXIT_INVALID, exc)
    return EXIT_OK


def _fail(code: int, exc: BaseException) -> int:
    print(f"agpush: error: {type(exc).__name__}: {exc}", file=sys.stderr)
    return code


_POLICY_FLAGS = (
    ("policy_kind", "policy.kind"),
    ("B", "policy.B"),
    ("theta", "policy.theta"),
    ("w", "policy.w"),
    ("policy_K", "policy.K"),
    ("enforce_bound", "policy.enforce_bound"),
)


def _add_config_args(p: argparse.ArgumentParser, required: bool = True) -> None:
    if required:
        p.add_argument("config", help="INI experiment configuration")
    else:
        p.add_argument("config", nargs="?", help="INI experiment configuration")
    p.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE",
                   help="override one configuration value (repeatable)")
    g = p.add_argument_group("step-size policy")
    g.add_argument("--policy-kind", choices=POLICY_KINDS, help="step-size regime")
    g.add_argument("--B", type=float, help="step-size scale B")
    g.add_argument("--theta", type=float, help="step-size exponent theta")
    g.add_argument("--w", help="comma-separated per-agent multipliers w_i (>= 1)")
    g.add_argument("--policy-K", type=int, help="horizon used by constant step sizes")
    g.add_argument("--enforce-bound", choices=("true", "false"),
                   help="reject step sizes above the worst-case bound instead of warning")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="agpush",
        description="Asynchronous gradient-push experiments over directed graphs with delays.",
        epilog="exit codes: 0 ok, 2 invalid configuration or input, 3 runtime failure, 4 partial sweep failure",
    )
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-q", "--quiet", action="store_true", help="only report errors")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="run one experiment and write its artifacts")
    _add_config_args(p)
    p.add_argument("--output", help="output directory (overrides [run] output)")
    p.add_argument("--backend", choices=BACKENDS, help="overrides [run] backend")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", parents=[common], help="run one experiment per value of a configuration field")
    _add_config_args(p)
    p.add_argument("--field", required=True, help="field to vary, as section.key")
    p.add_argument("--values", required=True, help="comma-separated values")
    p.add_argument("--output", help="sweep directory (overrides [run] output)")
    p.add_argument("--workers", type=int, help="parallel worker processes")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("analyze", parents=[common], help="recompute the report of a run directory")
    p.add_argument("run_dir", help="directory written by 'agpush run'")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("validate", parents=[common], help="check a configuration or a schedule file")
    _add_config_args(p, required=False)
    p.add_argument("--schedule", help="schedule text file to check against its declared bounds")
    p.add_argument("--graph", help="edge-list file the schedule must respect")
    p.add_argument("--show-defaults", action="store_true", help="print the default configuration")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.WARNING,
                        format="agpush: %(levelname)s: %(message)s")
    t0 = time.perf_counter()
    code = args.func(args)
    log.info("finished in %.2fs", time.perf_counter() - t0)
    return code


if __name__ == "__main__":
    sys.exit(main())
