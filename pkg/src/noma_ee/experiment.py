"""Experiment specs, sweeps and result files.

A spec is a flat text file of ``section.key = value`` lines (``#`` starts a
comment).  Absent keys keep their defaults, so an empty file is the default
scenario.  Example::

    scenario = fig4
    network.num_mmtc = 4
    train.episodes = 200
    sweep.axis = num_mmtc
    sweep.values = 2, 4, 6, 8
    run.schemes = homad, fullmad:4, fullmad:2, fullmaql:2
    run.replications = 3
"""

from __future__ import annotations

import csv
import dataclasses
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .agents import Scheme
from .system_model import NetworkConfig
from .trainer import EpisodeConfig, TrainingLog, detect_convergence, run_training

WORKERS_ENV = "NOMA_EE_WORKERS"

SWEEP_AXES = ("none", "requirements", "num_mmtc", "levels", "scheme")

# (latency s, DEP, eMBB spectral efficiency bps/Hz), loosest first
DEFAULT_REQUIREMENTS = ((2e-3, 1e-2, 2.0), (1e-3, 1e-4, 4.0), (0.5e-3, 1e-5, 6.0), (0.4e-3, 1e-6, 8.0))

ALIASES = {
    "M_U": "network.num_urllc", "M_E": "network.num_embb", "M_M": "network.num_mmtc",
    "K_U": "network.num_sc_urllc", "K_E": "network.num_sc_embb",
    "nu_U": "network.numerology_urllc", "nu_E": "network.numerology_embb",
    "E_p": "train.episodes", "T": "train.timeslots", "B": "train.sync_period", "L": "train.levels",
}

_TRAIN_SKIP = {"scheme", "seed"}  # set per run by the harness


@dataclass
class SchemeSpec:
    scheme: Scheme
    levels: int | None = None

    @classmethod
    def parse(cls, text: str) -> "SchemeSpec":
        name, _, lv = text.strip().partition(":")
        return cls(Scheme(name.strip().lower()), int(lv) if lv else None)

    @property
    def label(self) -> str:
        if self.scheme is Scheme.HOMAD or self.levels is None:
            return self.scheme.value
        return f"{self.scheme.value}-L{self.levels}"

    def __str__(self) -> str:
        return self.scheme.value if self.levels is None else f"{self.scheme.value}:{self.levels}"


@dataclass
class ExperimentSpec:
    scenario: str = "default"
    network: NetworkConfig = field(default_factory=NetworkConfig)
    train: EpisodeConfig = field(default_factory=EpisodeConfig)
    schemes: list[SchemeSpec] = field(default_factory=lambda: [
        SchemeSpec(Scheme.HOMAD), SchemeSpec(Scheme.FULL_MAD, 4), SchemeSpec(Scheme.FULL_MAD, 2),
        SchemeSpec(Scheme.FULL_MAQL, 2)])
    sweep_axis: str = "none"
    sweep_values: list = field(default_factory=list)
    requirements: tuple = DEFAULT_REQUIREMENTS
    replications: int = 3
    seed: int = 0
    out: str = "results"
    save_models: bool = True

    def __post_init__(self):
        if self.sweep_axis not in SWEEP_AXES:
            raise ValueError(f"sweep.axis: unknown axis {self.sweep_axis!r}; expected one of {SWEEP_AXES}")
        if self.replications < 1:
            raise ValueError("run.replications: must be >= 1")
        if not self.schemes:
            raise ValueError("run.schemes: at least one scheme is required")

    @property
    def seeds(self) -> list[int]:
        return [self.seed + r for r in range(self.replications)]

    def points(self) -> list:
        if self.sweep_axis == "none":
            return [""]
        if self.sweep_axis == "requirements" and not self.sweep_values:
            return list(range(len(self.requirements)))
        return list(self.sweep_values)


# ----------------------------------------------------------------------------
# Spec text format
# ----------------------------------------------------------------------------


def _convert(key: str, raw: str, default):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw.strip()
    except ValueError as exc:
        raise ValueError(f"{key}: cannot parse {raw!r} ({exc})") from None


def _parse_list(raw: str) -> list[str]:
    return [v.strip() for v in raw.split(",") if v.strip()]


def _parse_requirements(raw: str) -> tuple:
    out = []
    for item in raw.split(";"):
        if item.strip():
            parts = [float(v) for v in item.split(",")]
            if len(parts) != 3:
                raise ValueError("sweep.requirements: each tuple is latency, dep, spectral efficiency")
            out.append(tuple(parts))
    return tuple(out)


def parse_spec(text: str) -> ExperimentSpec:
    net_kw, train_kw, top = {}, {}, {}
    net_defaults = {f.name: f.default for f in dataclasses.fields(NetworkConfig)}
    train_defaults = {f.name: f.default for f in dataclasses.fields(EpisodeConfig)}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        key = ALIASES.get(key, key)
        section, _, name = key.rpartition(".")
        if section == "network":
            if name not in net_defaults:
                raise ValueError(f"{key}: unknown network field")
            net_kw[name] = _convert(key, raw, net_defaults[name])
        elif section == "train":
            if name not in train_defaults or name in _TRAIN_SKIP:
                raise ValueError(f"{key}: unknown training field")
            train_kw[name] = _convert(key, raw, train_defaults[name])
        elif key == "scenario":
            top["scenario"] = raw
        elif key == "sweep.axis":
            top["sweep_axis"] = raw.lower()
        elif key == "sweep.values":
            top["sweep_values"] = _parse_list(raw)
        elif key == "sweep.requirements":
            top["requirements"] = _parse_requirements(raw)
        elif key == "run.schemes":
            try:
                top["schemes"] = [SchemeSpec.parse(v) for v in _parse_list(raw)]
            except ValueError as exc:
                raise ValueError(f"run.schemes: {exc}") from None
        elif key == "run.replications":
            top["replications"] = _convert(key, raw, 1)
        elif key == "run.seed":
            top["seed"] = _convert(key, raw, 0)
        elif key == "run.out":
            top["out"] = raw
        elif key == "run.save_models":
            top["save_models"] = _convert(key, raw, True)
        else:
            raise ValueError(f"{key}: unknown key")
    try:
        network = NetworkConfig(**net_kw)
    except ValueError as exc:
        raise ValueError(f"network: {exc}") from None
    try:
        train = EpisodeConfig(**train_kw)
    except ValueError as exc:
        raise ValueError(f"train: {exc}") from None
    spec = ExperimentSpec(network=network, train=train, **top)
    spec.sweep_values = [_sweep_value(spec.sweep_axis, v) for v in spec.sweep_values]
    return spec


def _sweep_value(axis: str, v):
    if axis in ("num_mmtc", "levels", "requirements"):
        try:
            return int(v)
        except ValueError:
            raise ValueError(f"sweep.values: {v!r} is not an integer") from None
    if axis == "scheme":
        return str(SchemeSpec.parse(str(v)))
    return v


def load_config(path) -> ExperimentSpec:
    return parse_spec(Path(path).read_text(encoding="utf-8"))


def format_spec(spec: ExperimentSpec) -> str:
    lines = [f"scenario = {spec.scenario}"]
    for f in dataclasses.fields(NetworkConfig):
        lines.append(f"network.{f.name} = {_fmt(getattr(spec.network, f.name))}")
    for f in dataclasses.fields(EpisodeConfig):
        if f.name not in _TRAIN_SKIP:
            lines.append(f"train.{f.name} = {_fmt(getattr(spec.train, f.name))}")
    lines += [
        f"sweep.axis = {spec.sweep_axis}",
        f"sweep.values = {', '.join(str(v) for v in spec.sweep_values)}",
        "sweep.requirements = " + "; ".join(", ".join(_fmt(x) for x in t) for t in spec.requirements),
        f"run.schemes = {', '.join(str(s) for s in spec.schemes)}",
        f"run.replications = {spec.replications}",
        f"run.seed = {spec.seed}",
        f"run.out = {spec.out}",
        f"run.save_models = {spec.save_models}",
    ]
    return "\n".join(lines) + "\n"


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, Scheme):
        return v.value
    return str(v)


def save_config(spec: ExperimentSpec, path) -> None:
    Path(path).write_text(format_spec(spec), encoding="utf-8")


# ----------------------------------------------------------------------------
# Runs
# ----------------------------------------------------------------------------

RESULT_FIELDS = ("scenario", "scheme", "sweep_value", "seed", "avg_ee", "convergence_episode",
                 "violation_rate", "episodes", "timeslots")


@dataclass
class ResultRow:
    scenario: str
    scheme: str
    sweep_value: str
    seed: int
    avg_ee: float  # bits/J, mean reward over the final convergence window
    convergence_episode: int | None
    violation_rate: float  # over the final window
    episodes: int
    timeslots: int
    error: str = ""


@dataclass
class RunTask:
    scenario: str
    scheme: SchemeSpec
    sweep_value: object
    seed: int
    network: NetworkConfig
    train: EpisodeConfig


def tasks_for(spec: ExperimentSpec) -> list[RunTask]:
    tasks = []
    for value in spec.points():
        network, train, schemes = spec.network, spec.train, spec.schemes
        if spec.sweep_axis == "num_mmtc":
            network = dataclasses.replace(network, num_mmtc=int(value))
        elif spec.sweep_axis == "requirements":
            lat, dep, se = spec.requirements[int(value)]
            network = dataclasses.replace(network, latency=lat, dep=dep, embb_spectral_efficiency=se)
        elif spec.sweep_axis == "levels":
            train = dataclasses.replace(train, levels=int(value))
        elif spec.sweep_axis == "scheme":
            schemes = [SchemeSpec.parse(str(value))]
        for sch in schemes:
            for seed in spec.seeds:
                tr = dataclasses.replace(train, scheme=sch.scheme, seed=seed,
                                         levels=sch.levels or train.levels)
                tasks.append(RunTask(spec.scenario, sch, value, seed, network, tr))
    return tasks


def _run_task(task: RunTask):
    try:
        res = run_training(task.train, task.network)
    except Exception as exc:  # recorded, the sweep goes on
        return task, None, None, f"{type(exc).__name__}: {exc}"
    model = res.agents.online.to_bytes() if res.agents is not None else None
    return task, res.log, model, ""


def _run_name(task: RunTask) -> str:
    value = f"_{task.sweep_value}" if task.sweep_value != "" else ""
    return f"{task.scenario}_{task.scheme.label}{value}_s{task.seed}".replace(":", "-").replace("/", "-")


def row_from_log(task: RunTask, log: TrainingLog | None, error: str = "") -> ResultRow:
    w = task.train.conv_window
    if log is None:
        return ResultRow(task.scenario, task.scheme.label, str(task.sweep_value), task.seed, 0.0, None,
                         float("nan"), task.train.episodes, task.train.timeslots, error)
    return ResultRow(task.scenario, task.scheme.label, str(task.sweep_value), task.seed,
                     log.final_mean(w), log.convergence_episode,
                     float(np.mean(log.violation_rate[-w:])), task.train.episodes,
                     task.train.timeslots)


def run_experiment(spec: ExperimentSpec, workers: int | None = None, write: bool = True):
    """Train every (sweep point, scheme, seed) and write results under ``spec.out``.

    Returns ``(rows, logs)`` with rows sorted by (scheme, sweep value, seed).
    """
    tasks = tasks_for(spec)
    if workers is None:
        workers = int(os.environ.get(WORKERS_ENV, "1"))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_run_task, tasks))
    else:
        outputs = [_run_task(t) for t in tasks]
    rows, logs = [], {}
    out = Path(spec.out)
    if write:
        (out / "traces").mkdir(parents=True, exist_ok=True)
        if spec.save_models:
            (out / "models").mkdir(parents=True, exist_ok=True)
        save_config(spec, out / "spec.txt")
    for task, log, model, error in outputs:
        rows.append(row_from_log(task, log, error))
        if log is not None:
            logs[(task.scheme.label, str(task.sweep_value), task.seed)] = log
            if write:
                name = _run_name(task)
                write_trace(log, out / "traces" / f"{name}.csv")
                if model is not None and spec.save_models:
                    (out / "models" / f"{name}.qnet").write_bytes(model)
    rows.sort(key=lambda r: (r.scheme, _sort_key(r.sweep_value), r.seed))
    if write:
        emit_csv(rows, out / "results.csv")
        write_timing(logs, out / "timing.csv")
    return rows, logs


def _sort_key(v: str):
    try:
        return (0, float(v), "")
    except ValueError:
        return (1, 0.0, v)


# ----------------------------------------------------------------------------
# CSV output
# ----------------------------------------------------------------------------


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def emit_csv(rows, path) -> None:
    fields = RESULT_FIELDS + ("error",)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(fields)
        for r in rows:
            w.writerow([_cell(getattr(r, f)) for f in fields])


def read_results(path) -> list[ResultRow]:
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for d in csv.DictReader(fh):
            rows.append(ResultRow(d["scenario"], d["scheme"], d["sweep_value"], int(d["seed"]),
                                  float(d["avg_ee"]),
                                  int(d["convergence_episode"]) if d["convergence_episode"] else None,
                                  float(d["violation_rate"]), int(d["episodes"]), int(d["timeslots"]),
                                  d.get("error", "")))
    return rows


TRACE_FIELDS = ("episode", "reward", "violation_rate", "epsilon", "loss")


def write_trace(log: TrainingLog, path) -> None:
    """Per-episode reward trace (no wall times, so traces are reproducible)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_FIELDS)
        for i, (r, v, e, loss) in enumerate(zip(log.episode_reward, log.violation_rate, log.epsilon,
                                               log.episode_loss), 1):
            w.writerow([i, repr(float(r)), repr(float(v)), repr(float(e)),
                        repr(float(np.nanmean(loss))) if np.any(np.isfinite(loss)) else ""])


def read_trace(path) -> dict[str, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        data = list(csv.DictReader(fh))
    return {k: np.array([float(d[k]) if d[k] else np.nan for d in data]) for k in TRACE_FIELDS}


def write_timing(logs: dict, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("scheme", "sweep_value", "seed", "mean_episode_time_s"))
        for (scheme, value, seed), log in sorted(logs.items()):
            w.writerow((scheme, value, seed, repr(float(np.mean(log.episode_time)))))


# ----------------------------------------------------------------------------
# Convergence summary
# ----------------------------------------------------------------------------


@dataclass
class ConvergenceRow:
    scheme: str
    time_per_episode: float  # seconds
    episodes: int | None  # detect_convergence on the seed-averaged reward curve
    convergence_time: float | None

    def as_list(self):
        return [self.scheme, self.time_per_episode, self.episodes, self.convergence_time]


def summarize_convergence(curves: dict, episode_times: dict | None = None, window: int = 10,
                          tol: float = 0.05) -> list[ConvergenceRow]:
    """Table of time per episode, episodes to converge and their product per scheme.

    ``curves`` maps scheme -> list of per-episode reward series (one per
    seed); they are averaged before convergence detection.
    ``episode_times`` maps scheme -> list of mean episode times.
    """
    table = []
    for scheme in sorted(curves):
        series = [np.asarray(c, float) for c in curves[scheme]]
        n = min(len(c) for c in series)
        mean_curve = np.mean([c[:n] for c in series], axis=0)
        ep = detect_convergence(mean_curve, window, tol)
        times = (episode_times or {}).get(scheme, [])
        t = float(np.mean(times)) if len(times) else float("nan")
        table.append(ConvergenceRow(scheme, t, ep, None if ep is None else t * ep))
    return table


def summarize_dir(path, window: int = 10, tol: float = 0.05, sweep_value: str | None = None):
    """Convergence table for a results directory written by :func:`run_experiment`."""
    path = Path(path)
    rows = read_results(path / "results.csv")
    timing = {}
    tfile = path / "timing.csv"
    if tfile.exists():
        with open(tfile, newline="", encoding="utf-8") as fh:
            for d in csv.DictReader(fh):
                timing[(d["scheme"], d["sweep_value"], int(d["seed"]))] = float(d["mean_episode_time_s"])
    curves, times = {}, {}
    for r in rows:
        if r.error or (sweep_value is not None and r.sweep_value != sweep_value):
            continue
        value = f"_{r.sweep_value}" if r.sweep_value else ""
        trace = path / "traces" / f"{r.scenario}_{r.scheme}{value}_s{r.seed}.csv"
        if not trace.exists():
            continue
        key = r.scheme if sweep_value is not None or not r.sweep_value else f"{r.scheme}@{r.sweep_value}"
        curves.setdefault(key, []).append(read_trace(trace)["reward"])
        if (r.scheme, r.sweep_value, r.seed) in timing:
            times.setdefault(key, []).append(timing[(r.scheme, r.sweep_value, r.seed)])
    return summarize_convergence(curves, times, window, tol)


def format_table(table: list[ConvergenceRow]) -> str:
    head = f"{'scheme':<16}{'time/episode (s)':>18}{'episodes':>10}{'conv. time (s)':>16}"
    lines = [head]
    for r in table:
        ep = "-" if r.episodes is None else str(r.episodes)
        ct = "-" if r.convergence_time is None else f"{r.convergence_time:.2f}"
        lines.append(f"{r.scheme:<16}{r.time_per_episode:>18.3f}{ep:>10}{ct:>16}")
    return "\n".join(lines)
