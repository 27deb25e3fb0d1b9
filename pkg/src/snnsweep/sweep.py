"""One-at-a-time hyperparameter exploration and stable-region analysis."""

from __future__ import annotations

import csv
import hashlib
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, TrainingAborted
from .events import DatasetSplit
from .network import NetworkConfig, build_network
from .runlog import TRACE_FILE, RunWriter, load_trace
from .stbp import Hyperparams, TrainingTrace, train

log = logging.getLogger(__name__)

DEFAULT = Hyperparams(batch_size=40, learning_rate=1e-3, v_th=0.4, weight_decay=0.0)
SETTING_1 = replace(DEFAULT, batch_size=20, learning_rate=7.5e-3, v_th=0.5)
SETTING_2 = replace(SETTING_1, learning_rate=1e-2)

PAPER_GRID = {
    "batch_size": [10, 20, 30, 40, 50, 60, 70],
    "learning_rate": [5e-4, 1e-4, 1e-3, 5e-3, 7.5e-3, 1e-2, 5e-2],
    "v_th": [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7],
    "weight_decay": [0, 0.2, 0.5, 0.75, 1, 2, 4],
}

# published reference numbers for the default vs Setting-1 comparison on NCARS
PAPER_REFERENCE = {
    "default_entry_epoch": 125,
    "default_acc_at_entry": 85.24,
    "setting1_entry_epoch": 66,
    "setting1_acc_at_entry": 85.99,
    "setting2_acc_at_entry": 85.17,
    "default_range": (57.06, 85.84),
    "setting1_range": (71.28, 86.64),
    "setting2_range": (75.48, 86.46),
    "speedup": 1.9,
}

MARKER_FILE = "COMPLETED"
SUMMARY_FILE = "summary.csv"
RANKING_FILE = "ranking.csv"
SUMMARY_HEADER = ["trial_id", "param", "value", "final_test_acc", "entry_epoch",
                  "trailing_std", "min_acc", "max_acc"]


class PlanError(ConfigError):
    """A sweep plan that cannot be expanded into valid trials."""


def enhanced_settings() -> dict[str, Hyperparams]:
    return {"default": DEFAULT, "setting-1": SETTING_1, "setting-2": SETTING_2}


# -- plans ---------------------------------------------------------------------

@dataclass
class SweepPlan:
    base: Hyperparams = DEFAULT
    axes: dict[str, list] = field(default_factory=dict)

    def __post_init__(self):
        try:
            self.axes = {Hyperparams.canonical(k): list(v) for k, v in self.axes.items()}
        except ConfigError as exc:
            raise PlanError(str(exc)) from None

    @classmethod
    def paper_grid(cls, base: Hyperparams = DEFAULT) -> "SweepPlan":
        return cls(base, {k: list(v) for k, v in PAPER_GRID.items()})


@dataclass(frozen=True)
class Trial:
    index: int
    param: str
    value: object
    hp: Hyperparams

    @property
    def trial_id(self) -> str:
        return f"trial_{self.index:03d}_{self.param}_{self.value:g}"


def plan_trials(plan: SweepPlan) -> list[Trial]:
    trials = []
    for param, values in plan.axes.items():
        for value in values:
            try:
                hp = replace(plan.base, **{param: Hyperparams.coerce(param, value)})
            except ConfigError as exc:
                raise PlanError(f"plan axis {param}={value!r}: {exc}") from None
            trials.append(Trial(len(trials), param, hp.to_dict()[param], hp))
    return trials


def expand_plan(plan: SweepPlan) -> list[Hyperparams]:
    """One configuration per axis value; every other field keeps the base value."""
    if not plan.axes or not any(plan.axes.values()):
        raise PlanError("sweep plan has no axis values")
    return [t.hp for t in plan_trials(plan)]


def trial_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index]).generate_state(1)[0])


# -- stable regions ------------------------------------------------------------

@dataclass(frozen=True)
class StableRegion:
    entry_epoch: int | None
    trailing_std: float | None
    diagnostic: str = ""

    @property
    def found(self) -> bool:
        return self.entry_epoch is not None


def _accuracies(trace, metric):
    if isinstance(trace, TrainingTrace):
        return np.array(trace.test_acc if metric == "test" else trace.train_acc, dtype=np.float64)
    return np.asarray(trace, dtype=np.float64)


def detect_stable_region(trace, window: int = 10, std_threshold: float = 0.5,
                         metric: str = "test") -> StableRegion:
    """First epoch ``e >= window`` whose trailing ``window`` accuracies have a
    population standard deviation below ``std_threshold``.

    ``trace`` is a :class:`TrainingTrace` or a plain sequence of accuracies
    (epoch 1 first).
    """
    if metric not in ("test", "train"):
        raise ConfigError(f"metric must be 'test' or 'train', got {metric!r}")
    if window < 2:
        raise ConfigError(f"window must be >= 2, got {window}")
    acc = _accuracies(trace, metric)
    if len(acc) < window:
        return StableRegion(None, None, f"trace has {len(acc)} epochs, fewer than window {window}")
    for e in range(window, len(acc) + 1):
        std = float(np.std(acc[e - window:e]))
        if std < std_threshold:
            return StableRegion(e, std)
    return StableRegion(None, None, "no window below threshold")


@dataclass(frozen=True)
class Comparison:
    entry_ref: int | None
    entry_cand: int | None
    acc_at_entry_ref: float | None
    acc_at_entry_cand: float | None
    range_ref: tuple[float, float]
    range_cand: tuple[float, float]
    speedup: float | None
    note: str = ""


def _acc_range(acc):
    return (float(np.min(acc)), float(np.max(acc))) if len(acc) else (float("nan"), float("nan"))


def compare(reference, candidate, window: int = 10, std_threshold: float = 0.5,
            metric: str = "test") -> Comparison:
    """Epochs-to-stability speedup ``entry(reference) / entry(candidate)`` and
    accuracy ranges over training."""
    ra, ca = _accuracies(reference, metric), _accuracies(candidate, metric)
    rs = detect_stable_region(ra, window, std_threshold)
    cs = detect_stable_region(ca, window, std_threshold)
    at = lambda acc, s: float(acc[s.entry_epoch - 1]) if s.found else None  # noqa: E731
    speedup, note = None, ""
    if rs.found and cs.found:
        speedup = rs.entry_epoch / cs.entry_epoch
    else:
        missing = [n for n, s in (("reference", rs), ("candidate", cs)) if not s.found]
        note = "no stable region: " + ", ".join(missing)
    return Comparison(rs.entry_epoch, cs.entry_epoch, at(ra, rs), at(ca, cs),
                      _acc_range(ra), _acc_range(ca), speedup, note)


# -- execution -----------------------------------------------------------------

@dataclass
class TrialResult:
    trial: Trial
    trace: TrainingTrace
    stable: StableRegion
    cached: bool = False
    error: str | None = None

    @property
    def trial_id(self) -> str:
        return self.trial.trial_id

    @property
    def final_acc(self) -> float | None:
        return self.trace.rows[-1].test_acc if len(self.trace) else None

    @property
    def acc_range(self) -> tuple[float, float] | None:
        return _acc_range(self.trace.test_acc) if len(self.trace) else None


@dataclass
class SweepReport:
    results: list[TrialResult] = field(default_factory=list)
    base: Hyperparams = DEFAULT

    def __len__(self):
        return len(self.results)

    @property
    def n_cached(self) -> int:
        return sum(r.cached for r in self.results)

    def reference(self) -> TrialResult | None:
        """First trial whose configuration equals the base (seed aside)."""
        for r in self.results:
            if replace(r.trial.hp, seed=self.base.seed) == self.base and not r.error:
                return r
        return None

    def comparisons(self) -> list[tuple[str, Comparison, float | None]]:
        """Each trial against the reference: ``(trial_id, comparison, accuracy delta)``."""
        ref = self.reference()
        if ref is None:
            return []
        rows = []
        for r in self.results:
            if r.error or not len(r.trace):
                continue
            delta = r.final_acc - ref.final_acc
            rows.append((r.trial_id, compare(ref.trace, r.trace), delta))
        return rows

    def ranked(self, param: str | None = None) -> list[TrialResult]:
        """Order by stable-region entry epoch (missing last), then final accuracy."""
        rows = [r for r in self.results if param is None or r.trial.param == param]
        return sorted(rows, key=lambda r: (r.stable.entry_epoch is None,
                                           r.stable.entry_epoch or 0,
                                           -(r.final_acc if r.final_acc is not None else -1),
                                           r.trial.index))

    @staticmethod
    def _row(r: TrialResult) -> list:
        rng = r.acc_range or ("", "")
        fmt = lambda v: "" if v is None or v == "" else f"{v:.4f}"  # noqa: E731
        return [r.trial_id, r.trial.param, f"{r.trial.value:g}", fmt(r.final_acc),
                "" if r.stable.entry_epoch is None else r.stable.entry_epoch,
                fmt(r.stable.trailing_std), fmt(rng[0]), fmt(rng[1])]

    def summary_csv(self, rows=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for r in (self.results if rows is None else rows):
            w.writerow(self._row(r))
        return buf.getvalue()


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _cached(trial_dir: Path):
    marker = trial_dir / MARKER_FILE
    trace_path = trial_dir / TRACE_FILE
    if not marker.is_file() or not trace_path.is_file():
        return None
    lines = marker.read_text().splitlines()
    if not lines or lines[0].strip() != _sha256(trace_path):
        log.warning("%s: checksum mismatch, rerunning trial", trial_dir)
        return None
    error = lines[1].removeprefix("aborted: ") if len(lines) > 1 else None
    return load_trace(trial_dir), error


def _run_trial(args):
    trial, split, trial_dir, config, deterministic_trace = args
    hp = trial.hp
    writer = RunWriter(trial_dir, hp, config, deterministic_trace,
                       extra={"trial_id": trial.trial_id, "param": trial.param, "value": trial.value})
    net = build_network(config.input_shape, hp.lif_params, hp.seed, config)
    error = None
    try:
        train(net, split, hp, on_epoch=writer)
    except TrainingAborted as exc:
        error = str(exc)
        writer.log_event(type="aborted", error=error)
    marker = _sha256(writer.trace_path) + "\n"
    if error:
        marker += f"aborted: {error}\n"
    (Path(trial_dir) / MARKER_FILE).write_text(marker)
    return load_trace(trial_dir), error


def run_sweep(plan: SweepPlan, split: DatasetSplit, out_dir, parallelism: int = 1,
              config: NetworkConfig | None = None, deterministic_trace: bool = False,
              window: int = 10, std_threshold: float = 0.5, metric: str = "test") -> SweepReport:
    """Run every trial of ``plan`` into ``out_dir/<trial_id>/``.

    Trials with a valid completion marker are loaded instead of retrained.
    Trial ``i`` trains with seed ``trial_seed(base.seed, i)``. Writes
    ``summary.csv`` (trial order) and ``ranking.csv`` (stable-region order).
    """
    config = config or NetworkConfig()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    trials = [replace(t, hp=replace(t.hp, seed=trial_seed(plan.base.seed, t.index)))
              for t in plan_trials(plan)]
    results: dict[int, tuple] = {}
    todo = []
    for t in trials:
        hit = _cached(out / t.trial_id)
        if hit is not None:
            results[t.index] = (*hit, True)
        else:
            todo.append((t, split, out / t.trial_id, config, deterministic_trace))
    log.info("%d/%d trials cached", len(trials) - len(todo), len(trials))

    if parallelism > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            for args, res in zip(todo, pool.map(_run_trial, todo)):
                results[args[0].index] = (*res, False)
    else:
        for args in todo:
            results[args[0].index] = (*_run_trial(args), False)

    report = SweepReport(base=plan.base)
    for t in trials:
        trace, error, cached = results[t.index]
        stable = detect_stable_region(trace, window, std_threshold, metric)
        report.results.append(TrialResult(t, trace, stable, cached, error))
    (out / SUMMARY_FILE).write_text(report.summary_csv())
    (out / RANKING_FILE).write_text(report.summary_csv(report.ranked()))
    return report
