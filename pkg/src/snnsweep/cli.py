"""Command-line interface: ``snnsweep train | sweep | report | gen-synth``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Output directories default to subdirectories of ``$SNN_OUTPUT_ROOT``
(``runs`` when unset).
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

from . import __version__
from .errors import ConfigError, InputError, SNNError, TrainingAborted
from .events import DatasetSplit, generate_synthetic, load_ncars_layout, save_layout
from .network import NetworkConfig, build_network
from .runlog import RunWriter, load_trace, read_config_file
from .stbp import Hyperparams, train
from .sweep import PAPER_GRID, SweepPlan, compare, detect_stable_region, enhanced_settings, run_sweep

log = logging.getLogger("snnsweep")

OUTPUT_ROOT_ENV = "SNN_OUTPUT_ROOT"
EXIT_OK, EXIT_FAILURE, EXIT_USAGE = 0, 1, 2

# flag name shown to the user for each hyperparameter
FLAGS = {
    "batch_size": "batch-size",
    "learning_rate": "lr",
    "v_th": "v-th",
    "weight_decay": "w-decay",
    "tau": "tau",
    "timesteps": "timesteps",
    "epochs": "epochs",
    "seed": "seed",
    "surrogate_width": "surrogate-width",
    "decoupled_weight_decay": "decoupled-weight-decay",
}
PRESETS = enhanced_settings()


def output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV) or "runs")


@dataclass
class RunConfig:
    """Everything a command needs; the all-default instance is the default setting."""

    hyperparams: Hyperparams = field(default_factory=Hyperparams)
    data_root: Path | None = None
    synthetic: bool = False
    synth_n: int = 200
    synth_test: int | None = None
    synth_seed: int = 0
    network: NetworkConfig = field(default_factory=NetworkConfig)
    plan: SweepPlan | None = None
    out: Path | None = None
    parallelism: int = 1
    deterministic_trace: bool = False

    def load_split(self) -> DatasetSplit:
        if self.data_root is not None:
            return load_ncars_layout(self.data_root)
        if self.synthetic:
            return generate_synthetic(self.synth_n, self.synth_seed, self.synth_test)
        raise ConfigError("no dataset: pass --data ROOT or --synthetic")


class UsageError(ConfigError):
    pass


# -- argument parsing ----------------------------------------------------------

def _add_hyperparam_flags(p, base_flag="--preset"):
    g = p.add_argument_group(f"hyperparameters (override {base_flag} and --config)")
    g.add_argument(base_flag, dest="base", choices=sorted(PRESETS),
                   help="named setting to start from (default: default)")
    g.add_argument("--config", type=Path, help="flat 'key = value' hyperparameter file")
    g.add_argument("--batch-size", "-B", dest="batch_size", type=int)
    g.add_argument("--lr", dest="learning_rate", type=float)
    g.add_argument("--v-th", dest="v_th", type=float)
    g.add_argument("--w-decay", dest="weight_decay", type=float)
    g.add_argument("--tau", type=float)
    g.add_argument("--timesteps", "-T", type=int)
    g.add_argument("--epochs", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--surrogate-width", type=float)
    g.add_argument("--decoupled-weight-decay", action="store_true", default=None,
                   help="apply weight decay to the weights directly instead of through the gradient")


def _add_data_flags(p):
    g = p.add_argument_group("data")
    src = g.add_mutually_exclusive_group()
    src.add_argument("--data", type=Path, help="NCARS-layout root (train|test/cars|background)")
    src.add_argument("--synthetic", action="store_true", help="use the generated bar-vs-noise dataset")
    g.add_argument("--synth-n", type=int, default=200, help="synthetic training samples per class")
    g.add_argument("--synth-test", type=int, help="synthetic test samples per class (default: half)")
    g.add_argument("--synth-seed", type=int, default=0)
    g.add_argument("--init-gain", type=float, help="weight init scale relative to sqrt(1/fan_in)")
    g.add_argument("--spiking-pools", action="store_true", help="put LIF neurons after pooling layers")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="snnsweep", description="Train and sweep spiking CNNs on event data.")
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    ap.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-q", "--quiet", action="store_true", default=argparse.SUPPRESS,
                        help="only log warnings")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train one configuration")
    _add_hyperparam_flags(p)
    _add_data_flags(p)
    p.add_argument("--out", type=Path, help="run directory (default: $SNN_OUTPUT_ROOT/train_<time>)")
    p.add_argument("--deterministic-trace", action="store_true",
                   help="write 0 in the trace seconds column so reruns are byte-identical")

    p = sub.add_parser("sweep", parents=[common], help="one-at-a-time hyperparameter sweep")
    _add_hyperparam_flags(p, "--base")
    _add_data_flags(p)
    p.add_argument("--preset", choices=["paper-grid"], dest="grid",
                   help="use the published exploration grid (28 trials) as the axes")
    p.add_argument("--axis", action="append", default=[], metavar="NAME=V1,V2,...",
                   help="add a sweep axis (repeatable)")
    p.add_argument("--plan", type=Path, help="file of 'name = v1, v2, ...' axis lines")
    p.add_argument("--out", type=Path, help="sweep directory (default: $SNN_OUTPUT_ROOT/sweep)")
    p.add_argument("-j", "--parallelism", type=int, default=1, help="trials run in parallel")
    p.add_argument("--deterministic-trace", action="store_true")

    p = sub.add_parser("report", parents=[common], help="compare run directories")
    p.add_argument("runs", nargs="+", type=Path,
                   help="run directories or sweep directories; the first run is the reference")
    p.add_argument("--out", type=Path, help="where to write comparison.csv and curves.csv "
                                            "(default: $SNN_OUTPUT_ROOT/report)")
    p.add_argument("--window", type=int, default=10)
    p.add_argument("--std-threshold", type=float, default=0.5)
    p.add_argument("--metric", choices=["test", "train"], default="test")
    p.add_argument("--degraded-margin", type=float, default=5.0,
                   help="points below the reference final accuracy that count as degraded")

    p = sub.add_parser("gen-synth", parents=[common], help="write the synthetic dataset to disk")
    p.add_argument("--n", type=int, default=200, help="training samples per class")
    p.add_argument("--n-test", type=int, help="test samples per class (default: half of --n)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=["csv", "packed-binary"], default="csv")
    p.add_argument("--out", type=Path, help="dataset root (default: $SNN_OUTPUT_ROOT/synthetic)")
    return ap


def _hyperparams(args) -> Hyperparams:
    preset = args.base or "default"
    hp = PRESETS[preset]
    values = {}
    if args.config is not None:
        values.update(read_config_file(args.config))
    for name in FLAGS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    try:
        return hp.with_values(**values)
    except ConfigError as exc:
        msg = str(exc)
        for name, flag in FLAGS.items():
            if msg.startswith(name):
                raise ConfigError(f"invalid --{flag}: {msg}") from None
        raise


def _network(args) -> NetworkConfig:
    kw = {}
    if args.init_gain is not None:
        if args.init_gain <= 0:
            raise ConfigError(f"invalid --init-gain: must be > 0, got {args.init_gain}")
        kw["init_gain"] = args.init_gain
    if args.spiking_pools:
        kw["spiking_pools"] = True
    return NetworkConfig(**kw)


def _parse_axis(spec: str, source="--axis"):
    name, sep, values = spec.partition("=")
    if not sep or not values.strip():
        raise UsageError(f"{source}: expected NAME=V1,V2,..., got {spec!r}")
    items = [v.strip() for v in values.split(",") if v.strip()]
    name = Hyperparams.canonical(name.strip())
    return name, [Hyperparams.coerce(name, v) for v in items]


def run_config(args) -> RunConfig:
    cfg = RunConfig(hyperparams=_hyperparams(args), network=_network(args),
                    data_root=args.data, synthetic=args.synthetic, synth_n=args.synth_n,
                    synth_test=args.synth_test, synth_seed=args.synth_seed, out=args.out,
                    deterministic_trace=args.deterministic_trace)
    if args.synth_n < 1 or (args.synth_test is not None and args.synth_test < 0):
        raise ConfigError("invalid --synth-n/--synth-test: sample counts must be positive")
    if args.command == "sweep":
        axes = {}
        if args.grid == "paper-grid":
            axes.update({k: list(v) for k, v in PAPER_GRID.items()})
        if args.plan is not None:
            try:
                lines = args.plan.read_text().splitlines()
            except OSError as exc:
                raise ConfigError(f"cannot read plan file {args.plan}: {exc.strerror}") from None
            for line in lines:
                line = line.split("#", 1)[0].strip()
                if line:
                    name, vals = _parse_axis(line, str(args.plan))
                    axes[name] = vals
        for spec in args.axis:
            name, vals = _parse_axis(spec)
            axes[name] = vals
        cfg.plan = SweepPlan(cfg.hyperparams, axes)
        if args.parallelism < 1:
            raise ConfigError(f"invalid --parallelism: must be >= 1, got {args.parallelism}")
        cfg.parallelism = args.parallelism
    return cfg


# -- commands ------------------------------------------------------------------

def cmd_train(cfg: RunConfig) -> int:
    hp = cfg.hyperparams
    split = cfg.load_split()
    out = cfg.out or output_root() / time.strftime("train_%Y%m%d-%H%M%S")
    writer = RunWriter(out, hp, cfg.network, cfg.deterministic_trace,
                       extra={"data": str(cfg.data_root) if cfg.data_root else
                              {"synthetic": True, "n": cfg.synth_n, "n_test": cfg.synth_test,
                               "seed": cfg.synth_seed}})
    net = build_network(cfg.network.input_shape, hp.lif_params, hp.seed, cfg.network)
    try:
        trace = train(net, split, hp, on_epoch=writer)
    except TrainingAborted as exc:
        writer.log_event(type="aborted", error=str(exc))
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    writer.save_checkpoint(net)
    last = trace.rows[-1] if len(trace) else None
    if last is not None:
        print(f"{out}: {len(trace)} epochs, final test accuracy {last.test_acc:.2f}%")
    else:
        print(f"{out}: 0 epochs")
    return EXIT_OK


def cmd_sweep(cfg: RunConfig) -> int:
    plan = cfg.plan
    if not any(plan.axes.values()):
        raise UsageError("sweep needs at least one axis: use --preset paper-grid, --axis or --plan")
    split = cfg.load_split()
    out = cfg.out or output_root() / "sweep"
    report = run_sweep(plan, split, out, cfg.parallelism, cfg.network, cfg.deterministic_trace)
    print(f"{report.n_cached}/{len(report)} cached")
    failed = [r for r in report.results if r.error]
    for r in failed:
        print(f"{r.trial_id}: aborted ({r.error})", file=sys.stderr)
    print(f"summary: {Path(out) / 'summary.csv'} ({len(report) - len(failed)} completed, "
          f"{len(failed)} aborted)")
    return EXIT_OK


def _expand_runs(paths):
    runs = []
    for p in paths:
        if (p / "trace.csv").is_file():
            runs.append(p)
            continue
        trials = sorted(d for d in p.iterdir() if (d / "trace.csv").is_file()) if p.is_dir() else []
        if not trials:
            raise InputError(f"{p}: no trace.csv in run directory")
        runs.extend(trials)
    return runs


def _fmt(v, spec=".2f"):
    return "-" if v is None else format(v, spec)


def cmd_report(args) -> int:
    runs = _expand_runs(args.runs)
    traces = [load_trace(r) for r in runs]
    names = [r.name for r in runs]
    if len(set(names)) != len(names):
        names = [str(r) for r in runs]
    ref = traces[0]
    with_speedup = len(runs) > 1
    ref_final = ref.rows[-1].test_acc if len(ref) else None

    rows = []
    for name, trace in zip(names, traces):
        acc = trace.test_acc if args.metric == "test" else trace.train_acc
        stable = detect_stable_region(acc, args.window, args.std_threshold)
        final = acc[-1] if acc else None
        row = {"run": name, "epochs": len(trace), "final_acc": final,
               "min_acc": min(acc) if acc else None, "max_acc": max(acc) if acc else None,
               "entry_epoch": stable.entry_epoch, "trailing_std": stable.trailing_std}
        flags = []
        if not stable.found:
            flags.append("no stable region")
        if with_speedup:
            cmp = compare(ref, trace, args.window, args.std_threshold, args.metric)
            row["speedup"] = cmp.speedup
            ref_acc = ref.test_acc if args.metric == "test" else ref.train_acc
            row["delta_acc"] = final - ref_acc[-1] if final is not None and ref_acc else None
            if row["delta_acc"] is not None and row["delta_acc"] < -args.degraded_margin:
                flags.append("degraded")
        row["flag"] = " or ".join(flags)
        rows.append(row)

    cols = ["run", "epochs", "final_acc", "min_acc", "max_acc", "entry_epoch", "trailing_std"]
    if with_speedup:
        cols += ["speedup", "delta_acc"]
    cols.append("flag")

    def cell(row, c):
        v = row[c]
        if c == "speedup":
            return _fmt(v, ".1f") + ("x" if v is not None else "")
        if c in ("run", "flag", "epochs"):
            return str(v)
        if c == "entry_epoch":
            return "-" if v is None else str(v)
        return _fmt(v, "+.2f" if c == "delta_acc" else ".2f")

    table = [cols] + [[cell(r, c) for c in cols] for r in rows]
    widths = [max(len(line[i]) for line in table) for i in range(len(cols))]
    for line in table:
        print("  ".join(s.ljust(w) for s, w in zip(line, widths)).rstrip())
    if ref_final is None:
        log.warning("reference run %s has no epochs", names[0])

    out = args.out or output_root() / "report"
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "comparison.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow(["" if r[c] is None else (f"{r[c]:.6g}" if isinstance(r[c], float) else r[c])
                        for c in cols])
    n_epochs = max(len(t) for t in traces)
    with open(out / "curves.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch"] + names)
        for e in range(n_epochs):
            vals = []
            for t in traces:
                acc = t.test_acc if args.metric == "test" else t.train_acc
                vals.append(repr(acc[e]) if e < len(acc) else "")
            w.writerow([e + 1] + vals)
    print(f"wrote {out / 'comparison.csv'} and {out / 'curves.csv'}")
    return EXIT_OK


def cmd_gen_synth(args) -> int:
    if args.n < 1 or (args.n_test is not None and args.n_test < 0):
        raise ConfigError("invalid --n/--n-test: sample counts must be positive")
    out = args.out or output_root() / "synthetic"
    split = generate_synthetic(args.n, args.seed, args.n_test)
    save_layout(split, out, args.format)
    counts = split.counts()
    parts = [f"{sp} {counts[(sp, 'cars')]} cars / {counts[(sp, 'background')]} background"
             for sp in ("train", "test")]
    print(f"wrote {out}: " + ", ".join(parts))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        if args.command == "report":
            return cmd_report(args)
        if args.command == "gen-synth":
            return cmd_gen_synth(args)
        cfg = run_config(args)
        return cmd_train(cfg) if args.command == "train" else cmd_sweep(cfg)
    except ConfigError as exc:
        print(f"snnsweep {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SNNError, OSError) as exc:
        print(f"snnsweep {args.command}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
