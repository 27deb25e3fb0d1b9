"""Run directories: trace CSV, JSON-lines log, checkpoint.

A run directory holds

- ``trace.csv``  -- ``epoch,train_loss,train_acc,test_acc,seconds``, one row per epoch
- ``log.jsonl``  -- a header object (hyperparameters, network and LIF config,
  library version) followed by one object per epoch
- ``config.txt`` -- the hyperparameters as a flat ``key = value`` file that
  ``train --config`` accepts, so the run can be repeated from its directory
- ``model.ckpt`` -- final network parameters (optional)

Both text files are flushed after every epoch.
"""

from __future__ import annotations

import json
import platform
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .errors import ConfigError, InputError
from .network import Network, NetworkConfig, save_checkpoint
from .stbp import TRACE_HEADER, EpochRecord, Hyperparams, TrainingTrace

TRACE_FILE = "trace.csv"
LOG_FILE = "log.jsonl"
CONFIG_FILE = "config.txt"
CHECKPOINT_FILE = "model.ckpt"


def format_config(hp: Hyperparams) -> str:
    return "".join(f"{k} = {v}\n" for k, v in hp.to_dict().items())


def parse_config(text: str, source: str = "<config>") -> dict:
    """Parse ``key = value`` lines into raw string values.

    Blank lines and ``#`` comments are skipped. Keys are returned in
    canonical hyperparameter form; values are left as strings.
    """
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip() or not value.strip():
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        try:
            name = Hyperparams.canonical(key.strip())
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
        out[name] = value.strip()
    return out


def read_config_file(path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


class RunWriter:
    """Incremental writer for one run directory.

    With ``deterministic_trace`` the ``seconds`` column of the CSV is written
    as 0 so that repeated runs give byte-identical traces; measured times are
    kept in the JSON-lines log either way.
    """

    def __init__(self, run_dir, hp: Hyperparams, config: NetworkConfig, deterministic_trace=False,
                 extra: dict | None = None):
        self.dir = Path(run_dir)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.deterministic = deterministic_trace
        self.trace_path = self.dir / TRACE_FILE
        self.log_path = self.dir / LOG_FILE
        header = {
            "type": "header",
            "version": __version__,
            "python": platform.python_version(),
            "hyperparams": hp.to_dict(),
            "lif": asdict(hp.lif_params),
            "network": asdict(config),
            "deterministic_trace": deterministic_trace,
        }
        if extra:
            header.update(extra)
        self.trace_path.write_text(TRACE_HEADER + "\n")
        (self.dir / CONFIG_FILE).write_text(format_config(hp))
        self.log_path.write_text(json.dumps(header, sort_keys=True) + "\n")

    def __call__(self, row: EpochRecord, net: Network | None = None):
        shown = EpochRecord(row.epoch, row.train_loss, row.train_acc, row.test_acc,
                            0.0 if self.deterministic else row.seconds)
        with open(self.trace_path, "a") as fh:
            fh.write(TrainingTrace.format_row(shown) + "\n")
        with open(self.log_path, "a") as fh:
            fh.write(json.dumps({"type": "epoch", **asdict(row)}, sort_keys=True) + "\n")

    def log_event(self, **fields):
        with open(self.log_path, "a") as fh:
            fh.write(json.dumps(fields, sort_keys=True) + "\n")

    def save_checkpoint(self, net: Network):
        save_checkpoint(net, self.dir / CHECKPOINT_FILE)


def load_trace(run_dir) -> TrainingTrace:
    path = Path(run_dir) / TRACE_FILE
    if not path.is_file():
        raise InputError(f"no {TRACE_FILE} in {run_dir}")
    return TrainingTrace.from_csv(path.read_text())


def read_header(run_dir) -> dict:
    with open(Path(run_dir) / LOG_FILE) as fh:
        return json.loads(fh.readline())
