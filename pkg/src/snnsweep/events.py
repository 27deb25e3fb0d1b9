"""Event-camera samples: parsing, frame encoding, dataset layout, synthetic data.

File formats
------------
CSV
    One event per line, ``x,y,t_us,p`` with ``p`` in ``{0, 1}`` (1 = positive
    polarity). An optional non-numeric header line is skipped. UTF-8.
Packed binary (``.bin``)
    Little-endian records of ``x: u16, y: u16, t_us: u32, p: u8`` (9 bytes,
    no padding, no file header).

Dataset layout: ``<root>/{train,test}/{cars,background}/*.csv`` (``*.bin`` is
accepted too). ``cars`` is class 0, ``background`` class 1.

Frame encoding puts positive events in channel 0, negative in channel 1, and
ORs multiple events falling in one ``(bin, channel, pixel)`` cell.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, EventFormatError, ParseError

log = logging.getLogger(__name__)

EVENT_DTYPE = np.dtype([("x", "<u2"), ("y", "<u2"), ("t", "<u4"), ("p", "u1")])
assert EVENT_DTYPE.itemsize == 9

POSITIVE, NEGATIVE = 1, 0
DURATION_US = 100_000
CLASS_DIRS = ("cars", "background")
SPLITS = ("train", "test")
NCARS_COUNTS = {
    ("train", "cars"): 7940,
    ("test", "cars"): 4396,
    ("train", "background"): 7482,
    ("test", "background"): 4211,
}


class Event(NamedTuple):
    x: int
    y: int
    t: int
    p: int  # POSITIVE or NEGATIVE


def _as_event_array(events) -> np.ndarray:
    if isinstance(events, np.ndarray) and events.dtype == EVENT_DTYPE:
        return events
    rows = [tuple(e) for e in events]
    return np.array(rows, dtype=EVENT_DTYPE) if rows else np.zeros(0, dtype=EVENT_DTYPE)


@dataclass(eq=False)
class EventStream:
    """Time-ordered events of one recording, stored as a structured array."""

    events: np.ndarray
    label: int = 0
    duration_us: int = DURATION_US
    name: str = ""

    def __post_init__(self):
        self.events = _as_event_array(self.events)
        t = self.events["t"].astype(np.int64)
        bad = np.flatnonzero(np.diff(t) < 0)
        if bad.size:
            i = int(bad[0]) + 1
            raise EventFormatError(f"timestamp regression at event {i} ({t[i - 1]} -> {t[i]})")
        if t.size and t[-1] > self.duration_us:
            raise EventFormatError(f"timestamp {t[-1]} exceeds sample duration {self.duration_us}")
        if np.any(self.events["p"] > 1):
            raise EventFormatError("polarity values must be 0 or 1")

    def __len__(self):
        return len(self.events)

    def __iter__(self):
        for x, y, t, p in self.events.tolist():
            yield Event(x, y, t, p)

    def __eq__(self, other):
        if not isinstance(other, EventStream):
            return NotImplemented
        return (self.label == other.label and self.duration_us == other.duration_us
                and np.array_equal(self.events, other.events))

    def __repr__(self):
        return (f"EventStream({self.name or '?'}, n={len(self)}, label={self.label}, "
                f"duration_us={self.duration_us})")


# -- parsing -----------------------------------------------------------------

def _infer_format(path: Path, fmt):
    if fmt is not None:
        if fmt not in ("csv", "packed-binary"):
            raise ConfigError(f"unknown event format {fmt!r}")
        return fmt
    return "packed-binary" if path.suffix.lower() in (".bin", ".evt") else "csv"


def _parse_csv(path: Path, duration_us: int) -> np.ndarray:
    rows = []
    last_t = -1
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            fields = line.split(",")
            try:
                x, y, t, p = (int(f) for f in fields)
            except ValueError:
                if not rows and lineno == 1 and any(c.isalpha() for c in line):
                    continue  # header
                raise ParseError(f"malformed record {line!r}", path, lineno) from None
            if len(fields) != 4:
                raise ParseError(f"expected 4 fields, got {len(fields)}", path, lineno)
            if not (0 <= x < 2**16 and 0 <= y < 2**16 and 0 <= t < 2**32):
                raise ParseError(f"field out of range in {line!r}", path, lineno)
            if p not in (0, 1):
                raise ParseError(f"polarity must be 0 or 1, got {p}", path, lineno)
            if t < last_t:
                raise EventFormatError(f"timestamp regression {last_t} -> {t}", path, lineno)
            if t > duration_us:
                raise EventFormatError(f"timestamp {t} exceeds duration {duration_us}", path, lineno)
            last_t = t
            rows.append((x, y, t, p))
    return np.array(rows, dtype=EVENT_DTYPE) if rows else np.zeros(0, dtype=EVENT_DTYPE)


def _parse_packed(path: Path, duration_us: int) -> np.ndarray:
    raw = path.read_bytes()
    rem = len(raw) % EVENT_DTYPE.itemsize
    if rem:
        raise ParseError(f"truncated record ({rem} trailing bytes)", path, len(raw) - rem)
    ev = np.frombuffer(raw, dtype=EVENT_DTYPE).copy()
    bad_p = np.flatnonzero(ev["p"] > 1)
    if bad_p.size:
        i = int(bad_p[0])
        raise ParseError(f"polarity must be 0 or 1, got {ev['p'][i]}", path, i * EVENT_DTYPE.itemsize)
    t = ev["t"].astype(np.int64)
    back = np.flatnonzero(np.diff(t) < 0)
    if back.size:
        i = int(back[0]) + 1
        raise EventFormatError(f"timestamp regression {t[i - 1]} -> {t[i]}", path,
                               i * EVENT_DTYPE.itemsize)
    late = np.flatnonzero(t > duration_us)
    if late.size:
        i = int(late[0])
        raise EventFormatError(f"timestamp {t[i]} exceeds duration {duration_us}", path,
                               i * EVENT_DTYPE.itemsize)
    return ev


def parse_event_file(path, format=None, label=0, duration_us=DURATION_US) -> EventStream:
    """Read one sample. ``format`` is ``"csv"`` or ``"packed-binary"``; inferred
    from the extension when omitted (``.bin`` means packed binary)."""
    path = Path(path)
    fmt = _infer_format(path, format)
    if fmt == "csv":
        ev = _parse_csv(path, duration_us)
    else:
        ev = _parse_packed(path, duration_us)
    return EventStream(ev, label=label, duration_us=duration_us, name=path.stem)


def write_event_file(stream: EventStream, path, format=None) -> None:
    path = Path(path)
    fmt = _infer_format(path, format)
    if fmt == "csv":
        ev = stream.events
        lines = ["x,y,t_us,p"]
        lines += [f"{x},{y},{t},{p}" for x, y, t, p in ev.tolist()]
        path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    else:
        path.write_bytes(np.ascontiguousarray(stream.events, dtype=EVENT_DTYPE).tobytes())


# -- encoding ----------------------------------------------------------------

def encode_frames(stream: EventStream, T: int = 10, H: int = 100, W: int = 100) -> np.ndarray:
    """Bin a stream into a binary ``uint8`` spike tensor of shape ``[T, 2, H, W]``.

    ``bin = floor(t * T / duration)`` clamped to ``T - 1``; events outside
    the ``H x W`` frame are dropped.
    """
    if T < 1:
        raise ConfigError(f"timestep count must be >= 1, got {T}")
    out = np.zeros((T, 2, H, W), dtype=np.uint8)
    ev = stream.events
    if len(ev) == 0:
        return out
    x = ev["x"].astype(np.int64)
    y = ev["y"].astype(np.int64)
    keep = (x < W) & (y < H)
    if not keep.all():
        log.debug("%s: dropped %d events outside the %dx%d frame", stream.name or "stream",
                  int((~keep).sum()), W, H)
    t = ev["t"].astype(np.int64)[keep]
    bins = np.minimum(t * T // max(stream.duration_us, 1), T - 1)
    ch = np.where(ev["p"][keep] == POSITIVE, 0, 1)
    out[bins, ch, y[keep], x[keep]] = 1
    return out


def encode_batch(streams, T=10, H=100, W=100) -> np.ndarray:
    out = np.zeros((len(streams), T, 2, H, W), dtype=np.uint8)
    for i, s in enumerate(streams):
        out[i] = encode_frames(s, T, H, W)
    return out


# -- datasets ----------------------------------------------------------------

@dataclass(frozen=True)
class DatasetSplit:
    train: tuple = field(default_factory=tuple)
    test: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, "train", tuple(self.train))
        object.__setattr__(self, "test", tuple(self.test))
        overlap = {id(s) for s in self.train} & {id(s) for s in self.test}
        if overlap:
            raise ConfigError("a sample appears in both train and test splits")

    def counts(self) -> dict:
        out = {}
        for split in SPLITS:
            for label, cls in enumerate(CLASS_DIRS):
                out[(split, cls)] = sum(1 for s in getattr(self, split) if s.label == label)
        return out


def load_ncars_layout(root, duration_us=DURATION_US) -> DatasetSplit:
    root = Path(root)
    parts = {}
    for split in SPLITS:
        items = []
        for label, cls in enumerate(CLASS_DIRS):
            d = root / split / cls
            if not d.is_dir():
                raise ConfigError(f"missing directory {d}")
            files = sorted(p for p in d.iterdir() if p.suffix.lower() in (".csv", ".bin"))
            if not files:
                raise ConfigError(f"class '{cls}' has no event files in {d}")
            items += [parse_event_file(f, label=label, duration_us=duration_us) for f in files]
        parts[split] = items
    out = DatasetSplit(parts["train"], parts["test"])
    counts = out.counts()
    log.info("loaded %s: %s", root, ", ".join(f"{s}/{c}={n}" for (s, c), n in counts.items()))
    if counts == NCARS_COUNTS:
        log.info("split counts match the published NCARS split")
    return out


def save_layout(split: DatasetSplit, root, format="csv") -> None:
    """Write a split in the directory layout read by :func:`load_ncars_layout`."""
    root = Path(root)
    ext = ".csv" if format == "csv" else ".bin"
    for part in SPLITS:
        for label, cls in enumerate(CLASS_DIRS):
            (root / part / cls).mkdir(parents=True, exist_ok=True)
        for i, s in enumerate(getattr(split, part)):
            name = s.name or f"sample_{i:05d}"
            write_event_file(s, root / part / CLASS_DIRS[s.label] / f"{name}{ext}", format)


# -- synthetic data ----------------------------------------------------------

SYNTH_SIZE = 100
SYNTH_EVENTS = (6000, 10000)  # per-sample event count range, shared by both classes
SYNTH_NOISE_FRACTION = 0.2   # share of uniform noise events inside bar samples
SYNTH_EDGE_BAND = 4          # thickness in pixels of the ON and OFF edge bands


def _sorted_stream(x, y, t, p, label, name):
    order = np.argsort(t, kind="stable")
    ev = np.zeros(len(t), dtype=EVENT_DTYPE)
    ev["x"], ev["y"], ev["t"], ev["p"] = x[order], y[order], t[order], p[order]
    return EventStream(ev, label=label, duration_us=DURATION_US, name=name)


def _uniform_events(rng, n, size=SYNTH_SIZE):
    return (rng.integers(0, size, n), rng.integers(0, size, n),
            rng.integers(0, DURATION_US, n), rng.integers(0, 2, n))


def _bar_sample(rng, name, size=SYNTH_SIZE):
    n = int(rng.integers(*SYNTH_EVENTS))
    n_noise = int(round(n * SYNTH_NOISE_FRACTION))
    n_edge = n - n_noise
    length = int(rng.integers(20, 41))
    width = int(rng.integers(3, 7))
    travel = float(rng.uniform(20, 50))
    direction = 1 if rng.random() < 0.5 else -1
    horizontal = rng.random() < 0.5  # motion along x

    # leading edge sweeps [lead0, lead0 + direction * travel]; trailing edge sits `width` behind it
    margin = width + SYNTH_EDGE_BAND + 1
    if direction > 0:
        lead0 = rng.uniform(margin, size - 1 - travel)
    else:
        lead0 = rng.uniform(travel, size - 1 - margin)
    cross0 = int(rng.integers(0, size - length + 1))

    t = np.sort(rng.integers(0, DURATION_US, n_edge))
    lead = lead0 + direction * travel * t / DURATION_US
    on = rng.random(n_edge) < 0.5
    band = rng.uniform(0.0, SYNTH_EDGE_BAND, n_edge)
    along = np.where(on, lead - direction * band, lead - direction * (width + band))
    along = np.clip(np.floor(along), 0, size - 1).astype(np.int64)
    cross = rng.integers(cross0, cross0 + length, n_edge)
    p = np.where(on, POSITIVE, NEGATIVE)
    ex, ey = (along, cross) if horizontal else (cross, along)

    nx, ny, nt, np_ = _uniform_events(rng, n_noise, size)
    return _sorted_stream(np.concatenate([ex, nx]), np.concatenate([ey, ny]),
                          np.concatenate([t, nt]), np.concatenate([p, np_]), 0, name)


def _noise_sample(rng, name, size=SYNTH_SIZE):
    n = int(rng.integers(*SYNTH_EVENTS))
    x, y, t, p = _uniform_events(rng, n, size)
    return _sorted_stream(x, y, t, p, 1, name)


def generate_synthetic(n_per_class: int, seed: int = 0, n_test_per_class: int | None = None) -> DatasetSplit:
    """Two-class toy stand-in for NCARS.

    Class 0: a bar translating at constant velocity, ON events on its leading
    edge and OFF events on its trailing edge, plus some uniform noise.
    Class 1: uniform noise only. Both classes draw their per-sample event
    count from the same range, so counting events cannot separate them.
    The test split has ``n_test_per_class`` samples per class (default half
    of ``n_per_class``). Fully determined by ``seed``.
    """
    if n_per_class < 1:
        raise ConfigError(f"n_per_class must be >= 1, got {n_per_class}")
    if n_test_per_class is None:
        n_test_per_class = max(1, n_per_class // 2)
    parts = {}
    for split_id, (split, count) in enumerate((("train", n_per_class), ("test", n_test_per_class))):
        items = []
        for i in range(count):
            rng = np.random.default_rng([seed, split_id, 0, i])
            items.append(_bar_sample(rng, f"{split}_cars_{i:05d}"))
            rng = np.random.default_rng([seed, split_id, 1, i])
            items.append(_noise_sample(rng, f"{split}_background_{i:05d}"))
        parts[split] = items
    return DatasetSplit(parts["train"], parts["test"])
