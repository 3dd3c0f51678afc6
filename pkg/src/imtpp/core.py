"""Event-sequence data types, JSON Lines ingestion, time normalization and splitting."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable

import numpy as np

log = logging.getLogger(__name__)


class ParseError(ValueError):
    """A dataset record could not be parsed."""


class EmptyDatasetError(ValueError):
    pass


class VocabularyError(KeyError):
    """A mark that is not part of the dataset vocabulary."""


@dataclass(frozen=True)
class Event:
    mark: str
    time: float

    def __post_init__(self):
        if not self.time >= 0:
            raise ValueError(f"event time must be nonnegative, got {self.time}")


@dataclass(frozen=True)
class Sequence:
    id: str
    events: tuple[Event, ...]
    # absolute time of the first event; normalized sequences start at 0
    offset: float = 0.0

    def __post_init__(self):
        if not self.events:
            raise ValueError(f"sequence {self.id!r} is empty")
        times = self.times
        if np.any(np.diff(times) <= 0):
            raise ValueError(f"sequence {self.id!r} times are not strictly increasing")

    def __len__(self) -> int:
        return len(self.events)

    @property
    def times(self) -> np.ndarray:
        return np.fromiter((e.time for e in self.events), dtype=np.float64, count=len(self.events))

    @property
    def marks(self) -> list[str]:
        return [e.mark for e in self.events]


@dataclass(frozen=True)
class Dataset:
    sequences: tuple[Sequence, ...]
    vocab: tuple[str, ...]
    time_scale: float = 1.0
    _index: dict = field(default=None, init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.time_scale <= 0:
            raise ValueError("time_scale must be positive")
        seen = {m for s in self.sequences for m in s.marks}
        if seen != set(self.vocab):
            raise ValueError("vocabulary must equal the set of marks in the sequences")
        object.__setattr__(self, "_index", {m: i for i, m in enumerate(self.vocab)})

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def n_marks(self) -> int:
        return len(self.vocab)

    def mark_id(self, mark: str) -> int:
        try:
            return self._index[mark]
        except KeyError:
            raise VocabularyError(mark) from None

    def mark_ids(self, seq: Sequence) -> np.ndarray:
        return np.array([self.mark_id(m) for m in seq.marks], dtype=np.intp)

    def n_events(self) -> int:
        return sum(len(s) for s in self.sequences)


def build_dataset(sequences: Iterable[Sequence], time_scale: float = 1.0,
                  vocab: Iterable[str] | None = None) -> Dataset:
    """Assemble a Dataset; the vocabulary follows first appearance unless given."""
    sequences = tuple(sequences)
    if not sequences:
        raise EmptyDatasetError("dataset has no sequences")
    if vocab is None:
        order: dict[str, None] = {}
        for s in sequences:
            for m in s.marks:
                order.setdefault(m, None)
        vocab = tuple(order)
    return Dataset(sequences, tuple(vocab), time_scale)


# -- ingestion -----------------------------------------------------------------------

def _clean_events(raw: list[tuple[float, str]]) -> tuple[list[Event], int]:
    """Sort by time, then keep the first event at each timestamp."""
    raw = sorted(raw, key=lambda te: te[0])
    kept: list[Event] = []
    dropped = 0
    for t, m in raw:
        if kept and t <= kept[-1].time:
            dropped += 1
            continue
        kept.append(Event(m, t))
    return kept, dropped


def parse_lines(lines: Iterable[str], source: str = "<input>") -> Dataset:
    sequences = []
    dropped = 0
    empty = 0
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            sid = str(rec["id"])
            raw = [(float(e["t"]), str(e["m"])) for e in rec["events"]]
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{source}:{lineno}: malformed record ({exc})") from exc
        if any(not math.isfinite(t) or t < 0 for t, _ in raw):
            raise ParseError(f"{source}:{lineno}: event times must be finite and nonnegative")
        events, d = _clean_events(raw)
        dropped += d
        if not events:
            empty += 1
            continue
        sequences.append(Sequence(sid, tuple(events)))
    if dropped:
        log.warning("dropped %d events with duplicate or non-increasing timestamps", dropped)
    if empty:
        log.warning("dropped %d empty sequences", empty)
    if not sequences:
        raise EmptyDatasetError(f"{source}: no sequences")
    return build_dataset(sequences)


def ingest(path, format: str = "jsonl") -> Dataset:  # noqa: A002 - flag name
    """Read a JSON Lines sequence file: one ``{"id", "events": [{"t", "m"}]}`` per line."""
    if format != "jsonl":
        raise ValueError(f"unsupported dataset format {format!r}")
    path = Path(path)
    with path.open("r", encoding="utf-8") as fh:
        return parse_lines(fh, source=str(path))


def write_jsonl(d: Dataset, path, denormalize: bool = False) -> None:
    """Write ``d`` in the ingest format (absolute times when ``denormalize``)."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for s in d.sequences:
            times = denormalized_times(d, s) if denormalize else s.times
            rec = {"id": s.id, "events": [{"t": float(t), "m": e.mark} for t, e in zip(times, s.events)]}
            fh.write(json.dumps(rec) + "\n")


# -- normalization ---------------------------------------------------------------------

def train_length(n: int, train_fraction: float) -> int:
    """K = ceil(f * N), with a guard against floating error (ceil(0.8 * 10) must be 8)."""
    return min(n, math.ceil(round(train_fraction * n, 9)))


def normalize_times(d: Dataset, train_fraction: float = 0.8, scale: float | None = None) -> Dataset:
    """Divide inter-arrival times by their mean over the training portion.

    Each sequence is shifted to start at 0 and its first-event time kept in
    ``offset``; ``time_scale`` accumulates the divisor, so
    ``offset + time_scale * t`` recovers the input times. Pass ``scale`` to reuse
    the divisor of an earlier run (a checkpoint's ``time_scale``).
    """
    if not d.sequences:
        raise EmptyDatasetError("dataset has no sequences")
    if scale is None:
        total, count = 0.0, 0
        for s in d.sequences:
            k = train_length(len(s), train_fraction)
            gaps = np.diff(s.times[:k])
            total += float(gaps.sum())
            count += gaps.size
        if count == 0:
            raise ValueError("no inter-arrival times in the training portion (all sequences too short)")
        scale = total / count
    elif not scale > 0:
        raise ValueError("scale must be positive")
    out = []
    for s in d.sequences:
        t = s.times
        norm = (t - t[0]) / scale
        events = tuple(Event(e.mark, float(x)) for e, x in zip(s.events, norm))
        out.append(Sequence(s.id, events, offset=s.offset + d.time_scale * float(t[0])))
    return Dataset(tuple(out), d.vocab, d.time_scale * scale)


def denormalized_times(d: Dataset, s: Sequence) -> np.ndarray:
    return s.offset + d.time_scale * s.times


# -- splitting ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8

    def __post_init__(self):
        if not 0.0 < self.train_fraction <= 1.0:
            raise ValueError("train_fraction must lie in (0, 1]")


@dataclass(frozen=True)
class View:
    """Targets ``events[start:stop]`` of each sequence, with everything before as history.

    ``stop`` also bounds what a model may see: nothing at or after ``stop`` is used.
    """

    dataset: Dataset
    start: tuple[int, ...]
    stop: tuple[int, ...]

    def __post_init__(self):
        if not (len(self.start) == len(self.stop) == len(self.dataset.sequences)):
            raise ValueError("view bounds must cover every sequence")

    @property
    def n_targets(self) -> int:
        return sum(max(0, b - a) for a, b in zip(self.start, self.stop))

    def rows(self):
        """Yield (sequence index, sequence, start, stop) for sequences with targets."""
        for i, (s, a, b) in enumerate(zip(self.dataset.sequences, self.start, self.stop)):
            if b > a:
                yield i, s, a, b

    def truncated(self) -> Dataset:
        """Sequences cut at ``stop`` (the part a model trained on this view sees)."""
        seqs = [replace(s, events=s.events[:b]) for s, b in zip(self.dataset.sequences, self.stop) if b > 0]
        return Dataset(tuple(seqs), self.dataset.vocab, self.dataset.time_scale)


def split(d: Dataset, spec: SplitSpec = SplitSpec()) -> tuple[View, View]:
    """Per sequence, the first ceil(f*N) events train and the rest test.

    Training targets start at index 1 (the first event has no predecessor).
    Sequences with fewer than two events stay entirely in train and get no test targets.
    """
    tr_start, tr_stop, te_start, te_stop = [], [], [], []
    for s in d.sequences:
        n = len(s)
        k = n if n < 2 else train_length(n, spec.train_fraction)
        tr_start.append(min(1, k))
        tr_stop.append(k)
        te_start.append(k)
        te_stop.append(n)
    return (View(d, tuple(tr_start), tuple(tr_stop)),
            View(d, tuple(te_start), tuple(te_stop)))


def split_validation(train: View, fraction: float = 0.1) -> tuple[View, View]:
    """Carve the last ``fraction`` of each training segment off as validation targets."""
    fit_stop, val_start = [], []
    for a, b in zip(train.start, train.stop):
        k = b - math.floor(round(fraction * b, 9))
        k = max(k, min(b, 2))
        fit_stop.append(k)
        val_start.append(k)
    fit = View(train.dataset, train.start, tuple(fit_stop))
    val = View(train.dataset, tuple(val_start), train.stop)
    return fit, val
