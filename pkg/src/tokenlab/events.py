"""Event-stream data model and the ``#tokenlab-events v1`` file format.

File layout (UTF-8, LF line endings, tab separated)::

    #tokenlab-events v1
    V  code_string                                   (optional, index order)
    E  subject_id  cumulative_minutes  code_string  value-or-empty
    L  subject_id  task_id  0|1
    P  subject_id  prediction_time_minutes

Other lines starting with ``#`` are comments. When no ``V`` lines are given the
vocabulary is the sorted set of codes seen in ``E`` lines.
"""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

HEADER = "#tokenlab-events v1"


class EventFormatError(ValueError):
    """Malformed event-stream file or an invalid cohort."""


@dataclass(frozen=True)
class Event:
    code_id: int
    time_delta: float
    value: float = 0.0
    has_value: bool = False
    time: float = 0.0  # cumulative minutes; authoritative for serialization

    def __post_init__(self):
        if self.code_id < 0:
            raise ValueError(f"negative code_id {self.code_id}")
        if not (math.isfinite(self.time_delta) and self.time_delta >= 0):
            raise ValueError(f"time_delta must be finite and >= 0, got {self.time_delta}")
        if not math.isfinite(self.value):
            raise ValueError("event value must be finite")
        if not self.has_value and self.value != 0.0:
            raise ValueError("value must be 0 when has_value is false")


@dataclass(frozen=True)
class PatientSequence:
    subject_id: str
    events: tuple[Event, ...]
    prediction_time: float

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        if self.events and self.events[0].time_delta != 0.0:
            raise ValueError(f"{self.subject_id}: first event must have time_delta 0")
        prev = None
        for ev in self.events:
            if prev is not None and ev.time < prev:
                raise ValueError(f"{self.subject_id}: decreasing event times")
            prev = ev.time

    @classmethod
    def from_times(cls, subject_id: str, times: Sequence[float], code_ids: Sequence[int],
                   values: Sequence[float | None], prediction_time: float) -> "PatientSequence":
        """Build from absolute cumulative times; deltas are exact differences."""
        events = []
        for i, (t, c, v) in enumerate(zip(times, code_ids, values)):
            t = float(t)
            delta = 0.0 if i == 0 else t - float(times[i - 1])
            if delta < 0:
                raise ValueError(f"{subject_id}: decreasing event times")
            has = v is not None
            events.append(Event(int(c), delta, float(v) if has else 0.0, has, t))
        return cls(subject_id, tuple(events), float(prediction_time))

    @property
    def times(self) -> tuple[float, ...]:
        return tuple(ev.time for ev in self.events)

    def __len__(self):
        return len(self.events)


@dataclass(frozen=True)
class Vocabulary:
    codes: tuple[str, ...]
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "codes", tuple(self.codes))
        index = {}
        for i, code in enumerate(self.codes):
            if not code or any(ch in code for ch in "\t\n\r"):
                raise ValueError(f"invalid code string {code!r}")
            if code in index:
                raise ValueError(f"duplicate code {code!r}")
            index[code] = i
        object.__setattr__(self, "index", index)

    @property
    def size(self) -> int:
        return len(self.codes)

    def __len__(self):
        return len(self.codes)


@dataclass(frozen=True)
class TaskLabel:
    subject_id: str
    task_id: str
    label: bool


@dataclass(frozen=True)
class Cohort:
    sequences: tuple[PatientSequence, ...]
    labels: tuple[TaskLabel, ...]
    vocabulary: Vocabulary

    def __post_init__(self):
        object.__setattr__(self, "sequences", tuple(self.sequences))
        object.__setattr__(self, "labels", tuple(self.labels))
        subjects = set()
        for seq in self.sequences:
            if seq.subject_id in subjects:
                raise ValueError(f"duplicate subject {seq.subject_id!r}")
            subjects.add(seq.subject_id)
            for ev in seq.events:
                if ev.code_id >= self.vocabulary.size:
                    raise ValueError(
                        f"{seq.subject_id}: code_id {ev.code_id} >= vocabulary size {self.vocabulary.size}")
        seen = set()
        for lab in self.labels:
            if lab.subject_id not in subjects:
                raise ValueError(f"label for unknown subject {lab.subject_id!r}")
            key = (lab.subject_id, lab.task_id)
            if key in seen:
                raise ValueError(f"duplicate label for {key}")
            seen.add(key)
        tasks = {lab.task_id for lab in self.labels}
        if len(seen) != len(tasks) * len(subjects) and self.labels:
            raise ValueError("every subject needs exactly one label per task")

    @property
    def task_ids(self) -> tuple[str, ...]:
        return tuple(sorted({lab.task_id for lab in self.labels}))

    def labels_for(self, task_id: str) -> dict[str, bool]:
        out = {lab.subject_id: lab.label for lab in self.labels if lab.task_id == task_id}
        if not out:
            raise KeyError(f"unknown task {task_id!r}")
        return out

    def subset(self, subject_ids: Iterable[str]) -> "Cohort":
        keep = set(subject_ids)
        return Cohort(tuple(s for s in self.sequences if s.subject_id in keep),
                      tuple(lab for lab in self.labels if lab.subject_id in keep),
                      self.vocabulary)


def truncate_at_prediction_time(seq: PatientSequence) -> PatientSequence:
    """Longest prefix of ``seq`` whose cumulative time is <= prediction_time."""
    n = 0
    for ev in seq.events:
        if ev.time > seq.prediction_time:
            break
        n += 1
    if n == len(seq.events):
        return seq
    return PatientSequence(seq.subject_id, seq.events[:n], seq.prediction_time)


def _fmt(x: float) -> str:
    return repr(float(x))


def _parse_float(text: str, lineno: int, what: str) -> float:
    try:
        x = float(text)
    except ValueError:
        raise EventFormatError(f"line {lineno}: field {what}: not a number: {text!r}") from None
    if not math.isfinite(x) or text.strip() != text or text.lower().startswith(("+", "nan", "inf")):
        raise EventFormatError(f"line {lineno}: field {what}: invalid number {text!r}")
    return x


def format_cohort(cohort: Cohort) -> str:
    vocab = cohort.vocabulary
    lines = [HEADER]
    lines.extend(f"V\t{code}" for code in vocab.codes)
    seqs = sorted(cohort.sequences, key=lambda s: s.subject_id)
    for seq in seqs:
        for ev in seq.events:
            val = _fmt(ev.value) if ev.has_value else ""
            lines.append(f"E\t{seq.subject_id}\t{_fmt(ev.time)}\t{vocab.codes[ev.code_id]}\t{val}")
    for lab in sorted(cohort.labels, key=lambda x: (x.subject_id, x.task_id)):
        lines.append(f"L\t{lab.subject_id}\t{lab.task_id}\t{int(lab.label)}")
    for seq in seqs:
        lines.append(f"P\t{seq.subject_id}\t{_fmt(seq.prediction_time)}")
    return "\n".join(lines) + "\n"


def write_event_file(cohort: Cohort, path) -> None:
    Path(path).write_bytes(format_cohort(cohort).encode("utf-8"))


def parse_event_text(text: str) -> Cohort:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or lines[0].rstrip("\r") != HEADER:
        raise EventFormatError(f"line 1: missing header {HEADER!r}")
    vocab_codes: list[str] = []
    events: dict[str, list] = defaultdict(list)
    labels: list[TaskLabel] = []
    pred: dict[str, float] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if "\r" in line:
            raise EventFormatError(f"line {lineno}: CR characters are not allowed")
        if line.startswith("#"):
            continue
        if not line:
            raise EventFormatError(f"line {lineno}: empty line")
        fields = line.split("\t")
        kind = fields[0]
        expected = {"V": 2, "E": 5, "L": 4, "P": 3}.get(kind)
        if expected is None:
            raise EventFormatError(f"line {lineno}: field kind: unknown record type {kind!r}")
        if len(fields) != expected:
            raise EventFormatError(
                f"line {lineno}: field count: expected {expected} fields for {kind}, got {len(fields)}")
        if kind == "V":
            if events:
                raise EventFormatError(f"line {lineno}: field code: V lines must precede E lines")
            vocab_codes.append(fields[1])
        elif kind == "E":
            _, sid, t, code, val = fields
            if not sid:
                raise EventFormatError(f"line {lineno}: field subject_id: empty")
            if not code:
                raise EventFormatError(f"line {lineno}: field code: empty")
            tt = _parse_float(t, lineno, "cumulative_minutes")
            if tt < 0:
                raise EventFormatError(f"line {lineno}: field cumulative_minutes: negative time")
            vv = None if val == "" else _parse_float(val, lineno, "value")
            if events[sid] and tt < events[sid][-1][1]:
                raise EventFormatError(f"line {lineno}: field cumulative_minutes: decreasing timestamp for {sid}")
            events[sid].append((lineno, tt, code, vv))
        elif kind == "L":
            _, sid, task, lab = fields
            if not task:
                raise EventFormatError(f"line {lineno}: field task_id: empty")
            if lab not in ("0", "1"):
                raise EventFormatError(f"line {lineno}: field label: expected 0 or 1, got {lab!r}")
            labels.append((lineno, TaskLabel(sid, task, lab == "1")))
        else:
            _, sid, t = fields
            if sid in pred:
                raise EventFormatError(f"line {lineno}: field subject_id: duplicate P line for {sid}")
            pred[sid] = _parse_float(t, lineno, "prediction_time")

    if not events:
        raise EventFormatError("empty cohort")
    try:
        vocab = Vocabulary(tuple(vocab_codes) if vocab_codes
                           else tuple(sorted({e[2] for evs in events.values() for e in evs})))
    except ValueError as exc:
        raise EventFormatError(f"vocabulary: {exc}") from None
    subjects = set(events) | set(pred)
    for sid in sorted(subjects):
        if sid not in pred:
            raise EventFormatError(f"subject {sid}: missing P line")
    for lineno, lab in labels:
        if lab.subject_id not in subjects:
            raise EventFormatError(f"line {lineno}: field subject_id: label for unknown subject {lab.subject_id!r}")
    seqs = []
    for sid in sorted(subjects):
        evs = events.get(sid, [])
        ids = []
        for lineno, _, code, _ in evs:
            if code not in vocab.index:
                raise EventFormatError(f"line {lineno}: field code: unknown code {code!r}")
            ids.append(vocab.index[code])
        seqs.append(PatientSequence.from_times(
            sid, [e[1] for e in evs], ids, [e[3] for e in evs], pred[sid]))
    try:
        return Cohort(tuple(seqs), tuple(lab for _, lab in labels), vocab)
    except ValueError as exc:
        raise EventFormatError(str(exc)) from None


def parse_event_file(path) -> Cohort:
    raw = Path(path).read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise EventFormatError(f"not valid UTF-8: {exc}") from None
    return parse_event_text(text)
