"""Observed trial data on calendar time ``t`` and trial time ``s``.

A :class:`Cohort` stores entry times ``R``, groups ``Z``, dropout times
``Ctilde`` and the full jump table.  An analysis at calendar time ``t`` sees
patient ``i`` up to ``C_i(t) = min(Ctilde_i, (t - R_i)_+)``; jumps at
``s <= C_i(t)`` are observed.  At-risk counts use left limits: a patient in
state ``j`` on the sojourn ``(start, end]`` is at risk on that interval, so a
patient leaving ``j`` at ``s`` is still counted at ``s``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CohortFormatError, ConfigError
from .sampling import PatientPath, Transitions

FIRST_HITTING = "first-hitting"
ALL_ENTRIES = "all-entries"
MODES = (FIRST_HITTING, ALL_ENTRIES)


@dataclass(frozen=True)
class EventDefinition:
    """Composite event: first (or every) entry into ``states``."""

    states: frozenset[int]
    mode: str = FIRST_HITTING
    name: str | None = None

    def __post_init__(self):
        states = frozenset(int(s) for s in self.states)
        if not states:
            raise ConfigError("an event needs at least one state")
        if 0 in states:
            raise ConfigError("the initial state 0 cannot belong to an event")
        if self.mode not in MODES:
            raise ConfigError(f"event mode must be one of {MODES}, got {self.mode!r}")
        object.__setattr__(self, "states", states)

    @property
    def label(self) -> str:
        return self.name or "{" + ",".join(map(str, sorted(self.states))) + "}"

    def contributes(self, source: int, target: int) -> bool:
        """Whether ``source -> target`` is an entry into the event."""
        return source not in self.states and target in self.states


def pfs_os_events(mode: str = FIRST_HITTING) -> list[EventDefinition]:
    """PFS ``{1, 2}`` and OS ``{2}`` in the illness-death model."""
    return [EventDefinition({1, 2}, mode, "PFS"), EventDefinition({2}, mode, "OS")]


@dataclass(frozen=True)
class PatientRecord:
    entry: float
    group: int
    dropout: float = math.inf
    path: PatientPath = PatientPath()
    patient_id: int | None = None

    def __post_init__(self):
        if not self.entry >= 0:
            raise ConfigError("entry time must be nonnegative")
        if self.group not in (0, 1):
            raise ConfigError(f"group must be 0 or 1, got {self.group!r}")
        if not self.dropout > 0:
            raise ConfigError("dropout time must be positive or infinite")

    def censoring(self, t: float) -> float:
        return min(self.dropout, max(t - self.entry, 0.0))


@dataclass(frozen=True)
class ObservedRecord:
    """A patient as seen at calendar ``t``: jumps up to ``censored_at``."""

    entry: float
    group: int
    censored_at: float
    path: PatientPath

    @property
    def recruited(self) -> bool:
        return self.censored_at > 0


def observe_at(record: PatientRecord, t: float) -> ObservedRecord:
    """Truncate ``record`` at ``C(t)``; jumps after it become invisible."""
    if t < 0:
        raise ConfigError("calendar time must be nonnegative")
    c = record.censoring(t)
    jumps = tuple((s, k) for s, k in record.path.jumps if s <= c)
    return ObservedRecord(record.entry, record.group, c, PatientPath(jumps))


def hitting_time(record, states: Iterable[int]) -> float | None:
    """First observed entry into ``states``; ``None`` if censored first.

    ``record`` may be a :class:`PatientRecord` (full path) or an
    :class:`ObservedRecord` (truncated path).
    """
    E = frozenset(states)
    for s, k in record.path.jumps:
        if k in E:
            return s
    return None


class Cohort:
    """Immutable columnar store of patient records."""

    def __init__(self, entry, group, dropout, transitions: Transitions, ids=None):
        self.entry = np.asarray(entry, dtype=float)
        self.group = np.asarray(group, dtype=int)
        self.dropout = np.asarray(dropout, dtype=float)
        n = len(self.entry)
        if len(self.group) != n or len(self.dropout) != n:
            raise ConfigError("entry, group and dropout must have equal length")
        if n and (np.any(self.entry < 0) or np.any(~np.isin(self.group, (0, 1))) or np.any(~(self.dropout > 0))):
            raise ConfigError("invalid entry, group or dropout values")
        self.ids = np.arange(1, n + 1) if ids is None else np.asarray(ids, dtype=int)
        if len(np.unique(self.ids)) != n:
            raise ConfigError("patient ids must be unique")
        order = np.lexsort((transitions.time, transitions.patient))
        self.transitions = Transitions(
            np.asarray(transitions.patient, dtype=int)[order],
            np.asarray(transitions.time, dtype=float)[order],
            np.asarray(transitions.source, dtype=int)[order],
            np.asarray(transitions.target, dtype=int)[order],
        )
        tr = self.transitions
        if len(tr):
            same = tr.patient[1:] == tr.patient[:-1]
            if np.any(same & (tr.time[1:] <= tr.time[:-1])):
                raise ConfigError("jump times must be strictly increasing within a patient")
            first = np.r_[True, ~same]
            prev_target = np.r_[0, tr.target[:-1]]
            expected = np.where(first, 0, prev_target)
            if np.any(tr.source != expected):
                raise ConfigError("each jump must start from the state reached by the previous jump (initially 0)")
        for arr in (self.entry, self.group, self.dropout, self.ids, *vars(self.transitions).values()):
            arr.setflags(write=False)

    @property
    def n(self) -> int:
        return len(self.entry)

    def __len__(self):
        return self.n

    def __eq__(self, other):
        if not isinstance(other, Cohort):
            return NotImplemented
        a, b = self.transitions, other.transitions
        return (
            np.array_equal(self.ids, other.ids)
            and np.array_equal(self.entry, other.entry)
            and np.array_equal(self.group, other.group)
            and np.array_equal(self.dropout, other.dropout)
            and all(np.array_equal(getattr(a, f), getattr(b, f)) for f in ("patient", "time", "source", "target"))
        )

    @classmethod
    def from_records(cls, records: Sequence[PatientRecord]) -> "Cohort":
        patient, time, source, target = [], [], [], []
        for i, rec in enumerate(records):
            states = rec.path.states
            for (s, k), j in zip(rec.path.jumps, states):
                patient.append(i)
                time.append(s)
                source.append(j)
                target.append(k)
        ids = [rec.patient_id if rec.patient_id is not None else i + 1 for i, rec in enumerate(records)]
        return cls(
            [r.entry for r in records],
            [r.group for r in records],
            [r.dropout for r in records],
            Transitions(np.array(patient, dtype=int), np.array(time, dtype=float), np.array(source, dtype=int), np.array(target, dtype=int)),
            ids,
        )

    def records(self) -> list[PatientRecord]:
        tr = self.transitions
        jumps: list[list] = [[] for _ in range(self.n)]
        for p, s, k in zip(tr.patient.tolist(), tr.time.tolist(), tr.target.tolist()):
            jumps[p].append((s, k))
        return [
            PatientRecord(float(self.entry[i]), int(self.group[i]), float(self.dropout[i]), PatientPath(tuple(jumps[i])), int(self.ids[i]))
            for i in range(self.n)
        ]

    def subset(self, mask) -> "Cohort":
        """Cohort restricted to patients where ``mask`` is true (ids kept)."""
        mask = np.asarray(mask, dtype=bool)
        new_index = np.cumsum(mask) - 1
        tr = self.transitions
        keep = mask[tr.patient]
        return Cohort(
            self.entry[mask],
            self.group[mask],
            self.dropout[mask],
            Transitions(new_index[tr.patient[keep]], tr.time[keep], tr.source[keep], tr.target[keep]),
            self.ids[mask],
        )

    def censoring(self, t: float) -> np.ndarray:
        """``C_i(t)`` for every patient."""
        if t < 0:
            raise ConfigError("calendar time must be nonnegative")
        return np.minimum(self.dropout, np.maximum(t - self.entry, 0.0))

    def view(self, t: float) -> "CohortView":
        return CohortView(self, t)


class CohortView:
    """Sojourn and transition tables of a cohort observed at calendar ``t``."""

    def __init__(self, cohort: Cohort, t: float):
        self.cohort = cohort
        self.t = float(t)
        c = cohort.censoring(t)
        self.censoring = c
        tr = cohort.transitions
        n = cohort.n
        m = len(tr)
        # sojourn table: the initial stay in 0 plus one stay per jump
        patient = np.concatenate([np.arange(n), tr.patient])
        state = np.concatenate([np.zeros(n, dtype=int), tr.target])
        start = np.concatenate([np.zeros(n), tr.time])
        end = np.full(n + m, np.inf)
        if m:
            first_jump = np.r_[True, tr.patient[1:] != tr.patient[:-1]]
            end[tr.patient[first_jump]] = tr.time[first_jump]
            nxt = np.flatnonzero(~first_jump)
            end[n + nxt - 1] = tr.time[nxt]
        obs_end = np.minimum(end, c[patient])
        keep = start < obs_end
        self.soj_patient = patient[keep]
        self.soj_state = state[keep]
        self.soj_start = start[keep]
        self.soj_end = obs_end[keep]
        seen = tr.time <= c[tr.patient]
        self.tr_patient = tr.patient[seen]
        self.tr_time = tr.time[seen]
        self.tr_source = tr.source[seen]
        self.tr_target = tr.target[seen]

    def first_entry(self, states: frozenset[int]) -> np.ndarray:
        """Per-patient first observed entry time into ``states`` (``inf`` if none)."""
        hit = np.full(self.cohort.n, np.inf)
        into = np.isin(self.tr_target, list(states)) & ~np.isin(self.tr_source, list(states))
        np.minimum.at(hit, self.tr_patient[into], self.tr_time[into])
        return hit

    def first_entry_mask(self, states: frozenset[int]) -> np.ndarray:
        """Mask of observed transitions that are a patient's first entry into ``states``."""
        hit = self.first_entry(states)
        into = np.isin(self.tr_target, list(states))
        return into & (self.tr_time == hit[self.tr_patient])

    def risk_intervals(self, state: int, avoid: frozenset[int] | None = None):
        """``(start, end]`` at-risk intervals in ``state``, stopped at first entry into ``avoid``."""
        sel = self.soj_state == state
        start = self.soj_start[sel]
        end = self.soj_end[sel]
        patient = self.soj_patient[sel]
        if avoid is not None:
            end = np.minimum(end, self.first_entry(avoid)[patient])
            ok = start < end
            start, end, patient = start[ok], end[ok], patient[ok]
        return patient, start, end


class IntervalCounter:
    """Counts intervals ``(start, end]`` containing a query point."""

    def __init__(self, start, end):
        self.start = np.sort(np.asarray(start, dtype=float))
        self.end = np.sort(np.asarray(end, dtype=float))

    def __call__(self, s) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        return np.searchsorted(self.start, s, "left") - np.searchsorted(self.end, s, "left")


@dataclass(frozen=True)
class RiskSetTable:
    """At-risk counts at the distinct observed transition times of one analysis.

    ``at_risk[j]`` and ``at_risk_treated[j]`` are ``Y^j`` and ``Y^{j,Z=1}``;
    ``event_at_risk[(j, e)]`` and ``event_at_risk_treated[(j, e)]`` are
    ``Y^{j->E_e}`` and ``Y^{j->E_e,Z=1}`` for ``j`` outside event ``e``.
    """

    t: float
    times: np.ndarray
    at_risk: dict
    at_risk_treated: dict
    event_at_risk: dict
    event_at_risk_treated: dict

    def snapshot(self, i: int) -> dict:
        """Counts at ``times[i]`` as a plain dict."""
        return {
            "t": self.t,
            "s": float(self.times[i]),
            "Y": {j: int(v[i]) for j, v in self.at_risk.items()},
            "Y1": {j: int(v[i]) for j, v in self.at_risk_treated.items()},
            "YE": {k: int(v[i]) for k, v in self.event_at_risk.items()},
            "YE1": {k: int(v[i]) for k, v in self.event_at_risk_treated.items()},
        }


def risk_sets(cohort: Cohort, events: Sequence[EventDefinition], t: float, n_states: int | None = None) -> RiskSetTable:
    """At-risk counts of every state and event stratum at the observed transition times."""
    view = cohort.view(t)
    times = np.unique(view.tr_time)
    if n_states is None:
        n_states = int(max(view.soj_state.max(initial=0), view.tr_target.max(initial=0))) + 1
    treated = cohort.group == 1
    at_risk, at_risk1, ev, ev1 = {}, {}, {}, {}
    for j in range(n_states):
        p, a, b = view.risk_intervals(j)
        at_risk[j] = IntervalCounter(a, b)(times)
        g = treated[p]
        at_risk1[j] = IntervalCounter(a[g], b[g])(times)
        for e, event in enumerate(events):
            if j in event.states:
                continue
            p, a, b = view.risk_intervals(j, event.states)
            ev[(j, e)] = IntervalCounter(a, b)(times)
            g = treated[p]
            ev1[(j, e)] = IntervalCounter(a[g], b[g])(times)
    return RiskSetTable(float(t), times, at_risk, at_risk1, ev, ev1)


# --- CSV persistence -------------------------------------------------------

TRANSITION_COLUMNS = ("patient_id", "R", "Z", "Ctilde", "from_state", "to_state", "s")
ROSTER_COLUMNS = ("patient_id", "R", "Z", "Ctilde")


def roster_path(path: Path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".roster" + path.suffix)


def _fmt(x: float) -> str:
    return "" if math.isinf(x) else repr(float(x))


def save_cohort(cohort: Cohort, path) -> None:
    """Write the transition CSV at ``path`` and the roster CSV next to it."""
    path = Path(path)
    by_patient: dict[int, list] = {}
    tr = cohort.transitions
    for p, s, j, k in zip(tr.patient.tolist(), tr.time.tolist(), tr.source.tolist(), tr.target.tolist()):
        by_patient.setdefault(p, []).append((j, k, s))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRANSITION_COLUMNS)
        for p in range(cohort.n):
            base = [int(cohort.ids[p]), repr(float(cohort.entry[p])), int(cohort.group[p]), _fmt(cohort.dropout[p])]
            for j, k, s in by_patient.get(p, []):
                w.writerow(base + [j, k, repr(s)])
    with open(roster_path(path), "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ROSTER_COLUMNS)
        for p in range(cohort.n):
            w.writerow([int(cohort.ids[p]), repr(float(cohort.entry[p])), int(cohort.group[p]), _fmt(cohort.dropout[p])])


def _read_rows(path: Path, columns):
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise CohortFormatError("missing header row", 1, path)
        header = [h.strip() for h in header]
        missing = [c for c in columns if c not in header]
        if missing:
            raise CohortFormatError(f"missing columns {missing}", 1, path)
        pos = {c: header.index(c) for c in columns}
        for lineno, row in enumerate(reader, start=2):
            if not any(cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise CohortFormatError(f"expected {len(header)} fields, got {len(row)}", lineno, path)
            yield lineno, {c: row[pos[c]].strip() for c in columns}


def _parse_patient(fields, lineno, path):
    try:
        pid = int(fields["patient_id"])
        entry = float(fields["R"])
        group = int(fields["Z"])
        dropout = math.inf if fields["Ctilde"] in ("", "inf", "Inf") else float(fields["Ctilde"])
    except ValueError as exc:
        raise CohortFormatError(str(exc), lineno, path) from None
    if not entry >= 0 or group not in (0, 1) or not dropout > 0:
        raise CohortFormatError("need R >= 0, Z in {0,1} and Ctilde > 0", lineno, path)
    return pid, (entry, group, dropout)


def load_cohort(path, roster=None) -> Cohort:
    """Read a cohort written by :func:`save_cohort`.

    The roster file defaults to ``<stem>.roster.csv`` and may be absent when
    every patient has at least one transition.
    """
    path = Path(path)
    roster = roster_path(path) if roster is None else Path(roster)
    patients: dict[int, tuple] = {}
    jumps: dict[int, list] = {}
    seen_times: set = set()
    for lineno, f in _read_rows(path, TRANSITION_COLUMNS):
        pid, info = _parse_patient(f, lineno, path)
        if patients.setdefault(pid, info) != info:
            raise CohortFormatError(f"patient {pid} has inconsistent R/Z/Ctilde", lineno, path)
        try:
            j, k, s = int(f["from_state"]), int(f["to_state"]), float(f["s"])
        except ValueError as exc:
            raise CohortFormatError(str(exc), lineno, path) from None
        if (pid, s) in seen_times:
            raise CohortFormatError(f"duplicate transition time {s} for patient {pid}", lineno, path)
        seen_times.add((pid, s))
        prev = jumps.setdefault(pid, [])
        if prev and s <= prev[-1][2]:
            raise CohortFormatError(f"non-monotone jump times for patient {pid}", lineno, path)
        expected = prev[-1][1] if prev else 0
        if j != expected or not s >= 0 or j == k:
            raise CohortFormatError(f"transition {j}->{k} at s={s} does not continue the path of patient {pid}", lineno, path)
        prev.append((j, k, s))
    if roster.exists():
        for lineno, f in _read_rows(roster, ROSTER_COLUMNS):
            pid, info = _parse_patient(f, lineno, roster)
            if patients.setdefault(pid, info) != info:
                raise CohortFormatError(f"patient {pid} disagrees with the transition file", lineno, roster)
    ids = sorted(patients)
    index = {pid: i for i, pid in enumerate(ids)}
    rows = [(index[pid], s, j, k) for pid, lst in jumps.items() for j, k, s in lst]
    rows.sort()
    tr = Transitions(
        np.array([r[0] for r in rows], dtype=int),
        np.array([r[1] for r in rows], dtype=float),
        np.array([r[2] for r in rows], dtype=int),
        np.array([r[3] for r in rows], dtype=int),
    )
    return Cohort(
        [patients[p][0] for p in ids],
        [patients[p][1] for p in ids],
        [patients[p][2] for p in ids],
        tr,
        ids,
    )
