"""Reading clinical tables into patient stays, splitting, and cohort lookup."""
from __future__ import annotations

import configparser
import csv
import json
import logging
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .events import (
    ClinicalEvent,
    ExcludedSample,
    NodeType,
    RejectedRecord,
    map_event,
    normalize_icd9,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

# column roles each event type reads; a trailing "?" marks an optional role
ROLES = {
    NodeType.LABORATORY: ("name", "flag?"),
    NodeType.MICROBIOLOGY: ("name", "interpretation"),
    NodeType.PROCEDURE: ("code",),
    NodeType.DIAGNOSIS: ("code",),
    NodeType.PRESCRIPTION: ("name",),
    NodeType.SYMPTOM: ("name",),
    NodeType.GENDER: ("gender",),
    NodeType.AGE: ("age",),
    NodeType.ETHNICITY: ("ethnicity",),
}


class DataError(Exception):
    """Input files are missing or structurally broken."""


class ConfigError(Exception):
    """A configuration file or option is invalid."""


@dataclass
class PatientStay:
    stay_id: str
    events: List[ClinicalEvent] = field(default_factory=list)

    def of_type(self, event_type: NodeType) -> List[ClinicalEvent]:
        event_type = NodeType.parse(event_type)
        return [e for e in self.events if e.event_type is event_type]


@dataclass
class LoadReport:
    accepted: int = 0
    rejected: int = 0
    unreadable: int = 0
    missing: int = 0
    duplicates: int = 0
    excluded_stays: int = 0
    per_table: Dict[str, Dict[str, int]] = field(default_factory=dict)

    def as_lines(self) -> List[str]:
        lines = [
            f"accepted={self.accepted}",
            f"rejected={self.rejected}",
            f"unreadable={self.unreadable}",
            f"missing={self.missing}",
            f"duplicates={self.duplicates}",
            f"excluded_stays={self.excluded_stays}",
        ]
        for table in sorted(self.per_table):
            counts = self.per_table[table]
            lines.append(
                f"table.{table}=" + ",".join(f"{k}:{counts[k]}" for k in sorted(counts))
            )
        return lines


@dataclass(frozen=True)
class TableBinding:
    table: str
    file: str
    stay_column: str
    event_types: Tuple[NodeType, ...]
    columns: Dict[str, str]


def read_table_spec(path: Optional[PathLike] = None) -> List[TableBinding]:
    """Parse a table_spec INI file; ``None`` loads the bundled default."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    if path is None:
        text = resources.files("clinhin.data").joinpath("table_spec.ini").read_text()
        parser.read_string(text)
    else:
        if not Path(path).is_file():
            raise ConfigError(f"table spec not found: {path}")
        parser.read(path)
    bindings = []
    for table in parser.sections():
        sec = parser[table]
        if "event_types" not in sec:
            raise ConfigError(f"[{table}] lacks event_types")
        try:
            types = tuple(NodeType.parse(t) for t in sec["event_types"].split(",") if t.strip())
        except ValueError as exc:
            raise ConfigError(f"[{table}] {exc}") from None
        if not types or NodeType.PATIENT in types:
            raise ConfigError(f"[{table}] needs at least one clinical event type")
        columns = {}
        for et in types:
            for role in ROLES[et]:
                optional = role.endswith("?")
                role = role.rstrip("?")
                if role in sec:
                    columns[role] = sec[role]
                elif not optional:
                    raise ConfigError(f"[{table}] has no column bound to role {role!r} for {et}")
        bindings.append(
            TableBinding(
                table=table,
                file=sec.get("file", f"{table}.csv"),
                stay_column=sec.get("stay", "stay_id"),
                event_types=types,
                columns=columns,
            )
        )
    if not bindings:
        raise ConfigError("table spec declares no tables")
    return bindings


def _row_events(binding: TableBinding, row: Dict[str, str]) -> Tuple[List[ClinicalEvent], int]:
    """Events for one row plus the number of blank (missing) cells skipped."""
    cols = binding.columns
    events, missing = [], 0

    def cell(role):
        val = row.get(cols[role]) if role in cols else None
        return val.strip() if isinstance(val, str) else None

    for et in binding.event_types:
        if et is NodeType.LABORATORY:
            name = cell("name")
            if not name:
                missing += 1
                continue
            events.append(ClinicalEvent(et, name, cell("flag") or None))
        elif et is NodeType.MICROBIOLOGY:
            name, interp = cell("name"), cell("interpretation")
            if not name or not interp:
                missing += 1
                continue
            events.append(ClinicalEvent(et, name, interp))
        elif et is NodeType.AGE:
            age = cell("age")
            if not age:
                missing += 1
                continue
            events.append(ClinicalEvent(et, "age", age))
        else:
            role = ROLES[et][0]
            name = cell(role)
            if not name:
                missing += 1
                continue
            events.append(ClinicalEvent(et, name))
    return events, missing


def load_tables(
    directory: PathLike,
    table_spec: Union[None, PathLike, Sequence[TableBinding]] = None,
    default_lab_flag: str = "normal",
) -> Tuple[List[PatientStay], LoadReport]:
    """Read every declared table under ``directory`` into patient stays.

    Rows whose values fail the node mapping rules are counted as rejected and
    skipped; rows that cannot be parsed are counted as unreadable. Blank cells
    are missing values and simply produce no event. A stay with an age below
    15 is dropped entirely.

    Returns the stays in first-seen order and a :class:`LoadReport`.

    Raises:
        DataError: a declared file or declared column is absent.
    """
    directory = Path(directory)
    if table_spec is None or isinstance(table_spec, (str, os.PathLike)):
        bindings = read_table_spec(table_spec)
    else:
        bindings = list(table_spec)

    report = LoadReport()
    stays: Dict[str, List[ClinicalEvent]] = {}
    seen: Dict[str, set] = {}
    excluded: set = set()

    for binding in bindings:
        path = directory / binding.file
        if not path.is_file():
            raise DataError(f"missing table file: {path}")
        counts = {"accepted": 0, "rejected": 0, "unreadable": 0, "missing": 0}
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            try:
                header = [h.strip() for h in next(reader)]
            except StopIteration:
                header = []
            needed = [binding.stay_column] + list(binding.columns.values())
            absent = [c for c in needed if c not in header]
            if absent:
                raise DataError(f"{path.name}: missing declared column(s) {', '.join(absent)}")
            while True:
                try:
                    raw = next(reader)
                except StopIteration:
                    break
                except csv.Error:
                    counts["unreadable"] += 1
                    continue
                if not raw:
                    continue
                if len(raw) != len(header):
                    counts["unreadable"] += 1
                    continue
                row = dict(zip(header, raw))
                stay_id = row[binding.stay_column].strip()
                if not stay_id:
                    counts["unreadable"] += 1
                    continue
                try:
                    events, missing = _row_events(binding, row)
                    node_keys = [map_event(ev, default_lab_flag=default_lab_flag) for ev in events]
                except ExcludedSample:
                    excluded.add(stay_id)
                    continue
                except RejectedRecord as exc:
                    logger.debug("%s: rejected row for stay %s: %s", path.name, stay_id, exc)
                    counts["rejected"] += 1
                    continue
                counts["missing"] += missing
                bucket = stays.setdefault(stay_id, [])
                keys = seen.setdefault(stay_id, set())
                # duplicates are judged on the mapped node, so "Fever" and "fever " collapse
                for ev, key in zip(events, node_keys):
                    if key in keys:
                        report.duplicates += 1
                        continue
                    keys.add(key)
                    bucket.append(ev)
                    counts["accepted"] += 1
        report.per_table[binding.table] = counts
        for k in ("accepted", "rejected", "unreadable", "missing"):
            setattr(report, k, getattr(report, k) + counts[k])

    result = []
    for stay_id, events in stays.items():
        if stay_id in excluded:
            report.accepted -= len(events)
            continue
        result.append(PatientStay(stay_id, events))
    report.excluded_stays = len(excluded)
    if report.rejected or report.unreadable:
        logger.info(
            "loaded %d stays; %d rejected rows, %d unreadable rows",
            len(result), report.rejected, report.unreadable,
        )
    return result, report


def split(
    stays: Sequence[PatientStay], test_fraction: float, seed: int
) -> Tuple[List[PatientStay], List[PatientStay]]:
    """Random disjoint train/test partition with ``round(test_fraction * N)`` test stays.

    Both halves keep the input order.
    """
    n = len(stays)
    if n < 2:
        raise ValueError("need at least 2 stays to split")
    if not 0 < test_fraction < 1:
        raise ValueError("test_fraction must lie in (0, 1)")
    n_test = int(round(test_fraction * n))
    n_test = min(max(n_test, 1), n - 1)
    rng = np.random.default_rng(seed)
    test_idx = set(rng.permutation(n)[:n_test].tolist())
    train = [s for i, s in enumerate(stays) if i not in test_idx]
    test = [s for i, s in enumerate(stays) if i in test_idx]
    return train, test


# ---------------------------------------------------------------- cohorts


def _code_position(code: str) -> Tuple[str, int]:
    """Chapter-level sort key: (section letter, integer prefix)."""
    if code[0] == "V":
        return "V", int(code[1:3])
    if code[0] == "E":
        return "E", int(code[1:4])
    return "", int(code[:3])


@dataclass(frozen=True)
class CodeRange:
    low: str
    high: str

    def __post_init__(self):
        lo, hi = _code_position(self.low), _code_position(self.high)
        if lo[0] != hi[0] or lo[1] > hi[1]:
            raise ValueError(f"invalid ICD-9 range {self.low}-{self.high}")

    def __contains__(self, code: str) -> bool:
        section, pos = _code_position(code)
        lo, hi = _code_position(self.low), _code_position(self.high)
        return section == lo[0] and lo[1] <= pos <= hi[1]

    def __str__(self) -> str:
        return f"{self.low}-{self.high}"


@dataclass(frozen=True)
class CohortTable:
    cohorts: Tuple[Tuple[str, Tuple[CodeRange, ...]], ...]

    def __post_init__(self):
        spans = [(r, label) for label, ranges in self.cohorts for r in ranges]
        for i, (a, la) in enumerate(spans):
            for b, lb in spans[i + 1:]:
                if a.low in b or a.high in b or b.low in a:
                    raise ValueError(f"overlapping cohort ranges {a} ({la}) and {b} ({lb})")

    @property
    def labels(self) -> List[str]:
        return [label for label, _ in self.cohorts]

    def __len__(self) -> int:
        return len(self.cohorts)

    def canonical_code(self, label: str) -> str:
        """A representative code for a cohort: the low end of its first range."""
        for lab, ranges in self.cohorts:
            if lab == label:
                return ranges[0].low
        raise KeyError(label)


def parse_cohort_table(text: str) -> CohortTable:
    cohorts = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.rstrip("\n")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = [p.strip() for p in line.split("\t") if p.strip()]
        if len(parts) < 2:
            raise ConfigError(f"cohort line {lineno}: expected label and at least one range")
        ranges = []
        for token in parts[1:]:
            for piece in token.split(","):
                piece = piece.strip()
                if not piece:
                    continue
                lo, _, hi = piece.partition("-")
                try:
                    lo = normalize_icd9(lo)
                    hi = normalize_icd9(hi or lo)
                    ranges.append(CodeRange(lo, hi))
                except (RejectedRecord, ValueError) as exc:
                    raise ConfigError(f"cohort line {lineno}: {exc}") from None
        cohorts.append((parts[0], tuple(ranges)))
    try:
        return CohortTable(tuple(cohorts))
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_cohort_table(path: Optional[PathLike] = None) -> CohortTable:
    """Load a cohort file (``label<TAB>lo-hi[<TAB>lo-hi...]``); ``None`` gives the default 20 groups."""
    if path is None:
        text = resources.files("clinhin.data").joinpath("default_cohorts.tsv").read_text()
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read cohort table {path}: {exc}") from None
    return parse_cohort_table(text)


def map_cohort(code: str, table: CohortTable) -> Optional[str]:
    code = normalize_icd9(code)
    for label, ranges in table.cohorts:
        if any(code in r for r in ranges):
            return label
    return None


def collapse_to_cohorts(stays: Iterable[PatientStay], table: CohortTable) -> List[PatientStay]:
    """Replace every diagnosis code by its cohort's canonical code.

    Diagnoses outside every cohort are dropped. Training on the result gives one
    diagnosis node per cohort.
    """
    out = []
    for stay in stays:
        events, seen = [], set()
        for ev in stay.events:
            if ev.event_type is NodeType.DIAGNOSIS:
                label = map_cohort(ev.name, table)
                if label is None:
                    continue
                ev = ClinicalEvent(NodeType.DIAGNOSIS, table.canonical_code(label))
            if ev not in seen:
                seen.add(ev)
                events.append(ev)
        out.append(PatientStay(stay.stay_id, events))
    return out


# ---------------------------------------------------------------- stay files


def _event_to_json(ev: ClinicalEvent) -> list:
    return [ev.event_type.value, ev.name, ev.value]


def write_stays(path: PathLike, stays: Iterable[PatientStay]) -> None:
    """One JSON object per line: ``{"stay_id": ..., "events": [[type, name, value], ...]}``."""
    with open(path, "w", encoding="utf-8") as fh:
        for stay in stays:
            rec = {"stay_id": stay.stay_id, "events": [_event_to_json(e) for e in stay.events]}
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def read_stays(path: PathLike) -> List[PatientStay]:
    stays = []
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                events = [ClinicalEvent(NodeType.parse(t), n, v) for t, n, v in rec["events"]]
                stays.append(PatientStay(str(rec["stay_id"]), events))
            except (ValueError, KeyError, TypeError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
    return stays
