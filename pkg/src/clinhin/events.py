"""Clinical events, node identities and the rules mapping one to the other.

A clinical event is a ``(type, name, value)`` triple. Each accepted event maps
to exactly one :class:`NodeKey`; events that carry the same diagnostic meaning
(e.g. two abnormal glucose readings with different numeric values) map to the
same key.
"""
from __future__ import annotations

import enum
import math
import re
from dataclasses import dataclass
from typing import Optional, Union


class RejectedRecord(ValueError):
    """An event whose payload cannot be mapped to a node."""


class ExcludedSample(ValueError):
    """A stay that must be dropped entirely (e.g. a subject younger than 15)."""


class NodeType(str, enum.Enum):
    PATIENT = "patient"
    LABORATORY = "laboratory"
    SYMPTOM = "symptom"
    AGE = "age"
    GENDER = "gender"
    ETHNICITY = "ethnicity"
    MICROBIOLOGY = "microbiology"
    PRESCRIPTION = "prescription"
    PROCEDURE = "procedure"
    DIAGNOSIS = "diagnosis"

    def __str__(self) -> str:
        return self.value

    @property
    def abbrev(self) -> str:
        return ABBREVIATIONS[self]

    @classmethod
    def parse(cls, text: Union[str, "NodeType"]) -> "NodeType":
        """Accept either the full type name or its short label ("lab", "diag", ...)."""
        if isinstance(text, NodeType):
            return text
        key = text.strip().lower()
        try:
            return cls(key)
        except ValueError:
            pass
        try:
            return _FROM_ABBREV[key]
        except KeyError:
            raise ValueError(f"unknown node type {text!r}") from None


ABBREVIATIONS = {
    NodeType.PATIENT: "pati",
    NodeType.LABORATORY: "lab",
    NodeType.SYMPTOM: "symp",
    NodeType.AGE: "age",
    NodeType.GENDER: "gen",
    NodeType.ETHNICITY: "eth",
    NodeType.MICROBIOLOGY: "micro",
    NodeType.PRESCRIPTION: "pres",
    NodeType.PROCEDURE: "proc",
    NodeType.DIAGNOSIS: "diag",
}
_FROM_ABBREV = {v: k for k, v in ABBREVIATIONS.items()}


class Category(str, enum.Enum):
    DIAGNOSTIC = "DIAGNOSTIC"
    TREATMENT = "TREATMENT"


DIAGNOSTIC_TYPES = (
    NodeType.LABORATORY,
    NodeType.SYMPTOM,
    NodeType.AGE,
    NodeType.GENDER,
    NodeType.ETHNICITY,
    NodeType.MICROBIOLOGY,
)
TREATMENT_TYPES = (NodeType.PRESCRIPTION, NodeType.PROCEDURE, NodeType.DIAGNOSIS)
EVENT_TYPES = DIAGNOSTIC_TYPES + TREATMENT_TYPES


def category(node_type: NodeType) -> Category:
    node_type = NodeType.parse(node_type)
    if node_type in DIAGNOSTIC_TYPES:
        return Category.DIAGNOSTIC
    if node_type in TREATMENT_TYPES:
        return Category.TREATMENT
    raise ValueError(f"{node_type} is not a clinical event type")


LAB_FLAGS = ("normal", "abnormal")
MICRO_INTERPRETATIONS = ("sensitive", "resistant", "intermediate")
MIN_AGE = 15
_AGE_LABELS = ("age:15-30", "age:30-64", "age:64+")
AGE_BUCKETS = _AGE_LABELS

_ICD9 = re.compile(r"^(?:\d{3,5}|V\d{2,4}|E\d{3,4})$")


@dataclass(frozen=True, order=True)
class NodeKey:
    node_type: NodeType
    identity: str

    def __str__(self) -> str:
        return f"{self.node_type.value}/{self.identity}"


@dataclass(frozen=True)
class ClinicalEvent:
    """One EHR record: ``event_type``, ``name`` and an optional ``value``.

    ``value`` holds the lab flag, the microbiology interpretation or the age in
    years; it is ``None`` for every other type.
    """

    event_type: NodeType
    name: str
    value: Optional[Union[str, float]] = None

    def __post_init__(self):
        et = NodeType.parse(self.event_type)
        if et is NodeType.PATIENT:
            raise ValueError("patient is a node type, not an event type")
        object.__setattr__(self, "event_type", et)
        if et is NodeType.AGE:
            try:
                age = float(self.value)
            except (TypeError, ValueError):
                raise RejectedRecord(f"age event needs a numeric value, got {self.value!r}") from None
            if not math.isfinite(age) or age < 0:
                raise RejectedRecord(f"age must be a finite number >= 0, got {self.value!r}")
            object.__setattr__(self, "value", age)
        elif et in (
            NodeType.SYMPTOM,
            NodeType.GENDER,
            NodeType.ETHNICITY,
            NodeType.PRESCRIPTION,
            NodeType.PROCEDURE,
            NodeType.DIAGNOSIS,
        ) and self.value is not None:
            raise RejectedRecord(f"{et} events carry no value payload")

    @property
    def category(self) -> Category:
        return category(self.event_type)


def map_lab_event(name: str, flag: Optional[str] = None, default_flag: str = "normal") -> NodeKey:
    name = (name or "").strip()
    if not name:
        raise RejectedRecord("laboratory event with empty name")
    if flag is None or (isinstance(flag, str) and not flag.strip()):
        flag = default_flag
    flag = flag.strip().lower()
    if flag not in LAB_FLAGS:
        raise RejectedRecord(f"unrecognized lab flag {flag!r}")
    return NodeKey(NodeType.LABORATORY, f"{name}:{flag}")


def map_micro_event(name: str, interpretation: str) -> NodeKey:
    name = (name or "").strip()
    if not name:
        raise RejectedRecord("microbiology event with empty name")
    interp = (interpretation or "").strip().lower()
    if interp not in MICRO_INTERPRETATIONS:
        raise RejectedRecord(f"unrecognized microbiology interpretation {interpretation!r}")
    return NodeKey(NodeType.MICROBIOLOGY, f"{name}:{interp}")


def map_age(age_years: float) -> NodeKey:
    # 64 itself belongs to the middle bucket
    age = float(age_years)
    if not math.isfinite(age):
        raise RejectedRecord(f"age must be finite, got {age_years!r}")
    if age < MIN_AGE:
        raise ExcludedSample(f"subject aged {age_years} is younger than {MIN_AGE}")
    if age < 30:
        label = _AGE_LABELS[0]
    elif age <= 64:
        label = _AGE_LABELS[1]
    else:
        label = _AGE_LABELS[2]
    return NodeKey(NodeType.AGE, label)


def normalize_icd9(code: str) -> str:
    """Upper-case, strip and drop a decimal point; raise on anything not ICD-9 shaped."""
    if not isinstance(code, str):
        raise RejectedRecord(f"ICD-9 code must be text, got {code!r}")
    text = code.strip().upper()
    if text.count(".") == 1:
        text = text.replace(".", "")
    if not _ICD9.match(text):
        raise RejectedRecord(f"malformed ICD-9 code {code!r}")
    return text


def map_coded_event(event_type: NodeType, icd9_code: str) -> NodeKey:
    event_type = NodeType.parse(event_type)
    if event_type not in (NodeType.PROCEDURE, NodeType.DIAGNOSIS):
        raise ValueError(f"coded events are procedure or diagnosis, not {event_type}")
    return NodeKey(event_type, normalize_icd9(icd9_code))


def map_categorical(event_type: NodeType, name: str) -> NodeKey:
    event_type = NodeType.parse(event_type)
    if event_type not in (
        NodeType.GENDER,
        NodeType.ETHNICITY,
        NodeType.PRESCRIPTION,
        NodeType.SYMPTOM,
    ):
        raise ValueError(f"{event_type} is not a categorical event type")
    ident = " ".join((name or "").split()).casefold()
    if not ident:
        raise RejectedRecord(f"{event_type} event with empty name")
    return NodeKey(event_type, ident)


def map_event(event: ClinicalEvent, default_lab_flag: str = "normal") -> NodeKey:
    """Dispatch an event to the single mapping rule for its type."""
    et = event.event_type
    if et is NodeType.LABORATORY:
        return map_lab_event(event.name, event.value, default_flag=default_lab_flag)
    if et is NodeType.MICROBIOLOGY:
        return map_micro_event(event.name, event.value)
    if et is NodeType.AGE:
        return map_age(event.value)
    if et in (NodeType.PROCEDURE, NodeType.DIAGNOSIS):
        return map_coded_event(et, event.name)
    return map_categorical(et, event.name)
