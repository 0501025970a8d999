"""Typed patient-centric graph, network schema and path schemas.

Every stored edge joins a patient to a clinical-event node. Metapaths
(``a <- patient -> b``) are never materialized; they are counted, enumerated
and sampled through the patient hub.
"""
from __future__ import annotations

import os
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import sparse

from .events import EVENT_TYPES, NodeKey, NodeType, map_event


class SchemaError(ValueError):
    """A node type or path schema is not allowed by the network schema."""


@dataclass(frozen=True)
class NetworkSchema:
    node_types: FrozenSet[NodeType]
    allowed_links: FrozenSet[FrozenSet[NodeType]]

    def __post_init__(self):
        if len(self.node_types) < 2:
            raise SchemaError("a heterogeneous network needs more than one node type")
        for link in self.allowed_links:
            if not link <= self.node_types:
                raise SchemaError(f"link {sorted(link)} uses undeclared node types")

    @classmethod
    def default(cls, event_types: Iterable[NodeType] = EVENT_TYPES) -> "NetworkSchema":
        """Patient linked to each clinical event type (nine simple links)."""
        types = [NodeType.parse(t) for t in event_types]
        return cls(
            frozenset([NodeType.PATIENT, *types]),
            frozenset(frozenset((NodeType.PATIENT, t)) for t in types),
        )

    def allows(self, a: NodeType, b: NodeType) -> bool:
        return frozenset((a, b)) in self.allowed_links


@dataclass(frozen=True)
class PathSchema:
    """A simple link (two types) or a patient-centred metapath (three types).

    The last type is the destination: negatives are drawn from it.
    """

    type_sequence: Tuple[NodeType, ...]
    label: str = ""

    def __post_init__(self):
        seq = tuple(NodeType.parse(t) for t in self.type_sequence)
        object.__setattr__(self, "type_sequence", seq)
        if len(seq) not in (2, 3):
            raise SchemaError("path schemas have length 2 or 3")
        if len(seq) == 3 and seq[1] is not NodeType.PATIENT:
            raise SchemaError("metapaths must pass through the patient type")
        if len(seq) == 2 and NodeType.PATIENT not in seq:
            raise SchemaError("simple links join a patient to an event type")
        if not self.label:
            ends = (seq[0], seq[-1])
            object.__setattr__(self, "label", "-".join(t.abbrev for t in ends))

    @classmethod
    def parse(cls, label: str) -> "PathSchema":
        """``"lab-diag"`` is the metapath lab <- patient -> diag; ``"pati-lab"`` a simple link."""
        parts = label.strip().split("-")
        if len(parts) != 2:
            raise SchemaError(f"bad path label {label!r}")
        try:
            a, b = (NodeType.parse(p) for p in parts)
        except ValueError as exc:
            raise SchemaError(str(exc)) from None
        if a is NodeType.PATIENT or b is NodeType.PATIENT:
            return cls((a, b), label.strip())
        return cls((a, NodeType.PATIENT, b), label.strip())

    @property
    def is_metapath(self) -> bool:
        return len(self.type_sequence) == 3

    @property
    def source(self) -> NodeType:
        return self.type_sequence[0]

    @property
    def dest(self) -> NodeType:
        return self.type_sequence[-1]

    @property
    def event_types(self) -> Tuple[NodeType, ...]:
        return tuple(t for t in (self.source, self.dest) if t is not NodeType.PATIENT)

    def validate(self, schema: NetworkSchema) -> None:
        seq = self.type_sequence
        for a, b in zip(seq, seq[1:]):
            if not schema.allows(a, b):
                raise SchemaError(f"{self.label}: link {a.abbrev}-{b.abbrev} not in network schema")

    def __str__(self) -> str:
        return self.label


SIMPLE_LINKS = tuple(
    PathSchema.parse(s)
    for s in (
        "pati-proc", "pati-pres", "pati-micro", "pati-lab", "pati-age",
        "pati-diag", "pati-symp", "pati-gen", "pati-eth",
    )
)
CANDIDATE_METAPATHS = tuple(
    PathSchema.parse(s)
    for s in (
        "lab-diag", "symp-diag", "lab-proc", "lab-pres", "symp-pres",
        "symp-proc", "lab-symp", "micro-lab", "micro-symp",
    )
)
DEFAULT_METAPATHS = tuple(PathSchema.parse(s) for s in ("lab-diag", "symp-diag", "lab-symp", "lab-pres"))
KNOWN_PATHS = {p.label: p for p in SIMPLE_LINKS + CANDIDATE_METAPATHS}


class HeteroGraph:
    """Immutable patient/event bipartite graph with per-type adjacency.

    Node ids are dense integers in first-seen order. For each event type ``t``
    a CSR matrix (patients x nodes) holds ``N_t(p)``; its CSC twin gives the
    patients adjacent to an event node.
    """

    def __init__(self, keys: Sequence[NodeKey], edges: Iterable[Tuple[int, int]],
                 schema: Optional[NetworkSchema] = None):
        self.schema = schema or NetworkSchema.default()
        self.keys: List[NodeKey] = list(keys)
        self.index: Dict[NodeKey, int] = {k: i for i, k in enumerate(self.keys)}
        if len(self.index) != len(self.keys):
            raise ValueError("duplicate node keys")
        n = len(self.keys)
        self.node_types = np.array([_TYPE_CODE[k.node_type] for k in self.keys], dtype=np.int8)
        self.patients = np.flatnonzero(self.node_types == _TYPE_CODE[NodeType.PATIENT])
        self._patient_pos = np.full(n, -1, dtype=np.int64)
        self._patient_pos[self.patients] = np.arange(len(self.patients))

        rows, cols = [], []
        for a, b in edges:
            ta, tb = self.keys[a].node_type, self.keys[b].node_type
            if not self.schema.allows(ta, tb):
                raise SchemaError(f"edge {self.keys[a]} - {self.keys[b]} not allowed by schema")
            if ta is NodeType.PATIENT:
                p, e = a, b
            elif tb is NodeType.PATIENT:
                p, e = b, a
            else:
                raise SchemaError("only patient-event edges are stored")
            rows.append(self._patient_pos[p])
            cols.append(e)
        n_pat = len(self.patients)
        mat = sparse.csr_matrix(
            (np.ones(len(rows), dtype=np.int64), (np.array(rows, dtype=np.int64), np.array(cols, dtype=np.int64))),
            shape=(n_pat, n),
        )
        mat.sum_duplicates()
        mat.data[:] = 1
        mat.sort_indices()
        self._incidence = mat
        self.adjacency: Dict[NodeType, sparse.csr_matrix] = {}
        self._reverse: Dict[NodeType, sparse.csc_matrix] = {}
        for t in EVENT_TYPES:
            mask = sparse.diags((self.node_types == _TYPE_CODE[t]).astype(np.int64))
            sub = (mat @ mask).tocsr()
            sub.eliminate_zeros()
            sub.sort_indices()
            self.adjacency[t] = sub
            rev = sub.tocsc()
            rev.sort_indices()
            self._reverse[t] = rev
        self.degree = np.asarray(mat.sum(axis=0)).ravel().astype(np.int64)
        self.degree[self.patients] = np.diff(mat.indptr)

    # -- lookups --------------------------------------------------------

    def __len__(self) -> int:
        return len(self.keys)

    @property
    def num_edges(self) -> int:
        return int(self._incidence.nnz)

    def node_type(self, node: int) -> NodeType:
        return self.keys[node].node_type

    def nodes_of_type(self, node_type: NodeType) -> np.ndarray:
        return np.flatnonzero(self.node_types == _TYPE_CODE[NodeType.parse(node_type)])

    def patient_position(self, node: int) -> int:
        pos = int(self._patient_pos[node])
        if pos < 0:
            raise ValueError(f"node {node} is not a patient")
        return pos

    def neighbors(self, node: int, node_type: NodeType) -> np.ndarray:
        """Sorted ids of ``node_type`` neighbours of ``node``."""
        node_type = NodeType.parse(node_type)
        if self.keys[node].node_type is NodeType.PATIENT:
            if node_type is NodeType.PATIENT:
                return np.empty(0, dtype=np.int64)
            m = self.adjacency[node_type]
            i = self._patient_pos[node]
            return m.indices[m.indptr[i]:m.indptr[i + 1]].astype(np.int64)
        if node_type is not NodeType.PATIENT:
            return np.empty(0, dtype=np.int64)
        m = self._reverse[self.keys[node].node_type]
        rows = m.indices[m.indptr[node]:m.indptr[node + 1]]
        return self.patients[rows]

    def type_counts(self, node_type: NodeType) -> np.ndarray:
        """``|N_t(p)|`` for every patient, in patient order."""
        return np.diff(self.adjacency[NodeType.parse(node_type)].indptr)

    def edges(self) -> Iterator[Tuple[int, int]]:
        """(patient, event) pairs, patients in id order, neighbours ascending."""
        m = self._incidence
        for i, p in enumerate(self.patients):
            for e in m.indices[m.indptr[i]:m.indptr[i + 1]]:
                yield int(p), int(e)

    # -- serialization --------------------------------------------------

    def dump(self, path: Union[str, os.PathLike]) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"nodes\t{len(self.keys)}\n")
            for i, k in enumerate(self.keys):
                fh.write(f"{i}\t{k.node_type.value}\t{k.identity}\n")
            fh.write(f"edges\t{self.num_edges}\n")
            for a, b in self.edges():
                fh.write(f"{a}\t{b}\n")

    @classmethod
    def load(cls, path: Union[str, os.PathLike], schema: Optional[NetworkSchema] = None) -> "HeteroGraph":
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
        head, count = lines[0].split("\t")
        if head != "nodes":
            raise ValueError(f"{path}: not a graph dump")
        n = int(count)
        keys = []
        for line in lines[1:1 + n]:
            i, t, ident = line.split("\t", 2)
            if int(i) != len(keys):
                raise ValueError(f"{path}: node ids out of order at {i}")
            keys.append(NodeKey(NodeType(t), ident))
        head, count = lines[1 + n].split("\t")
        if head != "edges":
            raise ValueError(f"{path}: missing edge section")
        m = int(count)
        edges = [tuple(map(int, line.split("\t"))) for line in lines[2 + n:2 + n + m]]
        return cls(keys, edges, schema)


_TYPE_CODE = {t: i for i, t in enumerate(NodeType)}


def build_graph(train_stays, schema: Optional[NetworkSchema] = None,
                default_lab_flag: str = "normal") -> HeteroGraph:
    """One patient node per stay, one node per distinct event key, one edge per incidence.

    Raises:
        SchemaError: an event's type is not in the network schema.
    """
    schema = schema or NetworkSchema.default()
    keys: List[NodeKey] = []
    index: Dict[NodeKey, int] = {}
    edges = []

    def node(key):
        i = index.get(key)
        if i is None:
            i = index[key] = len(keys)
            keys.append(key)
        return i

    for stay in train_stays:
        pkey = NodeKey(NodeType.PATIENT, stay.stay_id)
        if pkey in index:
            raise ValueError(f"duplicate stay id {stay.stay_id!r}")
        p = node(pkey)
        for ev in stay.events:
            if ev.event_type not in schema.node_types or not schema.allows(NodeType.PATIENT, ev.event_type):
                raise SchemaError(f"event type {ev.event_type} outside the network schema")
            edges.append((p, node(map_event(ev, default_lab_flag=default_lab_flag))))
    if not keys:
        raise ValueError("cannot build a graph from zero stays")
    return HeteroGraph(keys, edges, schema)


# ---------------------------------------------------------------- path instances


def _check(g: HeteroGraph, path: PathSchema) -> None:
    if not isinstance(path, PathSchema):
        raise SchemaError(f"not a path schema: {path!r}")
    path.validate(g.schema)


def path_weights(g: HeteroGraph, path: PathSchema) -> np.ndarray:
    """Number of path instances through each patient, in patient order."""
    _check(g, path)
    if not path.is_metapath:
        return g.type_counts(path.event_types[0]).astype(np.int64)
    a, b = path.source, path.dest
    na = g.type_counts(a).astype(np.int64)
    if a is b:
        return na * (na - 1) // 2
    return na * g.type_counts(b).astype(np.int64)


def count_path_instances(g: HeteroGraph, path: PathSchema) -> int:
    """Edges of a simple link, or distinct ``a - patient - b`` instances of a metapath.

    When both ends share a type, each unordered pair of distinct neighbours
    counts once.
    """
    return int(path_weights(g, path).sum())


def enumerate_path_pairs(g: HeteroGraph, path: PathSchema) -> Iterator[Tuple[int, int, int]]:
    """Yield ``(v, c, multiplicity)`` for every endpoint pair joined under ``path``.

    Pairs come out in first-seen order. For same-type metapaths ``v < c``.
    """
    _check(g, path)
    counts: Counter = Counter()
    if not path.is_metapath:
        t = path.event_types[0]
        for p in g.patients:
            for e in g.neighbors(p, t):
                pair = (int(p), int(e)) if path.source is NodeType.PATIENT else (int(e), int(p))
                counts[pair] += 1
    else:
        a, b = path.source, path.dest
        for p in g.patients:
            na, nb = g.neighbors(p, a), g.neighbors(p, b)
            if a is b:
                for i in range(len(na)):
                    for j in range(i + 1, len(na)):
                        counts[(int(na[i]), int(na[j]))] += 1
            else:
                for x in na:
                    for y in nb:
                        counts[(int(x), int(y))] += 1
    for (v, c), m in counts.items():
        yield v, c, m
