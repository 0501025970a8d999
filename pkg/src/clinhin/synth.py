"""Synthetic EHR-like cohorts with planted disease clusters.

Each patient belongs to one or more latent clusters. Cluster ``c`` owns a set
of diagnosis codes drawn from the ``c``-th group of the default cohort table,
so cohort lookups of generated codes recover the cluster. Symptoms, labs,
prescriptions and procedures are emitted from the signature tokens of the
patient's diagnoses with probability ``beta`` and uniformly at random
otherwise; demographics and microbiology are pure noise.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Dict, List, Tuple, Union

import numpy as np

from .events import MICRO_INTERPRETATIONS, ClinicalEvent, NodeType
from .ingest import CohortTable, PatientStay, load_cohort_table

EMITTED = (NodeType.SYMPTOM, NodeType.LABORATORY, NodeType.PRESCRIPTION, NodeType.PROCEDURE)


class InfeasibleSpec(ValueError):
    pass


def _default_vocab():
    return {"symptom": 200, "laboratory": 200, "prescription": 200, "procedure": 100,
            "microbiology": 10, "ethnicity": 5}


def _default_events():
    return {"symptom": 6, "laboratory": 8, "prescription": 4, "procedure": 2}


@dataclass
class SynthSpec:
    n_patients: int = 5000
    n_clusters: int = 20
    beta: float = 0.9
    vocab: Dict[str, int] = field(default_factory=_default_vocab)
    events_per_patient: Dict[str, int] = field(default_factory=_default_events)
    codes_per_cluster: int = 5
    diagnoses_per_patient: int = 3
    clusters_per_patient: int = 1
    micro_rate: float = 0.3
    seed: int = 0

    def validate(self, table: CohortTable) -> None:
        if self.n_patients < 1:
            raise InfeasibleSpec("n_patients must be >= 1")
        if not 0.0 <= self.beta <= 1.0:
            raise InfeasibleSpec("beta must lie in [0, 1]")
        if not 1 <= self.n_clusters <= len(table):
            raise InfeasibleSpec(f"n_clusters must be between 1 and {len(table)}")
        if not 1 <= self.clusters_per_patient <= self.n_clusters:
            raise InfeasibleSpec("clusters_per_patient must be between 1 and n_clusters")
        pool = self.clusters_per_patient * self.codes_per_cluster
        if not 1 <= self.diagnoses_per_patient <= pool:
            raise InfeasibleSpec("diagnoses_per_patient exceeds the codes of the patient's clusters")
        for t in EMITTED:
            size = self.vocab.get(t.value, 0)
            if size < self.n_clusters:
                raise InfeasibleSpec(f"{t.value} vocabulary ({size}) is smaller than the cluster count")
            if self.events_per_patient.get(t.value, 0) > size:
                raise InfeasibleSpec(f"more {t.value} events per patient than vocabulary entries")
        for t in ("microbiology", "ethnicity"):
            if self.vocab.get(t, 0) < 1:
                raise InfeasibleSpec(f"{t} vocabulary must be non-empty")


@dataclass
class SynthDataset:
    spec: SynthSpec
    stays: List[PatientStay]
    truth: Dict[str, Tuple[int, ...]]
    cluster_codes: List[List[str]]
    signatures: Dict[str, Dict[str, List[str]]]


def _cluster_codes(table: CohortTable, n_clusters: int, per_cluster: int) -> List[List[str]]:
    out = []
    for label, ranges in table.cohorts[:n_clusters]:
        r = ranges[0]
        if r.low[0] == "V":
            lo, hi, fmt = int(r.low[1:3]), int(r.high[1:3]), "V{:02d}1"
        elif r.low[0] == "E":
            lo, hi, fmt = int(r.low[1:4]), int(r.high[1:4]), "E{:03d}1"
        else:
            lo, hi, fmt = int(r.low[:3]), int(r.high[:3]), "{:03d}1"
        span = hi - lo + 1
        if span < per_cluster:
            raise InfeasibleSpec(f"cohort {label!r} spans only {span} code prefixes")
        step = span // per_cluster
        out.append([fmt.format(lo + j * step) for j in range(per_cluster)])
    return out


def _token_name(t: NodeType, i: int) -> str:
    prefix = {NodeType.SYMPTOM: "symptom", NodeType.LABORATORY: "lab", NodeType.PRESCRIPTION: "drug"}
    if t is NodeType.PROCEDURE:
        return f"{1000 + i:04d}"
    return f"{prefix[t]}_{i:03d}"


def generate(spec: SynthSpec) -> SynthDataset:
    """Draw a dataset; identical ``spec`` (including seed) gives identical output."""
    table = load_cohort_table()
    spec.validate(table)
    rng = np.random.default_rng(spec.seed)
    K, C = spec.n_clusters, spec.codes_per_cluster
    cluster_codes = _cluster_codes(table, K, C)

    # token i belongs to cluster i % K; within a cluster, tokens rotate over its codes
    vocab: Dict[NodeType, List[str]] = {}
    signature: Dict[NodeType, Dict[Tuple[int, int], List[int]]] = {}
    for t in EMITTED:
        n = spec.vocab[t.value]
        vocab[t] = [_token_name(t, i) for i in range(n)]
        sig: Dict[Tuple[int, int], List[int]] = {}
        for i in range(n):
            cluster, rank = i % K, i // K
            sig.setdefault((cluster, rank % C), []).append(i)
        signature[t] = sig
    micro_names = [f"organism_{i:02d}" for i in range(spec.vocab["microbiology"])]
    ethnicities = [f"ethnicity_{i}" for i in range(spec.vocab["ethnicity"])]
    code_weights = 1.0 / np.arange(1, C + 1)

    stays, truth = [], {}
    width = len(str(spec.n_patients))
    for pi in range(spec.n_patients):
        stay_id = f"s{pi:0{width}d}"
        clusters = tuple(sorted(rng.choice(K, size=spec.clusters_per_patient, replace=False).tolist()))
        pool = [(c, j) for c in clusters for j in range(C)]
        w = np.array([code_weights[j] for _, j in pool])
        picks = rng.choice(len(pool), size=spec.diagnoses_per_patient, replace=False, p=w / w.sum())
        diagnoses = [pool[i] for i in sorted(picks.tolist())]

        events = [
            ClinicalEvent(NodeType.GENDER, "M" if rng.random() < 0.5 else "F"),
            ClinicalEvent(NodeType.AGE, "age", float(rng.integers(15, 91))),
            ClinicalEvent(NodeType.ETHNICITY, ethnicities[int(rng.integers(len(ethnicities)))]),
        ]
        for t in EMITTED:
            n_vocab = len(vocab[t])
            want = spec.events_per_patient.get(t.value, 0)
            chosen: Dict[int, bool] = {}
            tries = 0
            while len(chosen) < want and tries < 50 * want:
                tries += 1
                if rng.random() < spec.beta:
                    cluster, j = diagnoses[int(rng.integers(len(diagnoses)))]
                    tokens = signature[t].get((cluster, j))
                    if not tokens:
                        tokens = [i for (c, _), ids in signature[t].items() if c == cluster for i in ids]
                    tok, planted = tokens[int(rng.integers(len(tokens)))], True
                else:
                    tok, planted = int(rng.integers(n_vocab)), False
                if tok not in chosen:
                    chosen[tok] = planted
            for tok, planted in chosen.items():
                name = vocab[t][tok]
                if t is NodeType.LABORATORY:
                    flag = "abnormal" if planted or rng.random() < 0.2 else "normal"
                    events.append(ClinicalEvent(t, name, flag))
                else:
                    events.append(ClinicalEvent(t, name))
        if rng.random() < spec.micro_rate:
            events.append(ClinicalEvent(
                NodeType.MICROBIOLOGY,
                micro_names[int(rng.integers(len(micro_names)))],
                MICRO_INTERPRETATIONS[int(rng.integers(3))],
            ))
        for c, j in diagnoses:
            events.append(ClinicalEvent(NodeType.DIAGNOSIS, cluster_codes[c][j]))
        stays.append(PatientStay(stay_id, events))
        truth[stay_id] = clusters

    signatures = {
        t.value: {cluster_codes[c][j]: [vocab[t][i] for i in ids] for (c, j), ids in sorted(signature[t].items())}
        for t in EMITTED
    }
    return SynthDataset(spec, stays, truth, cluster_codes, signatures)


_TABLE_COLUMNS = {
    "patients.csv": ["stay_id", "gender", "age", "ethnicity"],
    "procedures_icd.csv": ["stay_id", "icd9_code"],
    "prescriptions.csv": ["stay_id", "generic_drug_name"],
    "microbiologyevents.csv": ["stay_id", "spec_itemid", "interpretation"],
    "labevents.csv": ["stay_id", "itemid", "flag"],
    "diagnoses_icd.csv": ["stay_id", "icd9_code"],
    "symptoms.csv": ["stay_id", "symptom"],
}
_TABLE_OF = {
    NodeType.PROCEDURE: "procedures_icd.csv",
    NodeType.PRESCRIPTION: "prescriptions.csv",
    NodeType.MICROBIOLOGY: "microbiologyevents.csv",
    NodeType.LABORATORY: "labevents.csv",
    NodeType.DIAGNOSIS: "diagnoses_icd.csv",
    NodeType.SYMPTOM: "symptoms.csv",
}


def write_tables(dataset: SynthDataset, directory: Union[str, os.PathLike]) -> Path:
    """Write the ingest-format CSV tables, the default ``table_spec.ini`` and ``truth.tsv``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows: Dict[str, List[list]] = {name: [] for name in _TABLE_COLUMNS}
    for stay in dataset.stays:
        demo = {"gender": "", "age": "", "ethnicity": ""}
        for ev in stay.events:
            t = ev.event_type
            if t is NodeType.GENDER:
                demo["gender"] = ev.name
            elif t is NodeType.AGE:
                demo["age"] = f"{ev.value:g}"
            elif t is NodeType.ETHNICITY:
                demo["ethnicity"] = ev.name
            elif t in (NodeType.LABORATORY, NodeType.MICROBIOLOGY):
                rows[_TABLE_OF[t]].append([stay.stay_id, ev.name, ev.value or ""])
            else:
                rows[_TABLE_OF[t]].append([stay.stay_id, ev.name])
        rows["patients.csv"].append([stay.stay_id, demo["gender"], demo["age"], demo["ethnicity"]])
    for name, header in _TABLE_COLUMNS.items():
        with open(directory / name, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            writer.writerows(rows[name])
    spec_text = resources.files("clinhin.data").joinpath("table_spec.ini").read_text()
    (directory / "table_spec.ini").write_text(spec_text)
    with open(directory / "truth.tsv", "w", encoding="utf-8") as fh:
        for stay_id, clusters in dataset.truth.items():
            fh.write(f"{stay_id}\t{','.join(map(str, clusters))}\n")
    return directory


def read_truth(path: Union[str, os.PathLike]) -> Dict[str, Tuple[int, ...]]:
    truth = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                stay_id, _, clusters = line.rstrip("\n").partition("\t")
                truth[stay_id] = tuple(int(c) for c in clusters.split(",") if c)
    return truth
