"""Composing held-out patients, ranking diagnoses, and ranking/classification metrics."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
from scipy.stats import rankdata

from .embedding import EmbeddingModel
from .events import (
    DIAGNOSTIC_TYPES,
    Category,
    ClinicalEvent,
    NodeKey,
    NodeType,
    RejectedRecord,
    map_event,
)
from .graph import HeteroGraph
from .ingest import CohortTable, PatientStay, map_cohort

logger = logging.getLogger(__name__)


class LeakageError(ValueError):
    """Prediction input contains treatment events (prescriptions, procedures, diagnoses)."""


class ColdPatient(ValueError):
    """None of a patient's events exists in the training vocabulary."""


class UndefinedMetric(ValueError):
    pass


def compose(model: EmbeddingModel, events: Iterable[ClinicalEvent]) -> Tuple[np.ndarray, int, int]:
    """Patient vector plus the counts of known and skipped (unknown) events.

    Raises:
        LeakageError: any treatment-category event is present.
        ColdPatient: no event maps to a node of the model.
    """
    events = list(events)
    leaked = [e for e in events if e.category is Category.TREATMENT]
    if leaked:
        raise LeakageError(
            f"{len(leaked)} treatment event(s) in prediction input, e.g. {leaked[0].event_type}:{leaked[0].name}")
    index = model.index
    groups: Dict[NodeType, Set[int]] = {}
    unknown = 0
    for ev in events:
        try:
            node = index.get(map_event(ev))
        except RejectedRecord:
            node = None
        if node is None:
            unknown += 1
            continue
        groups.setdefault(ev.event_type, set()).add(node)
    if not groups:
        raise ColdPatient("no event of this patient is in the training vocabulary")
    vec = np.zeros(model.dim)
    for ti, t in enumerate(DIAGNOSTIC_TYPES):
        nodes = groups.get(t)
        if nodes:
            vec += model.type_weights[ti] * model.vectors[sorted(nodes)].mean(axis=0)
    return vec, sum(len(s) for s in groups.values()), unknown


def compose_patient(model: EmbeddingModel, events: Iterable[ClinicalEvent]) -> np.ndarray:
    """``sum_t w_t * mean(f(n) for known n of type t)`` over diagnostic types."""
    return compose(model, events)[0]


@dataclass
class RankedPrediction:
    patient_id: str
    nodes: np.ndarray
    scores: np.ndarray

    def __len__(self) -> int:
        return len(self.nodes)

    def items(self) -> List[Tuple[int, float]]:
        return list(zip(self.nodes.tolist(), self.scores.tolist()))

    def codes(self, model: EmbeddingModel) -> List[str]:
        return [model.keys[n].identity for n in self.nodes]


def diagnosis_nodes(model: EmbeddingModel, g: Optional[HeteroGraph] = None) -> np.ndarray:
    if g is not None:
        return g.nodes_of_type(NodeType.DIAGNOSIS)
    return model.nodes_of_type(NodeType.DIAGNOSIS)


def rank_diagnoses(model: EmbeddingModel, g: Optional[HeteroGraph], patient_vector: np.ndarray,
                   k: Optional[int] = None, patient_id: str = "",
                   candidates: Optional[np.ndarray] = None) -> RankedPrediction:
    """Score every diagnosis node by dot product; descending, ties by ascending id."""
    cand = diagnosis_nodes(model, g) if candidates is None else np.asarray(candidates)
    if len(cand) == 0:
        raise ValueError("model has no diagnosis nodes")
    scores = model.vectors[cand] @ np.asarray(patient_vector, dtype=np.float64)
    order = np.lexsort((cand, -scores))
    if k is not None:
        order = order[:k]
    return RankedPrediction(patient_id, cand[order], scores[order])


# ---------------------------------------------------------------- metrics


def ap_at_k(ranked: Sequence, truth: Set, k: int, denominator: str = "hits") -> float:
    """Average of precision@i over the ranks ``i <= k`` holding a correct item.

    With ``denominator="hits"`` the average runs over the hits found (0 when
    there are none); ``"min"`` divides the same sum by ``min(k, |truth|)``.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    hits, total = 0, 0.0
    for i, item in enumerate(list(ranked)[:k], 1):
        if item in truth:
            hits += 1
            total += hits / i
    if denominator == "hits":
        return total / hits if hits else 0.0
    if denominator == "min":
        n = min(k, len(truth))
        return total / n if n else 0.0
    raise ValueError(f"unknown denominator {denominator!r}")


def _as_list(pred) -> list:
    if isinstance(pred, RankedPrediction):
        return pred.nodes.tolist()
    return list(pred)


def map_at_k(predictions: Sequence, truths: Sequence[Set], k: int, denominator: str = "hits") -> float:
    if len(predictions) != len(truths):
        raise ValueError(f"{len(predictions)} predictions but {len(truths)} truth sets")
    if not predictions:
        raise ValueError("no predictions to average")
    return float(np.mean([ap_at_k(_as_list(p), t, k, denominator) for p, t in zip(predictions, truths)]))


def auroc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Mann-Whitney AUC: P(random positive outscores random negative), ties count 1/2."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    if len(s) != len(y):
        raise ValueError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetric("AUROC needs at least one positive and one negative")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# ---------------------------------------------------------------- evaluation drivers


def truth_nodes(model: EmbeddingModel, stay: PatientStay) -> Set[int]:
    out = set()
    for ev in stay.of_type(NodeType.DIAGNOSIS):
        try:
            node = model.index.get(map_event(ev))
        except RejectedRecord:
            continue
        if node is not None:
            out.add(node)
    return out


def diagnostic_events(stay: PatientStay) -> List[ClinicalEvent]:
    return [e for e in stay.events if e.category is Category.DIAGNOSTIC]


@dataclass
class RankingReport:
    ks: Tuple[int, ...]
    map: Dict[int, float]
    ap: Dict[int, np.ndarray]
    patient_ids: List[str]
    evaluated: int
    cold: int
    no_truth: int
    top1_cohort_accuracy: Optional[float] = None

    def as_lines(self) -> List[str]:
        lines = [f"map@{k}={self.map[k]:.6f}" for k in self.ks]
        if self.top1_cohort_accuracy is not None:
            lines.append(f"top1_cohort_accuracy={self.top1_cohort_accuracy:.6f}")
        lines += [f"evaluated={self.evaluated}", f"cold={self.cold}", f"no_truth={self.no_truth}"]
        return lines


def predict_stays(model: EmbeddingModel, stays: Sequence[PatientStay], k: Optional[int] = None
                  ) -> Tuple[List[RankedPrediction], List[PatientStay], int]:
    """Ranked predictions for stays with at least one known diagnostic event.

    Treatment events are dropped from each stay before composing (they are the
    prediction target, not input). Returns predictions, the stays they belong
    to, and the number of cold stays skipped.
    """
    cand = model.nodes_of_type(NodeType.DIAGNOSIS)
    preds, kept, cold = [], [], 0
    for stay in stays:
        try:
            vec = compose_patient(model, diagnostic_events(stay))
        except ColdPatient:
            cold += 1
            continue
        preds.append(rank_diagnoses(model, None, vec, k, stay.stay_id, candidates=cand))
        kept.append(stay)
    return preds, kept, cold


def evaluate_ranking(model: EmbeddingModel, stays: Sequence[PatientStay], ks: Sequence[int] = (3, 5, 10),
                     cohort_table: Optional[CohortTable] = None, denominator: str = "hits",
                     ranker=None) -> RankingReport:
    """MAP@k over held-out stays with known events and at least one diagnosis.

    ``ranker(stay) -> list of node ids`` replaces the model ranking (used for
    baselines). With a ``cohort_table`` the report also gives how often the top
    ranked code falls in one of the patient's true cohorts.
    """
    ks = tuple(ks)
    kmax = max(ks)
    if ranker is None:
        preds, kept, cold = predict_stays(model, stays, kmax)
        ranked = [p.nodes.tolist() for p in preds]
    else:
        kept, ranked, cold = [], [], 0
        for stay in stays:
            r = ranker(stay)
            if r is None:
                cold += 1
                continue
            kept.append(stay)
            ranked.append(list(r)[:kmax])
    ids, truths, lists = [], [], []
    no_truth = 0
    for stay, r in zip(kept, ranked):
        t = truth_nodes(model, stay)
        if not t:
            no_truth += 1
            continue
        ids.append(stay.stay_id)
        truths.append(t)
        lists.append(r)
    ap = {k: np.array([ap_at_k(r, t, k, denominator) for r, t in zip(lists, truths)]) for k in ks}
    report = RankingReport(
        ks=ks,
        map={k: float(ap[k].mean()) if len(lists) else 0.0 for k in ks},
        ap=ap,
        patient_ids=ids,
        evaluated=len(lists),
        cold=cold,
        no_truth=no_truth,
    )
    if cohort_table is not None and lists:
        hits = 0
        for stay, r in zip(kept, ranked):
            true_cohorts = {map_cohort(e.name, cohort_table) for e in stay.of_type(NodeType.DIAGNOSIS)}
            true_cohorts.discard(None)
            if not true_cohorts or not r:
                continue
            top = map_cohort(model.keys[r[0]].identity, cohort_table)
            hits += top in true_cohorts
        report.top1_cohort_accuracy = hits / len(lists)
    return report


def degree_ranker(g: HeteroGraph):
    """Rank diagnoses by training degree (ties by id), the same list for every patient."""
    diag = g.nodes_of_type(NodeType.DIAGNOSIS)
    order = diag[np.lexsort((diag, -g.degree[diag]))].tolist()
    return lambda stay: order


@dataclass
class CohortReport:
    labels: List[str]
    patient_ids: List[str]
    scores: np.ndarray
    truth: np.ndarray
    auroc: Dict[str, float] = field(default_factory=dict)
    skipped: List[str] = field(default_factory=list)

    def as_lines(self) -> List[str]:
        slug = {label: "_".join(label.split()) for label in self.labels}
        lines = [f"auroc.{slug[label]}={self.auroc[label]:.6f}" for label in self.labels if label in self.auroc]
        lines += [f"skipped.{slug[label]}" for label in self.skipped]
        return lines


def predict_cohorts(model: EmbeddingModel, g: Optional[HeteroGraph], test_stays: Sequence[PatientStay],
                    cohort_table: CohortTable) -> CohortReport:
    """Score every cohort node for every test stay and compute per-cohort AUROC.

    The model must have been trained on stays whose diagnoses were collapsed
    with :func:`clinhin.ingest.collapse_to_cohorts`. Cohorts without a node in
    the model, or whose truth column is single-class, are skipped with a notice.
    """
    labels = cohort_table.labels
    nodes = []
    for label in labels:
        key = NodeKey(NodeType.DIAGNOSIS, cohort_table.canonical_code(label))
        nodes.append(model.index.get(key, -1))
    nodes = np.array(nodes)
    ids, rows, truth = [], [], []
    for stay in test_stays:
        try:
            vec = compose_patient(model, diagnostic_events(stay))
        except ColdPatient:
            continue
        present = {map_cohort(e.name, cohort_table) for e in stay.of_type(NodeType.DIAGNOSIS)}
        ids.append(stay.stay_id)
        row = np.full(len(labels), np.nan)
        ok = nodes >= 0
        row[ok] = model.vectors[nodes[ok]] @ vec
        rows.append(row)
        truth.append([label in present for label in labels])
    scores = np.array(rows).reshape(len(ids), len(labels))
    truth = np.array(truth, dtype=bool).reshape(len(ids), len(labels))
    report = CohortReport(labels, ids, scores, truth)
    for j, label in enumerate(labels):
        if nodes[j] < 0:
            report.skipped.append(label)
            logger.info("cohort %r has no diagnosis node in the model; skipped", label)
            continue
        try:
            report.auroc[label] = auroc(scores[:, j], truth[:, j])
        except UndefinedMetric:
            report.skipped.append(label)
            logger.info("cohort %r has a single class in the test truth; skipped", label)
    return report


def format_prediction(model: EmbeddingModel, pred: RankedPrediction) -> str:
    """``stay_id`` followed by tab-separated ``code:score`` pairs in rank order."""
    pairs = "\t".join(f"{model.keys[n].identity}:{s:.6f}" for n, s in pred.items())
    return f"{pred.patient_id}\t{pairs}"
