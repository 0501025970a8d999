"""Diagnosis ranking from embeddings of a heterogeneous clinical-event network."""
from .embedding import EmbeddingModel, init_model
from .evaluate import (
    ap_at_k,
    auroc,
    compose_patient,
    evaluate_ranking,
    map_at_k,
    predict_cohorts,
    rank_diagnoses,
)
from .events import ClinicalEvent, NodeKey, NodeType, map_event
from .graph import HeteroGraph, NetworkSchema, PathSchema, build_graph
from .ingest import PatientStay, load_cohort_table, load_tables, map_cohort, split
from .synth import SynthSpec, generate
from .trainer import TrainConfig, train

__version__ = "0.1.0"
