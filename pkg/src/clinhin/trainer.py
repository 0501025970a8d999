"""Joint training: negative-sampling neighbour prediction mixed with hinge ranking."""
from __future__ import annotations

import configparser
import dataclasses
import logging
import math
import os
import threading
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from . import _kernels
from .embedding import LOG_EPS, SIGMOID_CLAMP, EmbeddingModel, init_model
from .events import DIAGNOSTIC_TYPES, TREATMENT_TYPES, NodeType
from .graph import (
    DEFAULT_METAPATHS,
    KNOWN_PATHS,
    SIMPLE_LINKS,
    HeteroGraph,
    PathSchema,
    SchemaError,
    build_graph,
    count_path_instances,
)
from .ingest import ConfigError, PatientStay
from .sampling import SamplerState, sample_schema

logger = logging.getLogger(__name__)

TREATMENT_ABBREVS = tuple(t.abbrev for t in TREATMENT_TYPES)


@dataclass
class TrainConfig:
    omega: float = 0.8
    margin: float = 1.0
    lam: float = 1e-4
    negatives: int = 100
    unsup_negatives: int = 5
    batch: int = 500
    dim: int = 128
    lr0: float = 0.025
    epochs: int = 100
    seed: int = 0
    alpha: float = 1.0
    schema_sampling: str = "uniform"
    schemas: Tuple[str, ...] = tuple(p.label for p in DEFAULT_METAPATHS)
    treatment: Tuple[str, ...] = TREATMENT_ABBREVS
    deterministic: bool = True
    workers: int = 1
    log_every: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not 0.0 <= self.omega <= 1.0:
            raise ConfigError("omega must lie in [0, 1]")
        if self.margin <= 0:
            raise ConfigError("margin must be positive")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        for name in ("negatives", "unsup_negatives", "batch", "dim", "epochs", "workers"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.lr0 <= 0:
            raise ConfigError("lr0 must be positive")
        if self.schema_sampling not in ("uniform", "count"):
            raise ConfigError("schema_sampling is 'uniform' or 'count'")
        for label in self.schemas:
            if label not in KNOWN_PATHS:
                raise ConfigError(f"unknown path schema {label!r}; known: {', '.join(KNOWN_PATHS)}")
        for t in self.treatment:
            if t not in TREATMENT_ABBREVS:
                raise ConfigError(f"treatment subset must be drawn from {TREATMENT_ABBREVS}, got {t!r}")

    def active_schemas(self) -> List[PathSchema]:
        """Simple links plus the configured metapaths, minus any touching an excluded treatment type."""
        allowed_treatment = {NodeType.parse(t) for t in self.treatment}
        out = []
        for path in list(SIMPLE_LINKS) + [KNOWN_PATHS[s] for s in self.schemas]:
            if path in out:
                continue
            if any(t in TREATMENT_TYPES and t not in allowed_treatment for t in path.event_types):
                continue
            out.append(path)
        return out

    def to_dict(self) -> Dict[str, object]:
        d = dataclasses.asdict(self)
        d["schemas"] = list(self.schemas)
        d["treatment"] = list(self.treatment)
        return d


def network_stays(stays, treatment: Sequence[str]) -> list:
    """Drop prescription/procedure events outside the treatment subset.

    Diagnoses always stay in the network because the ranking branch needs them;
    leaving ``diag`` out of the subset only removes its unsupervised link.
    """
    keep = {NodeType.parse(t) for t in treatment} | {NodeType.DIAGNOSIS}
    out = []
    for stay in stays:
        events = [e for e in stay.events if e.event_type not in TREATMENT_TYPES or e.event_type in keep]
        out.append(PatientStay(stay.stay_id, events))
    return out


_KEY_ALIASES = {"lambda": "lam", "lr": "lr0", "m": "negatives"}


def parse_list(value: str) -> Tuple[str, ...]:
    value = value.strip()
    if value.lower() in ("", "none"):
        return ()
    return tuple(v.strip() for v in value.split(",") if v.strip())


def coerce_config(values: Dict[str, object], base: Optional[TrainConfig] = None) -> TrainConfig:
    """Merge ``key -> value`` overrides (strings accepted) into ``base``."""
    base = base or TrainConfig()
    fields = {f.name: f for f in dataclasses.fields(TrainConfig)}
    current = dataclasses.asdict(base)
    for raw_key, value in values.items():
        key = _KEY_ALIASES.get(raw_key, raw_key)
        if key not in fields:
            raise ConfigError(f"unknown training config key {raw_key!r}")
        default = current[key]
        try:
            if isinstance(value, str):
                if isinstance(default, bool):
                    value = value.strip().lower() in ("1", "true", "yes", "on")
                elif isinstance(default, int):
                    value = int(value)
                elif isinstance(default, float):
                    value = float(value)
                elif isinstance(default, tuple):
                    value = parse_list(value)
            elif isinstance(default, tuple):
                value = tuple(value)
        except ValueError:
            raise ConfigError(f"bad value {value!r} for {raw_key}") from None
        current[key] = value
    current["schemas"] = tuple(current["schemas"])
    current["treatment"] = tuple(current["treatment"])
    return TrainConfig(**current)


def read_config(path: Union[str, os.PathLike], base: Optional[TrainConfig] = None) -> TrainConfig:
    """Read ``key = value`` pairs from the ``[train]`` section of an INI file."""
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",))
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    try:
        parser.read(path)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    if "train" not in parser:
        raise ConfigError(f"{path}: missing [train] section")
    return coerce_config(dict(parser["train"]), base)


# ---------------------------------------------------------------- supervised pieces


class UndefinedPatient(ValueError):
    """A patient without any diagnostic-type neighbour has no representation."""


def patient_type_means(model: EmbeddingModel, g: HeteroGraph, p: int):
    """``f_t(p)`` for each diagnostic type (rows), and which types are present."""
    F = np.zeros((len(DIAGNOSTIC_TYPES), model.dim))
    present = np.zeros(len(DIAGNOSTIC_TYPES), dtype=bool)
    for ti, t in enumerate(DIAGNOSTIC_TYPES):
        nb = g.neighbors(p, t)
        if len(nb):
            F[ti] = model.vectors[nb].mean(axis=0)
            present[ti] = True
    if not present.any():
        raise UndefinedPatient(f"patient {g.keys[p]} has no diagnostic events")
    return F, present


def patient_vector(model: EmbeddingModel, g: HeteroGraph, p: int) -> np.ndarray:
    F, _ = patient_type_means(model, g, p)
    return model.type_weights @ F


def sup_score(model: EmbeddingModel, g: HeteroGraph, p: int, d: int) -> float:
    return float(model.vectors[d] @ patient_vector(model, g, p))


def hinge_loss(s_pos: float, s_neg: float, margin: float = 1.0) -> float:
    if margin <= 0:
        raise ValueError("margin must be positive")
    return max(0.0, s_neg - s_pos + margin)


def sup_loss(model: EmbeddingModel, g: HeteroGraph, p: int, d_pos: int, d_negs: Sequence[int],
             margin: float = 1.0) -> float:
    """Summed hinge loss over the triples ``(p, d_pos, d_neg)``."""
    fp = patient_vector(model, g, p)
    s_pos = model.vectors[d_pos] @ fp
    return float(sum(hinge_loss(s_pos, model.vectors[d] @ fp, margin) for d in d_negs))


def sup_gradients(model: EmbeddingModel, g: HeteroGraph, p: int, d_pos: int,
                  d_negs: Sequence[int], margin: float = 1.0):
    """Subgradients of :func:`sup_loss`.

    Returns ``(node_grads, weight_grad)``: a dict node id -> gradient vector
    (only nodes with a non-zero contribution) and the gradient for the type
    weights.
    """
    E = model.vectors
    F, present = patient_type_means(model, g, p)
    fp = model.type_weights @ F
    negs = np.asarray(d_negs, dtype=np.int64)
    s_pos = E[d_pos] @ fp
    s_neg = E[negs] @ fp
    viol = (s_neg - s_pos + margin) > 0
    grads: Dict[int, np.ndarray] = {}
    if not viol.any():
        return grads, np.zeros_like(model.type_weights)

    def add(node, vec):
        grads[node] = grads.get(node, 0.0) + vec

    n_viol = int(viol.sum())
    add(int(d_pos), -n_viol * fp)
    for d in negs[viol]:
        add(int(d), fp.copy())
    grad_fp = E[negs[viol]].sum(axis=0) - n_viol * E[d_pos]
    weight_grad = F @ grad_fp
    for ti, t in enumerate(DIAGNOSTIC_TYPES):
        if not present[ti]:
            continue
        nb = g.neighbors(p, t)
        share = model.type_weights[ti] / len(nb) * grad_fp
        for n in nb:
            add(int(n), share)
    return grads, weight_grad


def sup_step(model: EmbeddingModel, g: HeteroGraph, p: int, d_pos: int, d_negs: Sequence[int],
             lr: float, margin: float = 1.0) -> EmbeddingModel:
    """One subgradient step on :func:`sup_loss`, in place. Satisfied triples change nothing."""
    grads, weight_grad = sup_gradients(model, g, p, d_pos, d_negs, margin)
    for node, grad in grads.items():
        model.vectors[node] -= lr * grad
    if grads:
        model.type_weights -= lr * weight_grad
    return model


class PatientFeatures:
    """Flattened diagnostic neighbourhoods of all patients for batched composition.

    Entry ``j`` of patient position ``i`` lives at ``indptr[i] <= j < indptr[i+1]``
    and records the neighbour id, its type slot and ``1/|N_t(p)|``.
    """

    def __init__(self, g: HeteroGraph):
        n_pat = len(g.patients)
        counts = np.zeros(n_pat, dtype=np.int64)
        per_type = []
        for ti, t in enumerate(DIAGNOSTIC_TYPES):
            m = g.adjacency[t]
            deg = np.diff(m.indptr)
            counts += deg
            per_type.append((ti, m, deg))
        self.indptr = np.concatenate([[0], np.cumsum(counts)])
        total = int(self.indptr[-1])
        self.node = np.empty(total, dtype=np.int64)
        self.slot = np.empty(total, dtype=np.int64)
        self.inv = np.empty(total, dtype=np.float64)
        fill = self.indptr[:-1].copy()
        for ti, m, deg in per_type:
            rows = np.repeat(np.arange(n_pat), deg)
            offs = np.arange(len(rows)) - np.repeat(m.indptr[:-1], deg)
            dest = fill[rows] + offs
            self.node[dest] = m.indices
            self.slot[dest] = ti
            self.inv[dest] = 1.0 / np.repeat(np.maximum(deg, 1), deg)
            fill += deg
        self.has_diagnostic = counts > 0

        diag = g.adjacency[NodeType.DIAGNOSIS]
        self.diag_indptr = diag.indptr.astype(np.int64)
        self.diag_indices = diag.indices.astype(np.int64)
        n = len(g)
        rows = np.repeat(np.arange(n_pat, dtype=np.int64), np.diff(diag.indptr))
        self._n = n
        self.truth_codes = np.sort(rows * n + self.diag_indices)
        n_diag = len(g.nodes_of_type(NodeType.DIAGNOSIS))
        n_true = np.diff(diag.indptr)
        self.trainable = np.flatnonzero(self.has_diagnostic & (n_true > 0) & (n_true < n_diag))

    def is_true_diagnosis(self, positions: np.ndarray, nodes: np.ndarray) -> np.ndarray:
        codes = positions.reshape((-1,) + (1,) * (nodes.ndim - 1)) * self._n + nodes
        i = np.searchsorted(self.truth_codes, codes)
        i = np.minimum(i, len(self.truth_codes) - 1)
        return self.truth_codes[i] == codes


# ---------------------------------------------------------------- training loop


@dataclass
class TrainStats:
    steps: int = 0
    unsup_steps: int = 0
    sup_steps: int = 0
    unsup_loss: float = 0.0
    sup_loss: float = 0.0
    path_calls: Dict[str, int] = field(default_factory=dict)
    active_schemas: List[str] = field(default_factory=list)


def _decay(E: np.ndarray, touched: np.ndarray, factor: float) -> None:
    if factor != 1.0:
        E[np.unique(touched)] *= factor


class Trainer:
    """Runs the Bernoulli(omega) alternation between the two objectives.

    Each step draws the branch, then processes one mini-batch: ``batch`` path
    pairs with ``unsup_negatives`` negatives each, or ``batch`` patients with
    one positive diagnosis and ``negatives`` degree-drawn negative diagnoses.
    Touched vectors are shrunk by ``1 - lr * lam`` before the gradient is
    applied. The learning rate decays linearly from ``lr0`` to ``lr0 / 100``.
    """

    def __init__(self, g: HeteroGraph, config: TrainConfig, model: Optional[EmbeddingModel] = None,
                 schemas: Optional[Sequence[PathSchema]] = None):
        self.g = g
        self.config = config
        self.model = model or init_model(len(g), config.dim, seed=config.seed, keys=g.keys)
        self.feats = PatientFeatures(g)
        paths = list(schemas) if schemas is not None else config.active_schemas()
        self.schemas = []
        self.schema_counts = []
        for path in paths:
            path.validate(g.schema)
            n = count_path_instances(g, path)
            dest_nodes = len(g.nodes_of_type(path.dest))
            if n == 0 or dest_nodes < 2:
                logger.info("deactivating %s (%d instances, %d destination nodes)", path.label, n, dest_nodes)
                continue
            self.schemas.append(path)
            self.schema_counts.append(n)
        self.steps_per_epoch = max(1, math.ceil(len(g.patients) / config.batch))
        self.total_steps = config.epochs * self.steps_per_epoch
        self.stats = TrainStats(active_schemas=[p.label for p in self.schemas])
        self._lock = threading.Lock()

    def lr_at(self, step: int) -> float:
        lr0 = self.config.lr0
        frac = step / max(1, self.total_steps - 1)
        return lr0 + (lr0 / 100.0 - lr0) * min(frac, 1.0)

    def unsup_update(self, state: SamplerState, lr: float) -> float:
        cfg = self.config
        weights = self.schema_counts if cfg.schema_sampling == "count" else None
        path = sample_schema(self.schemas, state.rng, weights)
        v, c = state.positive_pairs(path, cfg.batch)
        negs = state.negative(path.dest).sample(state.rng, (cfg.batch, cfg.unsup_negatives), exclude=c)
        E = self.model.vectors
        _decay(E, np.concatenate([v, c, negs.ravel()]), 1.0 - lr * cfg.lam)
        loss = _kernels.unsup_pass(E, v, c, negs, lr, SIGMOID_CLAMP, LOG_EPS)
        return loss / cfg.batch

    def sup_update(self, state: SamplerState, lr: float) -> float:
        cfg = self.config
        feats = self.feats
        rng = state.rng
        pool = feats.trainable
        if len(pool) == 0:
            raise SchemaError("no patient has both diagnoses and diagnostic events")
        size = min(cfg.batch, len(pool))
        positions = rng.choice(pool, size=size, replace=False)
        starts = feats.diag_indptr[positions]
        lens = feats.diag_indptr[positions + 1] - starts
        d_pos = feats.diag_indices[starts + (rng.random(size) * lens).astype(np.int64)]
        sampler = state.negative(NodeType.DIAGNOSIS)
        d_negs = sampler.sample(rng, (size, cfg.negatives))
        bad = feats.is_true_diagnosis(positions, d_negs)
        while bad.any():
            d_negs[bad] = sampler.nodes[sampler.table.sample(rng, int(bad.sum()))]
            bad = feats.is_true_diagnosis(positions, d_negs)
        E = self.model.vectors
        touched = [d_pos, d_negs.ravel()]
        touched += [feats.node[feats.indptr[p]:feats.indptr[p + 1]] for p in positions]
        _decay(E, np.concatenate(touched), 1.0 - lr * cfg.lam)
        # each patient's hinge terms are averaged over its negatives
        loss = _kernels.sup_pass(E, self.model.type_weights, feats.indptr, feats.node, feats.slot,
                                 feats.inv, positions, d_pos, d_negs, lr / cfg.negatives, cfg.margin)
        return loss / (size * cfg.negatives)

    def _run(self, state: SamplerState, steps: range) -> None:
        cfg = self.config
        window = [0, 0, 0.0, 0.0]
        for step in steps:
            lr = self.lr_at(step)
            if state.rng.random() < cfg.omega:
                if not self.schemas:
                    raise SchemaError("unsupervised branch drawn but no path schema is active")
                loss = self.unsup_update(state, lr)
                window[0] += 1
                window[2] += loss
                with self._lock:
                    self.stats.unsup_steps += 1
                    self.stats.unsup_loss += loss
            else:
                loss = self.sup_update(state, lr)
                window[1] += 1
                window[3] += loss
                with self._lock:
                    self.stats.sup_steps += 1
                    self.stats.sup_loss += loss
            with self._lock:
                self.stats.steps += 1
            if cfg.log_every and (step + 1) % cfg.log_every == 0:
                nu, ns = window[0], window[1]
                logger.info(
                    "step %d unsup=%d sup=%d unsup_loss=%.6f sup_loss=%.6f",
                    step + 1, nu, ns, window[2] / nu if nu else 0.0, window[3] / ns if ns else 0.0,
                )
                window = [0, 0, 0.0, 0.0]

    def run(self) -> EmbeddingModel:
        cfg = self.config
        if cfg.deterministic or cfg.workers == 1:
            state = SamplerState(self.g, cfg.seed, cfg.alpha)
            self._run(state, range(self.total_steps))
            self.stats.path_calls = dict(state.calls)
        else:
            seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.workers)
            states = [SamplerState(self.g, s, cfg.alpha) for s in seeds]
            chunks = np.array_split(np.arange(self.total_steps), cfg.workers)
            threads = [
                threading.Thread(target=self._run, args=(st, range(int(ch[0]), int(ch[-1]) + 1)))
                for st, ch in zip(states, chunks) if len(ch)
            ]
            for t in threads:
                t.start()
            for t in threads:
                t.join()
            for st in states:
                for k, v in st.calls.items():
                    self.stats.path_calls[k] = self.stats.path_calls.get(k, 0) + v
        if self.stats.unsup_steps:
            self.stats.unsup_loss /= self.stats.unsup_steps
        if self.stats.sup_steps:
            self.stats.sup_loss /= self.stats.sup_steps
        return self.model


def train(g: HeteroGraph, train_stays, config: TrainConfig,
          schemas: Optional[Sequence[PathSchema]] = None) -> EmbeddingModel:
    """Train node vectors and type weights on ``g`` and return the model."""
    if train_stays is not None and len(train_stays) != len(g.patients):
        raise ValueError("graph was not built from these training stays")
    if len(g.nodes_of_type(NodeType.DIAGNOSIS)) == 0 and config.omega < 1.0:
        raise SchemaError("graph has no diagnosis nodes; the supervised branch cannot run")
    return Trainer(g, config, schemas=schemas).run()


def fit(train_stays, config: TrainConfig, schemas: Optional[Sequence[PathSchema]] = None
        ) -> Tuple[HeteroGraph, EmbeddingModel, TrainStats]:
    """Build the network from ``train_stays`` under the treatment subset and train on it."""
    stays = network_stays(train_stays, config.treatment)
    g = build_graph(stays)
    if len(g.nodes_of_type(NodeType.DIAGNOSIS)) == 0 and config.omega < 1.0:
        raise SchemaError("graph has no diagnosis nodes; the supervised branch cannot run")
    trainer = Trainer(g, config, schemas=schemas)
    model = trainer.run()
    return g, model, trainer.stats
