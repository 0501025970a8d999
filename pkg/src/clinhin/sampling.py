"""Random draws used in training: path schemas, positive pairs, negatives."""
from __future__ import annotations

from typing import Dict, Optional, Sequence, Tuple

import numpy as np

from .events import NodeType
from .graph import HeteroGraph, PathSchema, path_weights


class SamplingError(ValueError):
    pass


class AliasTable:
    """Vose alias table: O(n) build, O(1) draws from a fixed categorical distribution."""

    def __init__(self, weights):
        w = np.asarray(weights, dtype=np.float64)
        if w.ndim != 1 or len(w) == 0:
            raise SamplingError("alias table needs a non-empty 1-d weight vector")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise SamplingError("weights must be finite and non-negative")
        total = w.sum()
        if total <= 0:
            raise SamplingError("weights sum to zero")
        n = len(w)
        scaled = w * (n / total)
        prob = np.ones(n, dtype=np.float64)
        alias = np.arange(n, dtype=np.int64)
        small = [i for i in range(n) if scaled[i] < 1.0]
        large = [i for i in range(n) if scaled[i] >= 1.0]
        while small and large:
            s, l = small.pop(), large.pop()
            prob[s] = scaled[s]
            alias[s] = l
            scaled[l] = (scaled[l] + scaled[s]) - 1.0
            (small if scaled[l] < 1.0 else large).append(l)
        # leftovers are 1 up to rounding
        self.prob = prob
        self.alias = alias
        self.weights = w / total

    def __len__(self) -> int:
        return len(self.prob)

    def sample(self, rng: np.random.Generator, size: Optional[int] = None):
        n = len(self.prob)
        if size is None:
            i = int(rng.integers(n))
            return i if rng.random() < self.prob[i] else int(self.alias[i])
        i = rng.integers(n, size=size)
        keep = rng.random(size) < self.prob[i]
        return np.where(keep, i, self.alias[i])


def sample_schema(active: Sequence[PathSchema], rng: np.random.Generator,
                  weights: Optional[Sequence[float]] = None) -> PathSchema:
    """Uniform over ``active`` unless ``weights`` are given."""
    if not active:
        raise SamplingError("no active path schemas")
    if weights is None:
        return active[int(rng.integers(len(active)))]
    p = np.asarray(weights, dtype=np.float64)
    return active[int(rng.choice(len(active), p=p / p.sum()))]


class PositiveSampler:
    """Draws ``(v, c)`` with probability proportional to their path-instance multiplicity.

    A patient is picked with weight equal to the number of instances through it,
    then the endpoints are drawn uniformly from its typed neighbourhoods.
    """

    def __init__(self, g: HeteroGraph, path: PathSchema):
        self.g = g
        self.path = path
        w = path_weights(g, path)
        self.count = int(w.sum())
        if self.count == 0:
            raise SamplingError(f"{path.label} has no instances; deactivate it")
        self.patients = AliasTable(w)
        if path.is_metapath:
            self._a = g.adjacency[path.source]
            self._b = g.adjacency[path.dest]
        else:
            self._a = g.adjacency[path.event_types[0]]
            self._b = None

    def sample(self, rng: np.random.Generator, size: int) -> Tuple[np.ndarray, np.ndarray]:
        pos = self.patients.sample(rng, size)
        a = self._a
        start, deg_a = a.indptr[pos], a.indptr[pos + 1] - a.indptr[pos]
        if not self.path.is_metapath:
            e = a.indices[start + (rng.random(size) * deg_a).astype(np.int64)].astype(np.int64)
            p = self.g.patients[pos]
            if self.path.source is NodeType.PATIENT:
                return p, e
            return e, p
        if self.path.source is self.path.dest:
            i = (rng.random(size) * deg_a).astype(np.int64)
            j = (rng.random(size) * (deg_a - 1)).astype(np.int64)
            j = j + (j >= i)
            return (a.indices[start + i].astype(np.int64), a.indices[start + j].astype(np.int64))
        b = self._b
        sb, deg_b = b.indptr[pos], b.indptr[pos + 1] - b.indptr[pos]
        v = a.indices[start + (rng.random(size) * deg_a).astype(np.int64)]
        c = b.indices[sb + (rng.random(size) * deg_b).astype(np.int64)]
        return v.astype(np.int64), c.astype(np.int64)


def sample_positive_pair(g: HeteroGraph, path: PathSchema, rng: np.random.Generator) -> Tuple[int, int]:
    v, c = PositiveSampler(g, path).sample(rng, 1)
    return int(v[0]), int(c[0])


class NegativeSampler:
    """Degree^alpha unigram over the nodes of one type, with resampling of excluded ids."""

    def __init__(self, g: HeteroGraph, node_type: NodeType, alpha: float = 1.0):
        self.node_type = NodeType.parse(node_type)
        self.nodes = g.nodes_of_type(self.node_type)
        if len(self.nodes) < 2:
            raise SamplingError(f"need at least 2 {self.node_type} nodes for negative sampling")
        deg = g.degree[self.nodes].astype(np.float64)
        w = deg ** alpha if alpha != 0 else np.ones_like(deg)
        if w.sum() <= 0:
            w = np.ones_like(deg)
        self.table = AliasTable(w)

    def sample(self, rng: np.random.Generator, size, exclude=None) -> np.ndarray:
        """Draw an array of shape ``size``; draws equal to ``exclude`` are redrawn.

        ``exclude`` is a single node id or, for a 2-d ``size``, one id per row.
        """
        shape = tuple(np.atleast_1d(size))
        out = self.nodes[self.table.sample(rng, int(np.prod(shape)))].reshape(shape)
        if exclude is None:
            return out
        excl = np.asarray(exclude, dtype=np.int64)
        if excl.ndim == 1:
            excl = excl.reshape((-1,) + (1,) * (len(shape) - 1))
        bad = out == excl
        while bad.any():
            redraw = self.nodes[self.table.sample(rng, int(bad.sum()))]
            out[bad] = redraw
            bad = out == excl
        return out

    def sample_rejecting(self, rng: np.random.Generator, m: int, reject: np.ndarray) -> np.ndarray:
        """``m`` draws, none in the id set ``reject``."""
        reject = np.asarray(reject)
        if np.all(np.isin(self.nodes, reject)):
            raise SamplingError("every candidate negative is rejected")
        out = self.nodes[self.table.sample(rng, m)]
        bad = np.isin(out, reject)
        while bad.any():
            out[bad] = self.nodes[self.table.sample(rng, int(bad.sum()))]
            bad = np.isin(out, reject)
        return out


def sample_negatives(g: HeteroGraph, dest_type: NodeType, exclude: Optional[int], m: int,
                     rng: np.random.Generator, alpha: float = 1.0) -> np.ndarray:
    sampler = NegativeSampler(g, dest_type, alpha)
    if exclude is None:
        return sampler.sample(rng, m)
    return sampler.sample_rejecting(rng, m, np.array([exclude]))


class SamplerState:
    """Seeded generator plus lazily built per-schema and per-type samplers.

    ``calls`` counts positive-pair draws per schema label; tests use it to
    check which branches touched the path samplers.
    """

    def __init__(self, g: HeteroGraph, seed, alpha: float = 1.0):
        self.g = g
        self.rng = np.random.default_rng(seed)
        self.alpha = alpha
        self._positive: Dict[str, PositiveSampler] = {}
        self._negative: Dict[NodeType, NegativeSampler] = {}
        self.calls: Dict[str, int] = {}

    def positive(self, path: PathSchema) -> PositiveSampler:
        s = self._positive.get(path.label)
        if s is None:
            s = self._positive[path.label] = PositiveSampler(self.g, path)
        return s

    def negative(self, node_type: NodeType) -> NegativeSampler:
        node_type = NodeType.parse(node_type)
        s = self._negative.get(node_type)
        if s is None:
            s = self._negative[node_type] = NegativeSampler(self.g, node_type, self.alpha)
        return s

    def positive_pairs(self, path: PathSchema, size: int) -> Tuple[np.ndarray, np.ndarray]:
        self.calls[path.label] = self.calls.get(path.label, 0) + size
        return self.positive(path).sample(self.rng, size)
