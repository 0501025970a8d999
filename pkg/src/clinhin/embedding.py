"""Node embedding table and the negative-sampling neighbour objective."""
from __future__ import annotations

import json
import os
import struct
from typing import Dict, Optional, Sequence, Union

import numpy as np

from .events import DIAGNOSTIC_TYPES, NodeKey, NodeType

PathLike = Union[str, os.PathLike]

SIGMOID_CLAMP = 40.0
LOG_EPS = 1e-12
_TEXT_MAGIC = "clinhin-embedding 1"
_BIN_MAGIC = b"CLHNEMB1"


def sigmoid(x):
    x = np.clip(x, -SIGMOID_CLAMP, SIGMOID_CLAMP)
    return 1.0 / (1.0 + np.exp(-x))


def log_sigmoid(x):
    return np.log(np.maximum(sigmoid(x), LOG_EPS))


class EmbeddingModel:
    """One ``d``-vector per node plus a scalar weight per diagnostic event type.

    ``keys`` (optional) names each row; it is required for persistence and for
    composing patients from raw events.
    """

    def __init__(self, vectors: np.ndarray, type_weights: np.ndarray,
                 keys: Optional[Sequence[NodeKey]] = None):
        self.vectors = np.asarray(vectors)
        if self.vectors.ndim != 2:
            raise ValueError("vectors must be a (nodes, dim) array")
        self.type_weights = np.asarray(type_weights, dtype=np.float64)
        if self.type_weights.shape != (len(DIAGNOSTIC_TYPES),):
            raise ValueError(f"expected {len(DIAGNOSTIC_TYPES)} type weights")
        self.keys = list(keys) if keys is not None else None
        if self.keys is not None and len(self.keys) != len(self.vectors):
            raise ValueError("keys and vectors disagree in length")
        self._index = None

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def __len__(self) -> int:
        return self.vectors.shape[0]

    @property
    def index(self) -> Dict[NodeKey, int]:
        if self._index is None:
            if self.keys is None:
                raise ValueError("model has no node keys")
            self._index = {k: i for i, k in enumerate(self.keys)}
        return self._index

    def weight(self, node_type: NodeType) -> float:
        return float(self.type_weights[DIAGNOSTIC_TYPES.index(NodeType.parse(node_type))])

    def nodes_of_type(self, node_type: NodeType) -> np.ndarray:
        node_type = NodeType.parse(node_type)
        if self.keys is None:
            raise ValueError("model has no node keys")
        return np.array([i for i, k in enumerate(self.keys) if k.node_type is node_type], dtype=np.int64)

    def copy(self) -> "EmbeddingModel":
        return EmbeddingModel(self.vectors.copy(), self.type_weights.copy(), self.keys)

    # -- persistence ----------------------------------------------------

    def save_text(self, path: PathLike) -> None:
        """Line-text form; floats at 17 significant digits so a reload is exact."""
        if self.keys is None:
            raise ValueError("cannot save a model without node keys")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(_TEXT_MAGIC + "\n")
            fh.write(f"dim\t{self.dim}\n")
            fh.write(f"nodes\t{len(self)}\n")
            fh.write("type_weights\t" + "\t".join(
                f"{t.value}={w:.17g}" for t, w in zip(DIAGNOSTIC_TYPES, self.type_weights)) + "\n")
            for i, (k, vec) in enumerate(zip(self.keys, self.vectors)):
                vals = " ".join(f"{x:.17g}" for x in vec.tolist())
                fh.write(f"{i}\t{k.node_type.value}\t{k.identity}\t{vals}\n")

    @classmethod
    def load_text(cls, path: PathLike, dtype=np.float64) -> "EmbeddingModel":
        with open(path, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
        if lines[0] != _TEXT_MAGIC:
            raise ValueError(f"{path}: not a text embedding file")
        dim = int(lines[1].split("\t")[1])
        n = int(lines[2].split("\t")[1])
        weights = {}
        for item in lines[3].split("\t")[1:]:
            t, _, w = item.partition("=")
            weights[NodeType(t)] = float(w)
        tw = np.array([weights[t] for t in DIAGNOSTIC_TYPES])
        vectors = np.empty((n, dim), dtype=dtype)
        keys = []
        for i, line in enumerate(lines[4:4 + n]):
            idx, t, rest = line.split("\t", 2)
            ident, _, vals = rest.rpartition("\t")
            if int(idx) != i:
                raise ValueError(f"{path}: row {idx} out of order")
            keys.append(NodeKey(NodeType(t), ident))
            vectors[i] = np.array(vals.split(" "), dtype=np.float64) if dim else []
        return cls(vectors, tw, keys)

    def save_binary(self, path: PathLike) -> None:
        """Header JSON + little-endian float64 rows; byte-stable for equal models."""
        if self.keys is None:
            raise ValueError("cannot save a model without node keys")
        header = json.dumps({
            "dim": self.dim,
            "nodes": len(self),
            "type_weights": [float(w) for w in self.type_weights],
            "keys": [[k.node_type.value, k.identity] for k in self.keys],
        }, separators=(",", ":")).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(_BIN_MAGIC)
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            fh.write(np.ascontiguousarray(self.vectors, dtype="<f8").tobytes())

    @classmethod
    def load_binary(cls, path: PathLike) -> "EmbeddingModel":
        with open(path, "rb") as fh:
            if fh.read(len(_BIN_MAGIC)) != _BIN_MAGIC:
                raise ValueError(f"{path}: not a binary embedding file")
            (size,) = struct.unpack("<Q", fh.read(8))
            header = json.loads(fh.read(size).decode("utf-8"))
            data = np.frombuffer(fh.read(), dtype="<f8")
        vectors = data.reshape(header["nodes"], header["dim"]).astype(np.float64)
        keys = [NodeKey(NodeType(t), ident) for t, ident in header["keys"]]
        return cls(vectors, np.array(header["type_weights"]), keys)

    @classmethod
    def load(cls, path: PathLike) -> "EmbeddingModel":
        with open(path, "rb") as fh:
            magic = fh.read(len(_BIN_MAGIC))
        return cls.load_binary(path) if magic == _BIN_MAGIC else cls.load_text(path)


def init_model(node_count: int, d: int = 128, seed=0, keys: Optional[Sequence[NodeKey]] = None,
               dtype=np.float64) -> EmbeddingModel:
    """Uniform vectors in ``[-0.5/d, 0.5/d]``; every type weight ``1/6``."""
    if node_count < 1 or d < 1:
        raise ValueError("node_count and d must be >= 1")
    rng = np.random.default_rng(seed)
    vectors = rng.uniform(-0.5 / d, 0.5 / d, size=(node_count, d)).astype(dtype)
    weights = np.full(len(DIAGNOSTIC_TYPES), 1.0 / len(DIAGNOSTIC_TYPES))
    return EmbeddingModel(vectors, weights, keys)


# ---------------------------------------------------------------- objective


def unsup_loss(model: EmbeddingModel, v: int, c: int, negatives: Sequence[int]) -> float:
    """``-log s(f(c).f(v)) - sum_l log s(-f(u_l).f(v))`` with ``s`` the logistic function."""
    E = model.vectors
    fv = E[v].astype(np.float64)
    loss = -log_sigmoid(np.dot(E[c], fv))
    negs = np.asarray(negatives, dtype=np.int64)
    if len(negs):
        loss -= log_sigmoid(-(E[negs] @ fv)).sum()
    return float(loss)


def unsup_gradients(model: EmbeddingModel, v: int, c: int, negatives: Sequence[int]):
    """Gradients of :func:`unsup_loss` with respect to ``f(v)``, ``f(c)`` and each ``f(u_l)``."""
    E = model.vectors
    fv, fc = E[v].astype(np.float64), E[c].astype(np.float64)
    negs = np.asarray(negatives, dtype=np.int64)
    fu = E[negs].astype(np.float64)
    gpos = sigmoid(fc @ fv) - 1.0
    gneg = sigmoid(fu @ fv)
    grad_v = gpos * fc + gneg @ fu
    grad_c = gpos * fv
    grad_u = gneg[:, None] * fv[None, :]
    return grad_v, grad_c, grad_u


def unsup_step(model: EmbeddingModel, v: int, c: int, negatives: Sequence[int], lr: float) -> EmbeddingModel:
    """One SGD step on :func:`unsup_loss`, in place; only ``v``, ``c`` and the negatives move."""
    if lr <= 0:
        raise ValueError("lr must be positive")
    grad_v, grad_c, grad_u = unsup_gradients(model, v, c, negatives)
    E = model.vectors
    np.add.at(E, np.asarray(negatives, dtype=np.int64), -lr * grad_u)
    E[c] -= lr * grad_c
    E[v] -= lr * grad_v
    return model

