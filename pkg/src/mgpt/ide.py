"""Interaction-level dependency extraction.

Interaction embeddings are item plus behavior vectors. The incidence matrix
couples two interactions through the inner product of their item-wise and
behavior-wise element products, and graph convolution over it yields one
representation per dependency order.

All functions accept a leading batch axis: ``(..., N)`` indices and
``(..., N, d)`` representations.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .config import ConfigError
from .numerics import Tensor

DEGREE_FLOOR = 1e-8


@dataclass
class EmbeddingTables:
    item_table: Tensor
    behavior_table: Tensor
    positional_table: Tensor

    @property
    def dim(self) -> int:
        return self.item_table.shape[1]


@dataclass
class GcnWeights:
    mode: str
    W: Tensor

    @classmethod
    def create(cls, mode: str, d: int, rng: np.random.Generator) -> "GcnWeights":
        if mode == "identity":
            return cls(mode, Tensor(np.eye(d), name="gcn.W"))
        if mode == "orthogonal":
            q, r = np.linalg.qr(rng.standard_normal((d, d)))
            return cls(mode, Tensor(q * np.sign(np.diag(r)), name="gcn.W"))
        if mode == "trainable":
            return cls(mode, Tensor(np.eye(d), requires_grad=True, name="gcn.W"))
        raise ConfigError(f"unknown gcn_w_mode {mode!r}")

    @property
    def trainable(self) -> bool:
        return self.mode == "trainable"


@dataclass
class DependencyStack:
    orders: list[Tensor]
    incidence: Tensor

    @property
    def depth(self) -> int:
        return len(self.orders) - 1


def lookup(items, behaviors, tables: EmbeddingTables) -> tuple[Tensor, Tensor]:
    return nx.take_rows(tables.item_table, items), nx.take_rows(tables.behavior_table, behaviors)


def embed_interactions(items, behaviors, tables: EmbeddingTables) -> Tensor:
    item_vecs, behavior_vecs = lookup(items, behaviors, tables)
    return item_vecs + behavior_vecs


def _keep(padding_mask) -> np.ndarray:
    return (~np.asarray(padding_mask, dtype=bool)).astype(np.float64)


def incidence_from_embeddings(item_vecs: Tensor, behavior_vecs: Tensor, padding_mask) -> Tensor:
    # sum_k e_i[k] e_j[k] b_i[k] b_j[k] == <e_i*b_i, e_j*b_j>
    joint = item_vecs * behavior_vecs * _keep(padding_mask)[..., None]
    gram = joint @ nx.transpose(joint)
    # averaging with the transpose makes symmetry exact regardless of BLAS
    return (gram + nx.transpose(gram)) * 0.5


def build_incidence(items, behaviors, tables: EmbeddingTables, padding_mask) -> Tensor:
    item_vecs, behavior_vecs = lookup(items, behaviors, tables)
    return incidence_from_embeddings(item_vecs, behavior_vecs, padding_mask)


def propagation_matrix(A: Tensor) -> Tensor:
    """I + D^-1/2 A+ D^-1/2 with A+ = max(A, 0) and a floored degree."""
    positive = nx.clamp_min(A, 0.0)
    degree = nx.clamp_min(nx.sum(positive, axis=-1), DEGREE_FLOOR)
    inv_sqrt = nx.power(degree, -0.5)
    normed = positive * nx.expand_dims(inv_sqrt, -1) * nx.expand_dims(inv_sqrt, -2)
    return normed + np.eye(A.shape[-1])


def graph_convolve(H0: Tensor, A: Tensor, orders: int, W: GcnWeights | Tensor, padding_mask=None) -> DependencyStack:
    if orders < 1:
        raise ValueError("graph convolution needs at least one propagated order")
    weight = W.W if isinstance(W, GcnWeights) else nx.as_tensor(W)
    P = propagation_matrix(A)
    keep = None if padding_mask is None else _keep(padding_mask)[..., None]
    out = [H0]
    H = H0
    for _ in range(orders):
        H = nx.leaky_relu(P @ H @ weight)
        if keep is not None:
            H = H * keep
        out.append(H)
    return DependencyStack(out, A)
