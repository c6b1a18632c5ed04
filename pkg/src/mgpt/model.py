"""The assembled model: embedding tables, dependency extractor and pattern generator."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import numerics as nx
from .config import ModelConfig
from .data import MASK, PAD, RESERVED, MaskedBatch
from .ide import DependencyStack, EmbeddingTables, GcnWeights, graph_convolve, incidence_from_embeddings, lookup
from .mspg import MspgParams, init_mspg_params, mspg_forward
from .numerics import Tensor


@dataclass
class ForwardOutput:
    orders: list[Tensor]         # per-order (B, N, d) representations
    stack: DependencyStack


class MGPT:
    """Parameters plus the forward pass over a :class:`MaskedBatch`.

    Row 0 (PAD) of the item and behavior tables is frozen at zero.
    """

    def __init__(self, cfg: ModelConfig, n_items: int, n_behaviors: int, seed: int = 0):
        cfg.validate()
        self.cfg = cfg
        self.n_items = n_items
        self.n_behaviors = n_behaviors
        rng = np.random.default_rng(seed)
        d = cfg.d

        def table(rows: int, name: str, frozen_pad: bool) -> Tensor:
            values = rng.normal(0.0, cfg.init_std, size=(rows, d))
            if frozen_pad:
                values[PAD] = 0.0
            return Tensor(values, requires_grad=True, name=name)

        self.tables = EmbeddingTables(
            table(n_items + RESERVED, "emb.item", True),
            table(n_behaviors + RESERVED, "emb.behavior", True),
            table(cfg.max_len, "emb.position", False),
        )
        self.gcn = GcnWeights.create(cfg.gcn_w_mode, d, rng)
        self.mspg: MspgParams = init_mspg_params(cfg, rng)

    # -- parameter bookkeeping -------------------------------------------------

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        yield "emb.item", self.tables.item_table
        yield "emb.behavior", self.tables.behavior_table
        yield "emb.position", self.tables.positional_table
        yield "gcn.W", self.gcn.W
        yield from self.mspg.named_tensors()

    def trainable(self) -> list[Tensor]:
        return [t for name, t in self.named_parameters() if t.requires_grad]

    def frozen_rows(self) -> dict[int, list[int]]:
        return {id(self.tables.item_table): [PAD], id(self.tables.behavior_table): [PAD]}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.values.copy() for name, t in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for name, t in self.named_parameters():
            values = np.asarray(state[name], dtype=np.float64)
            if values.shape != t.shape:
                raise ValueError(f"parameter {name}: shape {values.shape} != expected {t.shape}")
            t.values = values.copy()
            t.zero_grad()

    def l2_penalty(self) -> Tensor:
        terms = []
        for t in self.trainable():
            if t is self.tables.item_table or t is self.tables.behavior_table:
                terms.append(nx.sum(nx.getitem(t, slice(RESERVED - 1, None)) * nx.getitem(t, slice(RESERVED - 1, None))))
            else:
                terms.append(nx.sum(t * t))
        total = terms[0]
        for term in terms[1:]:
            total = total + term
        return total

    # -- forward ---------------------------------------------------------------

    def forward(self, items: np.ndarray, behaviors: np.ndarray, padding_mask: np.ndarray) -> ForwardOutput:
        items = np.asarray(items)
        behaviors = np.asarray(behaviors)
        if items.shape[-1] != self.cfg.max_len:
            raise ValueError(f"batch length {items.shape[-1]} != model max_len {self.cfg.max_len}")
        item_vecs, behavior_vecs = lookup(items, behaviors, self.tables)
        H0 = item_vecs + behavior_vecs
        A = incidence_from_embeddings(item_vecs, behavior_vecs, padding_mask)
        stack = graph_convolve(H0, A, self.cfg.orders, self.gcn, padding_mask)
        outputs = mspg_forward(stack, self.mspg, self.cfg.scales, self.cfg.lp_exponent,
                               self.tables.positional_table, padding_mask)
        return ForwardOutput(outputs, stack)

    def forward_batch(self, batch: MaskedBatch) -> ForwardOutput:
        return self.forward(batch.items, batch.behaviors, batch.padding_mask)

    def candidate_table(self) -> Tensor:
        """Embeddings of real items (MASK and PAD excluded), row k is item index k + 2."""
        return nx.getitem(self.tables.item_table, slice(MASK + 1, None))
