"""Composite loss, max-pooling prediction, the Cloze training loop and checkpoints."""

from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .config import RunConfig, TrainConfig
from .data import RESERVED, EvalInstance, MaskedBatch, UserSequence, Vocab, build_masked_batch
from .model import MGPT
from .numerics import Tensor

logger = logging.getLogger(__name__)

MAGIC = b"MGPT1"


class CheckpointError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass
class LossReport:
    total: float
    per_order: list[float]
    l1_term: float
    l2_term: float


def score_position(row, item_embedding) -> float:
    return float(np.dot(np.asarray(row, dtype=np.float64), np.asarray(item_embedding, dtype=np.float64)))


def order_loss(H_l: Tensor, rows: np.ndarray, cols: np.ndarray, labels: np.ndarray, item_table: Tensor) -> Tensor:
    """Mean full-softmax cross-entropy over masked positions.

    ``item_table`` is the full table; its PAD and MASK rows never enter the
    normaliser. ``labels`` are item indices (>= 2).
    """
    if len(labels) == 0:
        raise ValueError("order loss needs at least one masked position")
    picked = nx.getitem(H_l, (np.asarray(rows), np.asarray(cols))) if H_l.ndim == 3 \
        else nx.getitem(H_l, np.asarray(cols))
    real = nx.getitem(item_table, slice(RESERVED, None))
    logits = picked @ nx.transpose(real)
    return nx.cross_entropy(logits, np.asarray(labels) - RESERVED)


def _loss_orders(n_orders: int, mode: str) -> range:
    return range(1, n_orders) if mode == "from_1" else range(n_orders)


def total_loss(order_outputs: Sequence[Tensor], batch: MaskedBatch, incidence: Tensor, model: MGPT,
               cfg: TrainConfig) -> tuple[Tensor, LossReport]:
    rows, cols, labels = batch.flat_targets()
    table = model.tables.item_table
    per_order = [order_loss(order_outputs[l], rows, cols, labels, table)
                 for l in _loss_orders(len(order_outputs), cfg.loss_orders)]
    # PAD rows and columns of the incidence are exact zeros already
    l1 = nx.sum(nx.absolute(incidence)) * (1.0 / len(batch))
    l2 = model.l2_penalty()
    total = per_order[0]
    for term in per_order[1:]:
        total = total + term
    total = total + l1 * cfg.theta1 + l2 * cfg.theta2
    report = LossReport(total.item(), [t.item() for t in per_order], l1.item(), l2.item())
    return total, report


def predict_scores(order_outputs: Sequence[Tensor | np.ndarray], position, candidates, item_table) -> np.ndarray:
    """Max over orders of the inner product between a position and each candidate."""
    candidates = np.asarray(candidates, dtype=np.int64)
    if candidates.size == 0:
        raise ValueError("empty candidate list")
    table = item_table.values if isinstance(item_table, Tensor) else np.asarray(item_table)
    emb = table[candidates]
    per_order = []
    for H in order_outputs:
        H = H.values if isinstance(H, Tensor) else np.asarray(H)
        per_order.append(emb @ H[position])
    return np.max(np.stack(per_order), axis=0)


def rank_candidates(scores: np.ndarray, candidates) -> list[tuple[int, float]]:
    """Descending score, ties broken by ascending item index."""
    candidates = np.asarray(candidates, dtype=np.int64)
    order = np.lexsort((candidates, -scores))
    return [(int(candidates[i]), float(scores[i])) for i in order]


def predict(order_outputs, position, candidates, item_table) -> list[tuple[int, float]]:
    return rank_candidates(predict_scores(order_outputs, position, candidates, item_table), candidates)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochRecord:
    epoch: int
    total: float
    per_order: list[float]
    l1: float
    l2: float
    probe_hr: float | None = None


@dataclass
class TrainResult:
    model: MGPT
    trace: list[EpochRecord] = field(default_factory=list)


def train_step(model: MGPT, optimizer: nx.Adam, batch: MaskedBatch, cfg: TrainConfig) -> LossReport:
    with nx.recording():
        out = model.forward_batch(batch)
        loss, report = total_loss(out.orders, batch, out.stack.incidence, model, cfg)
        if not np.isfinite(report.total):
            raise TrainingError("non-finite loss")
        nx.backward(loss)
    optimizer.step()
    return report


def train(sequences: Sequence[UserSequence], model: MGPT, cfg: TrainConfig, target: int,
          probe: Callable[[MGPT], float] | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Shuffled mini-batch Cloze training; one mask draw per batch per epoch."""
    cfg.validate()
    sequences = [s for s in sequences if s.recent(model.cfg.max_len).target_positions(target).size]
    if not sequences:
        raise TrainingError("no training sequence contains a target-behavior event")
    rng = np.random.default_rng(cfg.seed)
    optimizer = nx.Adam(model.trainable(), lr=cfg.lr, frozen_rows=model.frozen_rows())
    result = TrainResult(model)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(sequences))
        reports = []
        for b, start in enumerate(range(0, len(order), cfg.batch_size)):
            chunk = [sequences[i] for i in order[start:start + cfg.batch_size]]
            batch = build_masked_batch(chunk, model.cfg.max_len, cfg.rho, target, rng)
            try:
                reports.append(train_step(model, optimizer, batch, cfg))
            except (TrainingError, FloatingPointError) as exc:
                raise TrainingError(f"epoch {epoch}, batch {b}: {exc}") from exc
        record = EpochRecord(
            epoch,
            float(np.mean([r.total for r in reports])),
            [float(v) for v in np.mean([r.per_order for r in reports], axis=0)],
            float(np.mean([r.l1_term for r in reports])),
            float(np.mean([r.l2_term for r in reports])),
            probe(model) if probe is not None else None,
        )
        result.trace.append(record)
        logger.info("epoch %d loss %.6f probe %s", epoch, record.total, record.probe_hr)
        if on_epoch is not None:
            on_epoch(record)
    return result


def forward_eval(model: MGPT, instances: Sequence[EvalInstance], batch_size: int = 256) -> list[np.ndarray]:
    """Per-instance candidate scores (max over orders), without recording a tape."""
    from .data import collate_eval

    scores = []
    table = model.tables.item_table.values
    with nx.no_grad():
        for start in range(0, len(instances), batch_size):
            chunk = instances[start:start + batch_size]
            batch = collate_eval(chunk)
            out = model.forward_batch(batch)
            stacked = np.stack([H.values for H in out.orders])            # (L+1, B, N, d)
            for r, inst in enumerate(chunk):
                reps = stacked[:, r, inst.position, :]                       # (L+1, d)
                scores.append(np.max(reps @ table[inst.candidates].T, axis=0))
    return scores


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, model: MGPT, vocab: Vocab, config: RunConfig, seed: int,
                    target_behavior: str) -> None:
    """MGPT1 container: magic, u64 header length, JSON header, raw float64 tensors."""
    state = model.state_dict()
    index, offset = [], 0
    for name, values in state.items():
        index.append({"name": name, "shape": list(values.shape), "offset": offset})
        offset += values.size * 8
    header = json.dumps({
        "config": config.to_dict(),
        "vocab": vocab.to_dict(),
        "seed": seed,
        "target_behavior": target_behavior,
        "gcn_w_mode": model.gcn.mode,
        "tensors": index,
    }, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for values in state.values():
            fh.write(np.ascontiguousarray(values, dtype="<f8").tobytes())


@dataclass
class Checkpoint:
    model: MGPT
    vocab: Vocab
    config: RunConfig
    seed: int
    target_behavior: str

    @property
    def target_index(self) -> int:
        return self.vocab.behavior_index(self.target_behavior)


def load_checkpoint(path: str | Path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not an MGPT1 checkpoint (bad magic {raw[:len(MAGIC)]!r})")
    pos = len(MAGIC)
    (size,) = struct.unpack("<Q", raw[pos:pos + 8])
    pos += 8
    header = json.loads(raw[pos:pos + size].decode("utf-8"))
    pos += size
    config = RunConfig.from_dict(header["config"])
    vocab = Vocab.from_dict(header["vocab"])
    model = MGPT(config.model, vocab.n_items, vocab.n_behaviors, header["seed"])
    state = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = pos + entry["offset"]
        state[entry["name"]] = np.frombuffer(raw, dtype="<f8", count=count, offset=start).reshape(entry["shape"])
    model.load_state_dict(state)
    return Checkpoint(model, vocab, config, header["seed"], header["target_behavior"])
