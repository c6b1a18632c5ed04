"""Leave-one-out metrics, interpretability exports and the attention benchmark."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import numerics as nx
from .data import RESERVED, EvalInstance, UserSequence, encode_sequences
from .model import MGPT
from .mspg import attention_weights, generator_input, linear_attention, quadratic_attention
from .mspg import session_attention_weights
from .numerics import Tensor
from .training import forward_eval


@dataclass
class MetricsReport:
    hr: dict[int, float]
    ndcg: dict[int, float]
    mrr: float
    n_users: int
    per_user: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "cutoffs": sorted(self.hr),
            "hr": {str(k): v for k, v in sorted(self.hr.items())},
            "ndcg": {str(k): v for k, v in sorted(self.ndcg.items())},
            "mrr": self.mrr,
            "n_users": self.n_users,
        }


def metrics_for_rank(rank: int, cutoffs: Sequence[int]) -> tuple[dict[int, float], dict[int, float], float]:
    """HR@k, NDCG@k and reciprocal rank for one held-out item at 1-based ``rank``."""
    if rank < 1:
        raise ValueError(f"rank must be >= 1, got {rank}")
    hr = {k: 1.0 if rank <= k else 0.0 for k in cutoffs}
    ndcg = {k: 1.0 / math.log2(rank + 1) if rank <= k else 0.0 for k in cutoffs}
    return hr, ndcg, 1.0 / rank


def ground_truth_rank(scores: np.ndarray, candidates: np.ndarray) -> int:
    """1-based rank of ``candidates[0]`` under descending score, ties by ascending item index."""
    scores = np.asarray(scores)
    candidates = np.asarray(candidates)
    truth_score, truth_item = scores[0], candidates[0]
    ahead = (scores > truth_score) | ((scores == truth_score) & (candidates < truth_item))
    return int(np.sum(ahead)) + 1


def aggregate(ranks: Sequence[int], cutoffs: Sequence[int], user_ids: Sequence[str] | None = None) -> MetricsReport:
    hr = {k: 0.0 for k in cutoffs}
    ndcg = {k: 0.0 for k in cutoffs}
    rr_total = 0.0
    per_user = []
    for i, rank in enumerate(ranks):
        h, n, rr = metrics_for_rank(rank, cutoffs)
        for k in cutoffs:
            hr[k] += h[k]
            ndcg[k] += n[k]
        rr_total += rr
        if user_ids is not None:
            per_user.append({"user_id": user_ids[i], "rank": rank})
    count = max(len(ranks), 1)
    return MetricsReport(
        {k: v / count for k, v in hr.items()},
        {k: v / count for k, v in ndcg.items()},
        rr_total / count,
        len(ranks),
        per_user,
    )


def evaluate_scores(scores: Sequence[np.ndarray], instances: Sequence[EvalInstance],
                    cutoffs: Sequence[int] = (5, 10)) -> MetricsReport:
    ranks = [ground_truth_rank(s, inst.candidates) for s, inst in zip(scores, instances)]
    return aggregate(ranks, cutoffs, [inst.user_id for inst in instances])


def evaluate(model: MGPT, instances: Sequence[EvalInstance], cutoffs: Sequence[int] = (5, 10)) -> MetricsReport:
    if not instances:
        raise ValueError("no evaluation instances")
    return evaluate_scores(forward_eval(model, instances), instances, cutoffs)


def evaluate_scorer(scorer: Callable[[EvalInstance], np.ndarray], instances: Sequence[EvalInstance],
                    cutoffs: Sequence[int] = (5, 10)) -> MetricsReport:
    """Evaluate any candidate scorer, e.g. a random baseline."""
    return evaluate_scores([scorer(inst) for inst in instances], instances, cutoffs)


# ---------------------------------------------------------------------------
# interpretability


def behavior_relationship(behavior_table: Tensor | np.ndarray) -> np.ndarray:
    """Gram matrix B B^T over the real behavior rows."""
    table = behavior_table.values if isinstance(behavior_table, Tensor) else np.asarray(behavior_table)
    real = table[RESERVED:]
    return real @ real.T


def _order_inputs(model: MGPT, items, behaviors, padding_mask, order: int) -> Tensor:
    with nx.no_grad():
        out = model.forward(items, behaviors, padding_mask)
        return generator_input(out.stack.orders[order], model.tables.positional_table, padding_mask)


def global_attention_maps(model: MGPT, seqs: Sequence[UserSequence], order: int = 0) -> tuple[np.ndarray, object]:
    """Explicit (B, N, N) global attention weights for the given dependency order."""
    batch = encode_sequences(seqs, model.cfg.max_len)
    X = _order_inputs(model, batch.items, batch.behaviors, batch.padding_mask, order)
    weights = attention_weights(X, model.mspg.W_Q, model.mspg.W_K)
    return weights, batch


def attention_pattern_summary(model: MGPT, seqs: Sequence[UserSequence], order: int = 0) -> np.ndarray:
    """Mean attention mass from queries of behavior b_q onto keys of behavior b_k.

    Entry [q, k] (behaviors in vocab order) averages, over every real query
    position with behavior q, the summed weight it places on real keys with
    behavior k.
    """
    weights, batch = global_attention_maps(model, seqs, order)
    n_b = model.n_behaviors
    real = ~batch.padding_mask
    onehot = np.zeros(batch.behaviors.shape + (n_b,))
    rows, cols = np.nonzero(real & (batch.behaviors >= RESERVED))
    onehot[rows, cols, batch.behaviors[rows, cols] - RESERVED] = 1.0
    mass = np.einsum("bi,bij,bjk->bik", real.astype(float), weights, onehot)    # per query, per key behavior
    totals = np.einsum("biq,bik->qk", onehot, mass)
    counts = onehot.sum(axis=(0, 1))
    return np.divide(totals, counts[:, None], out=np.zeros_like(totals), where=counts[:, None] > 0)


def session_attention_maps(model: MGPT, seq: UserSequence, order: int = 0) -> dict[tuple[int, int, int], np.ndarray]:
    """Softmax weights keyed by (scale, session, head), each a (g, t) matrix."""
    batch = encode_sequences([seq], model.cfg.max_len)
    X = _order_inputs(model, batch.items, batch.behaviors, batch.padding_mask, order)
    N, d = model.cfg.max_len, model.cfg.d
    maps = {}
    with nx.no_grad():
        for s, (scale, params) in enumerate(zip(model.cfg.scales, model.mspg.scales)):
            t = scale.session_len
            sessions = nx.reshape(X, (1, N // t, t, d))
            key_mask = ~batch.padding_mask.reshape(1, N // t, t)
            alpha = session_attention_weights(sessions, params, key_mask).values[0]     # (ns, H, g, t)
            for i in range(alpha.shape[0]):
                for h in range(alpha.shape[1]):
                    maps[(s, i, h)] = alpha[i, h]
    return maps


def user_incidence(model: MGPT, seq: UserSequence) -> np.ndarray:
    """Raw (pre-clamp) N x N incidence matrix for one user."""
    batch = encode_sequences([seq], model.cfg.max_len)
    with nx.no_grad():
        out = model.forward_batch(batch)
    return out.stack.incidence.values[0]


def write_matrix_csv(path: str | Path, matrix: np.ndarray) -> None:
    matrix = np.atleast_2d(np.asarray(matrix))
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(range(matrix.shape[1]))
        for row in matrix:
            writer.writerow([repr(float(v)) for v in row])


def read_matrix_csv(path: str | Path) -> np.ndarray:
    with open(path) as fh:
        rows = list(csv.reader(fh))
    return np.array([[float(v) for v in row] for row in rows[1:]])


# ---------------------------------------------------------------------------
# benchmark


@dataclass
class BenchRow:
    N: int
    impl: str
    median_seconds: float
    repeats: int


def _time(fn: Callable[[], object], repeats: int) -> float:
    samples = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - start)
    return float(np.median(samples))


def benchmark_attention(d: int, lengths: Sequence[int], repeats: int = 5, seed: int = 0,
                        atol: float = 1e-9) -> list[BenchRow]:
    """Median wall-clock of the linear kernel and the explicit quadratic form per length.

    Both evaluation orders are checked to agree before anything is timed.
    """
    if list(lengths) != sorted(lengths):
        raise ValueError("lengths must be ascending")
    rng = np.random.default_rng(seed)
    W_Q, W_K, W_V = (rng.normal(0.0, 1.0 / math.sqrt(d), size=(d, d)) for _ in range(3))
    rows = []
    with nx.no_grad():
        for n in lengths:
            H = rng.normal(size=(n, d))
            lin = linear_attention(H, W_Q, W_K, W_V).values
            quad = quadratic_attention(H, W_Q, W_K, W_V).values
            if not np.allclose(lin, quad, rtol=0.0, atol=atol):
                raise AssertionError(f"linear and quadratic attention disagree at N={n}")
            rows.append(BenchRow(n, "linear", _time(lambda: linear_attention(H, W_Q, W_K, W_V), repeats), repeats))
            rows.append(BenchRow(n, "quadratic", _time(lambda: quadratic_attention(H, W_Q, W_K, W_V), repeats),
                                 repeats))
    return rows


def write_bench_csv(path: str | Path, rows: Sequence[BenchRow]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["N", "impl", "median_seconds", "repeats"])
        for r in rows:
            writer.writerow([r.N, r.impl, f"{r.median_seconds:.9f}", r.repeats])
