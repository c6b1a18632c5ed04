"""Multifaceted sequential pattern generator.

Each dependency order goes through the same pipeline: positional injection,
linear global attention, multi-grained session attention at two time scales,
a fusion projection over the three views, and post-norm transformer layers.
Parameters are shared across orders, so the orders are stacked on a leading
axis and processed in one pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from . import numerics as nx
from .config import ConfigError, ModelConfig, ScaleConfig
from .ide import DependencyStack
from .numerics import Tensor

NORM_FLOOR = 1e-12


@dataclass
class ScaleParams:
    queries: list[Tensor]     # queries[m-1] has shape (m*d, d)
    head_q: Tensor            # (H, d, d)
    head_k: Tensor            # (H, d, d)
    head_v: Tensor            # (H, d, d/H)

    @property
    def granularity(self) -> int:
        return len(self.queries)

    @property
    def heads(self) -> int:
        return self.head_q.shape[0]


@dataclass
class LayerParams:
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor
    gain: Tensor
    bias: Tensor


@dataclass
class MspgParams:
    W_Q: Tensor
    W_K: Tensor
    W_V: Tensor
    scales: list[ScaleParams]
    W_d: Tensor
    layers: list[LayerParams] = field(default_factory=list)

    def named_tensors(self) -> Iterator[tuple[str, Tensor]]:
        yield "lin.W_Q", self.W_Q
        yield "lin.W_K", self.W_K
        yield "lin.W_V", self.W_V
        for s, sp in enumerate(self.scales):
            for m, q in enumerate(sp.queries, start=1):
                yield f"scale{s}.W_q{m}", q
            yield f"scale{s}.head_q", sp.head_q
            yield f"scale{s}.head_k", sp.head_k
            yield f"scale{s}.head_v", sp.head_v
        yield "fuse.W_d", self.W_d
        for n, lp in enumerate(self.layers):
            for attr in ("W1", "b1", "W2", "b2", "gain", "bias"):
                yield f"layer{n}.{attr}", getattr(lp, attr)


def _param(values: np.ndarray, name: str) -> Tensor:
    return Tensor(values, requires_grad=True, name=name)


def _dense(rng: np.random.Generator, fan_in: int, *shape: int) -> np.ndarray:
    return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)


def init_mspg_params(cfg: ModelConfig, rng: np.random.Generator) -> MspgParams:
    d, H, N = cfg.d, cfg.heads, cfg.max_len
    scales = []
    for s, sc in enumerate(cfg.scales):
        scales.append(ScaleParams(
            [_param(_dense(rng, m * d, m * d, d), f"scale{s}.W_q{m}") for m in range(1, sc.granularity + 1)],
            _param(_dense(rng, d, H, d, d), f"scale{s}.head_q"),
            _param(_dense(rng, d, H, d, d), f"scale{s}.head_k"),
            _param(_dense(rng, d, H, d, d // H), f"scale{s}.head_v"),
        ))
    # start the fusion as an average of the three views
    W_d = np.vstack([np.eye(N)] * 3) / 3.0
    layers = []
    for n in range(cfg.n_layers):
        h = cfg.hidden
        layers.append(LayerParams(
            _param(_dense(rng, d, d, h), f"layer{n}.W1"), _param(np.zeros(h), f"layer{n}.b1"),
            _param(_dense(rng, h, h, d), f"layer{n}.W2"), _param(np.zeros(d), f"layer{n}.b2"),
            _param(np.ones(d), f"layer{n}.gain"), _param(np.zeros(d), f"layer{n}.bias"),
        ))
    return MspgParams(
        _param(_dense(rng, d, d, d), "lin.W_Q"),
        _param(_dense(rng, d, d, d), "lin.W_K"),
        _param(_dense(rng, d, d, d), "lin.W_V"),
        scales, _param(W_d, "fuse.W_d"), layers,
    )


def inject_positions(H, positional_table) -> Tensor:
    return nx.add(H, positional_table)


# ---------------------------------------------------------------------------
# global linear attention


def normalized_query_key(H, W_Q, W_K) -> tuple[Tensor, Tensor]:
    """Row-normalised queries and column-normalised keys, each scaled by 1/sqrt(d)."""
    d = H.shape[-1]
    q = nx.l2_normalize(nx.elu(H @ W_Q), axis=-1, scale=math.sqrt(d), floor=NORM_FLOOR)
    k = nx.l2_normalize(nx.elu(H @ W_K), axis=-2, scale=math.sqrt(d), floor=NORM_FLOOR)
    return q, k


def linear_attention(H, W_Q, W_K, W_V) -> Tensor:
    """Q' (K'^T V): the key-value summary is formed first, so cost is linear in N."""
    H = nx.as_tensor(H)
    q, k = normalized_query_key(H, W_Q, W_K)
    return q @ (nx.transpose(k) @ (H @ W_V))


def quadratic_attention(H, W_Q, W_K, W_V) -> Tensor:
    """(Q' K'^T) V: same value as :func:`linear_attention`, with explicit N x N weights."""
    H = nx.as_tensor(H)
    q, k = normalized_query_key(H, W_Q, W_K)
    return (q @ nx.transpose(k)) @ (H @ W_V)


def attention_weights(H, W_Q, W_K) -> np.ndarray:
    with nx.no_grad():
        q, k = normalized_query_key(nx.as_tensor(H), W_Q, W_K)
        return (q @ nx.transpose(k)).values


# ---------------------------------------------------------------------------
# multi-grained session attention


def multi_grained_queries(session, queries: Sequence[Tensor]) -> Tensor:
    """Stack Q_m = concat(h_{t-1}, ..., h_{t-m}) W_qm for m = 1..g into (..., g, d)."""
    session = nx.as_tensor(session)
    t, d = session.shape[-2:]
    g = len(queries)
    if g > t:
        raise ConfigError(f"granularity exceeds session length ({g} > {t})")
    out = []
    for m, W in enumerate(queries, start=1):
        recent = nx.getitem(session, (Ellipsis, np.arange(t - 1, t - m - 1, -1), slice(None)))
        flat = nx.reshape(recent, recent.shape[:-2] + (1, m * d))
        out.append(flat @ W)
    return nx.concat(out, axis=-2)


def session_attention_weights(session, params: ScaleParams, key_mask=None) -> Tensor:
    """Per-head softmax weights of every grain over the session keys, shape (..., H, g, t)."""
    session = nx.as_tensor(session)
    d = session.shape[-1]
    Q = multi_grained_queries(session, params.queries)
    qh = nx.expand_dims(Q, -3) @ params.head_q
    kh = nx.expand_dims(session, -3) @ params.head_k
    scores = (qh @ nx.transpose(kh)) * (1.0 / math.sqrt(d))
    mask = None
    if key_mask is not None:
        mask = np.asarray(key_mask, dtype=bool)[..., None, None, :]
    return nx.softmax_rows(scores, mask)


def multi_grained_session_attention(session, params: ScaleParams, lp_exponent: float,
                                    session_positions, key_mask=None) -> Tensor:
    """Pooled multi-grained attention over one or more sessions of length t.

    ``key_mask`` is True at real (non-PAD) keys. Each head's pooled weight
    for key j scales row j of that head's value projection.
    """
    session = nx.as_tensor(session)
    t, d = session.shape[-2:]
    alpha = session_attention_weights(session, params, key_mask)
    pooled = nx.lp_pool(alpha, lp_exponent, axis=-2)                     # (..., H, t)
    values = nx.expand_dims(session, -3) @ params.head_v                  # (..., H, t, d/H)
    weighted = nx.expand_dims(pooled, -1) * values
    heads = nx.transpose(weighted, (-3, -2))                              # (..., t, H, d/H)
    merged = nx.reshape(heads, heads.shape[:-2] + (d,))
    return merged + nx.mean(session_positions, axis=-2, keepdims=True)


def _sessions(x: Tensor | np.ndarray, t: int):
    n, d = x.shape[-2:]
    if n % t:
        raise ConfigError(f"session length {t} does not divide sequence length {n}")
    return x.shape[:-2] + (n // t, t, d)


def scale_pass(H, scale: ScaleConfig, params: ScaleParams, lp_exponent: float,
               positional_table, padding_mask=None) -> Tensor:
    H = nx.as_tensor(H)
    t = scale.session_len
    n, d = H.shape[-2:]
    sessions = nx.reshape(H, _sessions(H, t))
    positions = nx.reshape(positional_table, (n // t, t, d))
    key_mask = None
    if padding_mask is not None:
        pad = np.asarray(padding_mask, dtype=bool)
        key_mask = ~pad.reshape(pad.shape[:-1] + (n // t, t))
    out = multi_grained_session_attention(sessions, params, lp_exponent, positions, key_mask)
    return nx.reshape(out, H.shape)


# ---------------------------------------------------------------------------
# fusion and transformer layer


def fuse(H_lin, S1, S2, W_d) -> Tensor:
    stacked = nx.concat([H_lin, S1, S2], axis=-2)
    return nx.transpose(nx.as_tensor(W_d)) @ stacked


def feed_forward(X, layer: LayerParams) -> Tensor:
    return nx.gelu(X @ layer.W1 + layer.b1) @ layer.W2 + layer.b2


def transformer_layer(X, layer: LayerParams) -> Tensor:
    X = nx.as_tensor(X)
    return nx.layer_norm(X + feed_forward(X, layer), layer.gain, layer.bias)


def _zero_pad(x: Tensor, keep) -> Tensor:
    return x if keep is None else x * keep


def generator_input(H, positional_table, padding_mask=None) -> Tensor:
    """Position-injected representations with PAD rows zeroed."""
    X = inject_positions(H, positional_table)
    if padding_mask is None:
        return X
    return X * (~np.asarray(padding_mask, dtype=bool)).astype(np.float64)[..., None]


def mspg_forward(stack: DependencyStack | Sequence[Tensor], params: MspgParams, scales: Sequence[ScaleConfig],
                 lp_exponent: float, positional_table, padding_mask=None) -> list[Tensor]:
    """Run every order of the stack through the shared generator."""
    orders = stack.orders if isinstance(stack, DependencyStack) else list(stack)
    if not orders:
        raise ValueError("empty dependency stack")
    X = nx.stack(orders, axis=0)
    keep = None
    if padding_mask is not None:
        keep = (~np.asarray(padding_mask, dtype=bool)).astype(np.float64)[..., None]
    X = generator_input(X, positional_table, padding_mask)
    H_lin = _zero_pad(linear_attention(X, params.W_Q, params.W_K, params.W_V), keep)
    views = [
        _zero_pad(scale_pass(X, sc, sp, lp_exponent, positional_table, padding_mask), keep)
        for sc, sp in zip(scales, params.scales)
    ]
    out = _zero_pad(fuse(H_lin, views[0], views[1], params.W_d), keep)
    for layer in params.layers:
        out = _zero_pad(transformer_layer(out, layer), keep)
    return [nx.getitem(out, l) for l in range(len(orders))]
