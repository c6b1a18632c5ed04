"""Interaction logs, vocabularies, Cloze-masked batches and leave-one-out instances."""

from __future__ import annotations

import csv
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .config import ConfigError

logger = logging.getLogger(__name__)

PAD = 0
MASK = 1
RESERVED = 2

DEFAULT_SCHEMA = ("user", "item", "behavior", "timestamp")
TAOBAO_BEHAVIORS = ("pv", "fav", "cart", "buy")


class DataError(ValueError):
    pass


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    behavior: str
    timestamp: int


def _natural_key(token: str):
    """Digit runs compare numerically: i2 < i10."""
    parts = re.split(r"(\d+)", token)
    return [(0, int(p), p) if p.isdigit() else (1, 0, p) for p in parts], token


@dataclass
class Vocab:
    item_to_index: dict[str, int]
    behavior_to_index: dict[str, int]

    @classmethod
    def build(cls, items: Iterable[str], behaviors: Sequence[str]) -> "Vocab":
        ordered = sorted(set(items), key=_natural_key)
        return cls(
            {tok: i + RESERVED for i, tok in enumerate(ordered)},
            {tok: i + RESERVED for i, tok in enumerate(behaviors)},
        )

    @property
    def n_items(self) -> int:
        return len(self.item_to_index)

    @property
    def n_behaviors(self) -> int:
        return len(self.behavior_to_index)

    @property
    def item_indices(self) -> np.ndarray:
        return np.arange(RESERVED, RESERVED + self.n_items)

    @property
    def behaviors(self) -> list[str]:
        return sorted(self.behavior_to_index, key=self.behavior_to_index.get)

    def item_token(self, index: int) -> str:
        return self._index_to_item()[index]

    def behavior_token(self, index: int) -> str:
        return self.behaviors[index - RESERVED]

    def _index_to_item(self) -> dict[int, str]:
        return {i: tok for tok, i in self.item_to_index.items()}

    def behavior_index(self, label: str) -> int:
        try:
            return self.behavior_to_index[label]
        except KeyError:
            raise DataError(f"behavior {label!r} not in vocabulary {self.behaviors}") from None

    def write(self, directory: Path) -> None:
        for name, mapping in (("items", self.item_to_index), ("behaviors", self.behavior_to_index)):
            with open(directory / f"{name}.vocab.tsv", "w", newline="") as fh:
                for tok, idx in sorted(mapping.items(), key=lambda kv: kv[1]):
                    fh.write(f"{tok}\t{idx}\n")

    @classmethod
    def read(cls, directory: Path) -> "Vocab":
        maps = []
        for name in ("items", "behaviors"):
            mapping = {}
            with open(directory / f"{name}.vocab.tsv") as fh:
                for line in fh:
                    tok, idx = line.rstrip("\n").split("\t")
                    mapping[tok] = int(idx)
            maps.append(mapping)
        return cls(*maps)

    def to_dict(self) -> dict:
        return {"items": self.item_to_index, "behaviors": self.behavior_to_index}

    @classmethod
    def from_dict(cls, raw: dict) -> "Vocab":
        return cls(dict(raw["items"]), dict(raw["behaviors"]))


@dataclass
class UserSequence:
    user_id: str
    items: np.ndarray
    behaviors: np.ndarray

    def __post_init__(self):
        self.items = np.asarray(self.items, dtype=np.int64)
        self.behaviors = np.asarray(self.behaviors, dtype=np.int64)
        if self.items.shape != self.behaviors.shape or self.items.size < 1:
            raise DataError(f"user {self.user_id}: sequence must be non-empty with aligned channels")

    def __len__(self) -> int:
        return int(self.items.size)

    def recent(self, n: int) -> "UserSequence":
        return UserSequence(self.user_id, self.items[-n:], self.behaviors[-n:])

    def target_positions(self, target: int) -> np.ndarray:
        return np.flatnonzero(self.behaviors == target)


@dataclass
class MaskedBatch:
    """Left-padded, masked rows. ``padding_mask`` is True at PAD slots."""

    items: np.ndarray
    behaviors: np.ndarray
    mask_positions: list[np.ndarray]
    labels: list[np.ndarray]
    padding_mask: np.ndarray
    user_ids: list[str] = field(default_factory=list)
    excluded: int = 0

    def __len__(self) -> int:
        return int(self.items.shape[0])

    @property
    def max_len(self) -> int:
        return int(self.items.shape[1])

    def flat_targets(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(row, column, label) triples for every masked position."""
        rows = np.concatenate([np.full(len(p), r, dtype=np.int64) for r, p in enumerate(self.mask_positions)]
                              or [np.zeros(0, np.int64)])
        cols = np.concatenate(self.mask_positions or [np.zeros(0, np.int64)]).astype(np.int64)
        labels = np.concatenate(self.labels or [np.zeros(0, np.int64)]).astype(np.int64)
        return rows, cols, labels


@dataclass
class EvalInstance:
    user_id: str
    items: np.ndarray
    behaviors: np.ndarray
    position: int
    label: int
    candidates: np.ndarray


# ---------------------------------------------------------------------------
# ingestion


def read_interactions(path: str | Path, schema: Sequence[str] = DEFAULT_SCHEMA, header: bool = False,
                      behaviors: Sequence[str] | None = None) -> list[Interaction]:
    path = Path(path)
    if set(schema) != set(DEFAULT_SCHEMA) or len(schema) != len(DEFAULT_SCHEMA):
        raise DataError(f"schema must name the columns {DEFAULT_SCHEMA} in file order, got {tuple(schema)}")
    col = {name: i for i, name in enumerate(schema)}
    declared = set(behaviors) if behaviors is not None else None
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if header and lineno == 1:
                continue
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != len(schema):
                raise DataError(f"{path}:{lineno}: expected {len(schema)} tab-separated columns, got {len(parts)}")
            behavior = parts[col["behavior"]]
            if declared is not None and behavior not in declared:
                raise DataError(f"{path}:{lineno}: unknown behavior {behavior!r} (declared {sorted(declared)})")
            try:
                ts = int(parts[col["timestamp"]])
            except ValueError:
                raise DataError(f"{path}:{lineno}: unparseable timestamp {parts[col['timestamp']]!r}") from None
            if ts < 0:
                raise DataError(f"{path}:{lineno}: negative timestamp {ts}")
            rows.append(Interaction(parts[col["user"]], parts[col["item"]], behavior, ts))
    if not rows:
        raise DataError(f"{path}: no interactions")
    return rows


def sequences_from_interactions(rows: Sequence[Interaction], max_len: int | None = None,
                                behaviors: Sequence[str] | None = None) -> tuple[Vocab, list[UserSequence]]:
    if behaviors is None:
        behaviors = sorted({r.behavior for r in rows}, key=_natural_key)
    vocab = Vocab.build((r.item_id for r in rows), behaviors)
    per_user: dict[str, list[tuple[int, int, Interaction]]] = {}
    for order, r in enumerate(rows):
        per_user.setdefault(r.user_id, []).append((r.timestamp, order, r))
    seqs = []
    for user in sorted(per_user, key=_natural_key):
        events = [r for _, _, r in sorted(per_user[user], key=lambda e: (e[0], e[1]))]
        if max_len is not None:
            events = events[-max_len:]
        seqs.append(UserSequence(
            user,
            [vocab.item_to_index[e.item_id] for e in events],
            [vocab.behavior_to_index[e.behavior] for e in events],
        ))
    return vocab, seqs


def ingest(path: str | Path, schema: Sequence[str] = DEFAULT_SCHEMA, target_behavior: str = "buy",
           max_len: int | None = None, behaviors: Sequence[str] | None = None,
           header: bool = False) -> tuple[Vocab, list[UserSequence]]:
    """Read a TSV log into a vocabulary and one time-ordered sequence per user.

    Rows are stably sorted by timestamp, so ties keep file order. Sequences
    longer than ``max_len`` keep their most recent events.
    """
    rows = read_interactions(path, schema, header, behaviors)
    vocab, seqs = sequences_from_interactions(rows, max_len, behaviors)
    vocab.behavior_index(target_behavior)
    return vocab, seqs


def dataset_stats(vocab: Vocab, seqs: Sequence[UserSequence]) -> dict:
    return {
        "users": len(seqs),
        "items": vocab.n_items,
        "interactions": int(np.sum([len(s) for s in seqs])),
        "behavior_types": vocab.behaviors,
    }


def write_processed(directory: str | Path, vocab: Vocab, seqs: Sequence[UserSequence],
                    target_behavior: str) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    vocab.write(directory)
    with open(directory / "sequences.tsv", "w", newline="") as fh:
        for s in seqs:
            events = ",".join(f"{i}:{b}" for i, b in zip(s.items.tolist(), s.behaviors.tolist()))
            fh.write(f"{s.user_id}\t{events}\n")
    meta = {"target_behavior": target_behavior, **dataset_stats(vocab, seqs)}
    (directory / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_processed(directory: str | Path) -> tuple[Vocab, list[UserSequence], str]:
    directory = Path(directory)
    vocab = Vocab.read(directory)
    seqs = []
    with open(directory / "sequences.tsv") as fh:
        for line in fh:
            user, events = line.rstrip("\n").split("\t")
            pairs = [tuple(map(int, ev.split(":"))) for ev in events.split(",")]
            seqs.append(UserSequence(user, [p[0] for p in pairs], [p[1] for p in pairs]))
    meta = json.loads((directory / "dataset.json").read_text())
    return vocab, seqs, meta["target_behavior"]


def write_interactions(path: str | Path, rows: Iterable[Interaction]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        for r in rows:
            writer.writerow([r.user_id, r.item_id, r.behavior, r.timestamp])


# ---------------------------------------------------------------------------
# batches


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def _pad_left(values: np.ndarray, n: int) -> np.ndarray:
    out = np.full(n, PAD, dtype=np.int64)
    out[n - len(values):] = values
    return out


def build_masked_batch(seqs: Sequence[UserSequence], max_len: int, rho: float, target: int,
                       rng_seed=0) -> MaskedBatch:
    """Cloze-mask target-behavior events, each independently with probability ``rho``.

    A row whose draws select nothing gets its most recent target event masked.
    Sequences without any target event are dropped and counted in ``excluded``.
    """
    if not 0.0 < rho <= 1.0:
        raise ConfigError(f"mask ratio rho must lie in (0, 1], got {rho}")
    rng = _rng(rng_seed)
    items, behaviors, positions, labels, pads, users = [], [], [], [], [], []
    excluded = 0
    for seq in seqs:
        seq = seq.recent(max_len)
        targets = seq.target_positions(target)
        if targets.size == 0:
            excluded += 1
            continue
        chosen = targets[rng.random(targets.size) < rho]
        if chosen.size == 0:
            chosen = targets[-1:]
        offset = max_len - len(seq)
        row_items = _pad_left(seq.items, max_len)
        row_behaviors = _pad_left(seq.behaviors, max_len)
        labels.append(seq.items[chosen].copy())
        positions.append(chosen + offset)
        row_items[chosen + offset] = MASK
        row_behaviors[chosen + offset] = MASK
        items.append(row_items)
        behaviors.append(row_behaviors)
        pad = np.zeros(max_len, dtype=bool)
        pad[:offset] = True
        pads.append(pad)
        users.append(seq.user_id)
    if excluded:
        logger.warning("excluded %d sequence(s) without a target-behavior event", excluded)
    shape = (len(items), max_len)
    return MaskedBatch(
        np.array(items, dtype=np.int64).reshape(shape),
        np.array(behaviors, dtype=np.int64).reshape(shape),
        positions, labels,
        np.array(pads, dtype=bool).reshape(shape),
        users, excluded,
    )


def encode_sequences(seqs: Sequence[UserSequence], max_len: int) -> MaskedBatch:
    """Left-padded rows with no masked positions."""
    rows = [s.recent(max_len) for s in seqs]
    items = np.stack([_pad_left(s.items, max_len) for s in rows])
    behaviors = np.stack([_pad_left(s.behaviors, max_len) for s in rows])
    empty = [np.zeros(0, dtype=np.int64) for _ in rows]
    return MaskedBatch(items, behaviors, empty, list(empty), items == PAD, [s.user_id for s in rows])


def item_popularity(seqs: Sequence[UserSequence], vocab: Vocab) -> np.ndarray:
    """Interaction counts per real item, aligned with ``vocab.item_indices``."""
    counts = np.zeros(vocab.n_items, dtype=np.float64)
    for s in seqs:
        np.add.at(counts, s.items[s.items >= RESERVED] - RESERVED, 1.0)
    return counts


def build_eval_instance(seq: UserSequence, vocab: Vocab, max_len: int, target: int, num_negatives: int,
                        sampling: str = "uniform", rng_seed=0, popularity: np.ndarray | None = None,
                        exclude_history: bool = False) -> EvalInstance:
    """Hold out the last target-behavior event and draw negative candidates.

    Candidates are the ground truth followed by ``num_negatives`` distinct
    items other than it.
    """
    if num_negatives >= vocab.n_items:
        raise DataError(f"num_negatives={num_negatives} must be smaller than the item count {vocab.n_items}")
    seq = seq.recent(max_len)
    targets = seq.target_positions(target)
    if targets.size == 0:
        raise DataError(f"user {seq.user_id} has no target-behavior event")
    last = int(targets[-1])
    label = int(seq.items[last])
    offset = max_len - len(seq)
    items = _pad_left(seq.items, max_len)
    behaviors = _pad_left(seq.behaviors, max_len)
    items[last + offset] = MASK
    behaviors[last + offset] = MASK

    pool = vocab.item_indices
    banned = {label}
    if exclude_history:
        banned.update(int(i) for i in seq.items)
    keep = np.array([i not in banned for i in pool.tolist()])
    pool = pool[keep]
    if pool.size < num_negatives:
        raise DataError(f"user {seq.user_id}: only {pool.size} items available for {num_negatives} negatives")
    rng = _rng(rng_seed)
    if sampling == "uniform":
        negatives = rng.choice(pool, size=num_negatives, replace=False)
    elif sampling == "popularity":
        if popularity is None:
            raise DataError("popularity sampling needs item counts")
        weights = popularity[pool - RESERVED] + 1e-12
        negatives = rng.choice(pool, size=num_negatives, replace=False, p=weights / weights.sum())
    else:
        raise DataError(f"unknown sampling scheme {sampling!r}")
    candidates = np.concatenate([[label], negatives]).astype(np.int64)
    return EvalInstance(seq.user_id, items, behaviors, last + offset, label, candidates)


def build_eval_instances(seqs: Sequence[UserSequence], vocab: Vocab, max_len: int, target: int,
                         num_negatives: int, sampling: str = "uniform", rng_seed=0,
                         exclude_history: bool = False,
                         popularity: np.ndarray | None = None) -> list[EvalInstance]:
    rng = _rng(rng_seed)
    if sampling == "popularity" and popularity is None:
        popularity = item_popularity(seqs, vocab)
    out, dropped = [], 0
    for seq in seqs:
        if seq.recent(max_len).target_positions(target).size == 0:
            dropped += 1
            continue
        out.append(build_eval_instance(seq, vocab, max_len, target, num_negatives, sampling, rng,
                                       popularity, exclude_history))
    if dropped:
        logger.warning("dropped %d user(s) without a target-behavior event from evaluation", dropped)
    return out


def collate_eval(instances: Sequence[EvalInstance]) -> MaskedBatch:
    items = np.stack([inst.items for inst in instances])
    behaviors = np.stack([inst.behaviors for inst in instances])
    return MaskedBatch(
        items, behaviors,
        [np.array([inst.position]) for inst in instances],
        [np.array([inst.label]) for inst in instances],
        items == PAD,
        [inst.user_id for inst in instances],
    )


def split_sessions(length: int, session_len: int) -> list[range]:
    if session_len < 1 or length % session_len:
        raise ConfigError(f"session length {session_len} does not divide sequence length {length}")
    return [range(i * session_len, (i + 1) * session_len) for i in range(length // session_len)]


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class FollowRule:
    """After a ``trigger`` event on item x, emit ``follower`` on x with probability ``prob``."""

    trigger: str
    follower: str
    prob: float = 1.0


@dataclass
class SyntheticSpec:
    n_users: int = 200
    n_items: int = 50
    behaviors: tuple[str, ...] = ("pv", "cart", "buy")
    target: str = "buy"
    # sampling weights for events that are not produced by a rule
    behavior_weights: dict[str, float] = field(default_factory=lambda: {"pv": 0.7, "cart": 0.3})
    rules: list[FollowRule] = field(default_factory=lambda: [FollowRule("cart", "buy", 1.0)])
    n_blocks: int = 1
    min_len: int = 8
    max_len: int = 20
    # end every sequence with a fired rule so each user has a target event
    planted_tail: bool = False

    def validate(self) -> None:
        declared = set(self.behaviors)
        if self.target not in declared:
            raise DataError(f"target behavior {self.target!r} is not declared")
        for rule in self.rules:
            for b in (rule.trigger, rule.follower):
                if b not in declared:
                    raise DataError(f"rule references undeclared behavior {b!r}")
            if not 0.0 <= rule.prob <= 1.0:
                raise DataError(f"rule probability {rule.prob} outside [0, 1]")
        for b, w in self.behavior_weights.items():
            if b not in declared:
                raise DataError(f"behavior weight references undeclared behavior {b!r}")
            if w < 0:
                raise DataError("behavior weights must be non-negative")
        if not self.behavior_weights or sum(self.behavior_weights.values()) <= 0:
            raise DataError("behavior weights must have positive mass")
        if not 1 <= self.n_blocks <= self.n_items:
            raise DataError("n_blocks must lie in [1, n_items]")
        if not 1 <= self.min_len <= self.max_len:
            raise DataError("need 1 <= min_len <= max_len")
        if self.planted_tail and not self.rules:
            raise DataError("planted_tail needs at least one rule")

    def item_blocks(self) -> list[np.ndarray]:
        return [b for b in np.array_split(np.arange(self.n_items), self.n_blocks)]

    @classmethod
    def from_dict(cls, raw: dict) -> "SyntheticSpec":
        raw = dict(raw)
        if "rules" in raw:
            raw["rules"] = [FollowRule(**r) for r in raw["rules"]]
        if "behaviors" in raw:
            raw["behaviors"] = tuple(raw["behaviors"])
        return cls(**raw)


def synthetic_interactions(spec: SyntheticSpec, rng_seed=0) -> list[Interaction]:
    """Draw a seed-deterministic interaction log realising the planted rules."""
    spec.validate()
    rng = _rng(rng_seed)
    names = list(spec.behavior_weights)
    weights = np.array([spec.behavior_weights[b] for b in names], dtype=np.float64)
    weights /= weights.sum()
    rules = {r.trigger: r for r in spec.rules}
    blocks = spec.item_blocks()
    rows = []
    for u in range(spec.n_users):
        block = blocks[rng.integers(len(blocks))]
        length = int(rng.integers(spec.min_len, spec.max_len + 1))
        events: list[tuple[int, str]] = []
        while len(events) < length:
            behavior = names[rng.choice(len(names), p=weights)]
            item = int(block[rng.integers(block.size)])
            events.append((item, behavior))
            rule = rules.get(behavior)
            if rule is not None and rng.random() < rule.prob:
                events.append((item, rule.follower))
        if spec.planted_tail:
            rule = spec.rules[0]
            item = int(block[rng.integers(block.size)])
            events.extend([(item, rule.trigger), (item, rule.follower)])
        for ts, (item, behavior) in enumerate(events):
            rows.append(Interaction(str(u), str(item), behavior, ts))
    return rows


def generate_synthetic(spec: SyntheticSpec, rng_seed=0,
                       max_len: int | None = None) -> tuple[Vocab, list[UserSequence]]:
    rows = synthetic_interactions(spec, rng_seed)
    return sequences_from_interactions(rows, max_len, spec.behaviors)
