"""Datasets and padding-free batching.

Covers the synthetic adding problem (two marked values in a long
sequence determine the target), labeled symbol-sequence ingestion,
deterministic splits, and length-bucketed batching: sequences sharing a
ceil(log2 N) key are concatenated along the position axis so the mixer
MLP runs once per block with no padding tokens anywhere.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .autograd import concat_columns, dropout, matmul, mean_over_positions, take_columns
from .model import _as_column, column, mix, rotate
from .topology import ceil_log2

ADDING_MAGIC = b"ADD1"


@dataclass
class AddingInstance:
    """One adding-problem record: values a, binary markers b, target y."""

    a: np.ndarray   # (N,) reals in (-1, 1)
    b: np.ndarray   # (N,) uint8, exactly two ones
    t1: int
    t2: int
    y: float

    @property
    def n(self):
        return self.a.shape[0]

    def features(self):
        """(2, N) real input: value channel on top, marker channel below."""
        return np.stack([self.a, self.b.astype(np.float64)])


@dataclass
class LabeledSequence:
    symbols: np.ndarray  # (N,) int64 vocabulary ids
    label: int

    @property
    def n(self):
        return self.symbols.shape[0]


def gen_adding(count, lam, rng, mu=0.5, sigma=0.7):
    """Generate adding-problem instances with LogNormal-distributed lengths.

    N = round(lam * zeta), zeta ~ LogNormal(mu, sigma^2), rounded half
    away from zero and clamped to >= 2 so two distinct marker positions
    exist. Marker positions are uniform without replacement; the target
    is y = 0.5 + (a[t1] + a[t2]) / 4, always inside [0, 1].
    """
    if lam < 2:
        raise ValueError(f"base length must be >= 2, got {lam}")
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    gen = rng.gen
    instances = []
    for _ in range(count):
        zeta = gen.lognormal(mu, sigma)
        n = max(2, int(np.floor(lam * zeta + 0.5)))  # round half away from zero
        a = gen.uniform(-1.0, 1.0, size=n)
        t1, t2 = sorted(int(t) for t in gen.choice(n, size=2, replace=False))
        b = np.zeros(n, dtype=np.uint8)
        b[t1] = b[t2] = 1
        y = 0.5 + (a[t1] + a[t2]) / 4.0
        instances.append(AddingInstance(a=a, b=b, t1=t1, t2=t2, y=y))
    return instances


def adding_accuracy(preds, targets):
    """Fraction of predictions with absolute error strictly below 0.04."""
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape:
        raise ValueError(f"shape mismatch: {preds.shape} vs {targets.shape}")
    return float(np.mean(np.abs(preds - targets) < 0.04))


def save_adding(instances, path):
    """Serialize instances as `ADD1` binary records.

    Layout: magic ``ADD1``; little-endian uint64 record count; per
    record a uint32 N, N float64 values, N marker bytes, one float64
    target. Marker positions are implicit in the marker bytes.
    """
    with open(path, "wb") as fh:
        fh.write(ADDING_MAGIC)
        fh.write(struct.pack("<Q", len(instances)))
        for inst in instances:
            fh.write(struct.pack("<I", inst.n))
            fh.write(inst.a.astype("<f8").tobytes())
            fh.write(inst.b.astype(np.uint8).tobytes())
            fh.write(struct.pack("<d", inst.y))


def load_adding(path):
    """Read an `ADD1` file back into instances; inverse of save_adding."""
    with open(path, "rb") as fh:
        magic = fh.read(len(ADDING_MAGIC))
        if magic != ADDING_MAGIC:
            raise ValueError(f"{path}: not an ADD1 dataset (magic {magic!r})")
        (count,) = struct.unpack("<Q", fh.read(8))
        instances = []
        for k in range(count):
            raw_n = fh.read(4)
            if len(raw_n) != 4:
                raise ValueError(f"{path}: truncated at record {k}")
            (n,) = struct.unpack("<I", raw_n)
            payload = fh.read(8 * n + n + 8)
            if len(payload) != 8 * n + n + 8:
                raise ValueError(f"{path}: truncated at record {k}")
            a = np.frombuffer(payload[:8 * n], dtype="<f8").copy()
            b = np.frombuffer(payload[8 * n:9 * n], dtype=np.uint8).copy()
            (y,) = struct.unpack("<d", payload[9 * n:])
            marks = np.flatnonzero(b)
            if marks.size != 2 or not np.all((b == 0) | (b == 1)):
                raise ValueError(f"{path}: record {k} must carry exactly two markers")
            instances.append(AddingInstance(a=a, b=b, t1=int(marks[0]), t2=int(marks[1]), y=y))
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after {count} records")
    return instances


def load_labeled(path):
    """Read `label<TAB>symbols` lines into sequences plus a vocabulary.

    Symbols are single characters; the vocabulary lists them in
    first-seen order. Blank lines are skipped. Malformed or empty-
    sequence lines raise with their line number.
    """
    sequences = []
    vocab = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            if "\t" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'label<TAB>symbols'")
            label_text, symbols_text = line.split("\t", 1)
            try:
                label = int(label_text)
            except ValueError:
                raise ValueError(f"{path}:{lineno}: label {label_text!r} is not an integer") from None
            if not symbols_text:
                raise ValueError(f"{path}:{lineno}: empty symbol sequence")
            ids = np.empty(len(symbols_text), dtype=np.int64)
            for i, ch in enumerate(symbols_text):
                if ch not in vocab:
                    vocab[ch] = len(vocab)
                ids[i] = vocab[ch]
            sequences.append(LabeledSequence(symbols=ids, label=label))
    return sequences, list(vocab)


def write_labeled(path, sequences, vocab):
    """Write sequences in the load_labeled text format."""
    with open(path, "w", encoding="utf-8") as fh:
        for seq in sequences:
            fh.write(f"{seq.label}\t{''.join(vocab[i] for i in seq.symbols)}\n")


def _largest_remainder_sizes(total, fractions):
    raw = [f * total for f in fractions]
    sizes = [int(np.floor(x)) for x in raw]
    leftovers = sorted(range(len(fractions)), key=lambda i: (sizes[i] - raw[i], i))
    for i in leftovers[:total - sum(sizes)]:
        sizes[i] += 1
    return sizes


def split(dataset, fractions, stratify=False, rng=None):
    """Partition a dataset into disjoint parts by largest-remainder sizing.

    With ``stratify`` each label is partitioned separately, keeping
    per-class fractions within one instance of the target. An rng
    shuffles before splitting; without one the input order is kept.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")
    order = list(rng.gen.permutation(len(dataset))) if rng is not None else list(range(len(dataset)))
    parts = [[] for _ in fractions]
    if stratify:
        groups = {}
        for i in order:
            groups.setdefault(dataset[i].label, []).append(i)
        for members in groups.values():
            sizes = _largest_remainder_sizes(len(members), fractions)
            start = 0
            for part, size in zip(parts, sizes):
                part.extend(members[start:start + size])
                start += size
        rank = {i: pos for pos, i in enumerate(order)}
        for part in parts:
            part.sort(key=rank.__getitem__)
    else:
        sizes = _largest_remainder_sizes(len(order), fractions)
        start = 0
        for part, size in zip(parts, sizes):
            part.extend(order[start:start + size])
            start += size
    return tuple([dataset[i] for i in part] for part in parts)


def item_length(item):
    """Position count of a dataset item or raw model input."""
    if isinstance(item, (AddingInstance, LabeledSequence)):
        return item.n
    arr = np.asarray(item)
    return arr.shape[1] if arr.ndim == 2 else arr.shape[0]


def bucket_key(n):
    """ceil(log2 n): key k groups lengths in (2^(k-1), 2^k]."""
    return ceil_log2(n)


@dataclass
class LengthBucket:
    """A batch whose members all share one ceil(log2 N) key."""

    key: int
    members: list

    def __len__(self):
        return len(self.members)


def bucket_batches(dataset, batch_size, rng=None, augment=False):
    """One epoch of length-bucketed batches covering every instance once.

    Instances are shuffled, grouped by the ceil(log2 N) of their length
    (of N + 1 with ``augment``, for networks that prepend a class
    token), chunked into batches within each bucket, and the batch
    order is shuffled again. No padding is ever introduced.
    """
    if batch_size < 1:
        raise ValueError(f"batch size must be >= 1, got {batch_size}")
    order = list(rng.gen.permutation(len(dataset))) if rng is not None else list(range(len(dataset)))
    buckets = {}
    for i in order:
        item = dataset[i]
        n = item_length(item)
        key = bucket_key(n + 1 if augment else n)
        buckets.setdefault(key, []).append(item)
    batches = []
    for key in sorted(buckets):
        members = buckets[key]
        for start in range(0, len(members), batch_size):
            batches.append(LengthBucket(key=key, members=members[start:start + batch_size]))
    if rng is not None:
        batches = [batches[int(i)] for i in rng.gen.permutation(len(batches))]
    return batches


def batched_forward(batch, net, training=False, rng=None):
    """Forward a same-key batch through the network, mixing once per block.

    Each member is rotated at its own length, the rotated tensors are
    concatenated along the position axis, the block MLP runs once on
    the concatenation, and the result is split back for the per-member
    residual. Heads apply per member. Dropout, when active, draws its
    mask on the concatenated tensor, so only the dropout-off case is
    equivalent to per-sequence execution.
    """
    if not batch:
        raise ValueError("batch must contain at least one sequence")
    if training and net.dropout_rate > 0.0 and rng is None:
        raise ValueError("training with dropout requires an rng")
    xs = []
    for raw in batch:
        n = net.raw_length(raw)
        net.check_length(n)
        x = net.embed(raw)
        if net.cls_token is not None:
            x = concat_columns([_as_column(net.cls_token), x])
        xs.append(x)
    keys = {ceil_log2(x.shape[1]) for x in xs}
    if len(keys) != 1:
        raise ValueError(f"batch mixes length keys {sorted(keys)}; buckets must share one")
    depth = min(net.n_blocks, max(1, keys.pop()))
    sizes = [x.shape[1] for x in xs]
    bounds = np.concatenate([[0], np.cumsum(sizes)])

    for mlp in net.blocks[:depth]:
        rotated = [rotate(x, net.layout) for x in xs]
        z = concat_columns(rotated) if len(xs) > 1 else rotated[0]
        z = dropout(z, net.dropout_rate, rng, training)
        mixed = mix(z, mlp)
        if len(xs) > 1:
            parts = [take_columns(mixed, int(bounds[i]), int(bounds[i + 1]))
                     for i in range(len(xs))]
        else:
            parts = [mixed]
        xs = [x + part for x, part in zip(xs, parts)]

    preds = []
    for x in xs:
        pooled = column(x, 0) if net.head == "cls" else mean_over_positions(x)
        preds.append(matmul(net.head_w, pooled) + net.head_b)
    return preds


def length_stats(instances):
    """Min / median / max of instance lengths, for generation reports."""
    lengths = np.array([item_length(item) for item in instances])
    return {"count": int(lengths.size), "min": int(lengths.min()),
            "median": float(np.median(lengths)), "max": int(lengths.max())}
