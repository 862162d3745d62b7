"""The rotation-mixing network: blocks, heads, and structural checks.

One block rotates each channel track by its power-of-two offset (a
parameter-free permutation over positions), applies dropout, then mixes
every column with a shared two-layer GELU MLP, all inside a residual
connection. A network stacks ceil(log2 N_max) such blocks; a length-N
sequence only traverses the first max(1, ceil(log2 N)) of them.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .autograd import (
    Rng,
    Tensor,
    _accumulate,
    _node,
    concat_columns,
    dropout,
    gelu,
    matmul,
    mean_over_positions,
)
from .topology import TrackLayout, build_layout, ceil_log2, ladder_offsets

CHECKPOINT_MAGIC = b"CHMX1"


def _uniform_init(shape, fan_in, rng):
    bound = np.sqrt(1.0 / fan_in)
    return Tensor(rng.gen.uniform(-bound, bound, size=shape), requires_grad=True)


@dataclass
class MixMlp:
    """Weights of the column-shared two-layer MLP of one block."""

    w1: Tensor  # (hidden, d)
    b1: Tensor  # (hidden,)
    w2: Tensor  # (d, hidden)
    b2: Tensor  # (d,)

    @classmethod
    def init(cls, d, hidden, rng):
        return cls(
            w1=_uniform_init((hidden, d), d, rng),
            b1=_uniform_init((hidden,), d, rng),
            w2=_uniform_init((d, hidden), hidden, rng),
            b2=_uniform_init((d,), hidden, rng),
        )

    def parameters(self):
        return [self.w1, self.b1, self.w2, self.b2]

    def param_count(self):
        return 2 * self.w1.size + self.b1.size + self.b2.size


def rotate(x, layout):
    """Circularly shift each track of a (d, N) tensor by its own offset.

    Output column j of channel i reads input column (j + offset) mod N.
    The backward pass is the inverse rotation; no parameters anywhere.
    """
    if x.shape[0] != layout.d:
        raise ValueError(f"input has {x.shape[0]} channels but layout expects {layout.d}")
    n = x.shape[1]
    slices = layout.channel_slices()
    out_data = np.empty_like(x.data)
    for off, rows in slices:
        o = off % n
        out_data[rows] = np.roll(x.data[rows], -o, axis=1) if o else x.data[rows]

    def backward(g):
        if x.requires_grad:
            gx = np.empty_like(g)
            for off, rows in slices:
                o = off % n
                gx[rows] = np.roll(g[rows], o, axis=1) if o else g[rows]
            _accumulate(x, gx)

    return _node(out_data, (x,), backward)


def _add_bias(x, b):
    # (d, N) + (d,) column-broadcast
    out_data = x.data + b.data[:, None]

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g)
        if b.requires_grad:
            _accumulate(b, g.sum(axis=1))

    return _node(out_data, (x, b), backward)


def column(x, j):
    """Extract column j of a (d, N) tensor as a (d,) vector."""
    out_data = x.data[:, j].copy()

    def backward(g):
        if x.requires_grad:
            full = np.zeros_like(x.data)
            full[:, j] = g
            _accumulate(x, full)

    return _node(out_data, (x,), backward)


def mix(z, mlp):
    """Apply the block's MLP to every column of a (d, N) tensor."""
    if z.shape[0] != mlp.w1.shape[1]:
        raise ValueError(f"mix expects {mlp.w1.shape[1]} channels, got {z.shape[0]}")
    hidden = gelu(_add_bias(matmul(mlp.w1, z), mlp.b1))
    return _add_bias(matmul(mlp.w2, hidden), mlp.b2)


def block_forward(x, mlp, layout, dropout_rate=0.0, rng=None, training=False):
    """x + mix(dropout(rotate(x)))."""
    z = rotate(x, layout)
    z = dropout(z, dropout_rate, rng, training)
    return x + mix(z, mlp)


def embed_symbols(table, symbols):
    """Look up columns of a (d, V) table for a sequence of symbol ids."""
    idx = np.asarray(symbols, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError(f"symbol sequence must be 1-d, got shape {idx.shape}")
    vocab = table.shape[1]
    if idx.size and (idx.min() < 0 or idx.max() >= vocab):
        raise ValueError(f"symbol id out of range for vocabulary of size {vocab}")
    out_data = table.data[:, idx]

    def backward(g):
        if table.requires_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, (slice(None), idx), g)

    return _node(out_data, (table,), backward)


@dataclass
class ActivationTrace:
    """Per-block (d, N) outputs captured during one forward pass."""

    embedded: np.ndarray
    blocks: list = field(default_factory=list)

    def __len__(self):
        return len(self.blocks)


class ChordMixerNet:
    """Embedding, a stack of rotate-mix residual blocks, and a linear head.

    Every block shares the track layout built from ``n_max`` but owns its
    own MLP weights. Sequences enter at their natural length; the only
    length-dependent parts are the offsets taken modulo N and the number
    of blocks traversed.

    Inputs are either symbol sequences (``vocab_size`` set, lookup-table
    embedding) or real-valued (c_in, N) matrices (``in_channels`` set,
    linear embedding). The "avg" head averages output columns before a
    linear map; the "cls" head prepends a learned token and reads its
    final column (symbol inputs only). With the "cls" head the depth is
    computed from the augmented length N+1, capped at the block count.
    """

    def __init__(self, n_max, d, hidden, n_outputs, vocab_size=None, in_channels=None,
                 head="avg", dropout_rate=0.0, seed=0, track_size=None):
        if n_max < 2:
            raise ValueError(f"n_max must be >= 2, got {n_max}")
        if (vocab_size is None) == (in_channels is None):
            raise ValueError("exactly one of vocab_size / in_channels must be set")
        if head not in ("avg", "cls"):
            raise ValueError(f"head must be 'avg' or 'cls', got {head!r}")
        if head == "cls" and vocab_size is None:
            raise ValueError("the cls head requires symbol inputs (vocab_size)")
        if not 0.0 <= dropout_rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {dropout_rate}")

        self.n_max = n_max
        self.d = d
        self.hidden = hidden
        self.n_outputs = n_outputs
        self.vocab_size = vocab_size
        self.in_channels = in_channels
        self.head = head
        self.dropout_rate = dropout_rate
        self.seed = seed
        self.track_size = track_size
        self.n_blocks = max(1, ceil_log2(n_max))
        self.layout = build_layout(d, n_max)

        rng = Rng(seed).split("init")
        if vocab_size is not None:
            self.embedding = Tensor(rng.gen.normal(0.0, 0.02, size=(d, vocab_size)),
                                    requires_grad=True)
        else:
            self.embedding = _uniform_init((d, in_channels), in_channels, rng)
        self.cls_token = (Tensor(rng.gen.normal(0.0, 0.02, size=(d,)), requires_grad=True)
                          if head == "cls" else None)
        self.blocks = [MixMlp.init(d, hidden, rng.split("block", i))
                       for i in range(self.n_blocks)]
        head_rng = rng.split("head")
        self.head_w = _uniform_init((n_outputs, d), d, head_rng)
        self.head_b = _uniform_init((n_outputs,), d, head_rng)

    def parameters(self):
        """All learnable tensors, in the checkpoint's declaration order."""
        params = [self.embedding]
        if self.cls_token is not None:
            params.append(self.cls_token)
        for block in self.blocks:
            params.extend(block.parameters())
        params.extend([self.head_w, self.head_b])
        return params

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def embed(self, x_raw):
        if self.vocab_size is not None:
            return embed_symbols(self.embedding, x_raw)
        data = np.asarray(x_raw, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] != self.in_channels:
            raise ValueError(
                f"expected a ({self.in_channels}, N) input, got shape {data.shape}")
        return matmul(self.embedding, Tensor(data))

    def raw_length(self, x_raw):
        if self.vocab_size is not None:
            return len(x_raw)
        return np.asarray(x_raw).shape[1]

    def effective_length(self, n):
        """Depth-determining length: N, or N + 1 once the cls token is prepended."""
        return n + 1 if self.head == "cls" else n

    def depth_for_length(self, n):
        """Blocks traversed by a raw length-n sequence (at least one)."""
        return min(self.n_blocks, max(1, ceil_log2(self.effective_length(n))))

    def check_length(self, n):
        if n < 1:
            raise ValueError(f"sequence length must be >= 1, got {n}")
        if n > self.n_max:
            raise ValueError(f"sequence length {n} exceeds the network maximum {self.n_max}")

    def forward(self, x_raw, training=False, rng=None, collect_trace=False):
        return net_forward(x_raw, self, training=training, rng=rng,
                           collect_trace=collect_trace)


def net_forward(x_raw, net, training=False, rng=None, collect_trace=False):
    """Run one sequence through the network.

    Returns ``(prediction, trace)`` where trace is None unless requested.
    Only the first max(1, ceil(log2 N)) blocks are traversed, so blocks
    beyond that depth neither influence the output nor receive gradient.
    """
    n = net.raw_length(x_raw)
    net.check_length(n)
    if training and net.dropout_rate > 0.0 and rng is None:
        raise ValueError("training with dropout requires an rng")

    x = net.embed(x_raw)
    if net.cls_token is not None:
        cls_col = _as_column(net.cls_token)
        x = concat_columns([cls_col, x])
    depth = net.depth_for_length(n)

    trace = ActivationTrace(embedded=x.data.copy()) if collect_trace else None
    for mlp in net.blocks[:depth]:
        x = block_forward(x, mlp, net.layout, net.dropout_rate, rng, training)
        if trace is not None:
            trace.blocks.append(x.data.copy())

    if net.head == "cls":
        pooled = column(x, 0)
    else:
        pooled = mean_over_positions(x)
    prediction = matmul(net.head_w, pooled) + net.head_b
    return prediction, trace


def _as_column(v):
    # (d,) -> (d, 1) view with gradient routed back to the vector
    out_data = v.data[:, None].copy()

    def backward(g):
        if v.requires_grad:
            _accumulate(v, g[:, 0])

    return _node(out_data, (v,), backward)


def head_avg(x_out, head_w, head_b):
    """Mean over output columns, then the linear predictor."""
    return matmul(head_w, mean_over_positions(x_out)) + head_b


def param_count(net):
    """Exact learnable-parameter count; the rotation layer contributes zero."""
    return sum(p.size for p in net.parameters())


@dataclass(frozen=True)
class ReceptiveField:
    n: int
    depth: int
    full: bool
    matrix: np.ndarray  # boolean (n, n); [i, j] = input j can reach output i


def receptive_field(n, depth, layout=None):
    """Position-level reachability after ``depth`` blocks, channels collapsed.

    Each block can move information by any track offset (plus the
    residual identity), so one hop unions the offset shifts. The update
    is translation-invariant, which keeps the relation circulant: row i
    is row 0 cyclically shifted by i.
    """
    if n < 1:
        raise ValueError(f"length must be >= 1, got {n}")
    if depth < 0:
        raise ValueError("depth must be non-negative")
    raw = layout.offset_of_track if isinstance(layout, TrackLayout) else ladder_offsets(max(n, 2))
    offsets = sorted({int(o) % n for o in raw} | {0})
    row = np.zeros(n, dtype=bool)
    row[0] = True
    for _ in range(depth):
        row = np.logical_or.reduce([np.roll(row, a) for a in offsets])
    matrix = np.empty((n, n), dtype=bool)
    for i in range(n):
        matrix[i] = np.roll(row, i)
    return ReceptiveField(n=n, depth=depth, full=bool(row.all()), matrix=matrix)


def elimination_rank(mat, tol=None):
    """Matrix rank by Gaussian elimination with partial pivoting."""
    a = np.array(mat, dtype=np.float64)
    rows, cols = a.shape
    if tol is None:
        tol = 1e-9 * max(1.0, float(np.abs(a).max()))
    r = 0
    for c in range(cols):
        pivot = r + int(np.argmax(np.abs(a[r:, c])))
        if abs(a[pivot, c]) <= tol:
            continue
        a[[r, pivot]] = a[[pivot, r]]
        factors = a[r + 1:, c] / a[r, c]
        a[r + 1:] -= np.outer(factors, a[r])
        r += 1
        if r == rows:
            break
    return r


def channel_offsets(d, n):
    """Per-channel rotation offsets mod n for a d-channel rotation.

    Uses the standard near-equal track partition when d covers all
    tracks; with fewer channels than tracks each channel takes its own
    rung of the offset ladder.
    """
    ladder = ladder_offsets(max(n, 2))
    if d >= len(ladder):
        layout = build_layout(d, max(n, 2))
        return [int(layout.offset_of_track[t - 1]) % n for t in layout.track_of_channel]
    return [ladder[i] % n for i in range(d)]


@dataclass(frozen=True)
class RankReport:
    d: int
    n: int
    is_permutation: bool
    w_rank: int
    block_diag_rank: int

    @property
    def passed(self):
        return self.is_permutation and self.w_rank == self.d and self.block_diag_rank == self.d * self.n


def rotation_permutation_matrix(d, n):
    """The (dN, dN) matrix that the rotation applies to the row-major flattened input."""
    offsets = channel_offsets(d, n)
    size = d * n
    perm = np.zeros((size, size))
    for i in range(d):
        o = offsets[i]
        for j in range(n):
            perm[i * n + j, i * n + (j + o) % n] = 1.0
    return perm


def rank_certificates(d, n, rng=None, w=None):
    """Executable full-rank certificates for one block's two layers.

    (a) materializes the rotation's permutation matrix and checks one 1
    per row and column (hence full rank dN); (b) builds diag(W, ..., W)
    for a full-rank d x d W, the matrix one Mix linear layer applies to
    the column-major flattened input, and confirms rank dN by
    elimination.
    """
    size = d * n
    if size > 64:
        raise ValueError(f"explicit certificates limited to dN <= 64, got {size}")
    perm = rotation_permutation_matrix(d, n)
    is_perm = (np.all(perm.sum(axis=0) == 1.0) and np.all(perm.sum(axis=1) == 1.0)
               and np.all((perm == 0.0) | (perm == 1.0)))

    if w is None:
        rng = rng if rng is not None else Rng(0)
        w = rng.gen.uniform(-1.0, 1.0, size=(d, d))
        while elimination_rank(w) < d:  # uniform draws are almost surely full rank
            w = rng.gen.uniform(-1.0, 1.0, size=(d, d))
    w = np.asarray(w, dtype=np.float64)
    w_rank = elimination_rank(w)
    block_diag = np.kron(np.eye(n), w)
    block_rank = elimination_rank(block_diag)
    return RankReport(d=d, n=n, is_permutation=bool(is_perm),
                      w_rank=w_rank, block_diag_rank=block_rank)


def save_checkpoint(net, path):
    """Write the network to a self-describing binary file.

    Layout: the magic string ``CHMX1``; a little-endian uint32 byte
    length; that many bytes of JSON metadata; then every parameter
    array, raw little-endian float64, in declaration order (embedding,
    cls token if present, each block's w1/b1/w2/b2, head weight, head
    bias).
    """
    meta = {
        "d": net.d,
        "h": net.hidden,
        "n_blocks": net.n_blocks,
        "n_max": net.n_max,
        "track_size": net.track_size,
        "head": net.head,
        "vocab_size": net.vocab_size,
        "in_channels": net.in_channels,
        "n_outputs": net.n_outputs,
        "dropout": net.dropout_rate,
        "seed": net.seed,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in net.parameters():
            fh.write(p.data.astype("<f8").tobytes(order="C"))


def load_checkpoint(path):
    """Rebuild a network from a ``CHMX1`` file; inverse of save_checkpoint."""
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a CHMX1 checkpoint (magic {magic!r})")
        (meta_len,) = struct.unpack("<I", fh.read(4))
        meta = json.loads(fh.read(meta_len).decode("utf-8"))
        net = ChordMixerNet(
            n_max=meta["n_max"],
            d=meta["d"],
            hidden=meta["h"],
            n_outputs=meta["n_outputs"],
            vocab_size=meta["vocab_size"],
            in_channels=meta["in_channels"],
            head=meta["head"],
            dropout_rate=meta["dropout"],
            seed=meta["seed"],
            track_size=meta["track_size"],
        )
        if net.n_blocks != meta["n_blocks"]:
            raise ValueError(f"{path}: inconsistent block count in metadata")
        for p in net.parameters():
            raw = fh.read(p.size * 8)
            if len(raw) != p.size * 8:
                raise ValueError(f"{path}: truncated parameter data")
            p.data = np.frombuffer(raw, dtype="<f8").reshape(p.shape).copy()
        if fh.read(1):
            raise ValueError(f"{path}: trailing bytes after parameter data")
    return net


def export_activations(net, x_raw, out_dir):
    """Write the embedded input and every traversed block output as CSV.

    One file per matrix, channels as rows and positions as columns:
    ``embedded.csv`` then ``block_01.csv`` ... ``block_<depth>.csv``.
    Returns the written paths.
    """
    import os

    _, trace = net_forward(x_raw, net, training=False, collect_trace=True)
    os.makedirs(out_dir, exist_ok=True)
    paths = []

    def write(name, matrix):
        path = os.path.join(out_dir, name)
        np.savetxt(path, matrix, fmt="%.17g", delimiter=",")
        paths.append(path)

    write("embedded.csv", trace.embedded)
    for k, block_out in enumerate(trace.blocks, start=1):
        write(f"block_{k:02d}.csv", block_out)
    return paths
