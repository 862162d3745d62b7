"""Track layout, Chord-graph construction, and reachability analysis.

The rotation layer's offsets come from the Chord P2P lookup scheme:
node i links to i + 2^s (mod N) at every scale s, plus itself. Channels
are split into M = ceil(log2 N) + 1 tracks whose offsets walk the same
power-of-two ladder, so the position-level connectivity of one network
block is exactly the Chord graph.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


def ceil_log2(n):
    """Exact integer ceil(log2(n)); 0 for n = 1."""
    if n < 1:
        raise ValueError(f"length must be >= 1, got {n}")
    return (n - 1).bit_length() if n >= 2 else 0


def ladder_offsets(n_ref):
    """Raw track offsets [0, 1, 2, 4, ..., 2^(M-2)] for a reference length."""
    m_tracks = ceil_log2(n_ref) + 1
    return [0] + [2 ** (t - 2) for t in range(2, m_tracks + 1)]


@dataclass(frozen=True)
class TrackLayout:
    """Partition of d channels into M contiguous tracks with per-track offsets."""

    d: int
    m: int
    track_of_channel: np.ndarray  # length d, values in 1..m
    offset_of_track: np.ndarray   # length m; [0, 1, 2, 4, ...]

    def track_sizes(self):
        return [int(np.sum(self.track_of_channel == t)) for t in range(1, self.m + 1)]

    def channel_slices(self):
        """(track offset, row slice) pairs; channels in a track are contiguous."""
        sizes = self.track_sizes()
        out = []
        start = 0
        for t, size in enumerate(sizes, start=1):
            out.append((int(self.offset_of_track[t - 1]), slice(start, start + size)))
            start += size
        return out


def build_layout(d, n_ref):
    """Split d channels into M = ceil(log2 n_ref) + 1 near-equal contiguous tracks.

    The first (d mod M) tracks get ceil(d/M) channels, the rest floor(d/M).
    """
    if n_ref < 2:
        raise ValueError(f"reference length must be >= 2, got {n_ref}")
    m_tracks = ceil_log2(n_ref) + 1
    if d < m_tracks:
        raise ValueError(
            f"fewer channels than tracks: d={d} < M={m_tracks} for reference length {n_ref}")
    base, extra = divmod(d, m_tracks)
    tracks = []
    for t in range(1, m_tracks + 1):
        size = base + 1 if t <= extra else base
        tracks.extend([t] * size)
    return TrackLayout(
        d=d,
        m=m_tracks,
        track_of_channel=np.asarray(tracks, dtype=np.int64),
        offset_of_track=np.asarray(ladder_offsets(n_ref), dtype=np.int64),
    )


def rotation_offsets(layout, n):
    """Per-channel rotation offsets for a sequence of length n (track offset mod n)."""
    if n < 1:
        raise ValueError(f"length must be >= 1, got {n}")
    return np.asarray([int(layout.offset_of_track[t - 1]) % n
                       for t in layout.track_of_channel], dtype=np.int64)


@dataclass(frozen=True)
class ChordGraph:
    """Chord ring on n nodes: i links to i + 2^s (mod n) for every scale, plus itself."""

    n: int
    offsets: tuple  # distinct target offsets incl. 0, sorted

    @property
    def out_degree(self):
        return len(self.offsets)

    def targets(self, i):
        return sorted((i + a) % self.n for a in self.offsets)


def chord_graph(n):
    if n < 1:
        raise ValueError(f"node count must be >= 1, got {n}")
    m = ceil_log2(n)
    # duplicate targets (2^s colliding mod n) collapse to one edge
    offsets = sorted({0} | {pow(2, s, n) for s in range(m)})
    return ChordGraph(n=n, offsets=tuple(offsets))


def _spread(reached, offsets):
    # one hop of the boolean relation on the ring; roll(v, a)[j] == v[j - a]
    return np.logical_or.reduce([np.roll(reached, a) for a in offsets])


def reachability_closure(n):
    """Hops until every node reaches every node through the Chord graph.

    The graph is rotation-invariant, so the closure of the full relation
    is reached exactly when node 0's reachable set covers the ring; the
    result is always <= ceil(log2 n).
    """
    graph = chord_graph(n)
    reached = np.zeros(n, dtype=bool)
    reached[0] = True
    hops = 0
    while not reached.all():
        reached = _spread(reached, graph.offsets)
        hops += 1
    return hops


def dense_adjacency(n, normalized=False):
    """Explicit n x n adjacency of the Chord graph; optionally right-stochastic."""
    graph = chord_graph(n)
    adj = np.zeros((n, n))
    for i in range(n):
        for a in graph.offsets:
            adj[i, (i + a) % n] = 1.0
    if normalized:
        adj /= adj.sum(axis=1, keepdims=True)
    return adj


@dataclass(frozen=True)
class ReachReport:
    """Reaching probabilities from one source node after a fixed hop count."""

    n: int
    hops: int
    source: int
    probabilities: np.ndarray
    mean: float
    std: float


def reaching_probabilities(n, hops, source=0):
    """Random-walk reaching probabilities over the Chord graph.

    Rows of the adjacency matrix are normalized to sum to 1 (uniform
    over out-edges) and the indicator of the source node is propagated
    ``hops`` times by vector-matrix products. The returned row sums to
    1 to within 1e-12, so its mean is exactly 1/n.
    """
    if n < 2:
        raise ValueError(f"need at least 2 nodes, got {n}")
    if hops < 0:
        raise ValueError("hop count must be non-negative")
    graph = chord_graph(n)
    degree = graph.out_degree
    probs = np.zeros(n)
    probs[source % n] = 1.0
    for _ in range(hops):
        probs = np.sum([np.roll(probs, a) for a in graph.offsets], axis=0) / degree
    return ReachReport(
        n=n,
        hops=hops,
        source=source % n,
        probabilities=probs,
        mean=float(probs.mean()),
        std=float(probs.std()),
    )


def default_hops(n):
    """ceil(log2(n) + 1): walk length used for the concentration analysis."""
    return int(np.ceil(np.log2(n) + 1.0)) if n > 1 else 1
