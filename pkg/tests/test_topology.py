import math

import numpy as np
import pytest

from chordmixer import (
    Rng,
    build_layout,
    ceil_log2,
    chord_graph,
    default_hops,
    dense_adjacency,
    ladder_offsets,
    reachability_closure,
    reaching_probabilities,
    rotation_offsets,
)


def test_ceil_log2_exhaustive():
    assert ceil_log2(1) == 0
    for n in range(2, 4097):
        assert ceil_log2(n) == math.ceil(math.log2(n))


def test_ladder_offsets_structure():
    assert ladder_offsets(16) == [0, 1, 2, 4, 8]
    assert ladder_offsets(2) == [0, 1]
    for n_ref in (2, 5, 16, 100, 1024):
        ladder = ladder_offsets(n_ref)
        assert len(ladder) == ceil_log2(n_ref) + 1
        assert ladder[0] == 0
        assert ladder[1:] == [2 ** s for s in range(len(ladder) - 1)]


def test_build_layout_near_equal_contiguous_tracks():
    for d, n_ref in [(5, 16), (6, 16), (88, 1071), (13, 8), (208, 6655)]:
        layout = build_layout(d, n_ref)
        sizes = layout.track_sizes()
        assert sum(sizes) == d
        assert max(sizes) - min(sizes) <= 1
        assert sizes == sorted(sizes, reverse=True)  # remainder goes to early tracks
        # tracks are contiguous runs in channel order
        assert list(layout.track_of_channel) == sorted(layout.track_of_channel)
        rebuilt = np.concatenate([[t + 1] * s for t, s in enumerate(sizes)])
        np.testing.assert_array_equal(layout.track_of_channel, rebuilt)


def test_build_layout_rejects_too_few_channels():
    with pytest.raises(ValueError, match="fewer channels than tracks"):
        build_layout(3, 16)  # M = 5 tracks


def test_channel_slices_cover_all_channels():
    layout = build_layout(11, 64)
    seen = np.zeros(11, dtype=int)
    for offset, rows in layout.channel_slices():
        seen[rows] += 1
        track = layout.track_of_channel[rows.start]
        assert offset == layout.offset_of_track[track - 1]
    np.testing.assert_array_equal(seen, np.ones(11, dtype=int))


def test_rotation_offsets_wrap_modulo_length():
    layout = build_layout(6, 32)  # offsets 0,1,2,4,8,16
    offs = rotation_offsets(layout, 5)
    np.testing.assert_array_equal(offs, np.array([0, 1, 2, 4, 8, 16]) % 5)


def test_chord_graph_small_cases():
    g = chord_graph(5)
    assert g.offsets == (0, 1, 2, 4)
    assert g.targets(0) == [0, 1, 2, 4]
    assert g.targets(3) == sorted((3 + a) % 5 for a in g.offsets)
    g = chord_graph(4)
    assert g.offsets == (0, 1, 2)
    g = chord_graph(2)
    assert g.offsets == (0, 1)


def test_dense_adjacency_matches_targets_and_normalization():
    for n in (2, 3, 7, 16, 33):
        adj = dense_adjacency(n)
        g = chord_graph(n)
        for i in range(n):
            np.testing.assert_array_equal(np.flatnonzero(adj[i]), g.targets(i))
        norm = dense_adjacency(n, normalized=True)
        np.testing.assert_allclose(norm.sum(axis=1), np.ones(n), atol=1e-15)


def test_adjacency_is_circulant():
    for n in (5, 12, 31):
        adj = dense_adjacency(n)
        for i in range(1, n):
            np.testing.assert_array_equal(adj[i], np.roll(adj[0], i))


def test_reachability_closure_matches_dense_oracle():
    # oracle: boolean powers of the dense adjacency until all-ones
    for n in list(range(1, 33)) + [50, 64, 100]:
        if n == 1:
            assert reachability_closure(1) == 0
            continue
        adj = dense_adjacency(n).astype(bool)
        reach = np.eye(n, dtype=bool)
        hops = 0
        while not reach.all():
            reach = reach @ adj
            hops += 1
        assert reachability_closure(n) == hops


def test_closure_never_exceeds_ceil_log2():
    for n in range(1, 513):
        assert reachability_closure(n) <= max(1, ceil_log2(n)) or n == 1


def test_reaching_probabilities_match_dense_matrix_power():
    for n in (2, 5, 17, 64, 200):
        hops = default_hops(n)
        trans = dense_adjacency(n, normalized=True)
        row = np.zeros(n)
        row[0] = 1.0
        for _ in range(hops):
            row = row @ trans
        report = reaching_probabilities(n, hops)
        np.testing.assert_allclose(report.probabilities, row, atol=1e-14)
        assert report.probabilities.sum() == pytest.approx(1.0, abs=1e-12)
        assert report.mean == pytest.approx(1.0 / n, abs=1e-15)
        assert report.std == pytest.approx(row.std(), abs=1e-15)


def test_reaching_probabilities_source_shift():
    n, hops = 24, 6
    base = reaching_probabilities(n, hops, source=0).probabilities
    shifted = reaching_probabilities(n, hops, source=5).probabilities
    np.testing.assert_allclose(shifted, np.roll(base, 5), atol=1e-15)


def test_reaching_probabilities_validation():
    with pytest.raises(ValueError):
        reaching_probabilities(1, 3)
    with pytest.raises(ValueError):
        reaching_probabilities(10, -1)
    # zero hops is legal: the indicator row, whose mean is still 1/n
    report = reaching_probabilities(10, 0)
    assert report.probabilities[0] == 1.0
    assert report.mean == pytest.approx(0.1)


def test_default_hops_values():
    assert default_hops(5000) == 14
    assert default_hops(2) == 2
    assert default_hops(1024) == 11


def test_uniformity_improves_with_hops():
    # more walk steps concentrate the distribution around 1/n
    n = 500
    stds = [reaching_probabilities(n, h).std for h in (3, 6, 10, 14)]
    assert stds == sorted(stds, reverse=True)
