import numpy as np
import pytest

from conftest import make_actor, random_tracklets
from igmn.identity_graph import (build_graph, downsample, graph_pyramid, intra_distance,
                                 parity_distances)
from igmn.memory_bank import MemoryActor, MemoryBank, MemoryEntry, MemoryWindow
from igmn.data_model import BoundingBox
from oracles import downsample_by_rule, edges_by_rule, graph_as_keys, graph_nodes


def bank_with(tracks, c=8, n_max=4):
    """tracks: {clip: [track ids]} written with distinct boxes."""
    bank = MemoryBank(c, n_max)
    for clip, ids in tracks.items():
        bank.write(MemoryEntry(clip, tuple(
            MemoryActor(t, BoundingBox(10.0 * t, 0.0, 5.0, 5.0), 0.9 - 0.01 * t, np.zeros(c))
            for t in ids)))
    return bank


def keyed(g):
    return {n.node_id: (n.clip_index, n.track_id) for n in g.nodes}


def test_single_actor_empty_window():
    g = build_graph([make_actor(0, 0)], MemoryWindow.empty(0, 2, 4, 8))
    assert len(g.nodes) == 1
    assert not g.edges.intra and not g.edges.inter_intra_clip and not g.edges.inter_inter_clip


def test_two_actors_empty_window():
    g = build_graph([make_actor(0, 0), make_actor(0, 1)], MemoryWindow.empty(0, 2, 4, 8))
    assert g.edges.inter_intra_clip == frozenset({(0, 1)})
    assert not g.edges.intra and not g.edges.inter_inter_clip


def test_worked_three_edge_example():
    # track A (0) spans t-1..t+1 with the actor at t; track B (1) only at t-1
    bank = bank_with({-1: [0, 1], 1: [0]})
    g = build_graph([make_actor(0, 0)], bank.window(0, 2))
    k = keyed(g)
    intra = {tuple(sorted((k[a], k[b]))) for a, b in g.edges.intra}
    assert intra == {((-1, 0), (0, 0)), ((0, 0), (1, 0))}
    assert {tuple(sorted((k[a], k[b]))) for a, b in g.edges.inter_intra_clip} == {((-1, 0), (-1, 1))}
    assert {(k[a], k[b]) for a, b in g.edges.inter_inter_clip} == {
        ((-1, 0), (0, 0)), ((1, 0), (0, 0)), ((-1, 1), (0, 0))}


def test_feature_slots_follow_window_layout():
    bank = bank_with({-2: [3], 1: [0, 2]}, n_max=4)
    actors = [make_actor(0, 0), make_actor(0, 5)]
    win = bank.window(0, 2)
    g = build_graph(actors, win)
    slot_of = {(n.clip_index, n.track_id): n.feature_slot for n in g.nodes}
    clips = list(win.clip_indices)
    assert slot_of[(0, 0)] == 0 and slot_of[(0, 5)] == 1
    assert slot_of[(-2, 3)] == 2 + clips.index(-2) * 4 + 0
    # clip 1 stores tracks by descending score: track 0 (0.90) before track 2 (0.88)
    assert slot_of[(1, 2)] == 2 + clips.index(1) * 4 + 1


def test_duplicate_track_in_clip_rejected():
    with pytest.raises(ValueError):
        build_graph([make_actor(0, 1), make_actor(0, 1)], None)


def test_actor_from_other_clip_rejected():
    with pytest.raises(ValueError):
        build_graph([make_actor(0, 1), make_actor(1, 2)], MemoryWindow.empty(0, 2, 4, 8))


def test_intra_distance_examples():
    bank = bank_with({-3: [0], -2: [0], -1: [0], 2: [7]})
    g = build_graph([make_actor(0, 0)], bank.window(0, 3))
    by_key = {(n.clip_index, n.track_id): n for n in g.nodes}
    assert intra_distance(g, by_key[(0, 0)]) == 0
    assert intra_distance(g, by_key[(-3, 0)]) == 3
    assert intra_distance(g, by_key[(2, 7)]) is None


def chain_graph(clips, actor=True, center=0):
    bank = bank_with({c: [0] for c in clips if c != center})
    actors = [make_actor(center, 0)] if actor else [make_actor(center, 9)]
    return build_graph(actors, bank.window(center, 3))


def test_seven_node_chain_survivors():
    g = downsample(chain_graph(range(-3, 4)))
    k = keyed(g)
    assert sorted(k.values()) == [(-2, 0), (0, 0), (2, 0)]
    assert {tuple(sorted((k[a], k[b]))) for a, b in g.edges.intra} == {
        ((-2, 0), (0, 0)), ((0, 0), (2, 0))}


def test_actorless_track_anchor():
    g = downsample(chain_graph([-3, -2, -1], actor=False))
    k = keyed(g)
    track0 = sorted(key for key in k.values() if key[1] == 0)
    assert track0 == [(-3, 0), (-1, 0)]
    assert {tuple(sorted((k[a], k[b]))) for a, b in g.edges.intra} == {((-3, 0), (-1, 0))}


def test_anchor_tie_prefers_earlier_clip():
    g = chain_graph([-2, -1, 1, 2], actor=False)
    dist = parity_distances(g)
    by_key = {(n.clip_index, n.track_id): n.node_id for n in g.nodes}
    assert dist[by_key[(-1, 0)]] == 0
    assert dist[by_key[(1, 0)]] == 1


def test_single_actor_unchanged_by_downsample():
    g = build_graph([make_actor(0, 0)], None)
    assert downsample(g) == g


def test_pyramid_without_downsampling_repeats_graph():
    g = chain_graph(range(-3, 4))
    assert graph_pyramid(g, 3, downsampling=False) == [g, g, g]
    assert [len(level.nodes) for level in graph_pyramid(g, 3)] == [7, 3, 1]


def random_configs(count, seed):
    rng = np.random.default_rng(seed)
    for _ in range(count):
        actors, bank, half_width, _ = random_tracklets(rng)
        yield actors, bank.window(0, half_width)


def test_build_graph_matches_oracle_on_random_tracklets():
    for actors, win in random_configs(300, 1):
        g = build_graph(actors, win)
        nodes = graph_nodes(actors, win)
        intra, inter1, inter2 = edges_by_rule(nodes)
        assert graph_as_keys(g) == (set(nodes), intra, inter1, inter2)


def test_downsample_matches_oracle_on_random_tracklets():
    for actors, win in random_configs(300, 2):
        g = build_graph(actors, win)
        survivors, edges = downsample_by_rule(graph_nodes(actors, win), 0)
        assert graph_as_keys(downsample(g)) == (set(survivors), *edges)


def test_double_downsample_equals_parity_four():
    for actors, win in random_configs(200, 3):
        g = build_graph(actors, win)
        survivors, edges = downsample_by_rule(graph_nodes(actors, win), 0, modulus=4)
        assert graph_as_keys(downsample(downsample(g))) == (set(survivors), *edges)


def test_downsample_invariants():
    for actors, win in random_configs(200, 4):
        g = build_graph(actors, win)
        d = downsample(g)
        assert len(d.nodes) <= len(g.nodes)
        assert {n.node_id for n in d.actor_nodes} == {n.node_id for n in g.actor_nodes}
        tracks = {n.node_id: n.track_id for n in d.nodes}
        assert all(tracks[a] == tracks[b] for a, b in d.edges.intra)
        assert d.edges.inter_inter_clip == {(m.node_id, a.node_id) for m in d.memory_nodes
                                            for a in d.actor_nodes}
        assert all(not n.is_actor for n in d.nodes if n.clip_index != d.center)
