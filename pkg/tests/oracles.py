"""Brute-force reference implementations used to check the library.

They enumerate definitions directly instead of sharing code paths with the
package: graph edges by scanning all node pairs, distances by position along
a sorted tracklet, AP by the textbook precision envelope.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def graph_nodes(actors, window):
    """(node key, clip, track, is_actor) for every node; key = (clip, track)."""
    nodes = [(a.clip_index, a.track_id, True) for a in actors]
    if window is not None:
        for s in range(window.mask.shape[0]):
            for n in range(window.mask.shape[1]):
                if window.mask[s, n]:
                    nodes.append((int(window.clip_indices[s]), int(window.track_ids[s, n]), False))
    return nodes


def edges_by_rule(nodes):
    """Edge sets over (clip, track, is_actor) triples, keyed by (clip, track)."""
    intra, inter1, inter2 = set(), set(), set()
    for u, v in itertools.permutations(nodes, 2):
        ku, kv = (u[0], u[1]), (v[0], v[1])
        if u[1] == v[1] and u[0] < v[0]:
            between = [w for w in nodes if w[1] == u[1] and u[0] < w[0] < v[0]]
            if not between:
                intra.add((ku, kv))
        if u[0] == v[0] and ku < kv:
            inter1.add((ku, kv))
        if not u[2] and v[2]:
            inter2.add((ku, kv))
    return intra, inter1, inter2


def graph_as_keys(g):
    """Translate a library graph into the oracle's (clip, track) vocabulary."""
    key = {n.node_id: (n.clip_index, n.track_id) for n in g.nodes}
    nodes = {(n.clip_index, n.track_id, n.is_actor) for n in g.nodes}
    intra = {tuple(sorted((key[a], key[b]))) for a, b in g.edges.intra}
    inter1 = {tuple(sorted((key[a], key[b]))) for a, b in g.edges.inter_intra_clip}
    inter2 = {(key[a], key[b]) for a, b in g.edges.inter_inter_clip}
    return nodes, intra, inter1, inter2


def track_distances(nodes, center):
    """Distance to the anchor by index along each clip-sorted track."""
    out = {}
    for track in {n[1] for n in nodes}:
        members = sorted((n for n in nodes if n[1] == track), key=lambda n: n[0])
        actor_pos = [i for i, n in enumerate(members) if n[2]]
        if actor_pos:
            anchor = actor_pos[0]
        else:
            anchor = min(range(len(members)), key=lambda i: (abs(members[i][0] - center), members[i][0]))
        for i, n in enumerate(members):
            out[(n[0], n[1])] = abs(i - anchor)
    return out


def downsample_by_rule(nodes, center, modulus=2):
    """Survivors (distance divisible by ``modulus``) and their rule-built edges."""
    dist = track_distances(nodes, center)
    survivors = [n for n in nodes if dist[(n[0], n[1])] % modulus == 0]
    return survivors, edges_by_rule(survivors)


def all_point_ap(scores, matched, num_gt):
    """AP from the precision envelope over every recall step, ties kept in given order."""
    if num_gt == 0:
        return math.nan
    order = sorted(range(len(scores)), key=lambda i: -scores[i])
    tp = np.array([matched[i] for i in order], dtype=float)
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(tp) + 1)
    recall = ctp / num_gt
    ap, prev_recall = 0.0, 0.0
    for i in range(len(tp)):
        if tp[i]:
            ap += (recall[i] - prev_recall) * precision[i:].max()
            prev_recall = recall[i]
    return ap
