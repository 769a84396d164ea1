"""Typed identity graph over actor and memory nodes, plus graph down-sampling.

Nodes at the center clip are actor nodes; nodes from the memory window are
memory nodes.  Three edge sets are kept:

* ``intra``: undirected links between temporally adjacent observations of the
  same track,
* ``inter_intra_clip``: undirected links between every pair of nodes sharing a
  clip,
* ``inter_inter_clip``: directed links from every memory node to every actor
  node.
"""

from __future__ import annotations

from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .data_model import ActorRecord, BoundingBox
from .memory_bank import MemoryWindow


@dataclass(frozen=True)
class GraphNode:
    node_id: int
    clip_index: int
    track_id: int
    box: BoundingBox
    is_actor: bool
    feature_slot: int


@dataclass(frozen=True)
class EdgeSet:
    intra: frozenset = frozenset()
    inter_intra_clip: frozenset = frozenset()
    inter_inter_clip: frozenset = frozenset()


@dataclass(frozen=True)
class IdentityGraph:
    center: int
    nodes: tuple[GraphNode, ...]
    edges: EdgeSet = field(default_factory=EdgeSet)

    def __post_init__(self):
        ids = [n.node_id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate node ids")
        for n in self.nodes:
            if n.is_actor != (n.clip_index == self.center):
                raise ValueError(f"node {n.node_id}: actor flag disagrees with clip index")
        known = set(ids)
        for a, b in (*self.edges.intra, *self.edges.inter_intra_clip, *self.edges.inter_inter_clip):
            if a not in known or b not in known:
                raise ValueError(f"edge ({a}, {b}) references a missing node")

    def node(self, node_id: int) -> GraphNode:
        for n in self.nodes:
            if n.node_id == node_id:
                return n
        raise KeyError(node_id)

    @property
    def actor_nodes(self) -> list[GraphNode]:
        return [n for n in self.nodes if n.is_actor]

    @property
    def memory_nodes(self) -> list[GraphNode]:
        return [n for n in self.nodes if not n.is_actor]

    def intra_neighbors(self) -> dict[int, list[int]]:
        adj: dict[int, list[int]] = {n.node_id: [] for n in self.nodes}
        for a, b in self.edges.intra:
            adj[a].append(b)
            adj[b].append(a)
        return adj

    def to_dict(self) -> dict:
        """Plain description used by the CLI ``inspect-graph`` dump."""
        return {
            "center": self.center,
            "nodes": [
                {"id": n.node_id, "clip": n.clip_index, "track": n.track_id,
                 "actor": n.is_actor, "box": list(n.box.as_tuple())}
                for n in self.nodes
            ],
            "edges": {
                "intra": sorted(list(e) for e in self.edges.intra),
                "inter_intra_clip": sorted(list(e) for e in self.edges.inter_intra_clip),
                "inter_inter_clip": sorted(list(e) for e in self.edges.inter_inter_clip),
            },
        }


def _pair(a: int, b: int) -> tuple[int, int]:
    return (a, b) if a < b else (b, a)


def _link_edges(center: int, nodes: Sequence[GraphNode]) -> EdgeSet:
    """Build all three edge sets over ``nodes`` from scratch."""
    tracks: dict[int, list[GraphNode]] = defaultdict(list)
    clips: dict[int, list[GraphNode]] = defaultdict(list)
    for n in nodes:
        tracks[n.track_id].append(n)
        clips[n.clip_index].append(n)
    intra = set()
    for members in tracks.values():
        members.sort(key=lambda n: n.clip_index)
        for prev, nxt in zip(members, members[1:]):
            intra.add(_pair(prev.node_id, nxt.node_id))
    inter1 = set()
    for members in clips.values():
        for i, a in enumerate(members):
            for b in members[i + 1:]:
                inter1.add(_pair(a.node_id, b.node_id))
    actors = [n for n in nodes if n.is_actor]
    inter2 = {(m.node_id, a.node_id) for m in nodes if not m.is_actor for a in actors}
    return EdgeSet(frozenset(intra), frozenset(inter1), frozenset(inter2))


def build_graph(actors: Sequence[ActorRecord], window: Optional[MemoryWindow],
                center: Optional[int] = None) -> IdentityGraph:
    """Identity graph for the keyframe at ``window.center``.

    Actor ``i`` gets node id and feature slot ``i``.  The memory slot
    ``(s, n)`` of the window gets feature slot ``N_t + s * N_max + n``; node
    ids of memory nodes continue after the actors in slot order.
    """
    if not actors:
        raise ValueError("a graph needs at least one actor")
    t = window.center if window is not None else (center if center is not None else actors[0].clip_index)
    nodes: list[GraphNode] = []
    seen: set[tuple[int, int]] = set()

    def add(clip, track, box, is_actor, slot):
        key = (track, clip)
        if key in seen:
            raise ValueError(f"track {track} appears twice in clip {clip}")
        seen.add(key)
        nodes.append(GraphNode(len(nodes), clip, track, box, is_actor, slot))

    for i, a in enumerate(actors):
        if a.clip_index != t:
            raise ValueError(f"actor at clip {a.clip_index} does not belong to keyframe {t}")
        add(t, a.track_id, a.box, True, i)
    if window is not None:
        n_t = len(actors)
        for s, n, clip in window.valid_slots():
            add(clip, int(window.track_ids[s, n]), BoundingBox.from_tuple(window.boxes[s, n]),
                False, n_t + s * window.n_max + n)
    return IdentityGraph(t, tuple(nodes), _link_edges(t, nodes))


def _bfs(adj: dict[int, list[int]], sources: Sequence[int]) -> dict[int, int]:
    dist = {s: 0 for s in sources}
    queue = deque(sources)
    while queue:
        u = queue.popleft()
        for v in adj[u]:
            if v not in dist:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def intra_distance(g: IdentityGraph, n: GraphNode) -> Optional[int]:
    """Hop count to the actor node reachable through intra edges, or None."""
    adj = g.intra_neighbors()
    return _bfs(adj, [a.node_id for a in g.actor_nodes]).get(n.node_id)


def parity_distances(g: IdentityGraph) -> dict[int, int]:
    """Intra-edge distance of every node to its reference anchor.

    The anchor is the reachable actor node; components without an actor are
    anchored at the node closest in time to the center (earlier clip wins a
    tie).
    """
    adj = g.intra_neighbors()
    dist = _bfs(adj, [a.node_id for a in g.actor_nodes])
    by_id = {n.node_id: n for n in g.nodes}
    remaining = [n for n in g.nodes if n.node_id not in dist]
    while remaining:
        anchor = min(remaining, key=lambda n: (abs(n.clip_index - g.center), n.clip_index, n.node_id))
        dist.update(_bfs(adj, [anchor.node_id]))
        remaining = [n for n in remaining if n.node_id not in dist]
    assert set(dist) == set(by_id)
    return dist


def downsample(g: IdentityGraph) -> IdentityGraph:
    """Keep the even-distance reference nodes and rewire intra edges across the removed ones."""
    dist = parity_distances(g)
    reference = {nid for nid, d in dist.items() if d % 2 == 0}
    adj = g.intra_neighbors()
    intra = {e for e in g.edges.intra if e[0] in reference and e[1] in reference}
    for nid, neighbors in adj.items():
        if nid in reference:
            continue
        refs = sorted(v for v in neighbors if v in reference)
        if len(refs) == 2:
            intra.add(_pair(*refs))
    survivors = [n for n in g.nodes if n.node_id in reference]
    rebuilt = _link_edges(g.center, survivors)
    edges = EdgeSet(frozenset(intra), rebuilt.inter_intra_clip, rebuilt.inter_inter_clip)
    return IdentityGraph(g.center, tuple(survivors), edges)


def graph_pyramid(g: IdentityGraph, num_layers: int, downsampling: bool = True) -> list[IdentityGraph]:
    """Graphs seen by each HGNN layer; down-sampling happens only between layers."""
    graphs = [g]
    for _ in range(num_layers - 1):
        graphs.append(downsample(graphs[-1]) if downsampling else graphs[-1])
    return graphs
