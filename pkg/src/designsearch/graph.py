"""Design graphs: designs joined when their design distance is exactly one."""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass
from typing import Iterable

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components, shortest_path

from .space import CATEGORICAL, INACTIVE, NUMERICAL, DesignSpace, DomainError


def _neighbor_moves(space: DesignSpace, codes: np.ndarray):
    """Yield (source_rows, target_codes, label) blocks for every distance-1 move.

    Targets are not yet checked for validity; invalid rows are dropped by the
    caller through `space.ids_of`.  Labels index `space.coordinates`.
    """
    codes = np.asarray(codes, dtype=np.int16)
    rows = np.arange(len(codes))
    member_of = space._member_of
    for j, dim in enumerate(space.dimensions):
        col = codes[:, j]
        is_member = member_of[j] >= 0
        if dim.kind == NUMERICAL:
            for step in (-1, 1):
                tgt = col + step
                mask = (tgt >= 0) & (tgt < dim.size)
                if is_member:
                    mask &= col >= 0
                t = codes[mask].copy()
                t[:, j] = tgt[mask]
                yield rows[mask], t, j
        else:
            for v in range(dim.size):
                mask = col != v
                if is_member:
                    mask &= col >= 0
                t = codes[mask].copy()
                t[:, j] = v
                yield rows[mask], t, j

    n_dims = len(space.dimensions)
    for g_idx, g in enumerate(space.groups):
        label = n_dims + g_idx
        fj = space.position(g.flag)
        off = space._flag_inactive_code[g_idx]
        member_pos = [space.position(m) for m in g.members]
        num_pos = [p for p in member_pos if space.dimensions[p].kind == NUMERICAL]
        cat_pos = [p for p in member_pos if space.dimensions[p].kind == CATEGORICAL]
        on_values = [v for v in range(space.dimensions[fj].size) if v != off]

        # inactive -> (any active flag, any categorical member, numerical members at minimum)
        inactive = codes[:, fj] == off
        src = rows[inactive]
        cat_ranges = [range(space.dimensions[p].size) for p in cat_pos]
        for f in on_values:
            for combo in itertools.product(*cat_ranges):
                t = codes[inactive].copy()
                t[:, fj] = f
                for p in num_pos:
                    t[:, p] = 0
                for p, v in zip(cat_pos, combo):
                    t[:, p] = v
                yield src, t, label

        # active with numerical members at minimum -> inactive
        at_min = ~inactive
        for p in num_pos:
            at_min &= codes[:, p] == 0
        t = codes[at_min].copy()
        t[:, fj] = off
        for p in member_pos:
            t[:, p] = INACTIVE
        yield rows[at_min], t, label


def neighbor_arrays(space: DesignSpace, ids: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All design-graph edges leaving `ids`, as (source id, target id, label)."""
    ids = np.asarray(ids, dtype=np.int64)
    codes = space.codes[ids]
    srcs, tgts, labels = [], [], []
    for rows, t, label in _neighbor_moves(space, codes):
        if len(rows) == 0:
            continue
        tid = space.ids_of(t)
        ok = tid >= 0
        srcs.append(ids[rows[ok]])
        tgts.append(tid[ok])
        labels.append(np.full(int(ok.sum()), label, dtype=np.int64))
    if not srcs:
        empty = np.zeros(0, dtype=np.int64)
        return empty, empty, empty
    return np.concatenate(srcs), np.concatenate(tgts), np.concatenate(labels)


class DesignGraph:
    """Undirected, edge-labelled graph over a set of designs.

    `nodes` holds design ids in ascending order; `edges` holds each
    undirected edge once as a (smaller id, larger id) row.
    """

    def __init__(self, space: DesignSpace, nodes: np.ndarray, edges: np.ndarray, labels: np.ndarray):
        self.space = space
        self.nodes = np.asarray(nodes, dtype=np.int64)
        order = np.lexsort((edges[:, 1], edges[:, 0])) if len(edges) else np.zeros(0, dtype=np.int64)
        self.edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)[order]
        self.labels = np.asarray(labels, dtype=np.int64)[order]
        self._pos = None if self._is_full() else {int(v): i for i, v in enumerate(self.nodes)}

    def _is_full(self) -> bool:
        n = len(self.nodes)
        return n == self.space.size and (n == 0 or (self.nodes[0] == 0 and self.nodes[-1] == n - 1))

    def positions(self, ids: Iterable[int]) -> np.ndarray:
        ids = np.fromiter((int(i) for i in ids), dtype=np.int64)
        if self._pos is None:
            bad = (ids < 0) | (ids >= len(self.nodes))
            if bad.any():
                raise DomainError(f"design {int(ids[bad][0])} is not a node of this graph")
            return ids
        try:
            return np.array([self._pos[i] for i in ids], dtype=np.int64)
        except KeyError as exc:
            raise DomainError(f"design {exc.args[0]} is not a node of this graph") from None

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def adjacency(self) -> sp.csr_matrix:
        """Symmetric 0/1 adjacency over node positions."""
        if getattr(self, "_adj", None) is None:
            n = self.n_nodes
            if self.n_edges:
                pu, pv = self.positions(self.edges[:, 0]), self.positions(self.edges[:, 1])
                r = np.concatenate([pu, pv])
                c = np.concatenate([pv, pu])
                lab = np.concatenate([self.labels, self.labels])
            else:
                r = c = lab = np.zeros(0, dtype=np.int64)
            self._adj = sp.csr_matrix((np.ones(len(r)), (r, c)), shape=(n, n))
            self._lab = sp.csr_matrix((lab + 1, (r, c)), shape=(n, n))
        return self._adj

    def label_matrix(self) -> sp.csr_matrix:
        """Same pattern as `adjacency`, storing label index + 1."""
        self.adjacency()
        return self._lab

    def neighbors(self, design_id: int) -> np.ndarray:
        adj = self.adjacency()
        p = int(self.positions([design_id])[0])
        return self.nodes[adj.indices[adj.indptr[p]:adj.indptr[p + 1]]]

    def degrees(self) -> np.ndarray:
        return np.diff(self.adjacency().indptr)


class LazyDesignGraph:
    """Neighbourhoods of the full design graph computed on demand and memoised."""

    def __init__(self, space: DesignSpace):
        self.space = space
        self._cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}

    def _fill(self, ids: Iterable[int]) -> None:
        missing = sorted({int(i) for i in ids} - self._cache.keys())
        if not missing:
            return
        for i in missing:
            if not 0 <= i < self.space.size:
                raise DomainError(f"design {i} not in space")
        src, tgt, lab = neighbor_arrays(self.space, np.array(missing))
        order = np.lexsort((tgt, src))
        src, tgt, lab = src[order], tgt[order], lab[order]
        bounds = np.searchsorted(src, missing + [self.space.size])
        for k, i in enumerate(missing):
            a, b = bounds[k], bounds[k + 1]
            self._cache[i] = (tgt[a:b], lab[a:b])

    def neighbors(self, design_id: int) -> np.ndarray:
        return self.neighbors_with_labels(design_id)[0]

    def neighbors_with_labels(self, design_id: int) -> tuple[np.ndarray, np.ndarray]:
        hit = self._cache.get(int(design_id))
        if hit is None:
            self._fill([design_id])
            hit = self._cache[int(design_id)]
        return hit

    def prefetch(self, ids: Iterable[int]) -> None:
        self._fill(ids)


def build_graph(space: DesignSpace) -> DesignGraph:
    ids = np.arange(space.size)
    src, tgt, lab = neighbor_arrays(space, ids)
    keep = src < tgt
    edges = np.stack([src[keep], tgt[keep]], axis=1)
    return DesignGraph(space, ids, edges, lab[keep])


def multi_hop_neighbors(g: DesignGraph | LazyDesignGraph, seeds: Iterable[int], h: int) -> set[int]:
    """Nodes within 1..h hops of any seed, excluding the seeds."""
    if h < 1:
        raise DomainError("hop count must be >= 1")
    seeds = {int(s) for s in seeds}
    if isinstance(g, LazyDesignGraph):
        g.prefetch(seeds)
    else:
        g.positions(seeds)
    seen = set(seeds)
    frontier = seeds
    for _ in range(h):
        if isinstance(g, LazyDesignGraph):
            g.prefetch(frontier)
        if not frontier:
            break
        nxt = set(np.concatenate([g.neighbors(u) for u in frontier]).tolist())
        frontier = nxt - seen
        seen |= frontier
    return seen - seeds


@dataclass
class DesignSubgraph:
    explored: frozenset
    candidates: frozenset
    graph: DesignGraph

    @property
    def nodes(self) -> np.ndarray:
        return self.graph.nodes


def induced_graph(g: DesignGraph | LazyDesignGraph, ids: Iterable[int]) -> DesignGraph:
    ids = np.array(sorted({int(i) for i in ids}), dtype=np.int64)
    space = g.space
    if isinstance(g, DesignGraph):
        pos = g.positions(ids)
        sub = g.adjacency()[pos][:, pos].tocoo()
        lab = g.label_matrix()[pos][:, pos].tocoo()
        keep = sub.row < sub.col
        keep_l = lab.row < lab.col
        edges = np.stack([ids[sub.row[keep]], ids[sub.col[keep]]], axis=1)
        # label matrix shares the sparsity pattern, align through a dict
        lab_of = {(int(ids[r]), int(ids[c])): int(v) - 1 for r, c, v in zip(lab.row[keep_l], lab.col[keep_l], lab.data[keep_l])}
        labels = np.array([lab_of[(int(u), int(v))] for u, v in edges], dtype=np.int64)
        return DesignGraph(space, ids, edges.reshape(-1, 2), labels)
    g.prefetch(ids)
    if len(ids) == 0:
        return DesignGraph(space, ids, np.zeros((0, 2), dtype=np.int64), np.zeros(0, dtype=np.int64))
    parts = [g.neighbors_with_labels(int(u)) for u in ids]
    src = np.repeat(ids, [len(p[0]) for p in parts])
    tgt = np.concatenate([p[0] for p in parts])
    lab = np.concatenate([p[1] for p in parts])
    at = np.clip(np.searchsorted(ids, tgt), 0, len(ids) - 1)
    keep = (ids[at] == tgt) & (src < tgt)
    edges = np.stack([src[keep], tgt[keep]], axis=1)
    return DesignGraph(space, ids, edges, lab[keep])


def build_subgraph(g: DesignGraph | LazyDesignGraph, explored: Iterable[int], candidates: Iterable[int]) -> DesignSubgraph:
    explored = frozenset(int(i) for i in explored)
    candidates = frozenset(int(i) for i in candidates)
    overlap = explored & candidates
    if overlap:
        raise DomainError(f"explored and candidate sets overlap at {sorted(overlap)[:5]}")
    return DesignSubgraph(explored, candidates, induced_graph(g, explored | candidates))


def _bfs_distances(adj: sp.csr_matrix, sources: np.ndarray) -> np.ndarray:
    return shortest_path(adj, method="D", unweighted=True, directed=False, indices=sources)


def diameter_all_sources(g: DesignGraph, batch: int = 256) -> float:
    """Diameter by BFS from every node; inf when disconnected."""
    adj = g.adjacency()
    n = g.n_nodes
    if n == 0:
        return 0.0
    best = 0.0
    for start in range(0, n, batch):
        d = _bfs_distances(adj, np.arange(start, min(n, start + batch)))
        best = max(best, float(d.max()))
    return best


def diameter(g: DesignGraph) -> float:
    """Exact diameter via eccentricity bounding (Takes & Kosters, 2011).

    Each BFS tightens per-node eccentricity bounds; nodes whose bounds can no
    longer change the answer are dropped.  Returns inf when disconnected.
    """
    adj = g.adjacency()
    n = g.n_nodes
    if n == 0:
        return 0.0
    if connected_components(adj, directed=False)[0] > 1:
        return float("inf")
    lower = np.zeros(n)
    upper = np.full(n, np.inf)
    alive = np.ones(n, dtype=bool)
    deg = g.degrees()
    d_lo, d_hi = 0.0, np.inf
    pick_high = False
    while d_lo < d_hi and alive.any():
        cand = np.nonzero(alive)[0]
        if pick_high:
            key = np.lexsort((-deg[cand], -upper[cand]))
        else:
            key = np.lexsort((-deg[cand], lower[cand]))
        v = cand[key[0]]
        pick_high = not pick_high
        dist = _bfs_distances(adj, np.array([v]))[0]
        ecc = dist.max()
        lower = np.maximum(lower, np.maximum(ecc - dist, dist))
        upper = np.minimum(upper, ecc + dist)
        lower[v] = upper[v] = ecc
        d_lo = max(d_lo, lower[alive].max())
        d_hi = min(d_hi, upper[alive].max(), 2 * ecc)
        alive &= ~(((upper <= d_lo) & (lower >= d_hi / 2)) | (lower == upper))
    return float(d_lo)


def factor_spaces(space: DesignSpace) -> list[DesignSpace]:
    """Split a space into independent factors (dimensions not tied by groups or gates).

    The full design graph is the Cartesian product of the factors' graphs:
    validity is checked per factor and distance sums over factors.
    """
    parent = list(range(len(space.dimensions)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def union(a, b):
        parent[find(a)] = find(b)

    for g in space.groups:
        f = space.position(g.flag)
        for m in g.members:
            union(f, space.position(m))
        for dep, bound in g.gates:
            union(space.position(dep), space.position(bound))
    comps: dict[int, list[int]] = {}
    for j in range(len(space.dimensions)):
        comps.setdefault(find(j), []).append(j)
    factors = []
    for dims in comps.values():
        names = {space.dimensions[j].name for j in dims}
        groups = [g for g in space.groups if g.flag in names]
        factors.append(DesignSpace([space.dimensions[j] for j in dims], groups))
    return factors


def full_graph_diameter(space: DesignSpace) -> float:
    """Diameter of the complete design graph of `space` as a sum over factors."""
    total = 0.0
    for f in factor_spaces(space):
        fg = build_graph(f)
        if connected_components(fg.adjacency(), directed=False)[0] > 1:
            return float("inf")
        total += diameter_all_sources(fg)
    return total


def graph_stats(g: DesignGraph) -> dict:
    """Node/edge counts, both degree conventions, diameter and component count.

    For the complete graph of a space the diameter comes from its factors;
    any other graph uses eccentricity bounding.
    """
    adj = g.adjacency()
    n = g.n_nodes
    n_comp = int(connected_components(adj, directed=False)[0]) if n else 0
    e = g.n_edges
    if n_comp > 1:
        diam = float("inf")
    elif g._is_full():
        diam = full_graph_diameter(g.space)
    else:
        diam = diameter(g)
    return {
        "node_count": n,
        "undirected_edge_count": e,
        "directed_edge_count": 2 * e,
        "mean_degree": 2 * e / n if n else 0.0,
        "edges_per_node": e / n if n else 0.0,
        "diameter": diam,
        "component_count": n_comp,
    }


def build_graph_with_stats(space: DesignSpace) -> tuple[DesignGraph, dict]:
    t0 = time.perf_counter()
    g = build_graph(space)
    t1 = time.perf_counter()
    stats = graph_stats(g)
    stats["construction_seconds"] = t1 - t0
    stats["stats_seconds"] = time.perf_counter() - t1
    return g, stats
