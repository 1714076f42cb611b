"""Approximate nearest-neighbor retrieval over unit descriptors.

A from-scratch hierarchical navigable small-world graph with cosine
similarity (internal distance 1 - cos on pre-normalized vectors), an exact
exhaustive oracle, and recall measurement.  Construction is deterministic:
the level of every entry is drawn from a generator keyed by (index seed,
entry id), so rebuilds with the same insert order reproduce the same graph.
"""

from __future__ import annotations

import heapq
import struct
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (DimensionMismatch, DuplicateId, EmptyIndex, FormatError,
                     ZeroVector)

INDEX_MAGIC = b"DEMHNSW1"


@dataclass(frozen=True)
class IndexParams:
    m: int = 16
    ef_construction: int = 200
    ef_search: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.m < 2:
            raise ValueError("M must be >= 2")
        if self.ef_construction < 1 or self.ef_search < 1:
            raise ValueError("ef parameters must be >= 1")


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Normalized dot product in [-1, 1]; symmetric and scale-invariant.

    Raises:
        ZeroVector: either input has zero norm.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine similarity undefined for zero vectors")
    return float(np.clip((a @ b) / (na * nb), -1.0, 1.0))


def exact_search(ids: np.ndarray, vectors: np.ndarray, query: np.ndarray,
                 k: int) -> list[tuple[int, float]]:
    """Exhaustive top-k by cosine similarity; ties break on ascending id.

    Serves as the recall oracle for the approximate index.

    Raises:
        EmptyIndex: no entries.
        ZeroVector: zero-norm query.
    """
    ids = np.asarray(ids)
    vectors = np.asarray(vectors, dtype=float)
    if ids.size == 0:
        raise EmptyIndex("no entries to search")
    q = np.asarray(query, dtype=float)
    qn = np.linalg.norm(q)
    if qn == 0.0:
        raise ZeroVector("zero-norm query")
    norms = np.linalg.norm(vectors, axis=1)
    sims = (vectors @ q) / (norms * qn)
    order = np.lexsort((ids, -sims))[:k]
    return [(int(ids[i]), float(sims[i])) for i in order]


class HnswIndex:
    """Single-writer / multi-reader HNSW over unit vectors.

    Queries during an insert observe either the pre- or post-insert graph;
    an internal lock serializes mutations.  Deletions are unsupported;
    superseded ids are shadowed through a tombstone set filtered at result
    time.
    """

    def __init__(self, dim: int, params: IndexParams = IndexParams()):
        self.dim = int(dim)
        self.params = params
        self._ml = 1.0 / np.log(params.m)
        self._vecs = np.zeros((64, dim), dtype=np.float32)
        self._ids: list[int] = []
        self._id_to_internal: dict[int, int] = {}
        self._levels: list[int] = []
        self._neighbors: list[list[list[int]]] = []  # [node][layer] -> ids
        self._entry_point = -1
        self._max_level = -1
        self._tombstones: set[int] = set()
        self._write_lock = threading.Lock()
        # generation-stamped visit marks avoid reallocating a set per search
        self._visit_mark: list[int] = []
        self._visit_gen = 0

    def __len__(self) -> int:
        return len(self._ids)

    @property
    def live_count(self) -> int:
        return len(self._ids) - len(self._tombstones)

    def _level_for(self, ext_id: int) -> int:
        # splitmix64 keyed by (seed, id): stable across runs and platforms
        x = (int(ext_id) * 0x9E3779B97F4A7C15 + self.params.seed * 0xBF58476D1CE4E5B9) % (1 << 64)
        for _ in range(2):
            x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9 % (1 << 64)
            x = (x ^ (x >> 27)) * 0x94D049BB133111EB % (1 << 64)
            x ^= x >> 31
        u = (x >> 11) * (1.0 / (1 << 53))
        if u <= 0.0:
            u = 2.0 ** -53
        return int(-np.log(u) * self._ml)

    def _dist_many(self, q: np.ndarray, internal_ids: list[int]) -> np.ndarray:
        return 1.0 - self._vecs[internal_ids] @ q

    def _search_layer(self, q: np.ndarray, entries: list[int], layer: int,
                      ef: int, limit: int | None = None) -> list[tuple[float, int]]:
        """Best-first expansion; returns ascending (distance, internal id).

        When ef covers every node of the base layer the expansion would visit
        the whole reachable graph anyway, so it degenerates to one exhaustive
        scan (identical results, exhaustive behavior).
        """
        count = len(self._ids) if limit is None else limit
        vecs = self._vecs
        if layer == 0 and ef >= count:
            dists = 1.0 - vecs[:count] @ q
            order = np.argsort(dists, kind="stable")
            return [(float(dists[i]), int(i)) for i in order]
        neighbors = self._neighbors
        marks = self._visit_mark
        self._visit_gen += 1
        gen = self._visit_gen
        heappush, heappop, heappushpop = (heapq.heappush, heapq.heappop,
                                          heapq.heappushpop)
        for e in entries:
            marks[e] = gen
        dists = (1.0 - vecs[entries] @ q).tolist()
        candidates = list(zip(dists, entries))
        heapq.heapify(candidates)
        best = [(-d, e) for d, e in candidates]
        heapq.heapify(best)
        while len(best) > ef:
            heappop(best)
        full = len(best) >= ef
        while candidates:
            d, node = heappop(candidates)
            if full and d > -best[0][0]:
                break
            nbrs = [n for n in neighbors[node][layer] if marks[n] != gen]
            if not nbrs:
                continue
            for n in nbrs:
                marks[n] = gen
            for nd, nb in zip((1.0 - vecs[nbrs] @ q).tolist(), nbrs):
                if not full:
                    heappush(candidates, (nd, nb))
                    heappush(best, (-nd, nb))
                    full = len(best) >= ef
                elif nd < -best[0][0]:
                    heappush(candidates, (nd, nb))
                    heappushpop(best, (-nd, nb))
        out = [(-nd, nb) for nd, nb in best]
        out.sort()
        return out

    def _select_neighbors(self, cands: list[tuple[float, int]], m: int) -> list[int]:
        """Diversity-aware selection: keep candidates closer to the query
        than to anything already kept, then fill from the pruned pool."""
        if len(cands) <= m:
            return [c for _, c in cands]
        ids = [c for _, c in cands]
        sub = self._vecs[ids]
        # running minimum distance from each candidate to the kept set;
        # one matvec per kept candidate instead of a full pairwise product
        min_to_kept = np.full(len(ids), np.inf)
        kept: list[int] = []
        pruned: list[int] = []
        for ci, (d, _) in enumerate(cands):
            if len(kept) >= m:
                break
            if not kept or d < min_to_kept[ci]:
                kept.append(ci)
                np.minimum(min_to_kept, 1.0 - sub @ sub[ci], out=min_to_kept)
            else:
                pruned.append(ci)
        for ci in pruned:
            if len(kept) >= m:
                break
            kept.append(ci)
        return [ids[ci] for ci in kept]

    def insert(self, ext_id: int, vector: np.ndarray) -> None:
        """Add one entry; reachable by search as soon as this returns.

        Raises:
            DuplicateId: id already present.
            DimensionMismatch: wrong vector dimensionality.
            ZeroVector: zero-norm vector.
        """
        vector = np.asarray(vector, dtype=np.float32).reshape(-1)
        if vector.shape[0] != self.dim:
            raise DimensionMismatch(f"expected dim {self.dim}, got {vector.shape[0]}")
        n = np.linalg.norm(vector)
        if n == 0.0:
            raise ZeroVector("cannot index a zero vector")
        with self._write_lock:
            if ext_id in self._id_to_internal:
                raise DuplicateId(f"id {ext_id} already present")
            vector = vector / n
            node = len(self._ids)
            if node >= self._vecs.shape[0]:
                grown = np.zeros((2 * self._vecs.shape[0], self.dim), dtype=np.float32)
                grown[:node] = self._vecs[:node]
                self._vecs = grown
            self._vecs[node] = vector
            self._visit_mark.append(0)
            level = self._level_for(ext_id)
            self._ids.append(int(ext_id))
            self._id_to_internal[int(ext_id)] = node
            self._levels.append(level)
            self._neighbors.append([[] for _ in range(level + 1)])

            if self._entry_point < 0:
                self._entry_point = node
                self._max_level = level
                return

            q = self._vecs[node]
            curr = [self._entry_point]
            for layer in range(self._max_level, level, -1):
                curr = [self._search_layer(q, curr, layer, 1, limit=node)[0][1]]
            for layer in range(min(level, self._max_level), -1, -1):
                cands = self._search_layer(q, curr, layer,
                                           self.params.ef_construction,
                                           limit=node)
                m_max = self.params.m * 2 if layer == 0 else self.params.m
                selected = self._select_neighbors(cands, self.params.m)
                self._neighbors[node][layer] = list(selected)
                for nb in selected:
                    nb_list = self._neighbors[nb][layer]
                    nb_list.append(node)
                    if len(nb_list) > m_max:
                        d = self._dist_many(self._vecs[nb], nb_list)
                        pool = sorted(zip(d.tolist(), nb_list))
                        self._neighbors[nb][layer] = self._select_neighbors(pool, m_max)
                curr = [c for _, c in cands]
            if level > self._max_level:
                self._max_level = level
                self._entry_point = node

    def tombstone(self, ext_id: int) -> None:
        """Shadow an id: it stays in the graph but never appears in results."""
        with self._write_lock:
            if ext_id not in self._id_to_internal:
                raise KeyError(f"unknown id {ext_id}")
            self._tombstones.add(int(ext_id))

    def search(self, query: np.ndarray, k: int,
               ef_search: int | None = None) -> list[tuple[int, float]]:
        """Approximate top-k as (id, similarity), similarity non-increasing.

        Raises:
            EmptyIndex: no live entries.
            DimensionMismatch / ZeroVector: malformed query.
        """
        if self.live_count == 0:
            raise EmptyIndex("search on an empty index")
        query = np.asarray(query, dtype=np.float32).reshape(-1)
        if query.shape[0] != self.dim:
            raise DimensionMismatch(f"expected dim {self.dim}, got {query.shape[0]}")
        qn = np.linalg.norm(query)
        if qn == 0.0:
            raise ZeroVector("zero-norm query")
        q = query / qn
        ef = max(ef_search if ef_search is not None else self.params.ef_search, k)
        ef += len(self._tombstones)
        curr = [self._entry_point]
        for layer in range(self._max_level, 0, -1):
            curr = [self._search_layer(q, curr, layer, 1)[0][1]]
        found = self._search_layer(q, curr, 0, ef)
        out = []
        for d, node in found:
            ext = self._ids[node]
            if ext in self._tombstones:
                continue
            out.append((ext, 1.0 - d))
            if len(out) == k:
                break
        # deterministic order: similarity desc, id asc on exact ties
        out.sort(key=lambda r: (-r[1], r[0]))
        return out

    def entries(self) -> tuple[np.ndarray, np.ndarray]:
        """Live (ids, vectors) for oracle comparison."""
        ids = np.array([i for i in self._ids if i not in self._tombstones],
                       dtype=np.uint64)
        rows = [self._id_to_internal[int(i)] for i in ids]
        return ids, self._vecs[rows].astype(float)

    # -- persistence ----------------------------------------------------------

    def save(self, path: str | Path) -> None:
        """Snapshot the exact graph; loading reproduces identical searches."""
        n = len(self._ids)
        with open(path, "wb") as f:
            f.write(INDEX_MAGIC)
            f.write(struct.pack("<IIIIqIq", self.dim, self.params.m,
                                self.params.ef_construction, self.params.ef_search,
                                self.params.seed, n, self._entry_point))
            f.write(struct.pack("<i", self._max_level))
            f.write(struct.pack("<I", len(self._tombstones)))
            for t in sorted(self._tombstones):
                f.write(struct.pack("<Q", t))
            for i in range(n):
                f.write(struct.pack("<QI", self._ids[i], self._levels[i]))
                f.write(self._vecs[i].astype("<f4").tobytes())
                for layer in range(self._levels[i] + 1):
                    nbrs = self._neighbors[i][layer]
                    f.write(struct.pack("<I", len(nbrs)))
                    f.write(np.asarray(nbrs, dtype="<u4").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "HnswIndex":
        data = Path(path).read_bytes()
        if data[:8] != INDEX_MAGIC:
            raise FormatError(f"{path}: bad index magic")
        pos = 8
        dim, m, efc, efs, seed, n, entry = struct.unpack("<IIIIqIq", data[pos:pos + 36])
        pos += 36
        (max_level,) = struct.unpack("<i", data[pos:pos + 4])
        pos += 4
        (n_tomb,) = struct.unpack("<I", data[pos:pos + 4])
        pos += 4
        tombs = set()
        for _ in range(n_tomb):
            (t,) = struct.unpack("<Q", data[pos:pos + 8])
            tombs.add(t)
            pos += 8
        idx = cls(dim, IndexParams(m, efc, efs, seed))
        idx._vecs = np.zeros((max(n, 1), dim), dtype=np.float32)
        idx._visit_mark = [0] * n
        for i in range(n):
            ext, level = struct.unpack("<QI", data[pos:pos + 12])
            pos += 12
            idx._vecs[i] = np.frombuffer(data, dtype="<f4", count=dim, offset=pos)
            pos += 4 * dim
            layers = []
            for _ in range(level + 1):
                (cnt,) = struct.unpack("<I", data[pos:pos + 4])
                pos += 4
                layers.append(np.frombuffer(data, dtype="<u4", count=cnt,
                                            offset=pos).astype(int).tolist())
                pos += 4 * cnt
            idx._ids.append(int(ext))
            idx._id_to_internal[int(ext)] = i
            idx._levels.append(level)
            idx._neighbors.append(layers)
        if pos != len(data):
            raise FormatError(f"{path}: trailing bytes in index snapshot")
        idx._entry_point = entry
        idx._max_level = max_level
        idx._tombstones = tombs
        return idx


def recall_at_k(index: HnswIndex, queries: np.ndarray, k: int,
                ef_search: int | None = None) -> float:
    """Mean |ANN(q, k) & GT(q, k)| / k over the query set."""
    ids, vecs = index.entries()
    total = 0.0
    queries = np.atleast_2d(np.asarray(queries, dtype=float))
    for q in queries:
        approx = {i for i, _ in index.search(q, k, ef_search)}
        exact = {i for i, _ in exact_search(ids, vecs, q, k)}
        total += len(approx & exact) / k
    return total / queries.shape[0]
