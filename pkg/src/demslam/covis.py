"""Submap-level covisibility: vote aggregation, candidate selection, rerank.

Chip-to-tile retrieval hits are pooled by summing raw similarities per parent
submap; submaps above a score threshold (or within the top K) become
covisible neighbors, and a second exact-similarity voting pass over each
candidate's own tiles reranks them into accepted loop candidates.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import EmptyCandidate, SelfEdge


@dataclass(frozen=True)
class TileHit:
    """One retrieved tile for one query chip."""

    chip_id: int
    submap_id: int
    tile_key: tuple[int, int]
    similarity: float

    def __post_init__(self):
        if not (-1.0 - 1e-9 <= self.similarity <= 1.0 + 1e-9):
            raise ValueError(f"similarity {self.similarity} outside [-1, 1]")


@dataclass
class LoopCandidate:
    query_submap: int
    neighbor_submap: int
    vote_score: float
    rerank_score: float = 0.0
    accepted: bool = False

    def __post_init__(self):
        if self.query_submap == self.neighbor_submap:
            raise SelfEdge("loop candidate cannot pair a submap with itself")


def vote_submaps(hits: list[TileHit]) -> dict[int, float]:
    """Sum each retrieved tile's raw similarity into its parent submap.

    Submaps with no hits are absent from the result.
    """
    scores: dict[int, float] = {}
    for h in hits:
        scores[h.submap_id] = scores.get(h.submap_id, 0.0) + h.similarity
    return scores


def select_covisible(scores: dict[int, float], tau_s: float, top_k: int,
                     exclude: set[int] | None = None) -> list[int]:
    """Submaps scoring >= tau_s, best first, truncated to the top K.

    Ties break toward the lower submap id.  ``exclude`` removes the query's
    own submap and any temporal-exclusion window.
    """
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    excl = exclude or set()
    ranked = sorted(
        ((sid, s) for sid, s in scores.items() if s >= tau_s and sid not in excl),
        key=lambda kv: (-kv[1], kv[0]),
    )
    return [sid for sid, _ in ranked[:top_k]]


def rerank_vpr(query_chips: np.ndarray, candidate_tiles: np.ndarray,
               k_prime: int = 5) -> float:
    """Second-stage score: exact cosine voting restricted to one candidate.

    For every query chip the top k' most similar candidate tiles contribute
    their similarity; both sides live in the same descriptor space.

    Raises:
        EmptyCandidate: candidate has no tile descriptors.
    """
    chips = np.atleast_2d(np.asarray(query_chips, dtype=float))
    tiles = np.atleast_2d(np.asarray(candidate_tiles, dtype=float))
    if tiles.shape[0] == 0 or tiles.size == 0:
        raise EmptyCandidate("candidate submap has no tile descriptors")
    c_norm = chips / np.linalg.norm(chips, axis=1, keepdims=True)
    t_norm = tiles / np.linalg.norm(tiles, axis=1, keepdims=True)
    sims = c_norm @ t_norm.T
    k = min(k_prime, tiles.shape[0])
    top = np.sort(sims, axis=1)[:, -k:]
    return float(top.sum())


@dataclass
class CovisGraph:
    """Undirected simple graph over submaps with per-edge scores."""

    nodes: set[int] = field(default_factory=set)
    edges: dict[tuple[int, int], dict[str, float]] = field(default_factory=dict)

    @staticmethod
    def _key(a: int, b: int) -> tuple[int, int]:
        return (a, b) if a < b else (b, a)

    def update(self, query_submap: int, accepted: list[LoopCandidate]) -> None:
        """Insert the query node and one edge per accepted candidate.

        Re-accepting an existing edge keeps the maximum of old and new scores,
        so the graph stays simple under repeated insertion.

        Raises:
            SelfEdge: a candidate pairs the query with itself.
        """
        self.nodes.add(query_submap)
        for cand in accepted:
            if cand.neighbor_submap == query_submap and cand.query_submap == query_submap:
                raise SelfEdge(f"self edge requested for submap {query_submap}")
            a, b = cand.query_submap, cand.neighbor_submap
            if a == b:
                raise SelfEdge(f"self edge requested for submap {a}")
            self.nodes.add(a)
            self.nodes.add(b)
            key = self._key(a, b)
            prev = self.edges.get(key)
            if prev is None:
                self.edges[key] = {"vote_score": cand.vote_score,
                                   "rerank_score": cand.rerank_score}
            else:
                prev["vote_score"] = max(prev["vote_score"], cand.vote_score)
                prev["rerank_score"] = max(prev["rerank_score"], cand.rerank_score)

    def save(self, path: str | Path) -> None:
        doc = {
            "nodes": sorted(self.nodes),
            "edges": [
                {"a": a, "b": b, "vote_score": s["vote_score"],
                 "rerank_score": s["rerank_score"]}
                for (a, b), s in sorted(self.edges.items())
            ],
        }
        Path(path).write_text(json.dumps(doc, indent=1))

    @classmethod
    def load(cls, path: str | Path) -> "CovisGraph":
        doc = json.loads(Path(path).read_text())
        g = cls()
        g.nodes = set(doc["nodes"])
        for e in doc["edges"]:
            g.edges[cls._key(int(e["a"]), int(e["b"]))] = {
                "vote_score": float(e["vote_score"]),
                "rerank_score": float(e["rerank_score"]),
            }
        return g


def write_candidate_log(path: str | Path, candidates: list[LoopCandidate]) -> None:
    """CSV loop-candidate log: query_id, neighbor_id, vote, rerank, accepted."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["query_id", "neighbor_id", "vote", "rerank", "accepted"])
        for c in candidates:
            w.writerow([c.query_submap, c.neighbor_submap,
                        repr(c.vote_score), repr(c.rerank_score), int(c.accepted)])


def read_candidate_log(path: str | Path) -> list[LoopCandidate]:
    out = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            out.append(LoopCandidate(
                int(row["query_id"]), int(row["neighbor_id"]),
                float(row["vote"]), float(row["rerank"]),
                bool(int(row["accepted"])),
            ))
    return out
