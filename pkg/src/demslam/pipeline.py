"""Stage orchestration over a session directory.

Each stage reads the previous stage's artifacts, writes its own under
``<session>/<stage>/``, and drops a stamp file; stages check their
dependencies' stamps and fail with DependencyError when a prerequisite has
not run.  All randomness derives from the root seed keyed by stage name, and
every artifact write is byte-deterministic for a fixed seed.
"""

from __future__ import annotations

import csv
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import ann, covis, dem, demio, descriptor, geometry, posegraph, submaps
from .config import PipelineConfig, stage_seed
from .errors import (AllEmptyRegion, DegenerateInput, DependencyError,
                     NoSalientContent, UserInputError)
from .evaluate import Trajectory, evaluate_ate, read_tum, write_tum
from .sim3 import Sim3, umeyama_sim3

STAGES = ("ingest", "dem", "embed", "index", "query", "loops", "optimize",
          "eval", "render")


def log_event(stage: str, **fields) -> None:
    """One JSON object per line on stderr; human text goes to stdout."""
    doc = {"stage": stage, **fields}
    print(json.dumps(doc, sort_keys=True), file=sys.stderr, flush=True)


def ordered_map(fn, items, jobs: int = 1) -> list:
    """Map preserving order; jobs > 1 parallelizes pure per-item work."""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


class Session:
    """Artifact layout and stage stamps under one directory."""

    def __init__(self, root: str | Path, cfg: PipelineConfig):
        self.root = Path(root)
        self.cfg = cfg

    def dir(self, stage: str) -> Path:
        d = self.root / stage
        d.mkdir(parents=True, exist_ok=True)
        return d

    def stamp(self, stage: str, **info) -> None:
        stamps = self.root / "stamps"
        stamps.mkdir(parents=True, exist_ok=True)
        (stamps / f"{stage}.json").write_text(
            json.dumps({"stage": stage, "ok": True, **info}, indent=1))

    def require(self, *stages: str) -> None:
        for stage in stages:
            if not (self.root / "stamps" / f"{stage}.json").exists():
                raise DependencyError(
                    f"stage '{stage}' has not run (missing artifact "
                    f"{self.root / 'stamps' / (stage + '.json')})")

    # -- shared loaders -------------------------------------------------------

    def load_submaps(self, with_clouds: bool = True) -> list[submaps.Submap]:
        self.require("ingest")
        return submaps.read_manifest(self.root / "ingest" / "session.json",
                                     load_clouds=with_clouds)

    def load_dem_meta(self) -> dict:
        self.require("dem")
        return json.loads((self.root / "dem" / "meta.json").read_text())

    def load_frame(self) -> geometry.CanonicalFrame:
        meta = self.load_dem_meta()
        return geometry.CanonicalFrame(np.array(meta["frame"]["R"]),
                                       np.array(meta["frame"]["origin"]))

    def load_grid(self, submap_id: int) -> tuple[dem.DemGrid, dem.DemParams]:
        return demio.load_grid(self.root / "dem" / "tiles" /
                               f"grid_s{submap_id:04d}.json")

    def grid_ids(self) -> list[int]:
        meta = self.load_dem_meta()
        return list(meta["rasterized"])

    def intensity_for(self, submap_id: int) -> dem.IntensityGrid:
        grid, params = self.load_grid(submap_id)
        inten = dem.normalize_grid(grid, *params.norm_percentiles)
        return dem.edge_enhance_grid(inten, params.alpha_edge)

    def encoder(self):
        ec = self.cfg.encoder
        if ec.kind == "builtin":
            spec = descriptor.EncoderSpec("builtin-gradhist", ec.dim, ec.patch_px)
            return descriptor.BuiltinEncoder(spec)
        spec = descriptor.EncoderSpec("precomputed-tokens", ec.dim, ec.patch_px)
        return descriptor.PrecomputedTokenEncoder(spec, Path(ec.tokens_dir))

    def load_descriptors(self, kind: str, submap_id: int):
        path = self.root / "embed" / f"{kind}_s{submap_id:04d}.dsc"
        if not path.exists():
            return np.zeros(0, dtype=np.uint64), np.zeros((0, self.cfg.encoder.dim))
        return descriptor.load_descriptors(path)


# -- stages -------------------------------------------------------------------

def run_ingest(session: Session, manifest_path: str | Path) -> dict:
    """Depth-filter every submap cloud and persist the session manifest."""
    cfg = session.cfg
    t0 = time.time()
    sms = submaps.read_manifest(manifest_path)
    out_dir = session.dir("ingest")
    (out_dir / "clouds").mkdir(exist_ok=True)
    report = []
    cloud_files = {}
    filtered_sms = []
    for sm in sms:
        kept, _ = geometry.depth_filter_camera_relative(
            sm.cloud, sm.frame_poses, cfg.ingest.d_min, cfg.ingest.d_max)
        rel = f"clouds/submap_{sm.id:04d}.ply"
        submaps.write_ply(out_dir / rel, kept)
        cloud_files[sm.id] = rel
        row = {"submap": sm.id, "points_in": len(sm.cloud),
               "points_kept": len(kept)}
        report.append(row)
        if len(kept) == 0:
            print(f"warning: submap {sm.id} has no points inside "
                  f"[{cfg.ingest.d_min}, {cfg.ingest.d_max}] m; "
                  "downstream stages will skip it")
        log_event("ingest", **row)
        filtered_sms.append(submaps.Submap(sm.id, sm.frame_poses,
                                           sm.frame_stamps, kept,
                                           sm.transition_frame))
    submaps.write_manifest(out_dir / "session.json", filtered_sms, cloud_files)
    (out_dir / "report.json").write_text(json.dumps(report, indent=1))
    session.stamp("ingest", submaps=len(sms), seconds=round(time.time() - t0, 3))
    return {"submaps": len(sms), "report": report}


def run_dem(session: Session) -> dict:
    """Fit the global plane, anchor the grid, rasterize every submap."""
    cfg = session.cfg
    t0 = time.time()
    sms = session.load_submaps()
    params = dem.DemParams(
        target_px_long=cfg.dem.target_px_long, tile_px=cfg.dem.tile_px,
        reducer=cfg.dem.reducer, tau=cfg.dem.tau,
        norm_percentiles=(cfg.dem.norm_p_lo, cfg.dem.norm_p_hi),
        alpha_edge=cfg.dem.alpha_edge)

    clouds = [sm.cloud.points for sm in sms if len(sm.cloud) > 0]
    if not clouds:
        raise UserInputError("no submap has any points after ingest")
    union = np.vstack(clouds)
    seed = stage_seed(cfg.seed, "dem")
    if union.shape[0] > cfg.plane.max_fit_points:
        rng = np.random.default_rng(seed)
        sel = rng.choice(union.shape[0], cfg.plane.max_fit_points, replace=False)
        fit_pts = union[np.sort(sel)]
    else:
        fit_pts = union
    plane, inlier_mask = geometry.fit_plane_ransac(
        geometry.PointCloud(fit_pts), iterations=cfg.plane.iterations,
        inlier_thresh=cfg.plane.inlier_thresh, seed=seed)
    frame = geometry.build_canonical_frame(plane, fit_pts[inlier_mask])
    uvh_all = geometry.to_plane_coords(frame, union)
    bounds = dem.compute_bounds(uvh_all)
    mpp = dem.compute_mpp(bounds, params.target_px_long)

    tiles_dir = session.dir("dem") / "tiles"
    rasterized = []
    skipped = []
    for sm in sms:
        if len(sm.cloud) == 0:
            skipped.append(sm.id)
            continue
        uvh = geometry.to_plane_coords(frame, sm.cloud.points)
        grid = dem.rasterize(uvh, params, bounds, mpp, frame)
        demio.save_grid(grid, params, tiles_dir, sm.id)
        rasterized.append(sm.id)
        log_event("dem", submap=sm.id, tiles=len(grid.tiles),
                  rejected=grid.rejected_points)
    meta = {
        "frame": {"R": [[float(x) for x in row] for row in frame.R],
                  "origin": [float(x) for x in frame.origin]},
        "plane": {"normal": [float(x) for x in plane.normal],
                  "offset": plane.offset},
        "bounds": list(bounds), "mpp": mpp,
        "inlier_fraction": float(inlier_mask.mean()),
        "rasterized": rasterized, "skipped": skipped,
    }
    (session.dir("dem") / "meta.json").write_text(json.dumps(meta, indent=1))
    session.stamp("dem", rasterized=len(rasterized),
                  seconds=round(time.time() - t0, 3))
    return meta


def run_embed(session: Session) -> dict:
    """Tile descriptors (9x9 pooling) and chip descriptors (whole-submap)."""
    cfg = session.cfg
    t0 = time.time()
    session.require("dem")
    enc = session.encoder()
    out_dir = session.dir("embed")
    counts = {}
    for sid in session.grid_ids():
        inten = session.intensity_for(sid)
        keys = sorted(inten.tiles)
        try:
            chip_vecs_by_key = descriptor.embed_query_chips(
                inten, keys, enc, sid, cfg.encoder.sigma_tiles)
        except (NoSalientContent, AllEmptyRegion):
            chip_vecs_by_key = {}

        def embed_one(key, _sid=sid, _inten=inten):
            try:
                return key, descriptor.embed_global_tile(
                    _inten, key, enc, _sid, nbhd=cfg.encoder.nbhd,
                    sigma_tiles=cfg.encoder.sigma_tiles)
            except (NoSalientContent, AllEmptyRegion):
                return key, None

        results = ordered_map(embed_one, keys, cfg.jobs)
        ids, tile_vecs, chip_vecs = [], [], []
        for key, tile_vec in results:
            if tile_vec is None or key not in chip_vecs_by_key:
                continue
            ids.append(descriptor.pack_tile_id(sid, key[0], key[1]))
            tile_vecs.append(tile_vec)
            chip_vecs.append(chip_vecs_by_key[key])
        if ids:
            descriptor.save_descriptors(out_dir / f"tiles_s{sid:04d}.dsc",
                                        np.array(ids, dtype=np.uint64),
                                        np.array(tile_vecs))
            descriptor.save_descriptors(out_dir / f"chips_s{sid:04d}.dsc",
                                        np.array(ids, dtype=np.uint64),
                                        np.array(chip_vecs))
        counts[sid] = len(ids)
        log_event("embed", submap=sid, tiles=len(keys), embedded=len(ids))
    session.stamp("embed", embedded=sum(counts.values()),
                  seconds=round(time.time() - t0, 3))
    return counts


def run_index(session: Session) -> dict:
    """Build the gallery index over all tile descriptors, submap order."""
    cfg = session.cfg
    t0 = time.time()
    session.require("embed")
    params = ann.IndexParams(m=cfg.index.m,
                             ef_construction=cfg.index.ef_construction,
                             ef_search=cfg.index.ef_search,
                             seed=stage_seed(cfg.seed, "index"))
    index = None
    total = 0
    for sid in session.grid_ids():
        ids, vecs = session.load_descriptors("tiles", sid)
        for ext_id, vec in zip(ids, vecs):
            if index is None:
                index = ann.HnswIndex(vec.shape[0], params)
            index.insert(int(ext_id), vec)
            total += 1
    if index is None:
        raise UserInputError("no tile descriptors to index")
    index.save(session.dir("index") / "gallery.hnsw")
    log_event("index", entries=total)
    session.stamp("index", entries=total, seconds=round(time.time() - t0, 3))
    return {"entries": total}


def run_query(session: Session) -> dict:
    """Retrieve per-chip neighbor tiles with temporal exclusion.

    Submap q queries only tiles of submaps with id <= q - 1 - window; the
    fetch depth is padded by the excluded submaps' tile counts so the
    post-filter result still carries k hits per chip.
    """
    cfg = session.cfg
    t0 = time.time()
    session.require("index")
    index = ann.HnswIndex.load(session.dir("index") / "gallery.hnsw")
    window = cfg.retrieval.exclusion_window
    grid_ids = session.grid_ids()
    tile_counts = {}
    for sid in grid_ids:
        ids, _ = session.load_descriptors("tiles", sid)
        tile_counts[sid] = len(ids)
    out_dir = session.dir("query")
    n_queries = 0
    for q in grid_ids:
        allowed_max = q - 1 - window
        if not any(s <= allowed_max for s in grid_ids):
            continue
        ids, vecs = session.load_descriptors("chips", q)
        if len(ids) == 0:
            continue
        excluded = sum(c for s, c in tile_counts.items() if s > allowed_max)
        k_fetch = min(cfg.retrieval.k + excluded, len(index))
        rows = []
        for ext_id, vec in zip(ids, vecs):
            _, iu, iv = descriptor.unpack_tile_id(int(ext_id))
            found = index.search(vec, k_fetch,
                                 ef_search=max(cfg.index.ef_search, k_fetch))
            kept = 0
            for hit_id, sim in found:
                h_sid, h_iu, h_iv = descriptor.unpack_tile_id(hit_id)
                if h_sid > allowed_max:
                    continue
                rows.append([iu, iv, h_sid, h_iu, h_iv, repr(sim)])
                kept += 1
                if kept >= cfg.retrieval.k:
                    break
        with open(out_dir / f"hits_s{q:04d}.csv", "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["chip_iu", "chip_iv", "submap", "tile_iu", "tile_iv",
                        "similarity"])
            w.writerows(rows)
        n_queries += 1
        log_event("query", submap=q, hits=len(rows))
    session.stamp("query", queries=n_queries, seconds=round(time.time() - t0, 3))
    return {"queries": n_queries}


def _ransac_similarity(src: np.ndarray, dst: np.ndarray, weights: np.ndarray,
                       rng: np.random.Generator, thresh: float,
                       iterations: int, min_inliers: int = 4):
    """Consensus similarity fit over noisy point matches.

    Triples must be distinct and non-degenerate; the winning consensus set is
    refit with its descriptor-similarity weights.  Returns (transform,
    inlier mask, weighted rms) or None when no usable consensus exists.
    """
    n = src.shape[0]
    if n < 3:
        return None
    samples = rng.integers(0, n, size=(iterations, 3))
    best_count = -1
    best_mask = None
    for tri in samples:
        if len(set(tri.tolist())) < 3:
            continue
        try:
            t_try = umeyama_sim3(src[tri], dst[tri])
        except DegenerateInput:
            continue
        resid = np.linalg.norm(dst - t_try.act(src), axis=1)
        mask = resid <= thresh
        count = int(mask.sum())
        if count > best_count:
            best_count = count
            best_mask = mask
    if best_mask is None or best_count < min_inliers:
        return None
    try:
        t_fit = umeyama_sim3(src[best_mask], dst[best_mask],
                             weights=weights[best_mask])
    except DegenerateInput:
        return None
    resid = np.linalg.norm(dst - t_fit.act(src), axis=1)
    inliers = resid <= thresh
    if inliers.sum() < min_inliers:
        return None
    rms = float(np.sqrt(np.average(resid[inliers] ** 2,
                                   weights=weights[inliers])))
    return t_fit, inliers, rms


def _cell_points_local(frame, grid: dem.DemGrid, ref_pose: Sim3,
                       keys: list[tuple[int, int]]):
    """Observed cells of the given tiles as submap-local 3D points.

    Returns (global pixel indices (N, 2), local points (N, 3), hit weights).
    """
    u0, _, v0, _ = grid.bounds
    px_idx, uvh, wts = [], [], []
    for iu, iv in keys:
        tile = grid.tiles.get((iu, iv))
        if tile is None:
            continue
        ys, xs = np.nonzero(tile.valid_mask())
        gx = iu * grid.tile_px + xs
        gy = iv * grid.tile_px + ys
        u = u0 + (gx + 0.5) * grid.mpp
        v = v0 + (gy + 0.5) * grid.mpp
        h = tile.height[ys, xs]
        px_idx.append(np.column_stack([gx, gy]))
        uvh.append(np.column_stack([u, v, h]))
        wts.append(tile.hit_count[ys, xs].astype(float))
    if not uvh:
        return (np.zeros((0, 2), dtype=int), np.zeros((0, 3)), np.zeros(0))
    px_idx = np.vstack(px_idx)
    world = geometry.from_plane_coords(frame, np.vstack(uvh))
    local = ref_pose.inverse().act(world)
    return px_idx, local, np.concatenate(wts)


def _refine_edge_cells(frame, grid_q: dem.DemGrid, grid_n: dem.DemGrid,
                       t_q: Sim3, t_n: Sim3, t_hat0: Sim3,
                       tol: float = 1e-5):
    """Cell-level ICP refinement of a coarse loop transform.

    Every observed DEM cell is a 3D point in its submap's local frame;
    starting from the tile-level consensus fit, query cells are matched to
    their nearest neighbor-submap cells, trimmed, and realigned.  A coarse
    pass with a wide association cap pulls the estimate into the basin of
    the fine pass.  Returns (refined transform, weighted rms, pair count)
    or None when there is too little overlap to refine.
    """
    import scipy.spatial

    _, q_local, q_w = _cell_points_local(frame, grid_q, t_q,
                                         sorted(grid_q.tiles))
    _, n_local, n_w = _cell_points_local(frame, grid_n, t_n,
                                         sorted(grid_n.tiles))
    if len(q_local) < 20 or len(n_local) < 20:
        return None
    tree = scipy.spatial.cKDTree(n_local)
    cell = grid_n.mpp
    t_hat = t_hat0
    rms = np.inf
    pairs = 0
    for iters, cap_cells, trim_mult in ((12, 12.0, 3.0), (10, 3.0, 2.0)):
        cap = cap_cells * cell
        for _ in range(iters):
            moved = t_hat.act(q_local)
            dist, idx = tree.query(moved, k=1, distance_upper_bound=cap)
            ok = np.isfinite(dist)
            if ok.sum() < 20:
                return None
            src = q_local[ok]
            dst = n_local[idx[ok]]
            w = q_w[ok] * n_w[idx[ok]]
            keep = dist[ok] <= max(trim_mult * float(np.median(dist[ok])),
                                   2.0 * cell)
            if keep.sum() < 20:
                return None
            try:
                t_new = umeyama_sim3(src[keep], dst[keep], weights=w[keep])
            except DegenerateInput:
                return None
            step = float(np.max(np.abs(t_new.matrix() - t_hat.matrix())))
            t_hat = t_new
            resid = np.linalg.norm(dst[keep] - t_hat.act(src[keep]), axis=1)
            rms = float(np.sqrt(np.average(resid ** 2, weights=w[keep])))
            pairs = int(keep.sum())
            if step < tol:
                break
    return t_hat, rms, pairs


def _tile_world_points(session: Session, frame, grid: dem.DemGrid,
                       keys: list[tuple[int, int]]) -> np.ndarray:
    """Back-project tile anchor points at their mean observed heights.

    The anchor is the hit-weighted centroid of the tile's observed cells
    rather than the geometric center: it tracks where the content actually
    sits inside the tile, which resolves alignment below the tile lattice.
    """
    u0, _, v0, _ = grid.bounds
    pts = []
    for iu, iv in keys:
        tile = grid.tiles[(iu, iv)]
        valid = tile.valid_mask()
        hits = tile.hit_count[valid].astype(float)
        ys, xs = np.nonzero(valid)
        wsum = hits.sum()
        cx = float((xs * hits).sum() / wsum)
        cy = float((ys * hits).sum() / wsum)
        h = float((tile.height[valid] * hits).sum() / wsum)
        u = u0 + (iu * grid.tile_px + cx + 0.5) * grid.mpp
        v = v0 + (iv * grid.tile_px + cy + 0.5) * grid.mpp
        pts.append([u, v, h])
    return geometry.from_plane_coords(frame, np.array(pts))


def run_loops(session: Session) -> dict:
    """Vote, select covisible neighbors, rerank, and estimate loop edges."""
    cfg = session.cfg
    t0 = time.time()
    session.require("query")
    frame = session.load_frame()
    sms = {sm.id: sm for sm in session.load_submaps(with_clouds=False)}
    window = cfg.retrieval.exclusion_window

    graph = covis.CovisGraph()
    all_candidates: list[covis.LoopCandidate] = []
    edges_out = []
    grids: dict[int, dem.DemGrid] = {}

    def grid_for(sid: int) -> dem.DemGrid:
        if sid not in grids:
            grids[sid] = session.load_grid(sid)[0]
        return grids[sid]

    for q in session.grid_ids():
        hits_path = session.root / "query" / f"hits_s{q:04d}.csv"
        if not hits_path.exists():
            continue
        hits = []
        with open(hits_path, newline="") as f:
            for row in csv.DictReader(f):
                hits.append(covis.TileHit(
                    descriptor.pack_tile_id(q, int(row["chip_iu"]), int(row["chip_iv"])),
                    int(row["submap"]),
                    (int(row["tile_iu"]), int(row["tile_iv"])),
                    float(row["similarity"])))
        if not hits:
            continue
        scores = covis.vote_submaps(hits)
        exclude = {s for s in scores if s > q - 1 - window}
        neighbors = covis.select_covisible(scores, cfg.retrieval.tau_s,
                                           cfg.retrieval.top_k, exclude)
        if not neighbors:
            continue
        chip_ids, chip_vecs = session.load_descriptors("chips", q)
        cands = []
        for nb in neighbors:
            _, nb_tile_vecs = session.load_descriptors("tiles", nb)
            rerank = covis.rerank_vpr(chip_vecs, nb_tile_vecs,
                                      cfg.retrieval.rerank_k)
            cands.append(covis.LoopCandidate(q, nb, scores[nb], rerank))
        best = max(c.rerank_score for c in cands)
        accepted = []
        for c in cands:
            c.accepted = c.rerank_score >= cfg.retrieval.rho * best
            all_candidates.append(c)
            if not c.accepted:
                continue
            edge = _estimate_loop_edge(session, frame, sms, q, c, grid_for)
            if edge is not None:
                accepted.append(c)
                edges_out.append(edge)
            else:
                c.accepted = False
        if accepted:
            graph.update(q, accepted)
        log_event("loops", submap=q, candidates=len(cands),
                  accepted=len(accepted))

    out_dir = session.dir("loops")
    covis.write_candidate_log(out_dir / "candidates.csv", all_candidates)
    graph.save(out_dir / "covis_graph.json")
    (out_dir / "loop_edges.json").write_text(json.dumps(edges_out, indent=1))
    session.stamp("loops", edges=len(edges_out),
                  seconds=round(time.time() - t0, 3))
    return {"edges": len(edges_out)}


def _estimate_loop_edge(session: Session, frame, sms, q: int,
                        cand: covis.LoopCandidate, grid_for) -> dict | None:
    """Weighted similarity alignment on matched tile-center points.

    Matches each query chip to its most similar tile of the candidate submap
    (exact cosine), back-projects both sides through the canonical frame at
    their mean heights, and aligns query-local onto neighbor-local
    coordinates.  Returns None when matching is too degenerate to align.
    """
    cfg = session.cfg
    nb = cand.neighbor_submap
    chip_ids, chip_vecs = session.load_descriptors("chips", q)
    tile_ids, tile_vecs = session.load_descriptors("tiles", nb)
    if len(chip_ids) == 0 or len(tile_ids) == 0:
        return None
    sims = chip_vecs @ tile_vecs.T
    # per-chip best tile; wrong matches are culled by the RANSAC consensus
    match = np.argmax(sims, axis=1)
    w_all = sims[np.arange(len(chip_ids)), match]
    keep0 = w_all > 0
    if keep0.sum() < 3:
        return None
    chip_keys = [descriptor.unpack_tile_id(int(i))[1:]
                 for i in chip_ids[keep0]]
    tile_keys = [descriptor.unpack_tile_id(int(tile_ids[m]))[1:]
                 for m in match[keep0]]
    w = w_all[keep0]

    q_world = _tile_world_points(session, frame, grid_for(q), chip_keys)
    n_world = _tile_world_points(session, frame, grid_for(nb), tile_keys)
    t_q = sms[q].reference_pose
    t_n = sms[nb].reference_pose
    src = t_q.inverse().act(q_world)   # query-local
    dst = t_n.inverse().act(n_world)   # neighbor-local

    rng = np.random.default_rng(np.random.SeedSequence(
        [stage_seed(cfg.seed, "loops"), q, nb]))
    min_inliers = max(cfg.retrieval.loop_min_inliers,
                      int(np.ceil(cfg.retrieval.loop_min_inlier_frac
                                  * src.shape[0])))
    fit = _ransac_similarity(src, dst, w, rng,
                             thresh=cfg.retrieval.loop_inlier_thresh,
                             iterations=cfg.retrieval.loop_ransac_iters,
                             min_inliers=min_inliers)
    if fit is None:
        return None
    t_hat, inliers, rms = fit
    # alignment-residual verification: implausible fits never become edges
    if rms > cfg.retrieval.max_edge_rms:
        return None
    if abs(np.log(t_hat.s)) > cfg.retrieval.max_edge_log_scale:
        return None
    keep = inliers
    # cell-level ICP sharpens the coarse tile-anchor fit well below the
    # tile footprint
    refined = _refine_edge_cells(frame, grid_for(q), grid_for(nb), t_q, t_n,
                                 t_hat)
    if refined is not None:
        t_ref, rms_ref, _ = refined
        if (rms_ref <= rms + 1e-12
                and abs(np.log(t_ref.s)) <= cfg.retrieval.max_edge_log_scale):
            t_hat, rms = t_ref, rms_ref
    info = posegraph.edge_information(cand.vote_score, cand.rerank_score, rms,
                                      cfg.optimizer.kappa, cfg.optimizer.eps)
    qq = t_hat.quat()
    return {
        "i": nb, "j": q,
        "T_hat": {"q": [float(x) for x in qq],
                  "t": [float(x) for x in t_hat.t], "s": float(t_hat.s)},
        "info_diag": [float(x) for x in np.diag(info)],
        "vote": cand.vote_score, "rerank": cand.rerank_score,
        "alignment_rms": rms, "matches": int(keep.sum()),
    }


def run_optimize(session: Session) -> dict:
    """Assemble odometry + loop constraints and run Gauss-Newton."""
    cfg = session.cfg
    t0 = time.time()
    session.require("loops")
    sms = session.load_submaps(with_clouds=False)
    graph = posegraph.PoseGraph()
    for sm in sms:
        graph.add_pose(sm.id, sm.reference_pose)
    sig = cfg.optimizer
    info_odo = np.diag([1.0 / sig.sigma_t ** 2] * 3
                       + [1.0 / np.deg2rad(sig.sigma_rot_deg) ** 2] * 3
                       + [1.0 / sig.sigma_scale ** 2])
    ordered = sorted(sm.id for sm in sms)
    by_id = {sm.id: sm for sm in sms}
    for a, b in zip(ordered, ordered[1:]):
        t_hat = by_id[a].reference_pose.inverse() @ by_id[b].reference_pose
        graph.add_edge(posegraph.PoseGraphEdge(a, b, t_hat, info_odo, "odom"))
    loop_edges = json.loads((session.root / "loops" / "loop_edges.json").read_text())
    for e in loop_edges:
        t_hat = Sim3.from_quat(np.array(e["T_hat"]["q"]),
                               np.array(e["T_hat"]["t"]), e["T_hat"]["s"])
        graph.add_edge(posegraph.PoseGraphEdge(
            int(e["i"]), int(e["j"]), t_hat, np.diag(e["info_diag"]), "loop"))

    out_dir = session.dir("optimize")
    posegraph.save_pose_graph(graph, out_dir / "pose_graph.json")
    opt, report = posegraph.optimize_pose_graph(
        graph, max_iters=cfg.optimizer.max_iters, tol=cfg.optimizer.tol,
        huber=cfg.optimizer.huber)
    report.write_csv(out_dir / "report.csv")

    # re-anchor per-frame poses; the later submap's correction wins on the
    # shared transition frame
    stamp_pose: dict[float, Sim3] = {}
    for sm in sms:
        warp = opt[sm.id] @ sm.reference_pose.inverse()
        for ts, pose in zip(sm.frame_stamps, sm.frame_poses):
            stamp_pose[float(ts)] = warp @ pose
    stamps = sorted(stamp_pose)
    traj_opt = Trajectory(np.array(stamps), [stamp_pose[s] for s in stamps])
    write_tum(out_dir / "trajectory_opt.tum", traj_opt)

    odo_pose: dict[float, Sim3] = {}
    for sm in sms:
        for ts, pose in zip(sm.frame_stamps, sm.frame_poses):
            odo_pose[float(ts)] = pose
    traj_odo = Trajectory(np.array(stamps), [odo_pose[s] for s in stamps])
    write_tum(out_dir / "trajectory_odom.tum", traj_odo)

    doc = {"poses": [dict(id=i, q=[float(x) for x in opt[i].quat()],
                          t=[float(x) for x in opt[i].t], s=float(opt[i].s))
                     for i in sorted(opt)],
           "iterations": report.iterations,
           "initial_cost": report.initial_cost,
           "final_cost": report.final_cost,
           "converged": report.converged}
    (out_dir / "poses_opt.json").write_text(json.dumps(doc, indent=1))
    log_event("optimize", iterations=report.iterations,
              initial_cost=report.initial_cost, final_cost=report.final_cost)
    session.stamp("optimize", iterations=report.iterations,
                  seconds=round(time.time() - t0, 3))
    return doc


def run_eval(session: Session, gt_path: str | Path,
             est_path: str | Path | None = None) -> dict:
    """ATE of the optimized (or given) trajectory against ground truth."""
    cfg = session.cfg
    if est_path is None:
        session.require("optimize")
        est_path = session.root / "optimize" / "trajectory_opt.tum"
    est_path = Path(est_path)
    est = read_tum(est_path)
    gt = read_tum(gt_path)
    with_scale = cfg.eval.align == "sim3"
    report = evaluate_ate(est, gt, cfg.eval.max_dt, with_scale)
    out = {"ate_rmse": report["ate_rmse"], "pairs": report["pairs"],
           "align": cfg.eval.align, "est": str(est_path), "gt": str(gt_path)}
    odo_path = session.root / "optimize" / "trajectory_odom.tum"
    if est_path != odo_path and odo_path.exists():
        odo = read_tum(odo_path)
        out["ate_rmse_odometry"] = evaluate_ate(odo, gt, cfg.eval.max_dt,
                                                with_scale)["ate_rmse"]
    out_dir = session.dir("eval")
    (out_dir / "ate.json").write_text(json.dumps(out, indent=1))
    session.stamp("eval", ate=out["ate_rmse"])
    log_event("eval", **{k: v for k, v in out.items() if k != "alignment"})
    return out


def run_render(session: Session, hillshade_on: bool = False,
               colormap: bool = False) -> dict:
    """Merged-scene preview PNGs from the anchored grid geometry."""
    cfg = session.cfg
    t0 = time.time()
    meta = session.load_dem_meta()
    frame = session.load_frame()
    sms = session.load_submaps()
    params = dem.DemParams(
        target_px_long=cfg.dem.target_px_long, tile_px=cfg.dem.tile_px,
        reducer=cfg.dem.reducer, tau=cfg.dem.tau,
        norm_percentiles=(cfg.dem.norm_p_lo, cfg.dem.norm_p_hi),
        alpha_edge=cfg.dem.alpha_edge)
    pts = np.vstack([sm.cloud.points for sm in sms if len(sm.cloud) > 0])
    uvh = geometry.to_plane_coords(frame, pts)
    grid = dem.rasterize(uvh, params, tuple(meta["bounds"]), meta["mpp"], frame)
    inten = dem.normalize_grid(grid, *params.norm_percentiles)
    inten = dem.edge_enhance_grid(inten, params.alpha_edge)
    shade = dem.hillshade_grid(grid) if hillshade_on else None
    out_dir = session.dir("render")
    out = out_dir / ("dem_preview_color.png" if colormap else "dem_preview.png")
    demio.render_preview(inten, out, shading=shade, colormap=colormap)
    log_event("render", file=str(out), tiles=len(grid.tiles))
    session.stamp("render", seconds=round(time.time() - t0, 3))
    return {"file": str(out)}
