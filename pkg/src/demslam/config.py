"""Pipeline configuration: dataclass sections, INI file loading, seed derivation.

Config files are ``key = value`` sections; unknown sections or keys are
rejected.  Command-line flags override file values, which override defaults.
"""

from __future__ import annotations

import configparser
import zlib
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError


@dataclass
class IngestConfig:
    d_min: float = 0.1
    d_max: float = 30.0


@dataclass
class PlaneConfig:
    iterations: int = 500
    inlier_thresh: float = 0.20   # outdoor default; 0.05 suits indoor scenes
    max_fit_points: int = 200000
    use_confidence: bool = False


@dataclass
class DemConfig:
    target_px_long: int = 4096
    tile_px: int = 256
    reducer: str = "softmax"
    tau: float = 0.02
    norm_p_lo: float = 0.5
    norm_p_hi: float = 99.5
    alpha_edge: float = 0.95


@dataclass
class EncoderConfig:
    kind: str = "builtin"          # builtin | tokens
    dim: int = 16
    patch_px: int = 16
    tokens_dir: str = ""
    nbhd: int = 9
    sigma_tiles: float = 1.0


@dataclass
class IndexConfig:
    m: int = 16
    ef_construction: int = 200
    ef_search: int = 128


@dataclass
class RetrievalConfig:
    k: int = 10
    tau_s: float = 0.0
    top_k: int = 10
    rho: float = 0.8
    rerank_k: int = 5
    exclusion_window: int = 1
    max_edge_rms: float = 1.0        # reject loop fits with worse residuals
    max_edge_log_scale: float = 0.3  # reject implausible scale jumps
    loop_inlier_thresh: float = 0.4  # consensus radius for match triples, m
    loop_ransac_iters: int = 200
    loop_min_inliers: int = 6
    loop_min_inlier_frac: float = 0.0


@dataclass
class OptimizerConfig:
    max_iters: int = 50
    tol: float = 1e-8
    huber: float = 1.0
    kappa: float = 100.0
    eps: float = 0.01
    sigma_t: float = 0.05
    sigma_rot_deg: float = 0.5
    sigma_scale: float = 0.005


@dataclass
class EvalConfig:
    max_dt: float = 0.02
    align: str = "sim3"            # sim3 | se3


@dataclass
class PipelineConfig:
    seed: int = 0
    jobs: int = 1
    ingest: IngestConfig = field(default_factory=IngestConfig)
    plane: PlaneConfig = field(default_factory=PlaneConfig)
    dem: DemConfig = field(default_factory=DemConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    index: IndexConfig = field(default_factory=IndexConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        if self.ingest.d_min < 0 or self.ingest.d_min >= self.ingest.d_max:
            raise ConfigError("ingest: need 0 <= d_min < d_max")
        if self.dem.reducer not in ("mean", "max", "softmax"):
            raise ConfigError(f"dem: unknown reducer {self.dem.reducer!r}")
        if self.dem.reducer == "softmax" and self.dem.tau <= 0:
            raise ConfigError("dem: softmax tau must be > 0")
        if not (0 <= self.dem.norm_p_lo < self.dem.norm_p_hi <= 100):
            raise ConfigError("dem: need 0 <= norm_p_lo < norm_p_hi <= 100")
        if not (0 <= self.dem.alpha_edge <= 1):
            raise ConfigError("dem: alpha_edge must be in [0, 1]")
        if self.dem.target_px_long < self.dem.tile_px or self.dem.tile_px < 1:
            raise ConfigError("dem: need target_px_long >= tile_px >= 1")
        if self.encoder.kind not in ("builtin", "tokens"):
            raise ConfigError(f"encoder: unknown kind {self.encoder.kind!r}")
        if self.encoder.kind == "tokens" and not self.encoder.tokens_dir:
            raise ConfigError("encoder: tokens kind requires tokens_dir")
        if self.index.m < 2:
            raise ConfigError("index: M must be >= 2")
        if self.retrieval.top_k < 1 or self.retrieval.k < 1:
            raise ConfigError("retrieval: k and top_k must be >= 1")
        if not (0 < self.retrieval.rho <= 1):
            raise ConfigError("retrieval: rho must be in (0, 1]")
        if self.eval.align not in ("sim3", "se3"):
            raise ConfigError(f"eval: unknown alignment {self.eval.align!r}")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")


_SECTIONS = {
    "ingest": IngestConfig, "plane": PlaneConfig, "dem": DemConfig,
    "encoder": EncoderConfig, "index": IndexConfig,
    "retrieval": RetrievalConfig, "optimizer": OptimizerConfig,
    "eval": EvalConfig,
}


def _coerce(raw: str, template):
    if isinstance(template, bool):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    return type(template)(raw)


def load_config(path: str | Path | None = None) -> PipelineConfig:
    """Defaults, overridden by an INI-style file when given.

    Raises:
        ConfigError: unknown section/key, bad value, or invariant violation.
    """
    cfg = PipelineConfig()
    if path is not None:
        parser = configparser.ConfigParser()
        read = parser.read(str(path))
        if not read:
            raise ConfigError(f"config file not found: {path}")
        for section in parser.sections():
            if section == "pipeline":
                for key, raw in parser.items("pipeline"):
                    if key not in ("seed", "jobs"):
                        raise ConfigError(f"unknown key [pipeline] {key}")
                    try:
                        setattr(cfg, key, int(raw))
                    except ValueError as exc:
                        raise ConfigError(f"[pipeline] {key}: {exc}") from exc
                continue
            if section not in _SECTIONS:
                raise ConfigError(f"unknown config section [{section}]")
            sub = getattr(cfg, section)
            known = {f.name: f for f in fields(sub)}
            for key, raw in parser.items(section):
                if key not in known:
                    raise ConfigError(f"unknown key [{section}] {key}")
                try:
                    setattr(sub, key, _coerce(raw, getattr(sub, key)))
                except ValueError as exc:
                    raise ConfigError(f"[{section}] {key}: {exc}") from exc
    cfg.validate()
    return cfg


def apply_overrides(cfg: PipelineConfig, section: str, **overrides) -> None:
    """Apply non-None CLI flag values onto one section, then revalidate."""
    target = cfg if section == "pipeline" else getattr(cfg, section)
    for key, value in overrides.items():
        if value is not None:
            setattr(target, key, value)
    cfg.validate()


def stage_seed(root_seed: int, stage: str) -> int:
    """Stage-keyed derivation so every stage draws independent randomness."""
    ss = np.random.SeedSequence([int(root_seed), zlib.crc32(stage.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0] % (1 << 63))
