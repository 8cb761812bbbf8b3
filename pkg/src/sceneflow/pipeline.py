"""End-to-end scene-flow pipeline and its configuration.

Stage order per scene pair: crop, ground removal (both frames), motion
compensation, flow optimization, rigid refinement, recomposition of total
flow.  Removed ground points get the ego-motion flow.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .core import RigidTransform, crop_to_square
from .ego import IcpConfig, motion_compensate
from .evaluation import (CSV_HEADER, MetricsReport, classify_points, compute_metrics,
                         generate_flow_labels)
from .flow import FlowOptConfig, compose_total_flow, optimize_flow
from .ground import (CELL_SIZE, GROUND_THRESHOLD, HUBER_DELTA, MAX_SLOPE, fit_height_map,
                     segment_ground)
from .io import find_scenes, load_scene, write_flow, write_labels, write_mask
from .refine import RefineConfig, refine_flow

log = logging.getLogger(__name__)

CROP_HALF_EXTENT = 35.0
VARIANTS = ("backbone", "motion", "full")


class ConfigError(ValueError):
    """Invalid pipeline configuration."""


@dataclass
class GroundConfig:
    threshold: float = GROUND_THRESHOLD
    delta: float = HUBER_DELTA
    lr: float = 0.004
    iterations: int = 1000
    hidden: tuple = (64, 64, 64)
    cell_size: float | None = CELL_SIZE
    max_slope: float | None = MAX_SLOPE

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not self.threshold > 0 or not self.delta > 0 or not self.lr > 0:
            raise ValueError("threshold, delta and lr must be positive")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")


@dataclass
class PipelineConfig:
    motion_compensation: bool = True
    ground_removal: bool = True
    rigid_refinement: bool = True
    # "auto" uses the pair's ego pose when present, "icp" always estimates
    ego_source: str = "auto"
    crop_half_extent: float | None = CROP_HALF_EXTENT
    ground: GroundConfig = field(default_factory=GroundConfig)
    icp: IcpConfig = field(default_factory=IcpConfig)
    flow: FlowOptConfig = field(default_factory=FlowOptConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    input_dir: str | None = None
    output_dir: str | None = None
    workers: int = 1
    seed: int = 0
    dump_intermediate: bool = False

    _SECTIONS = {"ground": GroundConfig, "icp": IcpConfig, "flow": FlowOptConfig,
                 "refine": RefineConfig}

    def __post_init__(self):
        if self.ego_source not in ("auto", "icp"):
            raise ValueError("ego_source must be 'auto' or 'icp'")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.crop_half_extent is not None and not self.crop_half_extent > 0:
            raise ValueError("crop_half_extent must be positive")

    @classmethod
    def from_dict(cls, data):
        """Build from a (possibly partial) nested dict; unknown keys are errors."""
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = {}
        try:
            for key, value in data.items():
                section = cls._SECTIONS.get(key)
                if section is not None:
                    if not isinstance(value, dict):
                        raise ConfigError(f"section {key!r} must be an object")
                    names = {f.name for f in dataclasses.fields(section)}
                    bad = set(value) - names
                    if bad:
                        raise ConfigError(f"unknown keys in {key!r}: {sorted(bad)}")
                    kw[key] = section(**value)
                else:
                    kw[key] = value
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path):
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(data)

    def to_dict(self):
        out = dataclasses.asdict(self)
        out["ground"]["hidden"] = list(self.ground.hidden)
        return out

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    def variant(self, name):
        """Ablation variant: ``backbone``, ``motion`` or ``full``."""
        if name not in VARIANTS:
            raise ValueError(f"unknown variant {name!r}")
        return self.replace(motion_compensation=name != "backbone",
                            rigid_refinement=name == "full")

    def seeded(self, seed):
        """Copy whose stochastic stages all derive from ``seed``."""
        return self.replace(seed=seed, flow=dataclasses.replace(self.flow, seed=seed),
                            refine=dataclasses.replace(self.refine, seed=seed))


@dataclass
class SceneResult:
    name: str
    flow: np.ndarray
    ego: RigidTransform
    ego_source: str
    metrics: MetricsReport | None = None
    intermediate: dict = field(default_factory=dict)
    seconds: float = 0.0


@dataclass
class _Prepared:
    crop: np.ndarray          # indices of cloud_t kept by the crop
    ground_t: np.ndarray      # ground mask over the cropped cloud_t
    source: np.ndarray        # cropped, ground-removed cloud_t
    target: np.ndarray        # cropped, ground-removed cloud_t_delta


def _prepare(pair, cfg):
    if cfg.crop_half_extent is None:
        c0, crop = pair.cloud_t, np.arange(len(pair.cloud_t))
        c1 = pair.cloud_t_delta
    else:
        c0, crop = crop_to_square(pair.cloud_t, cfg.crop_half_extent)
        c1, _ = crop_to_square(pair.cloud_t_delta, cfg.crop_half_extent)
    if cfg.ground_removal:
        g = cfg.ground
        kw = dict(lr=g.lr, iterations=g.iterations, delta=g.delta, hidden=g.hidden,
                  cell_size=g.cell_size, max_slope=g.max_slope)
        m0 = segment_ground(c0, fit_height_map(c0, seed=[cfg.seed, 0], **kw), g.threshold)
        m1 = segment_ground(c1, fit_height_map(c1, seed=[cfg.seed, 1], **kw), g.threshold)
    else:
        m0, m1 = np.zeros(len(c0), dtype=bool), np.zeros(len(c1), dtype=bool)
    return _Prepared(crop, m0, c0[~m0], c1[~m1])


def _ego(pair, prep, cfg):
    if not cfg.motion_compensation:
        return RigidTransform.identity(), "none"
    scoped = pair.replace(cloud_t=prep.source, cloud_t_delta=prep.target, gt_flow=None)
    _, T, source = motion_compensate(scoped, cfg.icp, use_provided=cfg.ego_source == "auto")
    return T, source


def _assemble(pair, prep, T, residual, nets, cfg):
    """Full-length total flow from the residual on the non-ground cropped points.

    Points without a residual (ground, outside the crop) get the ego flow, or
    the forward network's prediction when motion compensation is off.
    """
    cloud = pair.cloud_t
    keep = np.zeros(len(cloud), dtype=bool)
    keep[prep.crop[~prep.ground_t]] = True
    flow = np.empty_like(cloud)
    flow[keep] = compose_total_flow(cloud[keep], T, residual)
    rest = ~keep
    if rest.any():
        if cfg.motion_compensation:
            flow[rest] = T.apply(cloud[rest]) - cloud[rest]
        else:
            flow[rest] = nets.forward_flow(cloud[rest])
    return flow


def _metrics(pair, prep, flow):
    if pair.ego_motion is None or pair.gt_flow is None and not pair.tracks_t:
        return None
    labels, valid = generate_flow_labels(pair)
    classes = classify_points(pair, labels, valid=valid)
    in_crop = np.zeros(len(pair.cloud_t), dtype=bool)
    in_crop[prep.crop] = True
    return compute_metrics(flow, labels, classes, valid & in_crop)


def _solve(pair, prep, cfg, with_refined):
    """Flow for one stage configuration; optionally also the unrefined variant."""
    T, source_flag = _ego(pair, prep, cfg)
    compensated = T.apply(prep.source)
    if len(compensated) == 0 or len(prep.target) == 0:
        raise ValueError(f"scene {pair.name!r}: empty cloud after crop and ground removal")
    result = optimize_flow(compensated, prep.target, cfg.flow, return_result=True)
    raw = result.flow
    flows = {"raw": _assemble(pair, prep, T, raw, result.nets, cfg)}
    details = {}
    if with_refined:
        refined, clusters, fits = refine_flow(compensated, raw, cfg.refine, return_details=True)
        flows["refined"] = _assemble(pair, prep, T, refined, result.nets, cfg)
        details["clusters"] = clusters.labels
    return T, source_flag, flows, details, result


def _intermediate(pair, prep, flows, details):
    n = len(pair.cloud_t)
    ground = np.zeros(n, dtype=bool)
    ground[prep.crop[prep.ground_t]] = True
    out = {"ground_mask": ground, "flow_backbone": flows["raw"]}
    if "clusters" in details:
        labels = np.full(n, -1, dtype=np.int32)
        labels[prep.crop[~prep.ground_t]] = details["clusters"]
        out["clusters"] = labels
    return out


def run_scene(pair, cfg):
    """Run the configured pipeline on one :class:`ScenePair`."""
    start = time.perf_counter()
    with threadpool_limits(1):
        prep = _prepare(pair, cfg)
        T, flag, flows, details, _ = _solve(pair, prep, cfg, cfg.rigid_refinement)
    flow = flows["refined" if cfg.rigid_refinement else "raw"]
    inter = _intermediate(pair, prep, flows, details) if cfg.dump_intermediate else {}
    return SceneResult(pair.name, flow, T, flag, _metrics(pair, prep, flow), inter,
                       time.perf_counter() - start)


def ablate_scene(pair, cfg):
    """The three ablation variants for one pair, sharing the common stages.

    Ground removal runs once; the motion-compensated flow optimization is
    shared by the ``motion`` and ``full`` variants.
    """
    start = time.perf_counter()
    out = {}
    with threadpool_limits(1):
        prep = _prepare(pair, cfg)
        bb = cfg.variant("backbone")
        T, flag, flows, _, _ = _solve(pair, prep, bb, False)
        out["backbone"] = SceneResult(pair.name, flows["raw"], T, flag,
                                      _metrics(pair, prep, flows["raw"]))
        mc = cfg.variant("full")
        T, flag, flows, _, _ = _solve(pair, prep, mc, True)
        for name, key in (("motion", "raw"), ("full", "refined")):
            out[name] = SceneResult(pair.name, flows[key], T, flag,
                                    _metrics(pair, prep, flows[key]))
    elapsed = time.perf_counter() - start
    for r in out.values():
        r.seconds = elapsed
    return out


def _scene_task(args):
    kind, path_or_pair, cfg = args
    pair = load_scene(path_or_pair) if isinstance(path_or_pair, (str, Path)) else path_or_pair
    try:
        if kind == "ablate":
            return ablate_scene(pair, cfg), None
        return run_scene(pair, cfg), None
    except Exception as exc:  # noqa: BLE001 - reported per scene
        return None, f"{pair.name}: {type(exc).__name__}: {exc}"


def map_scenes(kind, scenes, cfg, workers=None):
    """Run ``kind`` ("run" or "ablate") over scenes; results in input order.

    ``scenes`` are directories or :class:`ScenePair` objects.  Each entry of
    the returned list is ``(result, error)``.
    """
    workers = workers or cfg.workers
    tasks = [(kind, s, cfg) for s in scenes]
    if workers == 1 or len(tasks) <= 1:
        return [_scene_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_scene_task, tasks))


def write_result(directory, result):
    """Write ``flow.bin``, ``metrics.json`` and any intermediates for one scene."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_flow(directory / "flow.bin", result.flow)
    if result.metrics is not None:
        (directory / "metrics.json").write_text(result.metrics.to_json(indent=2))
    inter = result.intermediate
    if "ground_mask" in inter:
        write_mask(directory / "ground_mask.bin", inter["ground_mask"])
    if "flow_backbone" in inter:
        write_flow(directory / "flow_backbone.bin", inter["flow_backbone"])
    if "clusters" in inter:
        write_labels(directory / "clusters.bin", inter["clusters"])


def aggregate(results):
    """Merge per-scene metrics in list order; ``None`` when no scene has metrics."""
    reports = [r.metrics for r in results if r is not None and r.metrics is not None]
    return MetricsReport.merge(reports) if reports else None


def run_pipeline(cfg, scenes=None):
    """Run over ``cfg.input_dir`` (or ``scenes``), writing outputs when configured.

    Returns ``(results, errors, aggregate_report)``.
    """
    if scenes is None:
        if cfg.input_dir is None:
            raise ConfigError("input_dir is required")
        scenes = find_scenes(cfg.input_dir)
    outcomes = map_scenes("run", scenes, cfg)
    results = [r for r, _ in outcomes]
    errors = [e for _, e in outcomes if e is not None]
    for e in errors:
        log.error("scene failed: %s", e)
    report = aggregate(results)
    if cfg.output_dir is not None:
        out = Path(cfg.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        rows = [CSV_HEADER]
        for r in results:
            if r is None:
                continue
            write_result(out / r.name, r)
            if r.metrics is not None:
                rows.append(r.metrics.csv_row(r.name))
        (out / "metrics.csv").write_text("\n".join(rows) + "\n")
        if report is not None:
            (out / "report.json").write_text(report.to_json(indent=2))
    return results, errors, report
