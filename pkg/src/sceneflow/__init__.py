"""Learning-free LiDAR scene flow.

ICP ego-motion compensation, coordinate-network ground removal, test-time
flow optimization with forward/backward networks and RANSAC rigid
refinement, plus track-based labels, stratified metrics and a synthetic
scene generator.
"""
from .core import BoxTrack, GeometryError, RigidTransform, ScenePair, apply_transform, compose
from .ego import IcpConfig, IcpEgoMotion, estimate_ego_motion, icp, motion_compensate
from .evaluation import (MetricsReport, PointClass, classify_points, compute_metrics,
                         expected_correspondences, generate_flow_labels, gt_chamfer_violation,
                         resample_dynamic_ratio)
from .flow import FlowOptConfig, NeuralFlowPrior, optimize_flow, truncated_chamfer
from .ground import HeightMapGroundSegmenter, fit_height_map, remove_ground, segment_ground
from .pipeline import PipelineConfig, ablate_scene, run_pipeline, run_scene
from .refine import PiecewiseRigidRefiner, RefineConfig, kabsch, ransac_rigid, refine_flow
from .spatial import NeighborIndex, dbscan

__version__ = "0.1.0"

__all__ = [
    "BoxTrack", "GeometryError", "RigidTransform", "ScenePair", "apply_transform", "compose",
    "IcpConfig", "IcpEgoMotion", "estimate_ego_motion", "icp", "motion_compensate",
    "MetricsReport", "PointClass", "classify_points", "compute_metrics",
    "expected_correspondences", "generate_flow_labels", "gt_chamfer_violation",
    "resample_dynamic_ratio", "FlowOptConfig", "NeuralFlowPrior", "optimize_flow",
    "truncated_chamfer", "HeightMapGroundSegmenter", "fit_height_map", "remove_ground",
    "segment_ground", "PipelineConfig", "ablate_scene", "run_pipeline", "run_scene",
    "PiecewiseRigidRefiner", "RefineConfig", "kabsch", "ransac_rigid", "refine_flow",
    "NeighborIndex", "dbscan",
]
