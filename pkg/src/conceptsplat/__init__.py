"""Concept-labeled Gaussian splatting for multi-concept text-to-3D scenes."""
from .camera import Camera, orbit_camera
from .gaussians import GaussianCloud, Gaussian3D, export_ply, import_ply, init_from_pointclouds
from .guidance import GuidanceConfig, cism_gradient, ddim_invert, ism_gradient, make_schedule
from .layout import Bbox3D, LayoutPlan, bbox_transform, fallback_layout, generate_layout, validate_layout
from .pointcloud import PointCloud, generate_candidates, normalize_pointcloud, place_pointcloud, select_pointcloud
from .rca import ConceptLoRA, ConceptSet, rca_forward
from .render import render, render_backward, threshold_masks
from .scene import SceneSpec, load_scene, parse_scene_spec

__version__ = "0.1.0"
