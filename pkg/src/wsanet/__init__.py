"""Weak-signal-aware GPR detection network on a small numpy autodiff core."""

from .backbone import Backbone, BackboneConfig, FasterBlock, PConv, build_backbone, cost_of, pconv_mac_ratio
from .bscan_io import bscan_read, bscan_write
from .caa import CAA, CaaConfig
from .errors import BScanFormatError, ConfigError, GradCheckError, ShapeError, WavefieldError, WsaError
from .gradcheck import finite_diff_check
from .lwga import LWGA, DenseAttention, LwgaConfig, SparseGlobalAttention, SparseMediumAttention
from .model import LayerGraph, ModelConfig, WSANet, assemble_wsa_graph, cost_report, forward_features
from .scconv import CRU, SCConv, SRU
from .suite import gradcheck_suite
from .wavefield import (THRESHOLDS, BScan, ClutterConfig, FragConfig, Grid, TargetAnnotation,
                        WeakSignalReport, classify_weak_signal, hyperbola_travel_time, measure_contrast,
                        measure_continuity, measure_dissipation, measure_scr, ricker, synthesize_bscan)

__version__ = "0.1.0"

__all__ = [
    "Backbone", "BackboneConfig", "FasterBlock", "PConv", "build_backbone", "cost_of", "pconv_mac_ratio",
    "bscan_read", "bscan_write", "CAA", "CaaConfig", "BScanFormatError", "ConfigError", "GradCheckError",
    "ShapeError", "WavefieldError", "WsaError", "finite_diff_check", "LWGA", "DenseAttention", "LwgaConfig",
    "SparseGlobalAttention", "SparseMediumAttention", "LayerGraph", "ModelConfig", "WSANet",
    "assemble_wsa_graph", "cost_report", "forward_features", "CRU", "SCConv", "SRU", "gradcheck_suite",
    "THRESHOLDS", "BScan", "ClutterConfig", "FragConfig", "Grid", "TargetAnnotation", "WeakSignalReport",
    "classify_weak_signal", "hyperbola_travel_time", "measure_contrast", "measure_continuity",
    "measure_dissipation", "measure_scr", "ricker", "synthesize_bscan",
]
