"""Restoration of turbulence-distorted image sequences.

Subpackages by stage: :mod:`turbi.subsample` (frame selection),
:mod:`turbi.stabilize` (deformation-field stabilization), :mod:`turbi.fusion`
(low-rank split and detail layer), :mod:`turbi.deblur` (blind deconvolution)
and :mod:`turbi.pipeline` (orchestration). Shared building blocks live in
:mod:`turbi.imagecore`, :mod:`turbi.optflow`, :mod:`turbi.quasiconformal` and
:mod:`turbi.rpca`; :mod:`turbi.turbsim` generates synthetic test data.
"""

from .deblur import DeblurParams, blind_deconvolve
from .fusion import FusionParams, extract_detail, fuse, lowrank_split
from .imagecore import psnr, ssim, warp, warp_forward
from .optflow import FlowParams, flow
from .pipeline import (
    PipelineConfig,
    TurbulenceRestorer,
    centroid_baseline,
    evaluate,
    mean_baseline,
    restore,
    run_all,
)
from .quasiconformal import beltrami_from_field, fold_free_field, lbs_solve
from .rpca import RobustPCA, RpcaParams, rpca
from .stabilize import (
    ReferenceRegistrar,
    SequenceStabilizer,
    StabilizeParams,
    absorbing_stabilize,
    internal_stabilize,
    register_to_reference,
)
from .subsample import SubsampleParams, subsample
from .turbsim import TurbulenceParams, simulate

__version__ = "0.1.0"

__all__ = [
    "DeblurParams", "FlowParams", "FusionParams", "PipelineConfig", "ReferenceRegistrar",
    "RobustPCA", "RpcaParams", "SequenceStabilizer", "StabilizeParams", "SubsampleParams",
    "TurbulenceParams", "TurbulenceRestorer", "absorbing_stabilize", "beltrami_from_field",
    "blind_deconvolve", "centroid_baseline", "evaluate", "extract_detail", "flow",
    "fold_free_field", "fuse", "internal_stabilize", "lbs_solve", "lowrank_split",
    "mean_baseline", "psnr", "register_to_reference", "restore", "rpca", "run_all", "simulate",
    "ssim", "subsample", "warp", "warp_forward",
]
