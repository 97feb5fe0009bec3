"""Pose and shape correction of category-level object estimates via signed distance fields.

Submodules: :mod:`~crisp.sdf` (fields), :mod:`~crisp.geometry` (transforms and
metrics), :mod:`~crisp.shapes` (shape basis and decoders),
:mod:`~crisp.corrector` (BCD and LSQ solvers), :mod:`~crisp.certification`,
:mod:`~crisp.selftrain`, :mod:`~crisp.simulator` and :mod:`~crisp.cli`.
"""

from .certification import CertificateConfig, degeneracy_report, oc_certificate
from .corrector import CorrectorConfig, CorrectionResult, MultiViewBuffer, bcd_correct, lsq_correct
from .geometry import Pose, SimPose, Twist, adds_metric, arun_fit, chamfer, exp_se3, log_se3, umeyama_fit
from .shapes import KernelBlend, LinearBlend, ShapeBasis, project_simplex

__version__ = "0.1.0"

__all__ = [
    "CertificateConfig",
    "CorrectionResult",
    "CorrectorConfig",
    "KernelBlend",
    "LinearBlend",
    "MultiViewBuffer",
    "Pose",
    "ShapeBasis",
    "SimPose",
    "Twist",
    "adds_metric",
    "arun_fit",
    "bcd_correct",
    "chamfer",
    "degeneracy_report",
    "exp_se3",
    "log_se3",
    "lsq_correct",
    "oc_certificate",
    "project_simplex",
    "umeyama_fit",
]
