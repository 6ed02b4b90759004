"""Edge-aware direct visual odometry on synthetic scenes.

Semi-dense monocular VO that tracks camera motion by jointly minimizing
photometric error and edge reprojection error, maintains a per-pixel
inverse-depth filter with line-guided stereo, regularizes depth along 3D
lines, and selects non-conflicting edges greedily under a coverage
objective.
"""

from .errors import EdgeVOError
from .geometry import CameraIntrinsics, Pose, exp_map, log_map

__version__ = "0.1.0"

__all__ = ["EdgeVOError", "CameraIntrinsics", "Pose", "exp_map", "log_map",
           "__version__"]
