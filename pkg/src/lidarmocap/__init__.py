"""Human motion capture from a head-mounted LiDAR and body-worn IMUs.

The subpackages build up from the body model and geometry kernels to the
calibration, localization, loss, optimization and metric stages; the
``pipeline`` module chains them and ``cli`` exposes them as subcommands.
"""

__version__ = "0.1.0"

from .body_model import BodyModel, MotionSequence, PoseFrame, forward, forward_motion, load_body_model  # noqa: E402
from .errors import LidarMocapError  # noqa: E402

__all__ = ["BodyModel", "MotionSequence", "PoseFrame", "forward", "forward_motion", "load_body_model",
           "LidarMocapError", "__version__"]
