"""Loop-closure detection for point-cloud SLAM from local 3D descriptors.

Candidate keyframes are found by the mutual-nearest-neighbour overlap of
their descriptor sets, registered with RANSAC, and confirmed by the ratio
of descriptor matches that also agree metrically after registration.
"""

from pcloop.geometry import PointCloud, RigidTransform, apply, compose, invert, kabsch_fit

__version__ = "0.1.0"

__all__ = [
    "PointCloud",
    "RigidTransform",
    "apply",
    "compose",
    "invert",
    "kabsch_fit",
]
