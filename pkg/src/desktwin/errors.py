"""Exception hierarchy shared across the package."""


class DesktwinError(Exception):
    """Base class for all package errors."""


class EmptyOverlap(DesktwinError):
    """Too few jointly valid pixels for a scale/shift fit."""


class DegenerateDepth(DesktwinError):
    """Raw depth has zero variance over the valid set; slope unidentifiable."""


class NegativeScale(DesktwinError):
    """Fitted depth scale came out non-positive."""


class TooFewPoints(DesktwinError):
    """Not enough points for the requested geometric fit."""


class NoConsensus(DesktwinError):
    """RANSAC failed to find a plane supported by enough inliers."""


class NonUnitNormal(DesktwinError):
    """Input vector expected to be unit length is not."""


class EmptyCloud(DesktwinError):
    """Point cloud is empty where points are required."""


class EmptyMesh(DesktwinError):
    """Mesh has no vertices or triangles where geometry is required."""


class EmptyInput(DesktwinError):
    """Registration input (mesh or observed segment) is empty."""


class NonPositiveVoxel(DesktwinError):
    """Voxel size must be strictly positive."""


class UnassembledScene(DesktwinError):
    """Scene has not been collision-optimized before simulation."""


class ExplosionDetected(DesktwinError):
    """Simulator velocity guard tripped; the episode is a failure."""


class StepOutOfRange(DesktwinError):
    """Requested step index lies outside the episode."""


class NonFiniteLoss(DesktwinError):
    """Training loss became NaN or infinite."""


class ManifestError(DesktwinError):
    """Pipeline manifest is missing or references nonexistent inputs."""
