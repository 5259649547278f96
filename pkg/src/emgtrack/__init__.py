"""Multimodal hand tracking: sEMG finger-angle estimation fused with a vision tracker.

The package is hardware-free. A kinematic hand simulator stands in for the
armband, headset and ground-truth sensor so that the whole pipeline
(features, model, fusion runtime, occlusion measurement, statistics) can be
exercised end to end.
"""

__version__ = "0.1.0"

JOINT_NAMES = (
    "index_mcp", "index_pip",
    "middle_mcp", "middle_pip",
    "ring_mcp", "ring_pip",
    "pinky_mcp", "pinky_pip",
)
FINGERS = ("index", "middle", "ring", "pinky")

SAMPLE_RATE_HZ = 50
TICK_MS = 20


class InvalidInputError(ValueError):
    """Raised when an operation receives data that violates its contract."""
