"""Volume-rendered scene fields with a trainable view-dependent gaze overlay.

The package renders a volumetric density+color field (an analytic or voxel
stand-in for a learned radiance field) and evaluates a trained directional
gaze-probability network at the visible surfaces, with the observer position
optionally decoupled from the rendering camera and occlusion handled by a
depth test from the observer's side.
"""

__version__ = "0.1.0"


class NergError(Exception):
    """Base class for errors raised by this package."""


class ConfigurationError(NergError):
    """A config value or file is invalid (bad matrix, bad integrator, ...)."""


class DataFormatError(NergError):
    """A data file does not match its expected format."""


class DivergenceError(NergError):
    """Training produced a non-finite loss and was aborted."""
