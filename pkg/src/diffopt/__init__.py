"""Global human motion recovery from 2D keypoints: neural motion fields
optimized under a motion-diffusion prior with joint dynamic-camera
refinement, verified end-to-end against a synthetic scene oracle.
"""

__version__ = "0.1.0"
