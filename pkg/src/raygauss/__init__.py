"""Exact ray-integrated rendering of 3D Gaussian scenes.

Closed-form per-ray transmittance, analytic gradients, frustum-exact
ray-particle association and equiangular ray sampling for arbitrary-FoV
cameras, validated throughout against independent numerical oracles.
"""

from .core import (
    DEFAULT_LAMBDA,
    CanonicalFrame,
    CanonicalRay,
    Gaussian3D,
    Ray,
    canonical_ray,
    composite,
    mahalanobis_sq,
    quat_to_rotation,
    sh_eval,
    transmittance,
    whitening,
)

__all__ = [
    "DEFAULT_LAMBDA",
    "CanonicalFrame",
    "CanonicalRay",
    "Gaussian3D",
    "Ray",
    "canonical_ray",
    "composite",
    "mahalanobis_sq",
    "quat_to_rotation",
    "sh_eval",
    "transmittance",
    "whitening",
]

__version__ = "0.1.0"
