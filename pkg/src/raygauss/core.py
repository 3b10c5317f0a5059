"""Gaussian primitive algebra and closed-form ray transmittance.

A scene particle is an anisotropic 3D Gaussian (mean, per-axis scale,
rotation quaternion, opacity, SH color coefficients).  Whitening with
W = S^-1 R^T maps the particle to the canonical frame where it becomes the
unit isotropic Gaussian; a ray maps to (o_u, d_u) with moment vector
m_u = o_u x d_u.  The opacity-weighted density integral along the ray then
has the closed form

    T = sigma * exp(-kappa / 2),    kappa = |m_u|^2 / |d_u|^2,

where kappa is the squared perpendicular distance from the canonical origin
to the canonical ray (equivalently the minimum squared Mahalanobis distance
from the ray to the particle).  kappa is always computed through the cross
product; the expanded form |o_u|^2 |d_u|^2 - (o_u . d_u)^2 cancels
catastrophically for near-degenerate scales and is kept here only so tests
can demonstrate the failure.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Support cutoff in standard deviations used across association and rendering.
DEFAULT_LAMBDA = 3.0

# Per-particle transmittance clamp and early-stop threshold for blending.
MAX_BLEND_T = 0.999
MIN_REMAINING_TRANSMITTANCE = 1e-4

# Real spherical-harmonics basis constants, bands 0..3.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


class DegenerateInputError(ValueError):
    """Raised for inputs that have no well-defined geometric meaning."""


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    if out.ndim == 0:
        return float(out)
    return out


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class Gaussian3D:
    """One particle: mean, log-scales, quaternion (r, i, j, k), opacity logit, SH.

    Scales are stored in log space and opacity as a raw logit so that any
    stored value decodes to a valid particle; the quaternion is renormalized
    on read.  ``sh`` has shape (n_bands, 3) with n_bands = (degree + 1)^2.
    """

    mean: np.ndarray
    log_scale: np.ndarray
    quat: np.ndarray
    opacity_logit: float
    sh: np.ndarray = field(default_factory=lambda: np.zeros((1, 3)))

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(3)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(3)
        self.quat = np.asarray(self.quat, dtype=np.float64).reshape(4)
        self.sh = np.asarray(self.sh, dtype=np.float64).reshape(-1, 3)

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))

    @property
    def rotation(self) -> np.ndarray:
        return quat_to_rotation(self.quat)

    @property
    def covariance(self) -> np.ndarray:
        r = self.rotation
        m = r * self.scale[None, :]
        return m @ m.T

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh.shape[0]))) - 1


@dataclass
class Ray:
    """World-space ray o + t d; the direction need not be unit length."""

    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64).reshape(3)
        self.direction = np.asarray(self.direction, dtype=np.float64).reshape(3)
        if not np.linalg.norm(self.direction) > 0:
            raise DegenerateInputError("ray direction must be nonzero")


@dataclass
class CanonicalFrame:
    """Whitening matrix W = S^-1 R^T plus the particle mean it is anchored at."""

    w_pca: np.ndarray
    mean: np.ndarray


@dataclass
class CanonicalRay:
    """A ray mapped through a particle's whitening transform.

    ``moment`` is origin x direction; it is perpendicular to both by
    construction and carries the perpendicular-distance information.
    """

    origin: np.ndarray
    direction: np.ndarray
    moment: np.ndarray


def quat_to_rotation(q) -> np.ndarray:
    """Rotation matrix of a quaternion stored (r, i, j, k).

    The layout matches the whitening-matrix entries used by the analytic
    gradient formulas, so those transcribe without index shuffling.
    """
    q = np.asarray(q, dtype=np.float64).reshape(4)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise DegenerateInputError("degenerate rotation: zero quaternion")
    r, i, j, k = q / n
    return np.array(
        [
            [1 - 2 * (j * j + k * k), 2 * (i * j - r * k), 2 * (i * k + r * j)],
            [2 * (i * j + r * k), 1 - 2 * (i * i + k * k), 2 * (j * k - r * i)],
            [2 * (i * k - r * j), 2 * (j * k + r * i), 1 - 2 * (i * i + j * j)],
        ]
    )


def whitening(g: Gaussian3D) -> CanonicalFrame:
    """Canonical frame of a particle: W = S^-1 R^T, so W Sigma W^T = I."""
    s = g.scale
    if not np.all(s > 0) or not np.all(np.isfinite(s)):
        raise DegenerateInputError("degenerate scale")
    r = g.rotation
    w = r.T / s[:, None]
    return CanonicalFrame(w_pca=w, mean=g.mean.copy())


def canonical_ray(frame: CanonicalFrame, ray: Ray) -> CanonicalRay:
    """Map a world ray into the particle's canonical frame."""
    o_u = frame.w_pca @ (ray.origin - frame.mean)
    d_u = frame.w_pca @ ray.direction
    return CanonicalRay(origin=o_u, direction=d_u, moment=np.cross(o_u, d_u))


def mahalanobis_sq(cr: CanonicalRay) -> float:
    """kappa = |m_u|^2 / |d_u|^2, the cross-product form.

    Nonnegative for every input since it is a ratio of squared norms.
    """
    dd = float(cr.direction @ cr.direction)
    if dd <= 0:
        raise DegenerateInputError("degenerate direction")
    return float(cr.moment @ cr.moment) / dd


def mahalanobis_sq_expanded(o_u, d_u) -> float:
    """Expanded form |o_u|^2 |d_u|^2 - (o_u . d_u)^2, over |d_u|^2.

    Kept only to demonstrate its instability: for near-parallel canonical
    vectors the subtraction cancels and can return negative or non-finite
    values.  Never used by the rendering path.
    """
    o_u = np.asarray(o_u)
    d_u = np.asarray(d_u)
    oo = o_u @ o_u
    dd = d_u @ d_u
    od = o_u @ d_u
    return (oo * dd - od * od) / dd


def transmittance(g: Gaussian3D, ray: Ray) -> float:
    """Closed-form opacity-weighted density integral along the full line."""
    cr = canonical_ray(whitening(g), ray)
    kappa = mahalanobis_sq(cr)
    return g.opacity * float(np.exp(-0.5 * kappa))


def composite(contributions, background=None):
    """Front-to-back alpha blending C = sum_i c_i T_i prod_{j<i} (1 - T_j).

    ``contributions`` is a sequence of (T, rgb) sorted front to back with
    each T in [0, 1).  Blending stops once the remaining transmittance drops
    below MIN_REMAINING_TRANSMITTANCE; a background color, when given, is
    composited with whatever transmittance remains.
    """
    color = np.zeros(3)
    remaining = 1.0
    for t, c in contributions:
        if remaining < MIN_REMAINING_TRANSMITTANCE:
            break
        color += remaining * t * np.asarray(c, dtype=np.float64)
        remaining *= 1.0 - t
    if background is not None:
        color += remaining * np.asarray(background, dtype=np.float64)
    return color


@dataclass
class BlendCache:
    """Forward blending state retained for the backward pass.

    ``n_active`` counts contributions actually composited before the early
    stop; replaying the cache reproduces the forward output bit for bit.
    """

    ts: np.ndarray
    colors: np.ndarray
    n_active: int
    final_transmittance: float
    color: np.ndarray

    def replay(self) -> np.ndarray:
        out = np.zeros(3)
        remaining = 1.0
        for i in range(self.n_active):
            out += remaining * self.ts[i] * self.colors[i]
            remaining *= 1.0 - self.ts[i]
        return out


def composite_with_cache(contributions) -> BlendCache:
    ts = np.array([t for t, _ in contributions], dtype=np.float64)
    colors = np.array([np.asarray(c, dtype=np.float64) for _, c in contributions])
    colors = colors.reshape(-1, 3)
    color = np.zeros(3)
    remaining = 1.0
    n_active = 0
    for i in range(len(ts)):
        if remaining < MIN_REMAINING_TRANSMITTANCE:
            break
        color += remaining * ts[i] * colors[i]
        remaining *= 1.0 - ts[i]
        n_active += 1
    return BlendCache(
        ts=ts,
        colors=colors,
        n_active=n_active,
        final_transmittance=remaining,
        color=color,
    )


def sh_basis(view_dir: np.ndarray) -> np.ndarray:
    """Basis values for all 16 bands at a unit view direction."""
    x, y, z = np.asarray(view_dir, dtype=np.float64).reshape(3)
    xx, yy, zz = x * x, y * y, z * z
    xy, yz, xz = x * y, y * z, x * z
    return np.array(
        [
            SH_C0,
            -SH_C1 * y,
            SH_C1 * z,
            -SH_C1 * x,
            SH_C2[0] * xy,
            SH_C2[1] * yz,
            SH_C2[2] * (2.0 * zz - xx - yy),
            SH_C2[3] * xz,
            SH_C2[4] * (xx - yy),
            SH_C3[0] * y * (3.0 * xx - yy),
            SH_C3[1] * xy * z,
            SH_C3[2] * y * (4.0 * zz - xx - yy),
            SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy),
            SH_C3[4] * x * (4.0 * zz - xx - yy),
            SH_C3[5] * z * (xx - yy),
            SH_C3[6] * x * (xx - 3.0 * yy),
        ]
    )


def sh_eval(sh: np.ndarray, view_dir: np.ndarray) -> np.ndarray:
    """View-dependent RGB from SH coefficients, offset by 0.5 and clamped at 0.

    ``sh`` has shape (n_bands, 3); the degree is inferred from n_bands and
    must be 0..3.
    """
    sh = np.asarray(sh, dtype=np.float64).reshape(-1, 3)
    n_bands = sh.shape[0]
    if n_bands not in (1, 4, 9, 16):
        raise ValueError(f"unsupported SH band count {n_bands}; degree must be 0..3")
    basis = sh_basis(view_dir)[:n_bands]
    rgb = basis @ sh + 0.5
    return np.maximum(rgb, 0.0)
