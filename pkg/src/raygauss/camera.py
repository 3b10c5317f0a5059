"""Camera models, equiangular ray generation and ground-truth resampling.

The equiangular image space is uniform in the two bipolar angles
theta = arctan(x/z) (horizontal) and phi = arctan(y/z) (vertical).  A pixel
grid maps to angles through

    x = floor(w * theta / FoV_x + (w + 1) / 2)

and the inverse samples pixel centers, so angle -> pixel -> center angle is
the identity on pixel centers.  Directions are recovered jointly from both
angles; the chart extends past +-90 degrees per axis, which is what lets one
image cover fields of view approaching 360 degrees.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

MAX_FOV_DEG = 350.0


@dataclass
class Camera:
    """Extrinsic pose plus one of three projection models.

    ``rotation`` (R_c) and ``translation`` (t_c) map world points into the
    camera frame, x_c = R_c x + t_c.  ``model`` is "pinhole", "kb" or "beap";
    pinhole/kb carry intrinsics (fx, fy, cx, cy) and kb the four radial
    distortion coefficients.  ``fov_x`` / ``fov_y`` are in radians and are
    required for the beap model (for the others they default to the lens
    footprint when omitted).
    """

    width: int
    height: int
    model: str = "beap"
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    fov_x: float | None = None
    fov_y: float | None = None
    fx: float | None = None
    fy: float | None = None
    cx: float | None = None
    cy: float | None = None
    k: np.ndarray = field(default_factory=lambda: np.zeros(4))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.k = np.asarray(self.k, dtype=np.float64).reshape(4)
        if self.model not in ("pinhole", "kb", "beap"):
            raise ValueError(f"unknown camera model {self.model!r}")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if err > 1e-6 or np.linalg.det(self.rotation) < 0:
            raise ValueError("extrinsic rotation is not in SO(3)")
        if self.model == "beap":
            if self.fov_x is None or self.fov_y is None:
                raise ValueError("beap camera requires fov_x and fov_y")
        else:
            if self.fx is None or self.fy is None or self.cx is None or self.cy is None:
                raise ValueError(f"{self.model} camera requires fx, fy, cx, cy")
            if self.fx <= 0 or self.fy <= 0:
                raise ValueError("focal lengths must be positive")
        for fov in (self.fov_x, self.fov_y):
            if fov is not None and not 0.0 < fov < np.deg2rad(MAX_FOV_DEG):
                raise ValueError("fov must lie in (0, 350) degrees")

    @property
    def optical_center(self) -> np.ndarray:
        """World-space camera origin o = -R_c^T t_c."""
        return -self.rotation.T @ self.translation

    def with_model(self, model: str) -> "Camera":
        return Camera(
            width=self.width,
            height=self.height,
            model=model,
            rotation=self.rotation,
            translation=self.translation,
            fov_x=self.fov_x,
            fov_y=self.fov_y,
            fx=self.fx,
            fy=self.fy,
            cx=self.cx,
            cy=self.cy,
            k=self.k,
        )


@dataclass
class BEAPImage:
    """RGB buffer on the equiangular pixel grid plus a per-pixel validity mask."""

    color: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.color = np.asarray(self.color, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.color.shape[:2] != self.mask.shape:
            raise ValueError("color and mask shapes disagree")


# ---------------------------------------------------------------------------
# equiangular pixel grid


def beap_pixel(theta, phi, camera: Camera):
    """Angles -> integer pixel indices by the floor mapping."""
    w, h = camera.width, camera.height
    x = np.floor(w * np.asarray(theta) / camera.fov_x + (w + 1) / 2.0)
    y = np.floor(h * np.asarray(phi) / camera.fov_y + (h + 1) / 2.0)
    return x.astype(int), y.astype(int)


def beap_angles(x, y, camera: Camera):
    """Pixel indices -> angles at pixel centers (inverse of the floor map)."""
    x = np.asarray(x)
    y = np.asarray(y)
    w, h = camera.width, camera.height
    if np.any(x < 0) or np.any(x >= w) or np.any(y < 0) or np.any(y >= h):
        raise ValueError("pixel index out of range")
    theta = (x + 0.5 - (w + 1) / 2.0) * camera.fov_x / w
    phi = (y + 0.5 - (h + 1) / 2.0) * camera.fov_y / h
    return theta, phi


def beap_pixel_edges(camera: Camera):
    """Angular edges of the pixel grid along each axis (length w+1 / h+1)."""
    w, h = camera.width, camera.height
    xs = np.arange(w + 1, dtype=np.float64)
    ys = np.arange(h + 1, dtype=np.float64)
    theta = (xs - (w + 1) / 2.0) * camera.fov_x / w
    phi = (ys - (h + 1) / 2.0) * camera.fov_y / h
    return theta, phi


def angles_to_dir(theta, phi):
    """Unit camera-space direction for bipolar angles (theta, phi).

    Valid on (-pi, pi) per axis; beyond +-pi/2 the z component goes negative,
    covering directions behind the optical plane.
    """
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    st, ct = np.sin(theta), np.cos(theta)
    sp, cp = np.sin(phi), np.cos(phi)
    x = st * cp
    y = ct * sp
    z = ct * cp
    n = np.sqrt(x * x + y * y + z * z)
    return np.stack([x / n, y / n, z / n], axis=-1)


def dir_to_angles(d):
    """Principal equiangular coordinates of camera-space directions.

    Returns the representative with |phi| < pi/2; the second chart
    representative of the same direction is (theta -+ pi, phi -+ pi).
    For z >= 0 both angles are principal.
    """
    d = np.asarray(d, dtype=np.float64)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    theta = np.arctan2(x, z)
    ratio = np.divide(y, z, out=np.zeros_like(np.broadcast_arrays(y, z)[0]), where=z != 0)
    phi = np.where(z > 0, np.arctan2(y, z), np.arctan(ratio))
    # z == 0: the chart degenerates; fall back to the principal value of y.
    phi = np.where(z == 0, np.where(y == 0, 0.0, np.sign(y) * np.pi / 2), phi)
    return theta, phi


def antipodal_angles(theta, phi):
    """The other chart representative of the same direction."""
    theta = np.asarray(theta, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    shift = lambda a: np.where(a > 0, a - np.pi, a + np.pi)
    return shift(theta), shift(phi)


def beap_ray_grid(camera: Camera):
    """Camera-space unit directions at every pixel center, shape (h, w, 3)."""
    xs = np.arange(camera.width)
    ys = np.arange(camera.height)
    theta, _ = beap_angles(xs, np.zeros_like(xs), camera)
    _, phi = beap_angles(np.zeros_like(ys), ys, camera)
    tt, pp = np.meshgrid(theta, phi)
    return angles_to_dir(tt, pp)


# ---------------------------------------------------------------------------
# projections


def project_pinhole(d_c, camera: Camera):
    """Pinhole projection (x_p, y_p) of camera-space directions; needs z > 0.

    Returns (x_p, y_p, valid); invalid entries hold NaN.
    """
    d_c = np.asarray(d_c, dtype=np.float64)
    x, y, z = d_c[..., 0], d_c[..., 1], d_c[..., 2]
    valid = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        xp = camera.fx * x / z + camera.cx
        yp = camera.fy * y / z + camera.cy
    xp = np.where(valid, xp, np.nan)
    yp = np.where(valid, yp, np.nan)
    return xp, yp, valid


def unproject_pinhole(xp, yp, camera: Camera):
    xp = np.asarray(xp, dtype=np.float64)
    yp = np.asarray(yp, dtype=np.float64)
    u = (xp - camera.cx) / camera.fx
    v = (yp - camera.cy) / camera.fy
    d = np.stack([u, v, np.ones_like(u)], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def _kb_distort(alpha, k):
    a2 = alpha * alpha
    return alpha * (1.0 + a2 * (k[0] + a2 * (k[1] + a2 * (k[2] + a2 * k[3]))))


def project_kb(d_c, camera: Camera):
    """Polynomial fisheye projection of camera-space directions.

    The distorted incidence angle alpha_d = alpha (1 + k1 a^2 + ... + k4 a^8)
    scales the radial direction on the image plane.  Directions at z <= 0 are
    handled through the incidence angle alpha = atan2(r_xy, z), which reduces
    to the tan-ratio form on the forward hemisphere.
    """
    d_c = np.asarray(d_c, dtype=np.float64)
    x, y, z = d_c[..., 0], d_c[..., 1], d_c[..., 2]
    r_xy = np.sqrt(x * x + y * y)
    alpha = np.arctan2(r_xy, z)
    alpha_d = _kb_distort(alpha, camera.k)
    # radial factor alpha_d / r_xy with the r -> 0 limit (= alpha_d/alpha -> 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = np.where(r_xy > 1e-12, alpha_d / np.maximum(r_xy, 1e-300), 1.0)
    xp = camera.fx * factor * x + camera.cx
    yp = camera.fy * factor * y + camera.cy
    valid = alpha < np.pi  # entire sphere except the exact backward axis
    return xp, yp, valid


def unproject_kb(xp, yp, camera: Camera, iters=20):
    """Invert the fisheye model with Newton iterations on the distortion."""
    xp = np.asarray(xp, dtype=np.float64)
    yp = np.asarray(yp, dtype=np.float64)
    u = (xp - camera.cx) / camera.fx
    v = (yp - camera.cy) / camera.fy
    alpha_d = np.sqrt(u * u + v * v)
    k = camera.k
    alpha = alpha_d.copy()
    for _ in range(iters):
        a2 = alpha * alpha
        f = alpha * (1.0 + a2 * (k[0] + a2 * (k[1] + a2 * (k[2] + a2 * k[3])))) - alpha_d
        df = 1.0 + a2 * (3 * k[0] + a2 * (5 * k[1] + a2 * (7 * k[2] + a2 * 9 * k[3])))
        alpha = alpha - f / df
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(alpha_d > 1e-12, np.sin(alpha) / np.maximum(alpha_d, 1e-300), 1.0)
    x = u * scale
    y = v * scale
    z = np.cos(alpha)
    d = np.stack([x, y, z], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def pixel_ray_grid(camera: Camera):
    """Camera-space unit directions at every pixel center for any model."""
    if camera.model == "beap":
        return beap_ray_grid(camera)
    xx, yy = np.meshgrid(
        np.arange(camera.width, dtype=np.float64),
        np.arange(camera.height, dtype=np.float64),
    )
    if camera.model == "pinhole":
        return unproject_pinhole(xx, yy, camera)
    return unproject_kb(xx, yy, camera)


# ---------------------------------------------------------------------------
# resampling


def _bilinear(image, xp, yp):
    """Bilinear sample of (h, w, 3) at float pixel coords; caller bounds-checks."""
    h, w = image.shape[:2]
    x0 = np.floor(xp).astype(int)
    y0 = np.floor(yp).astype(int)
    x0 = np.clip(x0, 0, w - 2)
    y0 = np.clip(y0, 0, h - 2)
    fx = xp - x0
    fy = yp - y0
    c00 = image[y0, x0]
    c10 = image[y0, x0 + 1]
    c01 = image[y0 + 1, x0]
    c11 = image[y0 + 1, x0 + 1]
    fx = fx[..., None]
    fy = fy[..., None]
    return (
        c00 * (1 - fx) * (1 - fy)
        + c10 * fx * (1 - fy)
        + c01 * (1 - fx) * fy
        + c11 * fx * fy
    )


def resample_to_beap(source_image, source_camera: Camera, target_camera: Camera) -> BEAPImage:
    """Pull a pinhole/fisheye image onto the equiangular grid of the target.

    Both cameras must share extrinsics; every target pixel's ray is projected
    into the source and bilinearly interpolated, with the mask cleared where
    the projection leaves the source image.
    """
    if target_camera.model != "beap":
        raise ValueError("target camera must use the beap model")
    if not np.allclose(source_camera.rotation, target_camera.rotation) or not np.allclose(
        source_camera.translation, target_camera.translation
    ):
        raise ValueError("source and target must share extrinsics")
    source_image = np.asarray(source_image, dtype=np.float64)
    dirs = beap_ray_grid(target_camera)
    if source_camera.model == "pinhole":
        xp, yp, valid = project_pinhole(dirs, source_camera)
    elif source_camera.model == "kb":
        xp, yp, valid = project_kb(dirs, source_camera)
    else:
        raise ValueError("source camera must be pinhole or kb")
    h, w = source_image.shape[:2]
    inside = valid & (xp >= 0) & (xp <= w - 1) & (yp >= 0) & (yp <= h - 1)
    xp = np.where(inside, xp, 0.0)
    yp = np.where(inside, yp, 0.0)
    color = _bilinear(source_image, xp, yp)
    color[~inside] = 0.0
    return BEAPImage(color=color, mask=inside)


def solid_angle_map(camera: Camera) -> np.ndarray:
    """Per-pixel solid-angle proxy (h, w): area of the spherical quad at each pixel.

    Used to compare how evenly different projections spread rays over the
    view sphere.
    """
    if camera.model == "beap":
        te, pe = beap_pixel_edges(camera)
        tt, pp = np.meshgrid(te, pe)
        corners = angles_to_dir(tt, pp)
    elif camera.model == "pinhole":
        xs = np.arange(camera.width + 1, dtype=np.float64) - 0.5
        ys = np.arange(camera.height + 1, dtype=np.float64) - 0.5
        xx, yy = np.meshgrid(xs, ys)
        corners = unproject_pinhole(xx, yy, camera)
    else:
        xs = np.arange(camera.width + 1, dtype=np.float64) - 0.5
        ys = np.arange(camera.height + 1, dtype=np.float64) - 0.5
        xx, yy = np.meshgrid(xs, ys)
        corners = unproject_kb(xx, yy, camera)
    ea = corners[1:, :-1] - corners[:-1, :-1]
    eb = corners[:-1, 1:] - corners[:-1, :-1]
    return np.linalg.norm(np.cross(ea, eb), axis=-1)


# ---------------------------------------------------------------------------
# camera config file


def camera_from_dict(cfg: dict) -> Camera:
    rot = np.asarray(cfg.get("R", np.eye(3).ravel()), dtype=np.float64).reshape(3, 3)
    return Camera(
        width=int(cfg["w"]),
        height=int(cfg["h"]),
        model=cfg.get("model", "beap"),
        rotation=rot,
        translation=np.asarray(cfg.get("t", (0, 0, 0)), dtype=np.float64),
        fov_x=np.deg2rad(cfg["fovx_deg"]) if "fovx_deg" in cfg else None,
        fov_y=np.deg2rad(cfg["fovy_deg"]) if "fovy_deg" in cfg else None,
        fx=cfg.get("fx"),
        fy=cfg.get("fy"),
        cx=cfg.get("cx"),
        cy=cfg.get("cy"),
        k=np.asarray(cfg.get("k", (0, 0, 0, 0)), dtype=np.float64),
    )


def camera_to_dict(camera: Camera) -> dict:
    cfg = {
        "model": camera.model,
        "w": camera.width,
        "h": camera.height,
        "R": [float(v) for v in camera.rotation.ravel()],
        "t": [float(v) for v in camera.translation],
    }
    if camera.fov_x is not None:
        cfg["fovx_deg"] = float(np.rad2deg(camera.fov_x))
    if camera.fov_y is not None:
        cfg["fovy_deg"] = float(np.rad2deg(camera.fov_y))
    for name in ("fx", "fy", "cx", "cy"):
        val = getattr(camera, name)
        if val is not None:
            cfg[name] = float(val)
    if np.any(camera.k != 0):
        cfg["k"] = [float(v) for v in camera.k]
    return cfg


def load_cameras(path) -> list[Camera]:
    """Load one camera or a list of cameras from a JSON file."""
    with open(path) as f:
        data = json.load(f)
    if isinstance(data, dict):
        data = [data]
    return [camera_from_dict(c) for c in data]


def save_cameras(cameras, path):
    data = [camera_to_dict(c) for c in cameras]
    with open(path, "w") as f:
        json.dump(data[0] if len(data) == 1 else data, f, indent=2)
