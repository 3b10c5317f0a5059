"""Synthetic scenes and camera rigs for tests, demos and the fit experiment."""

from __future__ import annotations

import numpy as np

from .camera import BEAPImage, Camera
from .core import logit
from .scene import GaussianScene


def random_scene(
    n: int,
    rng: np.random.Generator,
    center=(0.0, 0.0, 0.0),
    spread: float = 1.2,
    scale_range=(0.06, 0.25),
    opacity_range=(0.3, 0.95),
    sh_bands: int = 1,
    anisotropy: float = 1.0,
) -> GaussianScene:
    """Random particles in a box around ``center``.

    ``anisotropy`` > 1 stretches the first axis of each particle by up to
    that factor relative to the others.
    """
    means = np.asarray(center)[None, :] + rng.uniform(-spread, spread, (n, 3))
    log_s = rng.uniform(np.log(scale_range[0]), np.log(scale_range[1]), (n, 3))
    if anisotropy > 1.0:
        log_s[:, 0] += rng.uniform(0.0, np.log(anisotropy), n)
    quats = rng.normal(size=(n, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    sh = np.zeros((n, sh_bands, 3))
    sh[:, 0, :] = rng.uniform(-0.8, 1.8, (n, 3))  # dc band around the 0.5 offset
    if sh_bands > 1:
        sh[:, 1:, :] = rng.uniform(-0.25, 0.25, (n, sh_bands - 1, 3))
    return GaussianScene(
        means=means,
        log_scales=log_s,
        quats=quats,
        opacity_logits=logit(rng.uniform(*opacity_range, n)),
        sh=sh,
    )


def look_at(position, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)):
    """Extrinsics (R_c, t_c) of a camera at ``position`` looking at ``target``."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])  # rows: camera x, y, z in world
    return rot, -rot @ position


def ring_cameras(
    n_views: int,
    radius: float,
    width: int,
    height: int,
    fov_deg: float = 100.0,
    target=(0.0, 0.0, 0.0),
    elevation: float = 0.35,
) -> list[Camera]:
    """Equiangular cameras on a ring looking at the scene center."""
    cams = []
    for i in range(n_views):
        ang = 2.0 * np.pi * i / n_views
        pos = np.array(
            [radius * np.cos(ang), elevation * radius * np.sin(2 * ang), radius * np.sin(ang)]
        )
        rot, t = look_at(pos, target)
        cams.append(
            Camera(
                width=width,
                height=height,
                model="beap",
                rotation=rot,
                translation=t,
                fov_x=np.deg2rad(fov_deg),
                fov_y=np.deg2rad(fov_deg),
            )
        )
    return cams


def perturbed(scene: GaussianScene, rng: np.random.Generator, strength: float = 1.0) -> GaussianScene:
    """Noisy copy of a scene for fit-recovery experiments."""
    out = scene.copy()
    extent = scene.extent()
    out.means = out.means + rng.normal(0.0, 0.02 * extent * strength, out.means.shape)
    out.log_scales = out.log_scales + rng.normal(0.0, 0.15 * strength, out.log_scales.shape)
    out.quats = out.quats + rng.normal(0.0, 0.05 * strength, out.quats.shape)
    out.opacity_logits = out.opacity_logits + rng.normal(0.0, 0.3 * strength, out.opacity_logits.shape)
    out.sh = out.sh + rng.normal(0.0, 0.08 * strength, out.sh.shape)
    return out


def render_targets(scene: GaussianScene, cameras, renderer, config=None):
    """Ground-truth views of a scene: (camera, BEAPImage) pairs.

    ``renderer`` is any render(scene, camera, config) -> FrameOutput callable
    so targets can come from the exhaustive reference instead of the tiled
    path.
    """
    views = []
    for cam in cameras:
        out = renderer(scene, cam, config)
        views.append((cam, BEAPImage(color=out.color.color.copy(), mask=np.ones((cam.height, cam.width), bool))))
    return views
