"""Batched particle storage used by the association/render/training pipeline.

Mirrors the single-particle type from :mod:`raygauss.core` as a
struct-of-arrays, with the same stored spaces (log scale, opacity logit,
raw quaternion renormalized on read).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Gaussian3D, sigmoid


def quats_to_rotations(quats: np.ndarray) -> np.ndarray:
    """Rotation matrices for (N, 4) quaternions stored (r, i, j, k)."""
    q = np.asarray(quats, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    r, i, j, k = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    rot = np.empty((len(q), 3, 3))
    rot[:, 0, 0] = 1 - 2 * (j * j + k * k)
    rot[:, 0, 1] = 2 * (i * j - r * k)
    rot[:, 0, 2] = 2 * (i * k + r * j)
    rot[:, 1, 0] = 2 * (i * j + r * k)
    rot[:, 1, 1] = 1 - 2 * (i * i + k * k)
    rot[:, 1, 2] = 2 * (j * k - r * i)
    rot[:, 2, 0] = 2 * (i * k - r * j)
    rot[:, 2, 1] = 2 * (j * k + r * i)
    rot[:, 2, 2] = 1 - 2 * (i * i + j * j)
    return rot


@dataclass
class GaussianScene:
    """All particle parameters as arrays: (N,3), (N,3), (N,4), (N,), (N,B,3)."""

    means: np.ndarray
    log_scales: np.ndarray
    quats: np.ndarray
    opacity_logits: np.ndarray
    sh: np.ndarray

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64).reshape(-1, 3)
        n = len(self.means)
        self.log_scales = np.asarray(self.log_scales, dtype=np.float64).reshape(n, 3)
        self.quats = np.asarray(self.quats, dtype=np.float64).reshape(n, 4)
        self.opacity_logits = np.asarray(self.opacity_logits, dtype=np.float64).reshape(n)
        self.sh = np.asarray(self.sh, dtype=np.float64).reshape(n, -1, 3)

    def __len__(self):
        return len(self.means)

    @property
    def scales(self) -> np.ndarray:
        return np.exp(self.log_scales)

    @property
    def opacities(self) -> np.ndarray:
        return sigmoid(self.opacity_logits)

    @property
    def rotations(self) -> np.ndarray:
        return quats_to_rotations(self.quats)

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh.shape[1]))) - 1

    def whitening_matrices(self) -> np.ndarray:
        """(N, 3, 3) stack of S^-1 R^T."""
        rot = self.rotations
        return rot.transpose(0, 2, 1) / self.scales[:, :, None]

    def covariances(self) -> np.ndarray:
        rot = self.rotations
        m = rot * self.scales[:, None, :]
        return m @ m.transpose(0, 2, 1)

    def extent(self) -> float:
        """Scene radius proxy: largest distance of a mean from their centroid."""
        if len(self) == 0:
            return 1.0
        centered = self.means - self.means.mean(axis=0)
        return float(max(np.linalg.norm(centered, axis=1).max(), 1e-6))

    def copy(self) -> "GaussianScene":
        return GaussianScene(
            means=self.means.copy(),
            log_scales=self.log_scales.copy(),
            quats=self.quats.copy(),
            opacity_logits=self.opacity_logits.copy(),
            sh=self.sh.copy(),
        )

    def gaussian(self, idx: int) -> Gaussian3D:
        return Gaussian3D(
            mean=self.means[idx],
            log_scale=self.log_scales[idx],
            quat=self.quats[idx],
            opacity_logit=float(self.opacity_logits[idx]),
            sh=self.sh[idx],
        )

    @classmethod
    def from_gaussians(cls, gaussians) -> "GaussianScene":
        gaussians = list(gaussians)
        if not gaussians:
            return cls.empty()
        return cls(
            means=np.stack([g.mean for g in gaussians]),
            log_scales=np.stack([g.log_scale for g in gaussians]),
            quats=np.stack([g.quat for g in gaussians]),
            opacity_logits=np.array([g.opacity_logit for g in gaussians]),
            sh=np.stack([g.sh for g in gaussians]),
        )

    @classmethod
    def empty(cls, n_bands: int = 1) -> "GaussianScene":
        return cls(
            means=np.zeros((0, 3)),
            log_scales=np.zeros((0, 3)),
            quats=np.zeros((0, 4)),
            opacity_logits=np.zeros(0),
            sh=np.zeros((0, n_bands, 3)),
        )
