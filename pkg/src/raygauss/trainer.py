"""Fixed-count photometric optimization on equiangular supervision.

The loss mixes masked L1 with structural dissimilarity,
L = (1 - w) L1 + w (1 - SSIM), both with hand-derived backward passes so the
whole training step stays inside numpy.  SSIM follows the standard recipe:
11x11 Gaussian window (sigma 1.5), population covariances, constants
C1 = 0.01^2 and C2 = 0.03^2 on unit range, and the window-radius border is
cropped from the average.  Particle count stays fixed; only parameter values
move.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import gaussian_filter

from .camera import BEAPImage, Camera
from .core import sigmoid
from .renderer import RenderConfig, SceneGrads, render, render_backward
from .scene import GaussianScene

SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5
SSIM_PAD = int(SSIM_TRUNCATE * SSIM_SIGMA + 0.5)  # 11x11 window
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


def _blur(img: np.ndarray) -> np.ndarray:
    # Zero padding keeps the operator self-adjoint; the padded border is
    # cropped before averaging so the padding mode never shows in the value.
    return gaussian_filter(img, sigma=SSIM_SIGMA, truncate=SSIM_TRUNCATE, mode="constant", cval=0.0)


def _ssim_channel(x: np.ndarray, y: np.ndarray):
    """Per-pixel SSIM map of one channel plus the terms the backward needs."""
    ux, uy = _blur(x), _blur(y)
    uxx, uyy, uxy = _blur(x * x), _blur(y * y), _blur(x * y)
    vx = uxx - ux * ux
    vy = uyy - uy * uy
    vxy = uxy - ux * uy
    a1 = 2.0 * ux * uy + SSIM_C1
    a2 = 2.0 * vxy + SSIM_C2
    b1 = ux * ux + uy * uy + SSIM_C1
    b2 = vx + vy + SSIM_C2
    s = (a1 * a2) / (b1 * b2)
    return s, (ux, uy, vx, vxy, a1, a2, b1, b2)


def _ssim_channel_backward(x, y, ds, terms):
    """dL/dx from dL/dS for one channel (adjoint of the forward convolutions)."""
    ux, uy, vx, vxy, a1, a2, b1, b2 = terms
    s = (a1 * a2) / (b1 * b2)
    da1 = ds * a2 / (b1 * b2)
    da2 = ds * a1 / (b1 * b2)
    db1 = -ds * s / b1
    db2 = -ds * s / b2
    dux = 2.0 * uy * da1 + 2.0 * ux * db1
    dvx = db2
    dvxy = 2.0 * da2
    # vx = uxx - ux^2, vxy = uxy - ux uy
    duxx = dvx
    duxy = dvxy
    dux = dux - 2.0 * ux * dvx - uy * dvxy
    return _blur(dux) + 2.0 * x * _blur(duxx) + y * _blur(duxy)


def _crop_mask(mask: np.ndarray) -> np.ndarray:
    out = np.zeros_like(mask)
    if mask.shape[0] > 2 * SSIM_PAD and mask.shape[1] > 2 * SSIM_PAD:
        out[SSIM_PAD:-SSIM_PAD, SSIM_PAD:-SSIM_PAD] = mask[SSIM_PAD:-SSIM_PAD, SSIM_PAD:-SSIM_PAD]
    return out


def ssim(img_a: np.ndarray, img_b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Mean SSIM over channels, window-radius border cropped, masked pixels skipped."""
    img_a = np.asarray(img_a, dtype=np.float64)
    img_b = np.asarray(img_b, dtype=np.float64)
    if img_a.shape != img_b.shape:
        raise ValueError("image shapes disagree")
    if mask is None:
        mask = np.ones(img_a.shape[:2], dtype=bool)
    region = _crop_mask(mask)
    if not np.any(region):
        return 1.0
    vals = []
    for c in range(img_a.shape[2]):
        s, _ = _ssim_channel(img_a[..., c], img_b[..., c])
        vals.append(s[region].mean())
    return float(np.mean(vals))


def psnr(img_a: np.ndarray, img_b: np.ndarray, mask: np.ndarray | None = None) -> float:
    """10 log10(1 / MSE) over valid pixels; +inf for identical images."""
    img_a = np.asarray(img_a, dtype=np.float64)
    img_b = np.asarray(img_b, dtype=np.float64)
    if img_a.shape != img_b.shape:
        raise ValueError("image shapes disagree")
    if mask is None:
        mask = np.ones(img_a.shape[:2], dtype=bool)
    diff = (img_a - img_b)[mask]
    if diff.size == 0:
        return np.inf
    mse = float(np.mean(diff * diff))
    if mse == 0.0:
        return np.inf
    return 10.0 * np.log10(1.0 / mse)


def loss(rendered: np.ndarray, target: BEAPImage, ssim_weight: float = 0.2):
    """Masked (1-w) L1 + w (1-SSIM) with its analytic image gradient.

    Invalid target pixels are excluded: the rendered image is replaced by the
    target there, so they contribute nothing and their gradient is zero.
    """
    rendered = np.asarray(rendered, dtype=np.float64)
    if rendered.shape != target.color.shape:
        raise ValueError("rendered and target shapes disagree")
    mask = target.mask
    n_valid = int(mask.sum())
    if n_valid == 0:
        return 0.0, np.zeros_like(rendered)
    r_eff = np.where(mask[..., None], rendered, target.color)

    diff = r_eff - target.color
    l1 = float(np.abs(diff)[mask].mean())
    dl1 = np.zeros_like(rendered)
    dl1[mask] = np.sign(diff[mask]) / (n_valid * rendered.shape[2])

    region = _crop_mask(mask)
    n_region = int(region.sum())
    if ssim_weight > 0.0 and n_region > 0:
        s_mean = 0.0
        dssim = np.zeros_like(rendered)
        n_ch = rendered.shape[2]
        for c in range(n_ch):
            s, terms = _ssim_channel(r_eff[..., c], target.color[..., c])
            s_mean += s[region].mean() / n_ch
            ds = np.zeros_like(s)
            # d(1 - mean S)/dS = -1/n over the averaged region, per channel.
            ds[region] = -1.0 / (n_region * n_ch)
            dssim[..., c] = _ssim_channel_backward(r_eff[..., c], target.color[..., c], ds, terms)
        ssim_loss = 1.0 - s_mean
        dssim[~mask] = 0.0
    else:
        ssim_loss = 0.0
        dssim = np.zeros_like(rendered)

    total = (1.0 - ssim_weight) * l1 + ssim_weight * ssim_loss
    grad = (1.0 - ssim_weight) * dl1 + ssim_weight * dssim
    return total, grad


@dataclass
class TrainConfig:
    iterations: int = 2000
    lr_means: float | None = None  # defaults to 1.6e-4 * scene extent
    lr_log_scales: float = 5e-3
    lr_quats: float = 1e-3
    lr_opacity: float = 5e-2
    lr_sh: float = 2.5e-3
    ssim_weight: float = 0.2
    eval_interval: int = 200
    seed: int = 42
    lam: float = 3.0
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        if not 0.0 <= self.ssim_weight <= 1.0:
            raise ValueError("ssim_weight must lie in [0, 1]")
        for name in ("lr_log_scales", "lr_quats", "lr_opacity", "lr_sh"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


class Adam:
    """Per-array Adam with bias correction (beta 0.9/0.999, eps 1e-15)."""

    def __init__(self, shape, lr, beta1=0.9, beta2=0.999, eps=1e-15):
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, param: np.ndarray, grad: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        return param - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


class NaNLossError(RuntimeError):
    def __init__(self, iteration, dump_path=None):
        msg = f"loss became non-finite at iteration {iteration}"
        if dump_path:
            msg += f"; scene state dumped to {dump_path}"
        super().__init__(msg)


def stored_grads(scene: GaussianScene, grads: SceneGrads) -> SceneGrads:
    """Convert linear-opacity gradients to the stored logit space."""
    sig = sigmoid(scene.opacity_logits)
    return SceneGrads(
        dmeans=grads.dmeans,
        dlog_scales=grads.dlog_scales,
        dquats=grads.dquats,
        dopacities=grads.dopacities * sig * (1.0 - sig),
        dsh=grads.dsh,
    )


def evaluate(scene: GaussianScene, views, render_config: RenderConfig):
    """Mean PSNR/SSIM of a scene against (camera, target) pairs."""
    psnrs, ssims = [], []
    for cam, target in views:
        out = render(scene, cam, render_config)
        psnrs.append(psnr(out.color.color, target.color, target.mask))
        ssims.append(ssim(out.color.color, target.color, target.mask))
    return float(np.mean(psnrs)), float(np.mean(ssims))


def train(scene: GaussianScene, views, config: TrainConfig, dump_dir=None):
    """Optimize a fixed-count scene against equiangular targets.

    ``views`` is a list of (Camera, BEAPImage) pairs.  Returns the optimized
    scene and the metric log, one row per eval interval:
    (iter, loss, psnr, ssim, wall_ms).
    """
    scene = scene.copy()
    if len(views) == 0:
        raise ValueError("training needs at least one view")
    rng = np.random.default_rng(config.seed)
    render_config = RenderConfig(lam=config.lam, background=config.background)

    lr_means = config.lr_means if config.lr_means is not None else 1.6e-4 * scene.extent()
    if lr_means <= 0:
        raise ValueError("lr_means must be positive")
    opt = {
        "means": Adam(scene.means.shape, lr_means),
        "log_scales": Adam(scene.log_scales.shape, config.lr_log_scales),
        "quats": Adam(scene.quats.shape, config.lr_quats),
        "opacity_logits": Adam(scene.opacity_logits.shape, config.lr_opacity),
        "sh": Adam(scene.sh.shape, config.lr_sh),
    }

    masked_fraction = float(np.mean([1.0 - t.mask.mean() for _, t in views]))
    metrics = []
    start = time.perf_counter()

    def log_row(iteration, loss_val):
        p, s = evaluate(scene, views, render_config)
        wall_ms = (time.perf_counter() - start) * 1e3
        metrics.append(
            {"iter": iteration, "loss": loss_val, "psnr": p, "ssim": s, "wall_ms": wall_ms}
        )

    last_loss = np.nan
    for it in range(config.iterations):
        cam, target = views[int(rng.integers(len(views)))]
        out = render(scene, cam, render_config)
        loss_val, dimg = loss(out.color.color, target, config.ssim_weight)
        if not np.isfinite(loss_val):
            dump_path = None
            if dump_dir is not None:
                dump_path = f"{dump_dir}/nan_dump_iter{it}.npz"
                np.savez(
                    dump_path,
                    means=scene.means,
                    log_scales=scene.log_scales,
                    quats=scene.quats,
                    opacity_logits=scene.opacity_logits,
                    sh=scene.sh,
                )
            raise NaNLossError(it, dump_path)
        grads = stored_grads(scene, render_backward(scene, cam, dimg, render_config))
        scene.means = opt["means"].step(scene.means, grads.dmeans)
        scene.log_scales = opt["log_scales"].step(scene.log_scales, grads.dlog_scales)
        scene.quats = opt["quats"].step(scene.quats, grads.dquats)
        scene.opacity_logits = opt["opacity_logits"].step(scene.opacity_logits, grads.dopacities)
        scene.sh = opt["sh"].step(scene.sh, grads.dsh)
        last_loss = loss_val
        if (it + 1) % config.eval_interval == 0:
            log_row(it + 1, loss_val)

    if config.iterations % config.eval_interval != 0 or config.iterations == 0:
        log_row(config.iterations, last_loss)
    metrics_info = {"masked_fraction": masked_fraction}
    return scene, metrics, metrics_info


def write_metrics_csv(metrics, path):
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["iter", "loss", "psnr", "ssim", "wall_ms"])
        writer.writeheader()
        for row in metrics:
            writer.writerow(row)
