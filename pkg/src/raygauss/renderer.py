"""Tiled forward rendering and the batched analytic backward pass.

Per frame: build the render graph, then composite each tile's depth-sorted
particles front to back at every pixel.  The per-ray support cutoff
kappa <= lambda^2 matches the association bound, so the set of particles a
ray integrates is exactly the set the bounds promised, which is what keeps
tiled output equal to an exhaustive all-pairs render.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .association import RenderGraph, build_render_graph, cull_mask, view_scene
from .camera import BEAPImage, Camera, pixel_ray_grid
from .core import MAX_BLEND_T, MIN_REMAINING_TRANSMITTANCE, sh_basis
from .scene import GaussianScene


@dataclass
class RenderConfig:
    lam: float = 3.0
    tile_px: int = 16
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    # Drop per-ray contributions with kappa > lam^2 so rendering support and
    # association use one consistent bound.  Disabling makes association a
    # plain superset (full-tail integration).
    support_cutoff: bool = True
    threads: int = 1

    def __post_init__(self):
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)


@dataclass
class FrameOutput:
    color: BEAPImage
    remaining_transmittance: np.ndarray
    contributor_count: np.ndarray
    graph: RenderGraph | None = None


def resolve_threads(requested=None) -> int:
    """Worker-pool width: explicit argument, else GEER_THREADS, else cpu count."""
    if requested is not None and requested > 0:
        return int(requested)
    env = os.environ.get("GEER_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def sh_colors(scene: GaussianScene, origin):
    """Per-particle RGB at this viewpoint plus the positive-clamp gate.

    View direction is normalize(mean - origin); returns (colors, gate, basis)
    where ``gate`` marks channels above the clamp, for the backward pass.
    """
    rel = scene.means - np.asarray(origin).reshape(1, 3)
    norms = np.linalg.norm(rel, axis=1, keepdims=True)
    dirs = rel / np.maximum(norms, 1e-12)
    n_bands = scene.sh.shape[1]
    basis = np.stack([sh_basis(d)[:n_bands] for d in dirs])  # (N, B)
    pre = np.einsum("nb,nbc->nc", basis, scene.sh) + 0.5
    gate = pre > 0
    return np.maximum(pre, 0.0), gate, basis


def _prepare(scene: GaussianScene, camera: Camera, config: RenderConfig):
    graph = build_render_graph(scene, camera, lam=config.lam, tile_px=config.tile_px)
    origin = camera.optical_center
    dirs_cam = pixel_ray_grid(camera)
    dirs_world = dirs_cam @ camera.rotation  # R_c^T applied to each pixel dir
    whit = scene.whitening_matrices()
    o_u = np.einsum("nij,nj->ni", whit, origin[None, :] - scene.means)
    colors, gate, basis = sh_colors(scene, origin)
    return graph, origin, dirs_world, whit, o_u, colors, gate, basis


def _tile_forward(entries, dirs, o_u_all, whit, opacities, colors, lam2, cutoff, background):
    """Composite one tile; dirs is (P, 3) world directions for its pixels.

    Returns (color (P,3), remaining (P,), count (P,), per-entry T and
    pre-transmittance arrays for the backward pass).
    """
    n_e = len(entries)
    n_p = len(dirs)
    if n_e == 0:
        out = np.tile(background, (n_p, 1))
        return out, np.ones(n_p), np.zeros(n_p, dtype=np.int64), None

    w_sel = whit[entries]
    d_u = np.einsum("gij,pj->gpi", w_sel, dirs)
    o_u = o_u_all[entries][:, None, :]
    m_u = np.cross(np.broadcast_to(o_u, d_u.shape), d_u)
    dd = np.einsum("gpi,gpi->gp", d_u, d_u)
    kappa = np.einsum("gpi,gpi->gp", m_u, m_u) / dd
    u_val = opacities[entries][:, None] * np.exp(-0.5 * kappa)
    if cutoff:
        u_val = np.where(kappa <= lam2, u_val, 0.0)
    t_val = np.minimum(u_val, MAX_BLEND_T)

    color = np.zeros((n_p, 3))
    remaining = np.ones(n_p)
    count = np.zeros(n_p, dtype=np.int64)
    trans_before = np.empty((n_e, n_p))
    for i in range(n_e):
        trans_before[i] = remaining
        alive = remaining >= MIN_REMAINING_TRANSMITTANCE
        t_eff = np.where(alive, t_val[i], 0.0)
        color += (remaining * t_eff)[:, None] * colors[entries[i]][None, :]
        remaining = remaining * (1.0 - t_eff)
        count += t_eff > 0
    color += remaining[:, None] * background[None, :]
    cache = (d_u, o_u_all[entries], m_u, dd, kappa, u_val, t_val, trans_before)
    return color, remaining, count, cache


def render(scene: GaussianScene, camera: Camera, config: RenderConfig | None = None) -> FrameOutput:
    """Render a scene through any supported camera model."""
    config = config or RenderConfig()
    h, w = camera.height, camera.width
    image = np.zeros((h, w, 3))
    remaining = np.ones((h, w))
    count = np.zeros((h, w), dtype=np.int64)

    if len(scene) == 0:
        image[:] = config.background
        return FrameOutput(
            color=BEAPImage(color=image, mask=np.ones((h, w), dtype=bool)),
            remaining_transmittance=remaining,
            contributor_count=count,
            graph=None,
        )

    graph, origin, dirs_world, whit, o_u, colors, gate, basis = _prepare(scene, camera, config)
    lam2 = config.lam * config.lam
    opacities = scene.opacities

    def run_tile(tile):
        xs, ys = graph.grid.pixels_of_tile(tile)
        if len(xs) == 0:
            return tile, xs, ys, None
        entries = graph.tile_entries(tile)
        dirs = dirs_world[ys, xs]
        col, rem, cnt, _ = _tile_forward(
            entries, dirs, o_u, whit, opacities, colors, lam2, config.support_cutoff, config.background
        )
        return tile, xs, ys, (col, rem, cnt)

    tiles = range(graph.grid.n_tiles)
    n_workers = resolve_threads(config.threads)
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(run_tile, tiles))
    else:
        results = [run_tile(t) for t in tiles]

    for tile, xs, ys, payload in results:
        if payload is None:
            continue
        col, rem, cnt = payload
        image[ys, xs] = col
        remaining[ys, xs] = rem
        count[ys, xs] = cnt

    return FrameOutput(
        color=BEAPImage(color=image, mask=np.ones((h, w), dtype=bool)),
        remaining_transmittance=remaining,
        contributor_count=count,
        graph=graph,
    )


@dataclass
class SceneGrads:
    """Per-particle gradients in the stored parameter spaces.

    ``dquats`` already includes the normalization Jacobian; ``dopacities``
    is w.r.t. linear opacity (callers chain through the logit).
    """

    dmeans: np.ndarray
    dlog_scales: np.ndarray
    dquats: np.ndarray
    dopacities: np.ndarray
    dsh: np.ndarray

    @classmethod
    def zeros_like(cls, scene: GaussianScene) -> "SceneGrads":
        return cls(
            dmeans=np.zeros_like(scene.means),
            dlog_scales=np.zeros_like(scene.log_scales),
            dquats=np.zeros_like(scene.quats),
            dopacities=np.zeros_like(scene.opacity_logits),
            dsh=np.zeros_like(scene.sh),
        )


def _scale_rotation_grads(dl_dw, scene: GaussianScene):
    """Batched contraction of dL/dW (N,3,3) into log-scale and raw quat grads."""
    s = scene.scales
    rot = scene.rotations
    ds_linear = -np.einsum("nkj,njk->nk", dl_dw, rot) / (s * s)
    dlog_s = ds_linear * s

    q = scene.quats / np.linalg.norm(scene.quats, axis=1, keepdims=True)
    r, i, j, k = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    zeros = np.zeros_like(r)
    n = len(q)
    d_r = np.stack([zeros, k, -j, -k, zeros, i, j, -i, zeros], axis=1).reshape(n, 3, 3)
    d_i = np.stack([zeros, j, k, j, -2 * i, r, k, -r, -2 * i], axis=1).reshape(n, 3, 3)
    d_j = np.stack([-2 * j, i, -r, i, zeros, k, r, k, -2 * j], axis=1).reshape(n, 3, 3)
    d_k = np.stack([-2 * k, r, i, -r, -2 * k, j, i, j, zeros], axis=1).reshape(n, 3, 3)
    inv_s = (1.0 / s)[:, :, None]
    dq_raw = np.stack(
        [
            np.einsum("nij,nij->n", dl_dw, 2.0 * d * inv_s)
            for d in (d_r, d_i, d_j, d_k)
        ],
        axis=1,
    )
    # Normalization Jacobian of the stored (raw) quaternion.
    qn = np.linalg.norm(scene.quats, axis=1, keepdims=True)
    qh = scene.quats / qn
    dq = (dq_raw - np.einsum("ni,ni->n", dq_raw, qh)[:, None] * qh) / qn
    return dlog_s, dq


def render_backward(
    scene: GaussianScene,
    camera: Camera,
    dl_dimage: np.ndarray,
    config: RenderConfig | None = None,
) -> SceneGrads:
    """Accumulate dLoss/dparameters for every particle from an image gradient.

    Recomputes the forward pass per tile (front-to-back replay) and chains
    the blend, kappa and whitening gradients; per-particle sums run in a
    fixed tile order so results are deterministic.
    """
    config = config or RenderConfig()
    grads = SceneGrads.zeros_like(scene)
    if len(scene) == 0:
        return grads
    dl_dimage = np.asarray(dl_dimage, dtype=np.float64)

    graph, origin, dirs_world, whit, o_u_all, colors, gate, basis = _prepare(scene, camera, config)
    lam2 = config.lam * config.lam
    opacities = scene.opacities

    dl_dw = np.zeros((len(scene), 3, 3))
    dl_dcolor_g = np.zeros((len(scene), 3))

    def run_tile(tile):
        xs, ys = graph.grid.pixels_of_tile(tile)
        entries = graph.tile_entries(tile)
        if len(xs) == 0 or len(entries) == 0:
            return None
        dirs = dirs_world[ys, xs]
        dl_dc = dl_dimage[ys, xs]
        if not np.any(dl_dc):
            return None
        _, _, _, cache = _tile_forward(
            entries, dirs, o_u_all, whit, opacities, colors, lam2, config.support_cutoff, config.background
        )
        d_u, o_u_sel, m_u, dd, kappa, u_val, t_val, trans_before = cache
        n_e, n_p = t_val.shape

        alive = trans_before >= MIN_REMAINING_TRANSMITTANCE
        t_eff = np.where(alive, t_val, 0.0)
        weights = trans_before * t_eff  # (G, P)
        col_sel = colors[entries]  # (G, 3)
        weighted = weights[:, :, None] * col_sel[:, None, :]
        remaining = trans_before[-1] * (1.0 - t_eff[-1])
        bg_term = remaining[:, None] * config.background[None, :]

        # Occlusion suffix: everything composited behind entry i.
        suffix = np.cumsum(weighted[::-1], axis=0)[::-1] - weighted
        dC_dt = trans_before[:, :, None] * col_sel[:, None, :] - (
            (suffix + bg_term[None, :, :]) / (1.0 - t_eff)[:, :, None]
        )
        dl_dt = np.einsum("gpc,pc->gp", dC_dt, dl_dc)
        # Gradient gates: early-stopped, cutoff and clamped contributions.
        gate_t = alive & (t_val > 0) & (u_val < MAX_BLEND_T)
        dl_du = np.where(gate_t, dl_dt, 0.0)

        alpha = np.exp(-0.5 * kappa)
        dsigma = dl_du * alpha
        dkappa = -0.5 * dl_du * u_val

        dk_dm = (2.0 / dd)[:, :, None] * m_u
        dl_dm = dkappa[:, :, None] * dk_dm
        dl_do = np.cross(d_u, dl_dm)
        dl_dd = (
            -(2.0 * kappa * dkappa / dd)[:, :, None] * d_u
            + np.cross(dl_dm, np.broadcast_to(o_u_sel[:, None, :], d_u.shape))
        )

        dw_rc = np.einsum("gpi,pj->gij", dl_dd, dirs)
        do_sum = dl_do.sum(axis=1)
        dw_pc = do_sum[:, :, None] * (origin[None, :] - scene.means[entries])[:, None, :]
        dmu = -np.einsum("gji,gj->gi", whit[entries], do_sum)
        dsig = dsigma.sum(axis=1)
        dcol = np.einsum("gp,pc->gc", weights, dl_dc)
        return entries, dw_rc + dw_pc, dmu, dsig, dcol

    n_workers = resolve_threads(config.threads)
    tiles = range(graph.grid.n_tiles)
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(run_tile, tiles))
    else:
        results = [run_tile(t) for t in tiles]

    for res in results:  # fixed tile order keeps the reduction deterministic
        if res is None:
            continue
        entries, dw, dmu, dsig, dcol = res
        np.add.at(dl_dw, entries, dw)
        np.add.at(grads.dmeans, entries, dmu)
        np.add.at(grads.dopacities, entries, dsig)
        np.add.at(dl_dcolor_g, entries, dcol)

    dlog_s, dq = _scale_rotation_grads(dl_dw, scene)
    grads.dlog_scales += dlog_s
    grads.dquats += dq
    grads.dsh += np.einsum("nb,nc->nbc", basis, dl_dcolor_g * gate)
    return grads
