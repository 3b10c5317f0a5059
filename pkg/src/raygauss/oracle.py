"""Independent brute-force references the closed forms are validated against.

Everything here deliberately avoids the analytic shortcuts of the main
pipeline: the transmittance oracle evaluates the world-space density through
a matrix inverse and integrates it numerically, the association oracle tests
dense ray grids per tile, and the projection-error oracle Monte-Carlo
integrates the gap between the true ray-space density and its local affine
approximation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import integrate

from .core import Gaussian3D, Ray

RHO = np.sqrt(2.0 * np.pi)


@dataclass
class QuadratureSpec:
    """Tolerances and window for the transmittance quadrature."""

    rel_tol: float = 1e-10
    abs_tol: float = 1e-12
    max_subdivisions: int = 200
    # Integration half-width in canonical sigma units; the Gaussian tail
    # beyond 12 sigma carries mass < 1e-31.
    half_width_sigma: float = 12.0


class QuadratureError(RuntimeError):
    pass


def _canonical_line_density(g: Gaussian3D, ray: Ray):
    """Integrand, foot point and canonical speed for the transmittance integral.

    The density is evaluated straight from the world covariance via a linear
    solve (no whitening matrix), and the canonical arc-length element is
    |d|_Sigma = sqrt(d^T Sigma^-1 d), so

        T = sigma * integral (1/rho) exp(-q(t)/2) |d|_Sigma dt

    over world parameter t, with q(t) the Mahalanobis quadratic along the ray.
    """
    cov = g.covariance
    rel = ray.origin - g.mean
    sol_rel = np.linalg.solve(cov, rel)
    sol_dir = np.linalg.solve(cov, ray.direction)
    a = float(ray.direction @ sol_dir)  # d^T Sigma^-1 d
    b = float(rel @ sol_dir)            # (o-mu)^T Sigma^-1 d
    c = float(rel @ sol_rel)            # (o-mu)^T Sigma^-1 (o-mu)
    speed = np.sqrt(a)
    t_foot = -b / a

    def integrand(t):
        q = a * t * t + 2.0 * b * t + c
        return np.exp(-0.5 * q) * speed / RHO

    return integrand, t_foot, speed


def _adaptive_simpson(f, lo, hi, tol, max_depth=60):
    """Classic recursive adaptive Simpson with Richardson correction."""

    def simpson(a, b, fa, fm, fb):
        return (b - a) / 6.0 * (fa + 4.0 * fm + fb)

    def recurse(a, b, fa, fm, fb, whole, eps, depth):
        m = 0.5 * (a + b)
        lm, rm = 0.5 * (a + m), 0.5 * (m + b)
        flm, frm = f(lm), f(rm)
        left = simpson(a, m, fa, flm, fm)
        right = simpson(m, b, fm, frm, fb)
        delta = left + right - whole
        if depth <= 0:
            raise QuadratureError(f"Simpson subdivision limit hit, residual {delta:.3e}")
        if abs(delta) <= 15.0 * eps:
            return left + right + delta / 15.0
        return recurse(a, m, fa, flm, fm, left, eps / 2.0, depth - 1) + recurse(
            m, b, fm, frm, fb, right, eps / 2.0, depth - 1
        )

    m = 0.5 * (lo + hi)
    fa, fm, fb = f(lo), f(m), f(hi)
    whole = simpson(lo, hi, fa, fm, fb)
    scale = max(abs(whole), 1e-3)
    return recurse(lo, hi, fa, fm, fb, whole, tol * scale, max_depth)


def transmittance_quadrature(
    g: Gaussian3D, ray: Ray, spec: QuadratureSpec | None = None, rule: str = "gauss-kronrod"
) -> float:
    """Numerically integrated transmittance of one particle along a ray.

    ``rule`` selects Gauss-Kronrod (QUADPACK) or adaptive Simpson; the two
    must agree, which guards against a buggy oracle.
    """
    spec = spec or QuadratureSpec()
    integrand, t_foot, speed = _canonical_line_density(g, ray)
    half = spec.half_width_sigma / speed
    lo, hi = t_foot - half, t_foot + half
    if rule == "gauss-kronrod":
        val, err = integrate.quad(
            integrand,
            lo,
            hi,
            epsabs=spec.abs_tol,
            epsrel=spec.rel_tol,
            limit=spec.max_subdivisions,
        )
        if err > spec.abs_tol + spec.rel_tol * abs(val) + 1e-13:
            raise QuadratureError(f"quadrature did not converge, residual {err:.3e}")
    elif rule == "simpson":
        val = _adaptive_simpson(integrand, lo, hi, spec.rel_tol)
    else:
        raise ValueError(f"unknown quadrature rule {rule!r}")
    return g.opacity * val


def mahalanobis_min_linesearch(g: Gaussian3D, ray: Ray, lo=-1e6, hi=1e6, iters=200) -> float:
    """Minimum squared Mahalanobis distance along a ray by golden-section search.

    Independent of the cross-product shortcut; used to pin kappa in the
    near-degenerate regime.
    """
    cov = g.covariance

    def maha_sq(t):
        rel = ray.origin + t * ray.direction - g.mean
        return float(rel @ np.linalg.solve(cov, rel))

    # The quadratic is unimodal, so golden section converges globally.
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c, d = b - invphi * (b - a), a + invphi * (b - a)
    fc, fd = maha_sq(c), maha_sq(d)
    for _ in range(iters):
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = maha_sq(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = maha_sq(d)
    return maha_sq(0.5 * (a + b))


def finite_diff(f, x, h=1e-4):
    """Central-difference gradient of a scalar function of a parameter vector."""
    x = np.asarray(x, dtype=np.float64)
    flat = x.reshape(-1)
    grad = np.zeros_like(flat)
    for i in range(flat.size):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        grad[i] = (f(xp.reshape(x.shape)) - f(xm.reshape(x.shape))) / (2.0 * h)
    return grad.reshape(x.shape)


# ---------------------------------------------------------------------------
# exhaustive reference renderer (no association structure at all)


def exhaustive_render(scene, camera, config=None):
    """Reference render testing every particle against every ray.

    Shares the transmittance formula, depth keys, culls and blending
    semantics with the tiled path but never builds tiles or bounds, so any
    disagreement indicts the association stage.
    """
    from .association import cull_mask, depth_sort_bits, solve_pbf, view_scene, ViewGaussian, NEAR_LIMIT
    from .camera import BEAPImage, pixel_ray_grid
    from .core import MAX_BLEND_T, MIN_REMAINING_TRANSMITTANCE
    from .renderer import FrameOutput, RenderConfig, sh_colors

    config = config or RenderConfig()
    h, w = camera.height, camera.width
    color = np.zeros((h, w, 3))
    remaining = np.ones((h, w))
    count = np.zeros((h, w), dtype=np.int64)
    if len(scene) > 0:
        mu_c, cov_c, depth = view_scene(scene, camera)
        clamped = np.zeros(len(scene), dtype=bool)
        for i in range(len(scene)):
            if depth[i] < NEAR_LIMIT:
                continue
            clamped[i] = solve_pbf(ViewGaussian(mu_c[i], cov_c[i], depth[i]), config.lam).clamped
        keep = cull_mask(scene, mu_c, clamped)
        kept = np.nonzero(keep)[0]
        order = kept[np.argsort(depth_sort_bits(depth[kept]), kind="stable")]

        origin = camera.optical_center
        dirs = pixel_ray_grid(camera) @ camera.rotation
        whit = scene.whitening_matrices()
        o_u_all = np.einsum("nij,nj->ni", whit, origin[None, :] - scene.means)
        colors, _, _ = sh_colors(scene, origin)
        opac = scene.opacities
        lam2 = config.lam * config.lam

        for g in order:
            d_u = dirs @ whit[g].T
            m_u = np.cross(o_u_all[g][None, None, :], d_u)
            dd = np.einsum("hwi,hwi->hw", d_u, d_u)
            kappa = np.einsum("hwi,hwi->hw", m_u, m_u) / dd
            u_val = opac[g] * np.exp(-0.5 * kappa)
            if config.support_cutoff:
                u_val = np.where(kappa <= lam2, u_val, 0.0)
            t_val = np.minimum(u_val, MAX_BLEND_T)
            alive = remaining >= MIN_REMAINING_TRANSMITTANCE
            t_eff = np.where(alive, t_val, 0.0)
            color += (remaining * t_eff)[:, :, None] * colors[g][None, None, :]
            remaining = remaining * (1.0 - t_eff)
            count += t_eff > 0
    color += remaining[:, :, None] * np.asarray(config.background)[None, None, :]
    return FrameOutput(
        color=BEAPImage(color=color, mask=np.ones((h, w), dtype=bool)),
        remaining_transmittance=remaining,
        contributor_count=count,
        graph=None,
    )


# ---------------------------------------------------------------------------
# association oracles


def association_bruteforce(scene, camera, lam=3.0, rays_per_tile=64, grid=None):
    """Per-tile particle sets from dense ray sampling.

    Tile tau contains particle g iff the minimum kappa over the sampled rays
    is at most lam^2.  Applies the same global cull as the pipeline; kappa is
    the full-line distance, matching the rendering formula.
    """
    from .association import build_grid, cull_mask, solve_pbf, view_scene, ViewGaussian, NEAR_LIMIT
    from .camera import angles_to_dir

    grid = grid or build_grid(camera)
    side = max(8, int(np.ceil(np.sqrt(rays_per_tile))))
    mu_c, cov_c, depth = view_scene(scene, camera)
    clamped = np.zeros(len(scene), dtype=bool)
    for i in range(len(scene)):
        if depth[i] < NEAR_LIMIT:
            continue
        clamped[i] = solve_pbf(ViewGaussian(mu_c[i], cov_c[i], depth[i]), lam).clamped
    keep = cull_mask(scene, mu_c, clamped)
    kept = np.nonzero(keep)[0]

    whit = scene.whitening_matrices()
    origin = camera.optical_center
    o_u_all = np.einsum("nij,nj->ni", whit, origin[None, :] - scene.means)
    lam2 = lam * lam

    tile_sets = []
    frac = (np.arange(side) + 0.5) / side
    for tile in range(grid.n_tiles):
        iy, ix = divmod(tile, grid.n_x)
        t0 = 2.0 * np.arctan(grid.mirror_edges_x[ix])
        t1 = 2.0 * np.arctan(grid.mirror_edges_x[ix + 1])
        p0 = 2.0 * np.arctan(grid.mirror_edges_y[iy])
        p1 = 2.0 * np.arctan(grid.mirror_edges_y[iy + 1])
        thetas = t0 + (t1 - t0) * frac
        phis = p0 + (p1 - p0) * frac
        tt, pp = np.meshgrid(thetas, phis)
        dirs = angles_to_dir(tt, pp).reshape(-1, 3) @ camera.rotation
        present = set()
        for g in kept:
            d_u = dirs @ whit[g].T
            m_u = np.cross(o_u_all[g][None, :], d_u)
            kappa = np.einsum("ri,ri->r", m_u, m_u) / np.einsum("ri,ri->r", d_u, d_u)
            if kappa.min() <= lam2:
                present.add(int(g))
        tile_sets.append(present)
    return tile_sets


def bbox_association_counts(scene, camera, lam=3.0, tile_px=16):
    """Per-tile association counts of an isotropic bounding-sphere baseline.

    Each particle is inflated to the sphere of its largest axis, which is the
    axis-aligned bounding box of its support in angle space; tighter
    anisotropic bounds should associate strictly fewer particles per tile.
    """
    from .association import build_render_graph
    from .scene import GaussianScene

    iso = GaussianScene(
        means=scene.means.copy(),
        log_scales=np.repeat(scene.log_scales.max(axis=1, keepdims=True), 3, axis=1),
        quats=scene.quats.copy(),
        opacity_logits=scene.opacity_logits.copy(),
        sh=scene.sh.copy(),
    )
    graph = build_render_graph(iso, camera, lam=lam, tile_px=tile_px)
    return np.diff(graph.ranges)


# ---------------------------------------------------------------------------
# local-affine projection error


def _ray_space_maps(mu_c):
    """The camera-to-ray-space map tau, its inverse, and its Jacobian at a point."""

    def tau(t):
        t = np.asarray(t, dtype=np.float64)
        n = np.linalg.norm(t, axis=-1)
        return np.stack([t[..., 0] / t[..., 2], t[..., 1] / t[..., 2], n], axis=-1)

    def tau_inv(x):
        x = np.asarray(x, dtype=np.float64)
        l = np.sqrt(x[..., 0] ** 2 + x[..., 1] ** 2 + 1.0)
        return np.stack(
            [x[..., 0] / l * x[..., 2], x[..., 1] / l * x[..., 2], x[..., 2] / l], axis=-1
        )

    t0, t1, t2 = mu_c
    n = np.linalg.norm(mu_c)
    jac = np.array(
        [
            [1.0 / t2, 0.0, -t0 / (t2 * t2)],
            [0.0, 1.0 / t2, -t1 / (t2 * t2)],
            [t0 / n, t1 / n, t2 / n],
        ]
    )
    return tau, tau_inv, jac


def _gauss3(x, mean, cov):
    """Normalized 3D Gaussian density (batch of points)."""
    rel = x - mean[None, :]
    sol = np.linalg.solve(cov, rel.T).T
    quad = np.einsum("ni,ni->n", rel, sol)
    norm = (2.0 * np.pi) ** 1.5 * np.sqrt(np.linalg.det(cov))
    return np.exp(-0.5 * quad) / norm


def ewa_error(mu_c, cov_c, opacity=1.0, n_samples=20000, rng=None):
    """Monte-Carlo L1 gap between exact and locally-affine ray-space densities.

    The exact density composes the camera-space Gaussian with the inverse of
    the ray-space map; the affine density pushes the Gaussian through the
    Jacobian at its center.  Returns (error, standard_error).
    """
    mu_c = np.asarray(mu_c, dtype=np.float64).reshape(3)
    cov_c = np.asarray(cov_c, dtype=np.float64).reshape(3, 3)
    if mu_c[2] <= 0:
        raise ValueError("particle must be in front of the camera")
    rng = rng or np.random.default_rng(0)
    tau, tau_inv, jac = _ray_space_maps(mu_c)
    x_k = tau(mu_c)
    cov_k = jac @ cov_c @ jac.T

    # Proposal: the affine Gaussian inflated 3x to cover both densities.
    prop_cov = 9.0 * cov_k
    chol = np.linalg.cholesky(prop_cov)
    z = rng.standard_normal((n_samples, 3))
    x = x_k[None, :] + z @ chol.T
    q = _gauss3(x, x_k, prop_cov)

    exact = _gauss3(tau_inv(x), mu_c, cov_c)
    affine = _gauss3(x, x_k, cov_k)
    vals = np.abs(exact - affine) / q
    err = float(opacity) * float(vals.mean())
    se = float(opacity) * float(vals.std(ddof=1) / np.sqrt(n_samples))
    return err, se
