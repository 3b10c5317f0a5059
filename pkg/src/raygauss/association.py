"""Exact ray-particle association through bounding frustums on angular tiles.

Each particle's support ellipsoid (the lambda-sigma contour) is bounded by
four planes through the optical center, two per bipolar angle axis.  Tangency
of a plane (-1, 0, c, 0) (horizontal axis; c = tan theta) transformed into
the particle's canonical frame reduces to the quadratic

    T22 c^2 - 2 T02 c + T00 = 0,    T = lambda^2 Sigma_c - mu_c mu_c^T,

whose roots are the extreme tangents; the vertical axis uses (T11, T12).
A negative discriminant means the optical center is inside the ellipsoid and
the bounds are clamped to the full field of view.

Tangent values are branch-ambiguous beyond +-90 degrees, so bound
comparisons happen after the mirror transform m = sin(theta)/(cos(theta)+1),
which is monotone over (-pi, pi).  The root pair yields four mirror
candidates; the two nearest the particle center's mirror angle bound the arc
the particle actually occupies, and the complementary pair bounds the
antipodal arc of the same set of lines.  Both arcs take part in tile
association so that every ray whose full line passes within lambda sigma is
covered.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera, antipodal_angles, beap_pixel_edges, dir_to_angles, pixel_ray_grid
from .core import DEFAULT_LAMBDA, Gaussian3D
from .scene import GaussianScene

# Depth below which particles are dropped outright (optical center for all
# practical purposes).
NEAR_LIMIT = 0.01
# Clamped particles (center inside the ellipsoid) with less opacity than this
# are dropped instead of being associated with every tile.
MIN_CLAMPED_OPACITY = 0.05

DEFAULT_TILE_PX = 16


@dataclass
class ViewGaussian:
    """Camera-space view of one particle: mean, covariance, depth key."""

    mu_c: np.ndarray
    cov_c: np.ndarray
    depth: float


@dataclass
class PBFBounds:
    """Angular bounds of one particle as tangent values plus mirror intervals.

    ``tan_theta`` / ``tan_phi`` are the raw quadratic roots (sorted).
    ``theta_mirror`` / ``phi_mirror`` are the effective center-branch
    intervals in mirror space, filled by :func:`effective_bounds`.  ``tmat``
    keeps the five used entries of T as (t00, t02, t11, t12, t22).
    """

    valid: bool
    clamped: bool
    lam: float
    tan_theta: np.ndarray | None = None
    tan_phi: np.ndarray | None = None
    tmat: tuple | None = None
    theta_mirror: tuple | None = None
    phi_mirror: tuple | None = None


def to_view(g: Gaussian3D, rotation, translation) -> ViewGaussian:
    """Rigidly transform a particle into the camera frame."""
    rotation = np.asarray(rotation, dtype=np.float64).reshape(3, 3)
    translation = np.asarray(translation, dtype=np.float64).reshape(3)
    mu_c = rotation @ g.mean + translation
    cov_c = rotation @ g.covariance @ rotation.T
    return ViewGaussian(mu_c=mu_c, cov_c=cov_c, depth=float(np.linalg.norm(mu_c)))


def view_scene(scene: GaussianScene, camera: Camera):
    """Vectorized camera-frame means, covariances and depths for a scene."""
    mu_c = scene.means @ camera.rotation.T + camera.translation
    cov = scene.covariances()
    cov_c = np.einsum("ij,njk,lk->nil", camera.rotation, cov, camera.rotation)
    depth = np.linalg.norm(mu_c, axis=1)
    return mu_c, cov_c, depth


def mirror_from_angle(theta, xi: float = 1.0):
    """Mirror transform m = sin(theta) / (cos(theta) + xi).

    Strictly increasing over (-pi, pi) for xi = 1, with +-pi mapping to the
    +-inf sentinels.
    """
    theta = np.asarray(theta, dtype=np.float64)
    denom = np.cos(theta) + xi
    with np.errstate(divide="ignore", invalid="ignore"):
        m = np.sin(theta) / denom
    sentinel = np.where(theta >= 0, np.inf, -np.inf)
    m = np.where(np.abs(denom) < 1e-300, sentinel, m)
    if m.ndim == 0:
        return float(m)
    return m


def mirror_from_tan(tan_theta, z_sign, xi: float = 1.0):
    """Mirror transform from a tangent value plus the hemisphere sign of z."""
    t = np.asarray(tan_theta, dtype=np.float64)
    s = np.sign(np.asarray(z_sign, dtype=np.float64))
    denom = 1.0 + xi * s * np.sqrt(1.0 + t * t)
    with np.errstate(divide="ignore", invalid="ignore"):
        m = t / denom
    m = np.where(np.abs(denom) < 1e-300, np.where(t >= 0, np.inf, -np.inf), m)
    if m.ndim == 0:
        return float(m)
    return m


def _mirror_candidates(tan_root: float):
    """Mirror values of the two angles sharing one tangent value."""
    m = mirror_from_tan(tan_root, 1.0)
    if m == 0.0:
        return 0.0, np.inf
    return m, -1.0 / m


def _quadratic_roots(a: float, b_half: float, c: float):
    """Roots of a x^2 - 2 b_half x + c = 0, None when complex."""
    disc = b_half * b_half - a * c
    if disc < 0:
        return None
    sq = np.sqrt(disc)
    if b_half >= 0:
        q = b_half + sq
    else:
        q = b_half - sq
    if q == 0.0:
        if a == 0.0:
            return None
        r = sq / a
        return (-abs(r), abs(r))
    roots = sorted((q / a, c / q))
    return tuple(roots)


def solve_pbf(vg: ViewGaussian, lam: float = DEFAULT_LAMBDA) -> PBFBounds:
    """Closed-form tangent bounds of a particle's lambda-sigma ellipsoid.

    Returns clamped bounds when either discriminant is negative (optical
    center inside the ellipsoid) or the quadratic degenerates.
    """
    cov = np.asarray(vg.cov_c, dtype=np.float64)
    if np.abs(cov - cov.T).max() > 1e-9 * max(np.abs(cov).max(), 1e-300):
        raise ValueError("view covariance must be symmetric")
    try:
        np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        raise ValueError("view covariance must be positive definite")
    mu = vg.mu_c
    lam2 = lam * lam
    t00 = lam2 * cov[0, 0] - mu[0] * mu[0]
    t02 = lam2 * cov[0, 2] - mu[0] * mu[2]
    t11 = lam2 * cov[1, 1] - mu[1] * mu[1]
    t12 = lam2 * cov[1, 2] - mu[1] * mu[2]
    t22 = lam2 * cov[2, 2] - mu[2] * mu[2]
    tmat = (t00, t02, t11, t12, t22)

    scale = max(abs(t00), abs(t02), abs(t11), abs(t12), abs(t22), 1e-300)
    if abs(t22) < 1e-12 * scale:
        # One bound sits at exactly +-90 degrees; clamp conservatively.
        return PBFBounds(valid=True, clamped=True, lam=lam, tmat=tmat)

    roots_theta = _quadratic_roots(t22, t02, t00)
    roots_phi = _quadratic_roots(t22, t12, t11)
    if roots_theta is None or roots_phi is None:
        return PBFBounds(valid=True, clamped=True, lam=lam, tmat=tmat)
    return PBFBounds(
        valid=True,
        clamped=False,
        lam=lam,
        tan_theta=np.array(roots_theta),
        tan_phi=np.array(roots_phi),
        tmat=tmat,
    )


def _axis_arcs(t_aa: float, t_a2: float, t22: float, roots):
    """Both mirror-space arcs of the line wedge Q(c) >= 0 for one axis.

    Returns a list of arcs, each a list of (lo, hi) intervals; a wrapping
    arc (through theta = +-pi) is expressed as two half-line intervals.
    """

    def q_at_mirror(m):
        # tan(2 atan(m)) = 2m / (1 - m^2); near |m| = 1 the line-tangent
        # blows up and the sign of Q is the sign of the leading coefficient.
        if not np.isfinite(m) or abs(1.0 - m * m) < 1e-12:
            return t22
        c = 2.0 * m / (1.0 - m * m)
        return t22 * c * c - 2.0 * t_a2 * c + t_aa

    c1, c2 = roots
    m1a, m1b = _mirror_candidates(c1)
    m2a, m2b = _mirror_candidates(c2)
    cands = np.sort(np.array([m1a, m1b, m2a, m2b]))
    lo_mid = cands[1] if np.isfinite(cands[1]) else -1e12
    hi_mid = cands[2] if np.isfinite(cands[2]) else 1e12
    probe = 0.5 * (lo_mid + hi_mid)
    if q_at_mirror(probe) >= 0:
        inner = [(cands[1], cands[2])]
        outer = [(cands[3], np.inf), (-np.inf, cands[0])]
    else:
        inner = [(cands[0], cands[1])]
        outer = [(cands[2], cands[3])]
    return [inner, outer]


def _arcs_for_bounds(pbf: PBFBounds):
    t00, t02, t11, t12, t22 = pbf.tmat
    theta_arcs = _axis_arcs(t00, t02, t22, pbf.tan_theta)
    phi_arcs = _axis_arcs(t11, t12, t22, pbf.tan_phi)
    return theta_arcs, phi_arcs


def _arc_containing(arcs, m_center: float):
    """Index of the arc whose intervals contain (or come nearest) m_center."""
    best, best_dist = 0, np.inf
    for idx, arc in enumerate(arcs):
        for lo, hi in arc:
            if lo <= m_center <= hi:
                return idx
            d = min(abs(m_center - lo), abs(m_center - hi))
            if d < best_dist:
                best_dist = d
                best = idx
    return best


def effective_bounds(pbf: PBFBounds, mu_c) -> PBFBounds:
    """Fill the center-branch mirror intervals of unclamped bounds.

    Of the four mirror candidates per axis, the two nearest the particle
    center's own mirror angle bracket the arc of directions the ellipsoid
    occupies; the interval always contains the center's mirror angle.
    """
    if pbf.clamped:
        raise ValueError("clamped bounds have no effective interval")
    mu_c = np.asarray(mu_c, dtype=np.float64).reshape(3)
    theta_mu, phi_mu = dir_to_angles(mu_c / np.linalg.norm(mu_c))
    m_theta = mirror_from_angle(theta_mu)
    m_phi = mirror_from_angle(phi_mu)
    theta_arcs, phi_arcs = _arcs_for_bounds(pbf)
    t_arc = theta_arcs[_arc_containing(theta_arcs, m_theta)]
    p_arc = phi_arcs[_arc_containing(phi_arcs, m_phi)]

    def as_interval(arc, m_center):
        if len(arc) == 1:
            return arc[0]
        # Wrapping arc: report the half-line holding the center.
        for lo, hi in arc:
            if lo <= m_center <= hi:
                return (lo, hi)
        return arc[0]

    pbf.theta_mirror = as_interval(t_arc, m_theta)
    pbf.phi_mirror = as_interval(p_arc, m_phi)
    return pbf


@dataclass
class CSFGrid:
    """Angular tiling of a camera's footprint, shared by association and render.

    Tile edges are stored in mirror space; ``pixel_tile`` maps each pixel to
    the flat tile index its center angle falls in.
    """

    n_x: int
    n_y: int
    mirror_edges_x: np.ndarray
    mirror_edges_y: np.ndarray
    pixel_tile: np.ndarray

    @property
    def n_tiles(self) -> int:
        return self.n_x * self.n_y

    def window(self):
        return (
            (self.mirror_edges_x[0], self.mirror_edges_x[-1]),
            (self.mirror_edges_y[0], self.mirror_edges_y[-1]),
        )

    def pixels_of_tile(self, tile: int):
        ys, xs = np.nonzero(self.pixel_tile == tile)
        return xs, ys


def build_grid(camera: Camera, tile_px: int = DEFAULT_TILE_PX) -> CSFGrid:
    """Angular tile grid for any camera model.

    The equiangular model tiles its own pixel grid exactly (tile_px pixels
    per tile); other models get a uniform angular tiling of their footprint
    and pixels are binned by their center angles.
    """
    n_x = max(1, int(np.ceil(camera.width / tile_px)))
    n_y = max(1, int(np.ceil(camera.height / tile_px)))
    if camera.model == "beap":
        theta_edges, phi_edges = beap_pixel_edges(camera)
        ex = theta_edges[np.minimum(np.arange(n_x + 1) * tile_px, camera.width)]
        ey = phi_edges[np.minimum(np.arange(n_y + 1) * tile_px, camera.height)]
        cols = np.minimum(np.arange(camera.width) // tile_px, n_x - 1)
        rows = np.minimum(np.arange(camera.height) // tile_px, n_y - 1)
        pixel_tile = rows[:, None] * n_x + cols[None, :]
    else:
        dirs = pixel_ray_grid(camera)
        theta, phi = dir_to_angles(dirs)
        pad = 1e-9
        ex = np.linspace(theta.min() - pad, theta.max() + pad, n_x + 1)
        ey = np.linspace(phi.min() - pad, phi.max() + pad, n_y + 1)
        cols = np.clip(np.searchsorted(ex, theta, side="right") - 1, 0, n_x - 1)
        rows = np.clip(np.searchsorted(ey, phi, side="right") - 1, 0, n_y - 1)
        pixel_tile = rows * n_x + cols
    return CSFGrid(
        n_x=n_x,
        n_y=n_y,
        mirror_edges_x=mirror_from_angle(ex),
        mirror_edges_y=mirror_from_angle(ey),
        pixel_tile=pixel_tile.astype(np.int64),
    )


def depth_sort_bits(depth: np.ndarray) -> np.ndarray:
    """Map float32 depths to uint32 keys whose integer order matches float order."""
    bits = np.asarray(depth, dtype=np.float32).view(np.uint32).astype(np.uint64)
    neg = bits >> np.uint64(31) == 1
    out = np.where(neg, ~bits & np.uint64(0xFFFFFFFF), bits | np.uint64(0x80000000))
    return out


def cull_mask(scene: GaussianScene, mu_c, clamped, opacities=None) -> np.ndarray:
    """Shared global cull: near limit and low-opacity clamped particles."""
    depth = np.linalg.norm(np.asarray(mu_c).reshape(-1, 3), axis=1)
    if opacities is None:
        opacities = scene.opacities
    keep = depth >= NEAR_LIMIT
    keep &= ~(np.asarray(clamped, dtype=bool) & (opacities < MIN_CLAMPED_OPACITY))
    return keep


@dataclass
class RenderGraph:
    """Sorted (tile, depth)-keyed particle work lists plus per-tile ranges."""

    grid: CSFGrid
    order: np.ndarray
    entry_tile: np.ndarray
    ranges: np.ndarray
    mu_c: np.ndarray
    depth: np.ndarray
    keep: np.ndarray
    clamped: np.ndarray

    def tile_entries(self, tile: int) -> np.ndarray:
        return self.order[self.ranges[tile] : self.ranges[tile + 1]]

    def tile_sets(self):
        return [set(self.tile_entries(t).tolist()) for t in range(self.grid.n_tiles)]


def _clip_interval(lo, hi, wlo, whi):
    lo2, hi2 = max(lo, wlo), min(hi, whi)
    if lo2 > hi2:
        return None
    return lo2, hi2


def _tiles_in_interval(edges, lo, hi):
    """Tile indices whose [edge_i, edge_i+1] interval overlaps [lo, hi]."""
    i0 = int(np.searchsorted(edges, lo, side="right") - 1)
    i1 = int(np.searchsorted(edges, hi, side="left"))
    i0 = max(i0, 0)
    i1 = min(i1, len(edges) - 1)
    if i0 >= i1:
        return range(0)
    return range(i0, i1)


def build_render_graph(
    scene: GaussianScene,
    camera: Camera,
    lam: float = DEFAULT_LAMBDA,
    tile_px: int = DEFAULT_TILE_PX,
    grid: CSFGrid | None = None,
) -> RenderGraph:
    """Frustum-cull, duplicate per intersecting tile, and depth-sort a scene.

    Both arcs of each particle's line wedge are tested against the grid so
    that any ray whose full line passes within lambda sigma of the particle
    lands in a covered tile; the per-ray support cutoff downstream discards
    whatever the bounds over-approximate.
    """
    grid = grid or build_grid(camera, tile_px)
    n = len(scene)
    mu_c, cov_c, depth = view_scene(scene, camera)
    (wx_lo, wx_hi), (wy_lo, wy_hi) = grid.window()

    clamped = np.zeros(n, dtype=bool)
    gid_list = []
    tile_list = []
    opacities = scene.opacities

    bounds = []
    for i in range(n):
        if depth[i] < NEAR_LIMIT:
            bounds.append(None)
            continue
        pbf = solve_pbf(ViewGaussian(mu_c=mu_c[i], cov_c=cov_c[i], depth=depth[i]), lam)
        clamped[i] = pbf.clamped
        bounds.append(pbf)

    keep = cull_mask(scene, mu_c, clamped, opacities)

    for i in range(n):
        if not keep[i] or bounds[i] is None:
            continue
        pbf = bounds[i]
        if pbf.clamped:
            gid_list.extend([i] * grid.n_tiles)
            tile_list.extend(range(grid.n_tiles))
            continue
        theta_arcs, phi_arcs = _arcs_for_bounds(pbf)
        tiles_x = set()
        tiles_y = set()
        for arc in theta_arcs:
            for lo, hi in arc:
                clipped = _clip_interval(lo, hi, wx_lo, wx_hi)
                if clipped:
                    tiles_x.update(_tiles_in_interval(grid.mirror_edges_x, *clipped))
        for arc in phi_arcs:
            for lo, hi in arc:
                clipped = _clip_interval(lo, hi, wy_lo, wy_hi)
                if clipped:
                    tiles_y.update(_tiles_in_interval(grid.mirror_edges_y, *clipped))
        for iy in tiles_y:
            base = iy * grid.n_x
            for ix in tiles_x:
                gid_list.append(i)
                tile_list.append(base + ix)

    if gid_list:
        gids = np.array(gid_list, dtype=np.int64)
        tiles = np.array(tile_list, dtype=np.int64)
        pairs = np.unique(np.stack([tiles, gids], axis=1), axis=0)
        tiles, gids = pairs[:, 0], pairs[:, 1]
        key = (tiles.astype(np.uint64) << np.uint64(32)) | depth_sort_bits(depth[gids])
        order = np.argsort(key, kind="stable")
        gids = gids[order]
        tiles = tiles[order]
    else:
        gids = np.zeros(0, dtype=np.int64)
        tiles = np.zeros(0, dtype=np.int64)

    ranges = np.searchsorted(tiles, np.arange(grid.n_tiles + 1))
    return RenderGraph(
        grid=grid,
        order=gids,
        entry_tile=tiles,
        ranges=ranges,
        mu_c=mu_c,
        depth=depth,
        keep=keep,
        clamped=clamped,
    )


def plane_tangency_residual(g: Gaussian3D, rotation, translation, lam: float, axis: str, tan_value: float) -> float:
    """Relative tangency defect of one solved bounding plane.

    Builds the canonical-frame plane g_u = -P_a + c P_2 from the rows of the
    camera-times-canonical transform and evaluates the tangency constraint
    lambda^2 |n|^2 - w^2 against the lambda-sphere; exact roots give zero.
    """
    rotation = np.asarray(rotation, dtype=np.float64).reshape(3, 3)
    translation = np.asarray(translation, dtype=np.float64).reshape(3)
    vh = np.eye(4)
    vh[:3, :3] = rotation @ g.rotation @ np.diag(g.scale)
    vh[:3, 3] = rotation @ g.mean + translation
    row = {"theta": 0, "phi": 1}[axis]
    g_u = -vh[row, :] + tan_value * vh[2, :]
    lhs = lam * lam * float(g_u[:3] @ g_u[:3])
    rhs = float(g_u[3] * g_u[3])
    return abs(lhs - rhs) / max(abs(lhs), abs(rhs), 1e-300)
