"""Neural surface stage: an SDF+color coordinate network with NeuS-style
volume rendering and eikonal regularization, marching-tetrahedra mesh
extraction on a body-centered lattice, and exact per-pixel ray casting of the
extracted mesh for the fixed-geometry texture stage.
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import checkpoint as ckpt
from .cameras import CameraPose
from .data import camera_rays, ray_box_range

DOMAIN_BOUND = 0.55  # field/mesh domain half-extent; covers the unit cube


@dataclass(frozen=True)
class FieldConfig:
    hidden: int = 32
    feat_dim: int = 8
    n_freqs: int = 3
    init_radius: float = 0.35
    init_sharpness: float = 10.0

    def to_dict(self) -> dict:
        from dataclasses import asdict

        return asdict(self)


def positional_encoding(x: torch.Tensor, n_freqs: int) -> torch.Tensor:
    """[x, sin(2^k pi x), cos(2^k pi x)] features."""
    freqs = (2.0 ** torch.arange(n_freqs, dtype=x.dtype)) * math.pi
    args = (x[..., None] * freqs).reshape(*x.shape[:-1], -1)
    return torch.cat([x, torch.sin(args), torch.cos(args)], dim=-1)


class SurfaceModel(nn.Module):
    """SDF trunk with a color head and a learned logistic sharpness.

    The trunk is geometrically initialized so the zero level set starts as a
    centred ball of ``init_radius``: positional-encoding weights start at
    zero and the final sdf row approximates ||x|| - r. Sharpness is stored as
    a log so it stays positive.
    """

    def __init__(self, cfg: FieldConfig | None = None):
        super().__init__()
        cfg = cfg or FieldConfig()
        self.cfg = cfg
        in_dim = 3 + 6 * cfg.n_freqs
        h = cfg.hidden
        self.lin1 = nn.Linear(in_dim, h)
        self.lin2 = nn.Linear(h, h)
        self.sdf_head = nn.Linear(h, 1 + cfg.feat_dim)
        self.act = nn.SiLU()  # smooth enough for eikonal autograd, fast on CPU
        self.color1 = nn.Linear(cfg.feat_dim + 3, h)
        self.color2 = nn.Linear(h, 3)
        self.log_sharpness = nn.Parameter(torch.tensor(float(np.log(cfg.init_sharpness))))
        self._geometric_init()

    def _geometric_init(self):
        cfg = self.cfg
        h = cfg.hidden
        with torch.no_grad():
            nn.init.normal_(self.lin1.weight, 0.0, np.sqrt(2.0 / h))
            self.lin1.weight[:, 3:] = 0.0  # encoding enters only through training
            nn.init.zeros_(self.lin1.bias)
            nn.init.normal_(self.lin2.weight, 0.0, np.sqrt(2.0 / h))
            nn.init.zeros_(self.lin2.bias)
            nn.init.normal_(self.sdf_head.weight, 0.0, 1e-4)
            nn.init.normal_(self.sdf_head.weight[0], np.sqrt(np.pi / h), 1e-4)
            nn.init.zeros_(self.sdf_head.bias)
            self.sdf_head.bias[0] = -cfg.init_radius
            # neutral gray color at init
            nn.init.zeros_(self.color2.weight)
            nn.init.zeros_(self.color2.bias)

    def fit_to_ball(self, steps: int = 400, seed: int = 0, bound: float = DOMAIN_BOUND) -> float:
        """Regress the sdf onto the analytic centred sphere of init_radius.

        Run once before distillation so optimization starts from a clean
        ball; returns the final fit error (mean |sdf - target|).
        """
        gen = torch.Generator().manual_seed(seed)
        opt = torch.optim.Adam([p for n, p in self.named_parameters() if not n.startswith("color")], lr=1e-2)
        err = 0.0
        for _ in range(steps):
            pts = (torch.rand(2048, 3, generator=gen) * 2.0 - 1.0) * bound
            target = pts.norm(dim=-1) - self.cfg.init_radius
            loss = ((self.sdf(pts) - target) ** 2).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            err = float(loss.detach().sqrt())
        return err

    @property
    def sharpness(self) -> torch.Tensor:
        return torch.exp(self.log_sharpness)

    def sdf_and_features(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        enc = positional_encoding(x, self.cfg.n_freqs)
        hdn = self.act(self.lin2(self.act(self.lin1(enc))))
        out = self.sdf_head(hdn)
        return out[..., 0], out[..., 1:]

    def sdf(self, x: torch.Tensor) -> torch.Tensor:
        return self.sdf_and_features(x)[0]

    def color(self, x: torch.Tensor, features: torch.Tensor | None = None) -> torch.Tensor:
        if features is None:
            features = self.sdf_and_features(x)[1]
        hdn = F.relu(self.color1(torch.cat([features, x], dim=-1)))
        return torch.sigmoid(self.color2(hdn))


# ---------------------------------------------------------------------------
# volume rendering
# ---------------------------------------------------------------------------

def _render_rays(
    model: SurfaceModel,
    origins: torch.Tensor,
    dirs: torch.Tensor,
    near: torch.Tensor,
    far: torch.Tensor,
    n_samples: int,
    background: float,
    generator: torch.Generator | None,
) -> dict:
    """Composite a flat batch of rays; all inputs are (R, ...) tensors."""
    r = dirs.shape[0]
    bins = torch.linspace(0.0, 1.0, n_samples + 1)[None, :-1]
    if generator is not None:
        jitter = torch.rand(r, n_samples, generator=generator)
    else:
        jitter = torch.full((r, n_samples), 0.5)
    frac = bins + jitter * (1.0 / n_samples)
    t_vals = near[:, None] + frac * (far - near)[:, None]  # (R, N)
    pts = origins[:, None, :] + dirs[:, None, :] * t_vals[..., None]

    flat = pts.reshape(-1, 3)
    sdf_flat, feats_flat = model.sdf_and_features(flat)
    if not torch.isfinite(sdf_flat).all():
        bad = flat[(~torch.isfinite(sdf_flat)).nonzero()[0, 0]]
        raise FloatingPointError(f"non-finite sdf at sample location {bad.tolist()}")
    sdf_vals = sdf_flat.reshape(r, n_samples)

    phi = torch.sigmoid(model.sharpness * sdf_vals)
    alpha = torch.clamp((phi[:, :-1] - phi[:, 1:]) / (phi[:, :-1] + 1e-12), min=0.0)
    trans = torch.cumprod(torch.cat([torch.ones(r, 1), 1.0 - alpha + 1e-12], dim=1), dim=1)[:, :-1]
    weights = alpha * trans  # (R, N-1)

    colors = model.color(flat, feats_flat).reshape(r, n_samples, 3)[:, :-1]
    acc = weights.sum(dim=1)
    rgb = (weights[..., None] * colors).sum(dim=1) + (1.0 - acc[..., None]) * background
    depth = (weights * t_vals[:, :-1]).sum(dim=1) / torch.clamp(acc, min=1e-8)
    return {"rgb": rgb, "opacity": acc, "depth": depth}


def volume_render_views(
    model: SurfaceModel,
    poses: list[CameraPose],
    resolution: int,
    n_samples: int = 64,
    background: float = 1.0,
    generator: torch.Generator | None = None,
    bound: float = DOMAIN_BOUND,
    with_normals: bool = False,
) -> dict:
    """NeuS-style front-to-back compositing along pixel rays, batched over
    several cameras in a single field evaluation.

    Returns {"rgb", "opacity", "depth", "normals"} with a leading view axis:
    (V, H, W, 3), (V, H, W), (V, H, W), (V, H, W, 3). Rays that miss the
    domain box composite pure background without field evaluations. Sampling
    is stratified when a generator is supplied and bin-midpoint
    (deterministic) otherwise.
    """
    all_origins, all_dirs, all_near, all_far = [], [], [], []
    for pose in poses:
        origin_np, dirs_np = camera_rays(pose, resolution)
        flat = dirs_np.reshape(-1, 3)
        near_np, far_np = ray_box_range(origin_np, flat, bound)
        all_origins.append(np.broadcast_to(origin_np, flat.shape))
        all_dirs.append(flat)
        all_near.append(near_np)
        all_far.append(far_np)
    origins = torch.from_numpy(np.concatenate(all_origins)).float()
    dirs = torch.from_numpy(np.concatenate(all_dirs)).float()
    near = torch.from_numpy(np.concatenate(all_near)).float()
    far = torch.from_numpy(np.concatenate(all_far)).float()
    live = near <= far

    n_pix = dirs.shape[0]
    rgb = torch.full((n_pix, 3), background)
    opacity = torch.zeros(n_pix)
    depth = torch.zeros(n_pix)
    normals = torch.zeros(n_pix, 3)
    idx = torch.nonzero(live).squeeze(-1)
    if idx.numel() > 0:
        out = _render_rays(model, origins[idx], dirs[idx], near[idx], far[idx], n_samples, background, generator)
        rgb = rgb.index_put((idx,), out["rgb"])
        opacity = opacity.index_put((idx,), out["opacity"])
        depth = depth.index_put((idx,), out["depth"])
        if with_normals:
            surf = origins[idx] + dirs[idx] * out["depth"][:, None]
            normals = normals.index_put((idx,), finite_difference_normals(model, surf.detach()))

    v = len(poses)
    shape = (v, resolution, resolution)
    return {
        "rgb": rgb.reshape(*shape, 3),
        "opacity": opacity.reshape(*shape),
        "depth": depth.reshape(*shape),
        "normals": normals.reshape(*shape, 3),
    }


def volume_render(
    model: SurfaceModel,
    pose: CameraPose,
    resolution: int,
    n_samples: int = 64,
    background: float = 1.0,
    generator: torch.Generator | None = None,
    bound: float = DOMAIN_BOUND,
    with_normals: bool = False,
) -> dict:
    """Single-camera wrapper around volume_render_views; (H, W, ...) outputs."""
    out = volume_render_views(
        model, [pose], resolution, n_samples, background, generator, bound, with_normals
    )
    return {k: v[0] for k, v in out.items()}


def finite_difference_normals(model: SurfaceModel, pts: torch.Tensor, eps: float = 1e-3) -> torch.Tensor:
    offsets = torch.tensor(
        [[1, -1, -1], [-1, -1, 1], [-1, 1, -1], [1, 1, 1]], dtype=pts.dtype
    )
    with torch.no_grad():
        grad = torch.zeros_like(pts)
        for off in offsets:
            grad = grad + off * model.sdf(pts + eps * off)[:, None]
    return grad / torch.clamp(grad.norm(dim=-1, keepdim=True), min=1e-12)


def eikonal_loss(sdf_fn, points: torch.Tensor) -> torch.Tensor:
    """Mean squared deviation of the sdf gradient norm from 1.

    ``sdf_fn`` is a callable (N, 3) -> (N,), typically ``model.sdf``; the
    gradient comes from autograd so the loss itself stays differentiable in
    the field parameters.
    """
    pts = points.detach().requires_grad_(True)
    values = sdf_fn(pts)
    (grad,) = torch.autograd.grad(values.sum(), pts, create_graph=True)
    return ((grad.norm(dim=-1) - 1.0) ** 2).mean()


# ---------------------------------------------------------------------------
# marching tetrahedra
# ---------------------------------------------------------------------------

# per-case triangle fans over tet edge ids; edge k connects tet vertices
# _TET_EDGES[2k], _TET_EDGES[2k+1]
_TRIANGLE_TABLE = np.array(
    [
        [-1, -1, -1, -1, -1, -1],
        [1, 0, 2, -1, -1, -1],
        [4, 0, 3, -1, -1, -1],
        [1, 4, 2, 1, 3, 4],
        [3, 1, 5, -1, -1, -1],
        [2, 3, 0, 2, 5, 3],
        [1, 4, 0, 1, 5, 4],
        [4, 2, 5, -1, -1, -1],
        [4, 5, 2, -1, -1, -1],
        [4, 1, 0, 4, 5, 1],
        [3, 2, 0, 3, 5, 2],
        [1, 3, 5, -1, -1, -1],
        [4, 1, 2, 4, 3, 1],
        [3, 0, 4, -1, -1, -1],
        [2, 0, 1, -1, -1, -1],
        [-1, -1, -1, -1, -1, -1],
    ],
    dtype=np.int64,
)
_NUM_TRIANGLES = np.array([0, 1, 1, 2, 1, 2, 2, 1, 1, 2, 2, 1, 2, 1, 1, 0], dtype=np.int64)
_TET_EDGES = np.array([0, 1, 0, 2, 0, 3, 1, 2, 1, 3, 2, 3], dtype=np.int64)


@dataclass
class ExtractedMesh:
    vertices: np.ndarray  # (N, 3) float64, world units
    triangles: np.ndarray  # (M, 3) int64
    vertex_colors: np.ndarray | None = None  # (N, 3) in [0, 1], fine stage

    def geometry_hash(self) -> str:
        digest = hashlib.sha256()
        digest.update(np.ascontiguousarray(self.vertices).tobytes())
        digest.update(np.ascontiguousarray(self.triangles).tobytes())
        return digest.hexdigest()


def _bcc_tetrahedra(occ_corner: np.ndarray, occ_center: np.ndarray, res: int) -> np.ndarray:
    """Tetrahedra (T, 4 global point ids) of the body-centered lattice,
    restricted to faces whose six incident sample points disagree in sign.

    Global ids: corner (i, j, k) -> i*(R+1)^2 + j*(R+1) + k; center (i, j, k)
    -> (R+1)^3 + i*R^2 + j*R + k. Each interior cell face contributes four
    tets (two adjacent cell centers joined with one face edge).
    """
    rp = res + 1
    n_corners = rp**3

    def corner_id(i, j, k):
        return (i * rp + j) * rp + k

    def center_id(i, j, k):
        return n_corners + (i * res + j) * res + k

    tets = []
    # axis 0: face between centers (i,j,k) and (i+1,j,k), corner plane x=i+1
    for axis in range(3):
        shape = [res, res, res]
        shape[axis] = res - 1
        ii, jj, kk = np.meshgrid(*[np.arange(s) for s in shape], indexing="ij")
        a = [ii.ravel(), jj.ravel(), kk.ravel()]
        b = [x.copy() for x in a]
        b[axis] = b[axis] + 1
        occ_a = occ_center[a[0], a[1], a[2]]
        occ_b = occ_center[b[0], b[1], b[2]]

        # face corners on the shared plane (axis coordinate = a[axis] + 1)
        u, v = [d for d in range(3) if d != axis]
        plane = [None, None, None]
        plane[axis] = a[axis] + 1
        corners = []
        occ_face = np.zeros(len(a[0]), dtype=np.int64)
        for du, dv in ((0, 0), (1, 0), (1, 1), (0, 1)):
            coord = list(plane)
            coord[u] = a[u] + du
            coord[v] = a[v] + dv
            corners.append(corner_id(coord[0], coord[1], coord[2]))
            occ_face += occ_corner.reshape(-1)[corners[-1]].astype(np.int64)

        total = occ_a.astype(np.int64) + occ_b.astype(np.int64) + occ_face
        active = (total > 0) & (total < 6)
        if not active.any():
            continue
        ca = center_id(a[0], a[1], a[2])[active]
        cb = center_id(b[0], b[1], b[2])[active]
        quad = [c[active] for c in corners]
        for e0, e1 in ((0, 1), (1, 2), (2, 3), (3, 0)):
            tets.append(np.stack([ca, cb, quad[e0], quad[e1]], axis=1))
    if not tets:
        return np.zeros((0, 4), dtype=np.int64)
    return np.concatenate(tets, axis=0)


def extract_mesh(
    model_or_sdf,
    grid_resolution: int,
    bound: float = DOMAIN_BOUND,
    chunk: int = 262144,
) -> ExtractedMesh:
    """Marching tetrahedra over the body-centered decomposition of a
    ``grid_resolution``^3 lattice spanning [-bound, bound]^3.

    ``model_or_sdf`` is a SurfaceModel or any callable (N, 3) -> (N,).
    Raises if the field has no sign change inside the lattice.
    """
    if grid_resolution < 8:
        raise ValueError(f"grid resolution must be >= 8, got {grid_resolution}")
    res = grid_resolution
    sdf_fn = model_or_sdf.sdf if isinstance(model_or_sdf, SurfaceModel) else model_or_sdf

    lin = np.linspace(-bound, bound, res + 1)
    cgrid = np.stack(np.meshgrid(lin, lin, lin, indexing="ij"), axis=-1).reshape(-1, 3)
    half = (lin[1] - lin[0]) / 2.0
    ctr = np.stack(np.meshgrid(lin[:-1], lin[:-1], lin[:-1], indexing="ij"), axis=-1).reshape(-1, 3) + half

    def eval_sdf(points: np.ndarray) -> np.ndarray:
        values = []
        with torch.no_grad():
            for i in range(0, len(points), chunk):
                pts = torch.from_numpy(points[i : i + chunk]).float()
                values.append(sdf_fn(pts).detach().cpu().numpy().astype(np.float64))
        return np.concatenate(values)

    sdf_all = np.concatenate([eval_sdf(cgrid), eval_sdf(ctr)])
    points_all = np.concatenate([cgrid, ctr])
    occ_all = sdf_all > 0
    if occ_all.all() or not occ_all.any():
        raise ValueError("no sign change anywhere in the lattice: empty mesh")

    occ_corner = occ_all[: len(cgrid)].reshape(res + 1, res + 1, res + 1)
    occ_center = occ_all[len(cgrid) :].reshape(res, res, res)
    tets = _bcc_tetrahedra(occ_corner, occ_center, res)
    if len(tets) == 0:
        raise ValueError("no sign change anywhere in the lattice: empty mesh")

    occ_t = occ_all[tets]  # (T, 4)
    occ_sum = occ_t.sum(axis=1)
    valid = (occ_sum > 0) & (occ_sum < 4)
    tets = tets[valid]

    edges = tets[:, _TET_EDGES].reshape(-1, 2)
    edges = np.sort(edges, axis=1)
    unique_edges, edge_inverse = np.unique(edges, axis=0, return_inverse=True)
    crossing = occ_all[unique_edges[:, 0]] != occ_all[unique_edges[:, 1]]
    order = -np.ones(len(unique_edges), dtype=np.int64)
    order[crossing] = np.arange(int(crossing.sum()))
    edge_to_vertex = order[edge_inverse].reshape(-1, 6)

    ends = points_all[unique_edges[crossing]]  # (C, 2, 3)
    f = sdf_all[unique_edges[crossing]]  # (C, 2)
    denom = f[:, 1] - f[:, 0]
    denom = np.where(np.abs(denom) < 1e-20, 1e-20, denom)
    tvals = (-f[:, 0] / denom)[:, None]
    vertices = ends[:, 0] + tvals * (ends[:, 1] - ends[:, 0])

    case = (occ_t[valid].astype(np.int64) * np.array([1, 2, 4, 8])).sum(axis=1)
    tri_rows = _TRIANGLE_TABLE[case]
    faces = []
    one = _NUM_TRIANGLES[case] == 1
    two = _NUM_TRIANGLES[case] == 2
    if one.any():
        faces.append(np.take_along_axis(edge_to_vertex[one], tri_rows[one][:, :3], axis=1))
    if two.any():
        faces.append(np.take_along_axis(edge_to_vertex[two], tri_rows[two][:, :6], axis=1).reshape(-1, 3))
    triangles = np.concatenate(faces, axis=0) if faces else np.zeros((0, 3), dtype=np.int64)
    if len(triangles) == 0:
        raise ValueError("no sign change anywhere in the lattice: empty mesh")
    return ExtractedMesh(vertices=vertices, triangles=triangles)


# ---------------------------------------------------------------------------
# mesh ray casting
# ---------------------------------------------------------------------------

def raycast_mesh(mesh: ExtractedMesh, pose: CameraPose, resolution: int, tile: int = 16) -> dict:
    """Exact nearest-hit ray casting through pixel centers.

    Triangles are binned by their screen-space bounding boxes into pixel
    tiles, then each tile runs vectorized Moller-Trumbore against its own
    triangle list. Returns numpy arrays: hit mask (H, W), depth t (H, W) and
    hit points (H, W, 3).
    """
    origin, dirs = camera_rays(pose, resolution)
    h = w = resolution
    verts = mesh.vertices
    tris = mesh.triangles

    # screen-space AABBs
    cam = (verts - origin) @ pose.rotation  # columns right/down/forward
    z = np.maximum(cam[:, 2], 1e-9)
    half = np.tan(np.deg2rad(pose.fov_deg) / 2.0)
    u = (cam[:, 0] / (z * half) + 1.0) * 0.5 * resolution - 0.5
    v = (cam[:, 1] / (z * half) + 1.0) * 0.5 * resolution - 0.5
    behind = cam[:, 2] <= 1e-6
    tri_u = u[tris]
    tri_v = v[tris]
    tri_behind = behind[tris].any(axis=1)
    n_tiles = (resolution + tile - 1) // tile
    u_min = np.clip(np.floor(tri_u.min(axis=1)), 0, resolution - 1) // tile
    u_max = np.clip(np.ceil(tri_u.max(axis=1)), 0, resolution - 1) // tile
    v_min = np.clip(np.floor(tri_v.min(axis=1)), 0, resolution - 1) // tile
    v_max = np.clip(np.ceil(tri_v.max(axis=1)), 0, resolution - 1) // tile
    # triangles touching the camera plane get conservative full coverage
    u_min[tri_behind], u_max[tri_behind] = 0, n_tiles - 1
    v_min[tri_behind], v_max[tri_behind] = 0, n_tiles - 1

    pairs_tile = []
    pairs_tri = []
    for du in range(n_tiles):
        for dv in range(n_tiles):
            inside = (u_min <= du) & (du <= u_max) & (v_min <= dv) & (dv <= v_max)
            ids = np.flatnonzero(inside)
            if len(ids):
                pairs_tile.append(np.full(len(ids), dv * n_tiles + du))
                pairs_tri.append(ids)

    hit = np.zeros(h * w, dtype=bool)
    t_hit = np.full(h * w, np.inf)
    dirs_flat = dirs.reshape(-1, 3)
    v0 = verts[tris[:, 0]]
    e1 = verts[tris[:, 1]] - v0
    e2 = verts[tris[:, 2]] - v0

    for tile_ids, tri_ids in zip(pairs_tile, pairs_tri):
        tid = int(tile_ids[0])
        ty, tx = divmod(tid, n_tiles)
        ys = slice(ty * tile, min((ty + 1) * tile, h))
        xs = slice(tx * tile, min((tx + 1) * tile, w))
        pix = (np.arange(ys.start, ys.stop)[:, None] * w + np.arange(xs.start, xs.stop)[None, :]).ravel()
        d = dirs_flat[pix]  # (P, 3)
        tv0, te1, te2 = v0[tri_ids], e1[tri_ids], e2[tri_ids]
        pvec = np.cross(d[:, None, :], te2[None, :, :])  # (P, T, 3)
        det = np.einsum("tk,ptk->pt", te1, pvec)
        inv_det = 1.0 / np.where(np.abs(det) < 1e-12, 1.0, det)
        tvec = origin - tv0  # (T, 3)
        qvec = np.cross(tvec, te1)  # (T, 3)
        bu = np.einsum("tk,ptk->pt", tvec, pvec) * inv_det
        bv = np.einsum("pk,tk->pt", d, qvec) * inv_det
        tt = np.einsum("tk,tk->t", te2, qvec)[None, :] * inv_det
        ok = (np.abs(det) > 1e-12) & (bu >= 0) & (bv >= 0) & (bu + bv <= 1) & (tt > 1e-6)
        tt = np.where(ok, tt, np.inf)
        best = tt.min(axis=1)
        improved = best < t_hit[pix]
        t_hit[pix[improved]] = best[improved]
        hit[pix[improved]] = True

    points = origin + dirs_flat * np.where(np.isfinite(t_hit), t_hit, 0.0)[:, None]
    return {
        "hit": hit.reshape(h, w),
        "t": np.where(np.isfinite(t_hit), t_hit, 0.0).reshape(h, w),
        "points": points.reshape(h, w, 3),
    }


def shade_hits(cast: dict, color_field, background: float = 1.0, dtype=torch.float32) -> torch.Tensor:
    """Query a color field at cached hit points; differentiable in the field."""
    hit = torch.from_numpy(cast["hit"].reshape(-1))
    pts = torch.from_numpy(cast["points"].reshape(-1, 3)).to(dtype)
    h, w = cast["hit"].shape
    rgb = torch.full((h * w, 3), background, dtype=dtype)
    if hit.any():
        rgb = rgb.index_put((torch.nonzero(hit).squeeze(-1),), color_field(pts[hit]))
    return rgb.reshape(h, w, 3)


def render_mesh(mesh: ExtractedMesh, color_field, pose: CameraPose, resolution: int, background: float = 1.0) -> torch.Tensor:
    """Ray-cast the mesh and shade hit points with ``color_field``.

    ``color_field`` is a callable (N, 3) -> (N, 3) in [0, 1], usually
    SurfaceModel.color; gradients flow into the field parameters only (hit
    geometry is fixed).
    """
    cast = raycast_mesh(mesh, pose, resolution)
    first = next(iter(color_field.parameters())).dtype if isinstance(color_field, nn.Module) else torch.float32
    return shade_hits(cast, color_field, background=background, dtype=first)


# ---------------------------------------------------------------------------
# export and checkpointing
# ---------------------------------------------------------------------------

def export_obj(mesh: ExtractedMesh, path) -> None:
    """ASCII OBJ; per-vertex colors ride as three extra floats per v-line."""
    with open(path, "w") as f:
        colors = mesh.vertex_colors
        for i, v in enumerate(mesh.vertices):
            if colors is not None:
                c = colors[i]
                f.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f} {c[0]:.4f} {c[1]:.4f} {c[2]:.4f}\n")
            else:
                f.write(f"v {v[0]:.6f} {v[1]:.6f} {v[2]:.6f}\n")
        for tri in mesh.triangles:
            f.write(f"f {tri[0] + 1} {tri[1] + 1} {tri[2] + 1}\n")


def save_surface_checkpoint(path, model: SurfaceModel) -> None:
    ckpt.save_checkpoint(
        path,
        ckpt.state_dict_to_tensors(model.state_dict()),
        meta={"kind": "surface", "field_config": model.cfg.to_dict()},
    )


def load_surface_checkpoint(path) -> SurfaceModel:
    tensors, meta = ckpt.load_checkpoint(path)
    if meta.get("kind") != "surface":
        raise ValueError(f"{path}: not a surface checkpoint (kind={meta.get('kind')!r})")
    model = SurfaceModel(FieldConfig(**meta["field_config"]))
    model.load_state_dict(ckpt.tensors_to_state_dict(tensors))
    return model
