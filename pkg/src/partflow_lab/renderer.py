"""Orthographic renderers and the fixed random-convolution perceptual features.

``render_hard`` ray-marches voxel assets for datasets and evaluation.
``render_soft`` splats SLAT latent cells as isotropic Gaussians and alpha
composites them front to back; it is a torch function so the render-space loss
can backpropagate through it.
"""

from __future__ import annotations

import functools
import struct
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np
import torch

from .errors import DataError, LabError

H = W = 64
N_VIEWS = 10
EXTENT = float(np.sqrt(3.0) / 2.0)  # image half-width in object units; the unit cube always fits
OPACITY_GAIN = 8.0
SPLAT_SIGMA = 0.5  # in cell widths
FEATURE_SEED = 1234
FEATURE_SHAPES = ((8, 3, 3, 3), (16, 8, 3, 3), (32, 16, 3, 3))
WORLD_UP = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class CameraView:
    view_id: int
    direction: tuple[float, float, float]  # unit vector from the object toward the camera
    up: tuple[float, float, float]
    height: int = H
    width: int = W

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        d = np.asarray(self.direction)
        right = np.cross(np.asarray(self.up), d)
        right /= np.linalg.norm(right)
        return right, np.cross(d, right), d


def _make_views() -> tuple[CameraView, ...]:
    # the ten non-polar vertices of an icosahedron, rotated 15 degrees in azimuth
    # so no view direction lies in a grid plane
    elev = np.arctan(0.5)
    views = []
    for ring, sign in enumerate((1.0, -1.0)):
        for k in range(5):
            az = np.deg2rad(15.0 + 72.0 * k + 36.0 * ring)
            d = np.array([np.cos(elev) * np.cos(az), np.cos(elev) * np.sin(az), sign * np.sin(elev)])
            views.append(CameraView(len(views), tuple(float(x) for x in d), tuple(WORLD_UP)))
    return tuple(views)


VIEWS = _make_views()


def get_view(view_id: int) -> CameraView:
    if not 0 <= view_id < N_VIEWS:
        raise LabError("bad_view", str(view_id))
    return VIEWS[view_id]


def pixel_grid(view: CameraView) -> tuple[np.ndarray, np.ndarray]:
    """Image-plane coordinates (u, v) of every pixel center, row-major."""
    cols = -EXTENT + (np.arange(view.width) + 0.5) * 2 * EXTENT / view.width
    rows = EXTENT - (np.arange(view.height) + 0.5) * 2 * EXTENT / view.height
    v, u = np.meshgrid(rows, cols, indexing="ij")
    return u.ravel(), v.ravel()


# ---------------------------------------------------------------------------
# hard renderer
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=64)
def _traversal(G: int, view_id: int, height: int, width: int):
    """Voxel-traversal table: for each pixel, visited linear voxel ids and entry axes in ray order."""
    view = CameraView(view_id, VIEWS[view_id].direction, VIEWS[view_id].up, height, width)
    right, up, d = view.basis()
    u, v = pixel_grid(view)
    origin = (u[:, None] * right + v[:, None] * up + 2.0 * d + 0.5) * G
    ray = -d
    inv = 1.0 / ray
    t_a = (0.0 - origin) * inv
    t_b = (G - origin) * inv
    t_near = np.minimum(t_a, t_b)
    t_far = np.maximum(t_a, t_b)
    t0 = t_near.max(1)
    t1 = t_far.min(1)
    hit = t0 < t1
    entry_axis = t_near.argmax(1)
    pos = origin + (t0[:, None] + 1e-9) * ray
    cell = np.clip(np.floor(pos).astype(np.int64), 0, G - 1)
    step = np.sign(ray).astype(np.int64)
    next_b = cell + (step > 0)
    t_max = (next_b - origin) * inv
    t_delta = np.abs(inv)
    n_steps = 3 * G + 3
    P = len(u)
    ids = np.full((P, n_steps), -1, np.int64)
    axes = np.zeros((P, n_steps), np.int8)
    alive = hit.copy()
    axis_now = entry_axis.copy()
    rows = np.arange(P)
    for s in range(n_steps):
        inside = alive & np.all((cell >= 0) & (cell < G), axis=1)
        alive = inside
        if not alive.any():
            break
        ids[alive, s] = ((cell[alive, 0] * G + cell[alive, 1]) * G + cell[alive, 2])
        axes[alive, s] = axis_now[alive]
        a = t_max.argmin(1)
        cell[rows, a] += step[a]
        t_max[rows, a] += t_delta[a]
        axis_now = a
    return ids, axes


def _first_hit(occ_flat: np.ndarray, G: int, view: CameraView):
    ids, axes = _traversal(G, view.view_id, view.height, view.width)
    ext = np.append(occ_flat, False)
    hits = ext[np.where(ids < 0, occ_flat.size, ids)]
    has = hits.any(1)
    first = hits.argmax(1)
    rows = np.arange(len(ids))
    return has, ids[rows, first], axes[rows, first]


def render_hard(asset, view: CameraView) -> np.ndarray:
    """Lambert-shaded first-hit color of each pixel ray; white background."""
    G = asset.resolution
    has, vid, axis = _first_hit(asset.occupancy.ravel(), G, view)
    img = np.ones((view.height * view.width, 3))
    shade = np.abs(np.asarray(view.direction))[axis]
    col = asset.color.reshape(-1, 3)[np.where(has, vid, 0)] / 255.0
    img[has] = col[has] * shade[has, None]
    return img.reshape(view.height, view.width, 3)


def render_part_ids(asset, view: CameraView) -> np.ndarray:
    """Part id of the first voxel hit by each pixel ray (0 = background)."""
    has, vid, _ = _first_hit(asset.occupancy.ravel(), asset.resolution, view)
    pid = asset.part_id.ravel()[np.where(has, vid, 0)]
    return np.where(has, pid, 0).reshape(view.height, view.width)


# ---------------------------------------------------------------------------
# soft renderer
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _SplatPlan:
    pix: torch.Tensor
    cell: torch.Tensor
    weight: np.ndarray
    seg_first: torch.Tensor
    n_pix: int


@functools.lru_cache(maxsize=128)
def _splat_plan(g: int, view_id: int, height: int, width: int) -> _SplatPlan:
    view = CameraView(view_id, VIEWS[view_id].direction, VIEWS[view_id].up, height, width)
    right, up, d = view.basis()
    c = (np.arange(g) + 0.5) / g - 0.5
    centers = np.stack(np.meshgrid(c, c, c, indexing="ij"), -1).reshape(-1, 3)
    px_per_unit = width / (2 * EXTENT)
    col = (centers @ right + EXTENT) * px_per_unit - 0.5
    row = (EXTENT - centers @ up) * height / (2 * EXTENT) - 0.5
    depth = centers @ d
    sigma = SPLAT_SIGMA * px_per_unit / g
    r = int(np.ceil(3 * sigma))
    off = np.arange(-r, r + 1)
    oy, ox = np.meshgrid(off, off, indexing="ij")
    cc = np.round(col).astype(np.int64)[:, None] + ox.ravel()[None]
    rr = np.round(row).astype(np.int64)[:, None] + oy.ravel()[None]
    dist2 = (cc - col[:, None]) ** 2 + (rr - row[:, None]) ** 2
    keep = (dist2 <= (3 * sigma) ** 2) & (cc >= 0) & (cc < width) & (rr >= 0) & (rr < height)
    cell_idx = np.broadcast_to(np.arange(len(centers))[:, None], cc.shape)[keep]
    pix = (rr * width + cc)[keep]
    w = np.exp(-dist2[keep] / (2 * sigma ** 2))
    # composite order: by pixel, then nearest-first (larger depth is closer to the camera)
    order = np.lexsort((cell_idx, -depth[cell_idx], pix))
    pix, cell_idx, w = pix[order], cell_idx[order], w[order]
    first = np.zeros(len(pix), np.int64)
    starts = np.flatnonzero(np.r_[True, pix[1:] != pix[:-1]])
    first[starts] = starts
    first = np.maximum.accumulate(first)
    return _SplatPlan(torch.from_numpy(pix), torch.from_numpy(cell_idx), w,
                      torch.from_numpy(first), height * width)


def render_soft(latent, view: CameraView) -> torch.Tensor:
    """Differentiable render of a SLAT latent grid (g, g, g, 4) -> (H, W, 3) in [0, 1]."""
    stage = getattr(latent, "stage", "SLAT")
    if stage != "SLAT":
        raise LabError("wrong_stage", stage)
    grid = latent.grid if hasattr(latent, "grid") else latent
    if not torch.is_tensor(grid):
        grid = torch.as_tensor(np.asarray(grid))
    if grid.ndim != 4 or grid.shape[-1] != 4:
        raise LabError("wrong_stage", f"expected (g,g,g,4), got {tuple(grid.shape)}")
    g = grid.shape[0]
    plan = _splat_plan(g, view.view_id, view.height, view.width)
    flat = grid.reshape(-1, 4)
    w = torch.as_tensor(plan.weight, dtype=flat.dtype)
    alpha = torch.sigmoid(OPACITY_GAIN * flat[:, 0])[plan.cell] * w
    log_t = torch.log1p(-alpha)
    # float64 prefix sums: per-segment differences of long float32 sums lose precision
    cs = torch.cumsum(log_t.double(), 0)
    before = cs - log_t.double()
    excl = (before - before[plan.seg_first]).to(flat.dtype)
    contrib = torch.exp(excl) * alpha
    rgb = (flat[:, 1:4] + 1.0) * 0.5
    img = torch.zeros(plan.n_pix, 3, dtype=flat.dtype)
    img = img.index_add(0, plan.pix, contrib[:, None] * rgb[plan.cell])
    total = torch.zeros(plan.n_pix, dtype=torch.float64).index_add(0, plan.pix, log_t.double())
    img = img + torch.exp(total).to(flat.dtype)[:, None]
    return img.clamp(0.0, 1.0).reshape(view.height, view.width, 3)


# ---------------------------------------------------------------------------
# perceptual proxy
# ---------------------------------------------------------------------------

def draw_feature_weights(seed: int = FEATURE_SEED) -> list[np.ndarray]:
    rng = np.random.default_rng(seed)
    out = []
    for shape in FEATURE_SHAPES:
        fan_in = shape[1] * shape[2] * shape[3]
        out.append((rng.standard_normal(shape) / np.sqrt(fan_in)).astype(np.float32))
        out.append((0.1 * rng.standard_normal(shape[0])).astype(np.float32))
    return out


def tensors_to_bytes(tensors: list[np.ndarray]) -> bytes:
    parts = [struct.pack("<I", len(tensors))]
    for t in tensors:
        parts.append(struct.pack("<B", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        parts.append(np.ascontiguousarray(t, dtype="<f4").tobytes())
    return b"".join(parts)


def tensors_from_bytes(buf: bytes) -> list[np.ndarray]:
    (n,) = struct.unpack_from("<I", buf, 0)
    off, out = 4, []
    for _ in range(n):
        (nd,) = struct.unpack_from("<B", buf, off)
        shape = struct.unpack_from(f"<{nd}I", buf, off + 1)
        off += 1 + 4 * nd
        count = int(np.prod(shape))
        out.append(np.frombuffer(buf, "<f4", count, off).reshape(shape).astype(np.float32))
        off += 4 * count
    return out


FEATURE_FILE = "feature_weights.f32"


@functools.lru_cache(maxsize=1)
def feature_weights() -> tuple[np.ndarray, ...]:
    data = resources.files("partflow_lab").joinpath("data").joinpath(FEATURE_FILE).read_bytes()
    return tuple(tensors_from_bytes(data))


@functools.lru_cache(maxsize=4)
def _torch_weights(dtype: torch.dtype):
    return tuple(torch.from_numpy(w).to(dtype) for w in feature_weights())


def features_t(img: torch.Tensor) -> torch.Tensor:
    """Concatenated tanh(conv) activations of the three stride-2 layers."""
    ws = _torch_weights(img.dtype)
    x = img.permute(2, 0, 1)[None]
    feats = []
    for i in range(0, len(ws), 2):
        x = torch.tanh(torch.nn.functional.conv2d(x, ws[i], ws[i + 1], stride=2, padding=1))
        feats.append(x.reshape(-1))
    return torch.cat(feats)


def features(img: np.ndarray) -> np.ndarray:
    with torch.no_grad():
        return features_t(torch.as_tensor(np.asarray(img, dtype=np.float64))).numpy()


def feature_distance_t(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape != b.shape:
        raise LabError("size_mismatch", f"{tuple(a.shape)} vs {tuple(b.shape)}")
    fa, fb = features_t(a), features_t(b)
    return torch.mean((fa - fb) ** 2)


def feature_distance(a, b) -> float:
    """Mean squared difference of the fixed random-conv feature stacks."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise LabError("size_mismatch", f"{a.shape} vs {b.shape}")
    fa, fb = features(a), features(b)
    return float(np.mean((fa - fb) ** 2))


# ---------------------------------------------------------------------------
# PPM
# ---------------------------------------------------------------------------

def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    h, w, _ = img.shape
    data = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8).tobytes()
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + data)


def read_ppm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    tokens, off = [], 0
    while len(tokens) < 4:
        while buf[off:off + 1].isspace():
            off += 1
        if buf[off:off + 1] == b"#":
            off = buf.index(b"\n", off) + 1
            continue
        end = off
        while not buf[end:end + 1].isspace():
            end += 1
        tokens.append(buf[off:end])
        off = end
    off += 1
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise DataError("bad_image_file", str(path))
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(buf, np.uint8, w * h * 3, off).reshape(h, w, 3) / 255.0
