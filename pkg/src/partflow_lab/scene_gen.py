"""Procedural part-segmented voxel assets.

Assets are laid out on a 16-cell design lattice (two voxels per lattice cell at
the working resolution G=32) so that part boundaries of box primitives land on
the pooling grid of the SLAT codec.  Parts are composed in table order and a
later-listed part wins any voxel it shares with an earlier one; templates list
the primary structural body last.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataError, LabError

G_DEFAULT = 32
LATTICE = 16
MAX_PARTS = 16
FAMILIES = ("chair", "table", "animal", "vehicle", "free")
PRIMITIVES = ("box", "sphere", "cylinder", "cone")
VOCAB = (
    "seat", "back", "leg", "armrest", "top", "shelf", "pedestal", "base",
    "body", "head", "neck", "tail", "horn", "ear", "wheel", "cabin",
    "spoiler", "bumper", "handle", "lamp", "knob", "panel", "rod", "block",
)
STRUCT_26 = np.ones((3, 3, 3), dtype=bool)


def _f32(values) -> tuple[float, ...]:
    return tuple(float(v) for v in np.asarray(values, dtype=np.float32).reshape(-1))


@dataclass(frozen=True)
class PartSpec:
    part_id: int
    label: str
    primitive: str
    center: tuple[float, float, float]
    half_extent: tuple[float, float, float]
    color: tuple[float, float, float]
    symmetry_group: int

    def __post_init__(self):
        # float32 rounding keeps in-memory specs identical to their serialized form
        object.__setattr__(self, "center", _f32(self.center))
        object.__setattr__(self, "half_extent", _f32(self.half_extent))
        object.__setattr__(self, "color", _f32(self.color))
        if self.primitive not in PRIMITIVES:
            raise LabError("bad_primitive", self.primitive)

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.center) - np.asarray(self.half_extent)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.center) + np.asarray(self.half_extent)


@dataclass
class VoxelAsset:
    resolution: int
    occupancy: np.ndarray  # bool (G, G, G), indexed [x, y, z]
    color: np.ndarray  # uint8 (G, G, G, 3)
    part_id: np.ndarray  # uint8 (G, G, G), 0 = empty
    part_table: list[PartSpec] = field(default_factory=list)

    def copy(self) -> "VoxelAsset":
        return VoxelAsset(self.resolution, self.occupancy.copy(), self.color.copy(),
                          self.part_id.copy(), list(self.part_table))

    def same_as(self, other: "VoxelAsset") -> bool:
        return (self.resolution == other.resolution
                and np.array_equal(self.occupancy, other.occupancy)
                and np.array_equal(self.color, other.color)
                and np.array_equal(self.part_id, other.part_id)
                and self.part_table == other.part_table)

    def spec(self, part_id: int) -> PartSpec:
        for p in self.part_table:
            if p.part_id == part_id:
                return p
        raise DataError("unknown_part", str(part_id))

    def part_volume(self, part_id: int) -> int:
        return int(np.count_nonzero(self.part_id == part_id))

    def present_parts(self) -> list[int]:
        return [p.part_id for p in self.part_table if self.part_volume(p.part_id) > 0]

    def check(self) -> None:
        """Raise if the grid invariants do not hold."""
        if not np.array_equal(self.occupancy, self.part_id > 0):
            raise DataError("invalid_asset", "occupancy disagrees with part_id")
        ids = {p.part_id for p in self.part_table}
        if not set(np.unique(self.part_id[self.occupancy]).tolist()) <= ids:
            raise DataError("invalid_asset", "part_id missing from part_table")
        if self.color[~self.occupancy].any():
            raise DataError("invalid_asset", "color outside occupancy")


def empty_asset(G: int = G_DEFAULT) -> VoxelAsset:
    return VoxelAsset(G, np.zeros((G, G, G), bool), np.zeros((G, G, G, 3), np.uint8),
                      np.zeros((G, G, G), np.uint8), [])


def voxel_centers(G: int) -> np.ndarray:
    c = (np.arange(G) + 0.5) / G - 0.5
    return np.stack(np.meshgrid(c, c, c, indexing="ij"), axis=-1)


def primitive_axis(half_extent) -> int:
    """Axis of a cylinder or cone: the one whose two complementary extents are closest."""
    h = np.asarray(half_extent, dtype=np.float64)
    gaps = [abs(h[1] - h[2]), abs(h[0] - h[2]), abs(h[0] - h[1])]
    best = min(gaps)
    # ties resolve to z, then y, then x
    for axis in (2, 1, 0):
        if gaps[axis] == best:
            return axis
    return 2


def inside_primitive(primitive: str, rel: np.ndarray, half_extent) -> np.ndarray:
    """Point-in-primitive test for points ``rel`` relative to the part center."""
    h = np.asarray(half_extent, dtype=np.float64)
    q = rel / h
    if primitive == "box":
        return np.all(np.abs(q) <= 1.0, axis=-1)
    if primitive == "sphere":
        return np.sum(q * q, axis=-1) <= 1.0
    a = primitive_axis(h)
    u, v = [i for i in range(3) if i != a]
    radial = q[..., u] ** 2 + q[..., v] ** 2
    along = q[..., a]
    if primitive == "cylinder":
        return (np.abs(along) <= 1.0) & (radial <= 1.0)
    # cone: base at -axis, apex at +axis
    s = (along + 1.0) / 2.0
    return (s >= 0.0) & (s <= 1.0) & (radial <= (1.0 - s) ** 2)


def voxelize_part(spec: PartSpec, G: int = G_DEFAULT) -> np.ndarray:
    if min(spec.half_extent) < 2.0 / G - 1e-7:
        raise LabError("degenerate_primitive", f"part {spec.part_id} half_extent {spec.half_extent}")
    rel = voxel_centers(G) - np.asarray(spec.center)
    return inside_primitive(spec.primitive, rel, spec.half_extent)


def _color_u8(rgb) -> np.ndarray:
    return np.clip(np.round(np.asarray(rgb, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def compose(parts: list[PartSpec], G: int = G_DEFAULT) -> VoxelAsset:
    """Rasterize parts in table order; later parts overwrite earlier ones."""
    asset = empty_asset(G)
    asset.part_table = list(parts)
    for spec in parts:
        vox = voxelize_part(spec, G)
        asset.part_id[vox] = spec.part_id
        asset.color[vox] = _color_u8(spec.color)
    asset.occupancy = asset.part_id > 0
    return asset


# ---------------------------------------------------------------------------
# templates (lattice units, z up, primary body last)
# ---------------------------------------------------------------------------

class _Layout:
    def __init__(self, rng: np.random.Generator):
        self.rng = rng
        self.items: list[tuple] = []
        self._groups = 0
        self._group_colors: dict[int, tuple] = {}

    def group(self) -> int:
        self._groups += 1
        hsv = (self.rng.uniform(0, 1), self.rng.uniform(0.45, 0.9), self.rng.uniform(0.45, 0.9))
        self._group_colors[self._groups] = tuple(_hsv_to_rgb(np.asarray([hsv]))[0])
        return self._groups

    def add(self, label, primitive, lo, hi, group=None):
        if group is None:
            group = self.group()
        self.items.append((label, primitive, np.asarray(lo, float), np.asarray(hi, float), group))
        return group

    def specs(self, G: int) -> list[PartSpec]:
        lo = np.min([it[2] for it in self.items], axis=0)
        hi = np.max([it[3] for it in self.items], axis=0)
        shift = np.floor(LATTICE / 2 - (lo + hi) / 2 + 0.5)
        out = []
        for i, (label, prim, a, b, grp) in enumerate(self.items):
            a, b = a + shift, b + shift
            rgb = np.round(np.asarray(self._group_colors[grp]) * 255.0) / 255.0
            out.append(PartSpec(i + 1, label, prim, (a + b) / 2 / LATTICE - 0.5,
                                (b - a) / 2 / LATTICE, rgb, grp))
        return out


def _hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv[..., 0] % 1.0, hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    choices = [np.stack(c, -1) for c in ((v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q))]
    out = np.zeros(hsv.shape[:-1] + (3,))
    for k, c in enumerate(choices):
        out[i == k] = c[i == k]
    return out


def _rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    mx, mn = rgb.max(-1), rgb.min(-1)
    d = mx - mn
    safe = np.where(d > 0, d, 1.0)
    h = np.where(mx == r, ((g - b) / safe) % 6.0, np.where(mx == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0))
    h = np.where(d > 0, h / 6.0, 0.0)
    s = np.where(mx > 0, d / np.where(mx > 0, mx, 1.0), 0.0)
    return np.stack([h, s, mx], -1)


def _leg_prim(rng):
    return "box" if rng.uniform() < 0.6 else "cylinder"


def _chair(L: _Layout):
    r = L.rng
    W, D = int(r.integers(8, 12)), int(r.integers(8, 12))
    legH = int(r.integers(5, 8))
    s = 2 if r.uniform() < 0.7 else 3
    prim = _leg_prim(r)
    g = L.group()
    for x0 in (0, W - s):
        for y0 in (0, D - s):
            L.add("leg", prim, (x0, y0, 0), (x0 + s, y0 + s, legH + 1), g)
    if r.uniform() < 0.5:
        ga = L.group()
        for x0 in (0, W - 2):
            L.add("armrest", "box", (x0, 2, legH + 2), (x0 + 2, D - 2, legH + 5), ga)
    L.add("back", "box", (0, D - 2, legH + 1), (W, D, 14))
    L.add("seat", "box", (0, 0, legH), (W, D, legH + 2))


def _table(L: _Layout):
    r = L.rng
    D = int(r.integers(8, 13))
    H = int(r.integers(8, 12))
    if r.uniform() < 0.3:
        L.add("base", "cylinder", (3, D / 2 - 4, 0), (11, D / 2 + 4, 2))
        L.add("pedestal", "cylinder", (5, D / 2 - 2, 1), (9, D / 2 + 2, H - 1))
    else:
        s, inset = 2, int(r.integers(0, 2))
        prim = _leg_prim(r)
        g = L.group()
        for x0 in (inset, 14 - inset - s):
            for y0 in (inset, D - inset - s):
                L.add("leg", prim, (x0, y0, 0), (x0 + s, y0 + s, H - 1), g)
        if r.uniform() < 0.4:
            L.add("shelf", "box", (inset, inset, 2), (14 - inset, D - inset, 4))
    L.add("top", "box", (0, 0, H - 2), (14, D, H))


def _animal(L: _Layout):
    r = L.rng
    Wb = int(r.integers(5, 8))
    body_prim = "box" if r.uniform() < 0.6 else "sphere"
    legH = int(r.integers(4, 6))
    g = L.group()
    lp = _leg_prim(r)
    for x0 in (4, 9):
        for y0 in (0, Wb - 2):
            L.add("leg", lp, (x0, y0, 0), (x0 + 2, y0 + 2, legH + 2), g)
    L.add("tail", "cone" if r.uniform() < 0.5 else "box",
          (0, Wb / 2 - 1, legH + 3), (4, Wb / 2 + 1, legH + 5))
    hz = legH + 4
    if r.uniform() < 0.6:
        gh = L.group()
        for y0 in (Wb / 2 - 2.5, Wb / 2 + 0.5):
            L.add("horn", "cone", (11.5, y0, hz + 3), (13.5, y0 + 2, hz + 6), gh)
    else:
        ge = L.group()
        for y0 in (Wb / 2 - 3, Wb / 2 + 1):
            L.add("ear", "box", (11, y0, hz + 3), (13, y0 + 2, hz + 5), ge)
    L.add("head", "sphere" if r.uniform() < 0.5 else "box", (10, Wb / 2 - 2.5, hz), (15, Wb / 2 + 2.5, hz + 4))
    L.add("body", body_prim, (3, 0, legH) if body_prim == "box" else (2, -0.5, legH - 0.5),
          (13, Wb, legH + 5) if body_prim == "box" else (14, Wb + 0.5, legH + 5.5))


def _vehicle(L: _Layout):
    r = L.rng
    W = int(r.integers(6, 9))
    g = L.group()
    for x0 in (1, 10):
        for y0 in (0, W - 2):
            L.add("wheel", "cylinder", (x0, y0, 0), (x0 + 3, y0 + 2, 3), g)
    if r.uniform() < 0.5:
        L.add("spoiler", "box", (0, 1, 5), (2, W - 1, 7))
    if r.uniform() < 0.5:
        L.add("bumper", "box", (13, 1, 2), (15, W - 1, 4))
    L.add("cabin", "box", (4, 1, 5), (10, W - 1, 8))
    L.add("body", "box", (0, 0, 2), (14, W, 5))


def _free(L: _Layout):
    r = L.rng
    ext = np.array([int(r.integers(10, 15)), int(r.integers(4, 8)), int(r.integers(3, 7))])
    ext = ext[r.permutation(3)]
    body_lo, body_hi = np.zeros(3), ext.astype(float)
    n_extra = int(r.integers(1, 10))
    children = []
    boxes = [(body_lo, body_hi)]
    count = 0
    while count < n_extra and len(children) < MAX_PARTS - 1:
        plo, phi = boxes[int(r.integers(len(boxes)))]
        axis, side = int(r.integers(3)), int(r.integers(2))
        size = r.integers(2, 5, size=3).astype(float)
        prim = PRIMITIVES[int(r.integers(4))]
        lo, hi = np.zeros(3), np.zeros(3)
        for a in range(3):
            if a == axis:
                if side:
                    lo[a] = phi[a] - 1
                else:
                    lo[a] = plo[a] - size[a] + 1
            else:
                span = max(phi[a] - plo[a] - size[a], 0)
                lo[a] = plo[a] + float(r.integers(0, int(span) + 1))
            hi[a] = lo[a] + size[a]
        sym = r.uniform() < 0.4 and len(children) < MAX_PARTS - 2
        mirror_lo, mirror_hi = lo.copy(), hi.copy()
        mirror_lo[1] = body_lo[1] + body_hi[1] - hi[1]
        mirror_hi[1] = body_lo[1] + body_hi[1] - lo[1]
        label = VOCAB[int(r.integers(len(VOCAB)))]
        if sym and not (mirror_hi[1] > lo[1] and mirror_lo[1] < hi[1]):
            grp = L.group()
            children.append((label, prim, lo, hi, grp))
            children.append((label, prim, mirror_lo, mirror_hi, grp))
        else:
            children.append((label, prim, lo, hi, None))
        boxes.append((lo, hi))
        count += 1
    for label, prim, lo, hi, grp in children:
        L.add(label, prim, lo, hi, grp)
    L.add("body", "box", body_lo, body_hi)


_TEMPLATES = {"chair": _chair, "table": _table, "animal": _animal, "vehicle": _vehicle, "free": _free}


def _boxes_touch(a: PartSpec, b: PartSpec) -> bool:
    return bool(np.all(a.lo <= b.hi + 1e-6) and np.all(b.lo <= a.hi + 1e-6))


def _valid_layout(specs: list[PartSpec], asset: VoxelAsset) -> bool:
    G = asset.resolution
    if not 2 <= len(specs) <= MAX_PARTS:
        return False
    if np.any(np.array([s.lo for s in specs]) < -0.5 - 1e-6) or np.any(np.array([s.hi for s in specs]) > 0.5 + 1e-6):
        return False
    for s in specs:
        if not any(_boxes_touch(s, o) for o in specs if o is not s):
            return False
        if asset.part_volume(s.part_id) == 0:
            return False
    _, n = ndimage.label(asset.occupancy, structure=STRUCT_26)
    if n != 1:
        return False
    idx = np.argwhere(asset.occupancy)
    lo, hi = idx.min(0), idx.max(0) + 1
    if np.max(hi - lo) < 0.8 * G:
        return False
    return bool(np.all(np.abs((lo + hi) / 2 - G / 2) <= 1.0))


def generate_asset(seed: int, family: str = "free", G: int = G_DEFAULT) -> VoxelAsset:
    if seed < 0:
        raise LabError("bad_seed", str(seed))
    if family not in FAMILIES:
        raise LabError("bad_family", family)
    if G < 32 or G % LATTICE:
        raise LabError("bad_resolution", str(G))
    fam = FAMILIES.index(family)
    for attempt in range(100):
        layout = _Layout(np.random.default_rng([seed, fam, attempt]))
        _TEMPLATES[family](layout)
        specs = layout.specs(G)
        try:
            asset = compose(specs, G)
        except LabError:
            continue
        if _valid_layout(specs, asset):
            return asset
    raise LabError("generation_failed", f"seed={seed} family={family}")


# ---------------------------------------------------------------------------
# surface sampling
# ---------------------------------------------------------------------------

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLD = np.uint64(0x9E3779B97F4A7C15)


def _mix(x: np.ndarray) -> np.ndarray:
    x = x.astype(np.uint64)
    x = (x ^ (x >> np.uint64(30))) * _M1
    x = (x ^ (x >> np.uint64(27))) * _M2
    return x ^ (x >> np.uint64(31))


def hash_uniform(seed: int, *keys: np.ndarray) -> np.ndarray:
    """Counter-based uniforms in [0, 1) from (seed, keys...)."""
    with np.errstate(over="ignore"):
        h = _mix(np.asarray([seed], dtype=np.uint64) + _GOLD)
        for k in keys:
            h = _mix(h ^ (np.asarray(k, dtype=np.uint64) + _GOLD))
    return (h >> np.uint64(11)).astype(np.float64) / float(1 << 53)


_DIRS = [(a, s) for a in range(3) for s in (-1, 1)]


def exposed_faces(occupancy: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All exposed voxel faces as (voxel index (F,3), direction index (F,), face key (F,))."""
    G = occupancy.shape[0]
    pad = np.pad(occupancy, 1)
    vox, dirs = [], []
    for d, (a, s) in enumerate(_DIRS):
        nb = np.roll(pad, -s, axis=a)[1:-1, 1:-1, 1:-1]
        idx = np.argwhere(occupancy & ~nb)
        vox.append(idx)
        dirs.append(np.full(len(idx), d))
    vox = np.concatenate(vox)
    dirs = np.concatenate(dirs)
    keys = dirs.astype(np.int64) * G ** 3 + (vox[:, 0] * G + vox[:, 1]) * G + vox[:, 2]
    return vox, dirs, keys


def surface_points(asset: VoxelAsset, n: int = 4096, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Sample ``n`` points on exposed voxel faces with outward normals.

    All faces have equal area, so the largest-remainder allocation gives every
    face ``n // F`` points and hands the remainder to the faces with the lowest
    seeded priority.  Positions within a face are counter-based hashes of
    (seed, face, slot), so assets that share a face also share its samples.
    """
    if not asset.occupancy.any():
        raise LabError("empty_asset")
    if n <= 0:
        return np.zeros((0, 3)), np.zeros((0, 3))
    G = asset.resolution
    vox, dirs, keys = exposed_faces(asset.occupancy)
    F = len(keys)
    base, rem = divmod(n, F)
    counts = np.full(F, base)
    if rem:
        prio = hash_uniform(seed, keys, np.zeros_like(keys))
        order = np.lexsort((keys, prio))
        counts[order[:rem]] += 1
    face = np.repeat(np.arange(F), counts)
    slot = np.arange(len(face)) - np.repeat(np.cumsum(counts) - counts, counts)
    u = hash_uniform(seed, keys[face], slot + 1, np.ones_like(slot))
    v = hash_uniform(seed, keys[face], slot + 1, np.full_like(slot, 2))
    axis = np.array([a for a, _ in _DIRS])[dirs[face]]
    sign = np.array([s for _, s in _DIRS])[dirs[face]]
    pts = vox[face].astype(np.float64)
    normals = np.zeros((len(face), 3))
    others = np.array([[1, 2], [0, 2], [0, 1]])[axis]
    rows = np.arange(len(face))
    pts[rows, axis] += (sign > 0)
    pts[rows, others[:, 0]] += u
    pts[rows, others[:, 1]] += v
    normals[rows, axis] = sign
    return pts / G - 0.5, normals


# ---------------------------------------------------------------------------
# asset file (.pxva)
# ---------------------------------------------------------------------------

MAGIC = b"PXVA"
VERSION = 1


def _xfast(a: np.ndarray) -> np.ndarray:
    return np.asarray(a).ravel(order="F")


def asset_to_bytes(asset: VoxelAsset) -> bytes:
    G = asset.resolution
    out = [MAGIC, struct.pack("<HHH", VERSION, G, len(asset.part_table))]
    out.append(np.packbits(_xfast(asset.occupancy).astype(np.uint8), bitorder="little").tobytes())
    out.append(_xfast(asset.part_id).astype(np.uint8).tobytes())
    occ = _xfast(asset.occupancy)
    col = asset.color.reshape(-1, 3, order="F")[occ]
    out.append(col.astype(np.uint8).tobytes())
    for p in asset.part_table:
        label = f"{p.label}@{p.primitive}".encode("utf-8")
        out.append(struct.pack("<H", len(label)) + label)
        vals = list(p.center) + list(p.half_extent) + list(p.color) + [float(p.symmetry_group)]
        out.append(np.asarray(vals, dtype="<f4").tobytes())
    return b"".join(out)


def asset_from_bytes(buf: bytes) -> VoxelAsset:
    if buf[:4] != MAGIC:
        raise DataError("bad_asset_file", "magic")
    version, G, n_parts = struct.unpack_from("<HHH", buf, 4)
    if version != VERSION:
        raise DataError("bad_asset_file", f"version {version}")
    off = 10
    nv = G ** 3
    nbytes = (nv + 7) // 8
    bits = np.unpackbits(np.frombuffer(buf, np.uint8, nbytes, off), bitorder="little")[:nv].astype(bool)
    off += nbytes
    pid = np.frombuffer(buf, np.uint8, nv, off).copy()
    off += nv
    n_occ = int(bits.sum())
    col = np.frombuffer(buf, np.uint8, 3 * n_occ, off).reshape(n_occ, 3)
    off += 3 * n_occ
    color = np.zeros((nv, 3), np.uint8)
    color[bits] = col
    parts = []
    for i in range(n_parts):
        (ln,) = struct.unpack_from("<H", buf, off)
        off += 2
        label, _, prim = buf[off:off + ln].decode("utf-8").partition("@")
        off += ln
        vals = np.frombuffer(buf, "<f4", 10, off).astype(np.float64)
        off += 40
        parts.append(PartSpec(i + 1, label, prim or "box", vals[0:3], vals[3:6], vals[6:9], int(vals[9])))
    shape = (G, G, G)
    return VoxelAsset(G, bits.reshape(shape, order="F"), color.reshape(shape + (3,), order="F"),
                      pid.reshape(shape, order="F"), parts)


def write_asset(asset: VoxelAsset, path) -> None:
    Path(path).write_bytes(asset_to_bytes(asset))


def read_asset(path) -> VoxelAsset:
    try:
        return asset_from_bytes(Path(path).read_bytes())
    except (struct.error, ValueError, IndexError) as exc:
        raise DataError("bad_asset_file", f"{path}: {exc}") from exc


def with_parts(asset: VoxelAsset, parts: list[PartSpec]) -> VoxelAsset:
    out = asset.copy()
    out.part_table = list(parts)
    return out


__all__ = [
    "PartSpec", "VoxelAsset", "generate_asset", "voxelize_part", "surface_points", "compose",
    "write_asset", "read_asset", "asset_to_bytes", "asset_from_bytes", "FAMILIES", "PRIMITIVES",
    "VOCAB", "replace",
]
