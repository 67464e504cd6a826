"""Deterministic pooling codec between voxel assets and stage latents."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataError, LabError
from .scene_gen import G_DEFAULT, PartSpec, VoxelAsset

STAGES = ("SS", "SLAT")
STAGE_GRID = {"SS": 8, "SLAT": 16}
STAGE_CHANNELS = {"SS": 1, "SLAT": 4}


@dataclass
class StageLatent:
    stage: str
    grid: np.ndarray  # float32 (g, g, g, d)

    def __post_init__(self):
        if self.stage not in STAGES:
            raise LabError("bad_stage", self.stage)
        self.grid = np.asarray(self.grid, dtype=np.float32)
        g, d = STAGE_GRID[self.stage], STAGE_CHANNELS[self.stage]
        if self.grid.shape != (g, g, g, d):
            raise LabError("shape_mismatch", f"{self.stage} latent must be {(g, g, g, d)}, got {self.grid.shape}")
        if not np.all(np.isfinite(self.grid)):
            raise LabError("nonfinite_latent", self.stage)


@dataclass
class LatentMask:
    stage: str
    grid: np.ndarray  # bool (g, g, g); True = preserved cell

    def __post_init__(self):
        self.grid = np.asarray(self.grid, dtype=bool)
        g = STAGE_GRID[self.stage]
        if self.grid.shape != (g, g, g):
            raise LabError("shape_mismatch", f"{self.stage} mask must be {(g,) * 3}")


def _pool(x: np.ndarray, f: int) -> np.ndarray:
    g = x.shape[0] // f
    return x.reshape(g, f, g, f, g, f, *x.shape[3:]).mean(axis=(1, 3, 5))


def _check_resolution(G: int) -> None:
    if G != G_DEFAULT:
        raise LabError("bad_resolution", f"codec expects G={G_DEFAULT}, got {G}")


def encode(asset: VoxelAsset, stage: str) -> StageLatent:
    _check_resolution(asset.resolution)
    occ = asset.occupancy.astype(np.float64)
    f = asset.resolution // STAGE_GRID[stage]
    pooled = _pool(occ, f)
    if stage == "SS":
        return StageLatent("SS", (2.0 * pooled - 1.0)[..., None])
    rgb = asset.color.astype(np.float64) / 255.0 * occ[..., None]
    mass = _pool(rgb, f)
    mean = np.divide(mass, pooled[..., None], out=np.zeros_like(mass), where=pooled[..., None] > 0)
    col = np.where(pooled[..., None] > 0, 2.0 * mean - 1.0, 0.0)
    return StageLatent("SLAT", np.concatenate([(2.0 * pooled - 1.0)[..., None], col], axis=-1))


DECODED_LABEL = "block"


def decode(latent: StageLatent, G: int = G_DEFAULT) -> VoxelAsset:
    """Threshold occupancy at zero and nearest-neighbour upsample to G.

    Decoded assets carry a single catch-all part (id 1) spanning the occupied box.
    """
    grid = latent.grid.astype(np.float64)
    f = G // grid.shape[0]
    occ_c = grid[..., 0] > 0
    if latent.stage == "SLAT":
        rgb_c = np.clip((grid[..., 1:4] + 1.0) / 2.0, 0.0, 1.0)
    else:
        rgb_c = np.full(occ_c.shape + (3,), 0.5)
    occ = occ_c.repeat(f, 0).repeat(f, 1).repeat(f, 2)
    rgb = rgb_c.repeat(f, 0).repeat(f, 1).repeat(f, 2)
    color = np.where(occ[..., None], np.round(rgb * 255.0), 0).astype(np.uint8)
    parts = []
    if occ.any():
        idx = np.argwhere(occ)
        lo, hi = idx.min(0) / G - 0.5, (idx.max(0) + 1) / G - 0.5
        mean = color[occ].mean(0) / 255.0
        parts = [PartSpec(1, DECODED_LABEL, "box", (lo + hi) / 2, (hi - lo) / 2, mean, 1)]
    return VoxelAsset(G, occ, color, occ.astype(np.uint8), parts)


def project_mask(mask: np.ndarray, stage: str) -> LatentMask:
    """Edit mask (True = edited voxel) -> preservation mask at the stage grid.

    A cell is edited when any voxel it covers is edited.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (G_DEFAULT,) * 3:
        raise LabError("bad_resolution", f"mask shape {mask.shape}")
    g = STAGE_GRID[stage]
    f = G_DEFAULT // g
    edited = mask.reshape(g, f, g, f, g, f).any(axis=(1, 3, 5))
    return LatentMask(stage, ~edited)


# ---------------------------------------------------------------------------
# serialization: 8-byte shape header (4 x u16), then little-endian payload
# ---------------------------------------------------------------------------

def latent_to_bytes(latent: StageLatent) -> bytes:
    g = latent.grid
    return struct.pack("<4H", *g.shape) + np.ascontiguousarray(g, dtype="<f4").tobytes()


def latent_from_bytes(buf: bytes) -> StageLatent:
    shape = struct.unpack_from("<4H", buf, 0)
    grid = np.frombuffer(buf, "<f4", int(np.prod(shape)), 8).reshape(shape)
    stage = "SS" if shape[-1] == 1 else "SLAT"
    return StageLatent(stage, grid.copy())


def mask_to_bytes(mask: LatentMask) -> bytes:
    g = mask.grid
    return struct.pack("<4H", *g.shape, 1) + np.packbits(g.ravel(), bitorder="little").tobytes()


def mask_from_bytes(buf: bytes) -> LatentMask:
    shape = struct.unpack_from("<4H", buf, 0)[:3]
    n = int(np.prod(shape))
    bits = np.unpackbits(np.frombuffer(buf, np.uint8, (n + 7) // 8, 8), bitorder="little")[:n]
    stage = {8: "SS", 16: "SLAT"}.get(shape[0])
    if stage is None:
        raise DataError("bad_mask_file", f"shape {shape}")
    return LatentMask(stage, bits.reshape(shape).astype(bool))


def write_latent(latent: StageLatent, path) -> None:
    Path(path).write_bytes(latent_to_bytes(latent))


def read_latent(path) -> StageLatent:
    return latent_from_bytes(Path(path).read_bytes())


REFERENCE_TOL = 0.15


def unchanged_cells(latent: StageLatent, reference: VoxelAsset, tol: float = REFERENCE_TOL) -> np.ndarray:
    """Cells whose every channel lies within ``tol`` of the reference asset's encoding."""
    ref = encode(reference, latent.stage).grid
    return np.all(np.abs(latent.grid - ref) < tol, axis=-1)


def _upsample_linear(coarse: np.ndarray, G: int) -> np.ndarray:
    f = G // coarse.shape[0]
    x = (np.arange(G) + 0.5) / f - 0.5
    X, Y, Z = np.meshgrid(x, x, x, indexing="ij")
    return ndimage.map_coordinates(coarse, [X, Y, Z], order=1, mode="nearest")


def _up(a: np.ndarray, f: int) -> np.ndarray:
    return a.repeat(f, 0).repeat(f, 1).repeat(f, 2)


def decode_with_reference(latent: StageLatent, reference: VoxelAsset, tol: float = REFERENCE_TOL,
                          keep: np.ndarray | None = None) -> VoxelAsset:
    """Decode against a reference asset.

    Cells the latent leaves unchanged get the reference's full-resolution voxels.
    Changed cells threshold a trilinear upsampling of the occupancy channel, which
    recovers sub-cell boundaries better than block upsampling; ``keep`` (a coarse
    bool grid) optionally vetoes occupancy there.
    """
    G = reference.resolution
    f = G // latent.grid.shape[0]
    grid = latent.grid.astype(np.float64)
    same_v = _up(unchanged_cells(latent, reference, tol), f)
    occ_new = _upsample_linear(grid[..., 0], G) > 0
    if keep is not None:
        occ_new &= _up(np.asarray(keep, bool), G // keep.shape[0])
    if latent.stage == "SLAT":
        rgb = _up(np.clip((grid[..., 1:4] + 1.0) / 2.0, 0.0, 1.0), f)
    else:
        rgb = np.full((G, G, G, 3), 0.5)
    occ = np.where(same_v, reference.occupancy, occ_new)
    color = np.where(same_v[..., None], reference.color, np.round(rgb * 255.0)).astype(np.uint8)
    color[~occ] = 0
    part_id = np.where(same_v, reference.part_id, 0).astype(np.uint8)
    table = list(reference.part_table)
    new = occ & ~same_v
    if new.any():
        nid = max([p.part_id for p in table], default=0) + 1
        idx = np.argwhere(new)
        lo, hi = idx.min(0) / G - 0.5, (idx.max(0) + 1) / G - 0.5
        mean = color[new].mean(0) / 255.0
        table.append(PartSpec(nid, DECODED_LABEL, "box", (lo + hi) / 2, (hi - lo) / 2, mean, nid))
        part_id[new] = nid
    return VoxelAsset(G, occ, color, part_id, table)
