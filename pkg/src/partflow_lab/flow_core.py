"""Velocity networks, condition vectors, Euler sampling and inversion, checkpoints.

Convention: z_t = (1 - t) x + t eps, target velocity eps - x, sampling runs from
t = 1 (noise) to t = 0 (data).

Both networks predict a clean latent and turn it into a velocity through
v = (z_t - x_hat) / max(t, T_MIN). A flattened MLP with a narrow bottleneck
cannot represent identity-like maps on 16^3 x 4 latents, so predicting x_hat
keeps the backbone's job small. The backbone term is (z_t - x_hat_F) / tau and
the control term is -x_hat_C / tau, so the two add up to the full velocity.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .edit_engine import EDIT_TYPES, PRIMITIVES, EditCondition
from .errors import DataError, LabError, NumericError
from .latent_codec import STAGE_CHANNELS, STAGE_GRID, StageLatent
from .scene_gen import VoxelAsset

COND_DIM = 17
TIME_FREQS = 8
T_MIN = 0.1
WIDTH = 256
N_BLOCKS = 2
LOCAL_HIDDEN = 32
N_COVER = 2 * len(EDIT_TYPES)


# ---------------------------------------------------------------------------
# condition vector
# ---------------------------------------------------------------------------

def target_region(asset: VoxelAsset, cond: EditCondition) -> tuple[np.ndarray, np.ndarray]:
    """Centroid and half-extent of the targeted parts' box union (occupied box for global edits)."""
    if cond.target_part_ids:
        specs = [asset.spec(p) for p in cond.target_part_ids]
        lo = np.min([s.lo for s in specs], axis=0)
        hi = np.max([s.hi for s in specs], axis=0)
    else:
        idx = np.argwhere(asset.occupancy)
        if len(idx) == 0:
            return np.zeros(3), np.zeros(3)
        G = asset.resolution
        lo, hi = idx.min(0) / G - 0.5, (idx.max(0) + 1) / G - 0.5
    return (lo + hi) / 2.0, (hi - lo) / 2.0


def _prim_code(name: str) -> float:
    return PRIMITIVES.index(name) / (len(PRIMITIVES) - 1)


def condition_vector(cond: EditCondition, source: VoxelAsset, stage: str) -> np.ndarray:
    """type one-hot (6), region centroid + half-extent (6), [scalar, r, g, b] (4), stage flag (1)."""
    if cond.edit_type not in EDIT_TYPES:
        raise LabError("invalid_condition", cond.edit_type)
    vec = np.zeros(COND_DIM, dtype=np.float64)
    vec[EDIT_TYPES.index(cond.edit_type)] = 1.0
    centre, half = target_region(source, cond)
    vec[6:9], vec[9:12] = centre, half
    p = cond.params
    t = cond.edit_type
    if t == "global_style":
        vec[12] = p["hue_shift"] / (2 * math.pi)
    elif t == "replacement":
        vec[12] = _prim_code(p["new_primitive"])
        vec[13:16] = p["new_color"]
    else:
        spec = source.spec(cond.target_part_ids[0])
        if t == "scaling":
            vec[12:14] = p["factor"], _prim_code(spec.primitive)
        else:
            vec[12] = _prim_code(spec.primitive)
            vec[13:16] = p["target_rgb"] if t == "color" else spec.color
    vec[16] = 0.0 if stage == "SS" else 1.0
    if not np.all(np.isfinite(vec)):
        raise NumericError("nonfinite_condition")
    return vec.astype(np.float32)


# ---------------------------------------------------------------------------
# condition-derived coverage maps
# ---------------------------------------------------------------------------

# which (primitive slot, scaled?) describes the shape after / before the edit, per type;
# None where the condition does not carry that shape
_AFTER = {"deletion": None, "addition": (12, False), "replacement": (12, False), "scaling": (13, True),
          "color": (12, False), "global_style": None}
_BEFORE = {"deletion": (12, False), "addition": None, "replacement": None, "scaling": (13, False),
           "color": (12, False), "global_style": None}


def _inside_t(code: torch.Tensor, q: torch.Tensor, h: torch.Tensor) -> torch.Tensor:
    """Batched point-in-primitive test on box-normalized points q (b, n, 3)."""
    prim = torch.clamp(torch.round(code * (len(PRIMITIVES) - 1)), 0, len(PRIMITIVES) - 1).long()
    box = (q.abs() <= 1.0).all(-1)
    sphere = (q * q).sum(-1) <= 1.0
    gaps = torch.stack([(h[:, 1] - h[:, 2]).abs(), (h[:, 0] - h[:, 2]).abs(), (h[:, 0] - h[:, 1]).abs()], 1)
    # ties resolve to z, then y, then x
    axis = 2 - torch.argmin(gaps.flip(1), dim=1)
    along = torch.gather(q, 2, axis[:, None, None].expand(-1, q.shape[1], 1))[..., 0]
    radial = (q * q).sum(-1) - along ** 2
    cyl = (along.abs() <= 1.0) & (radial <= 1.0)
    s = (along + 1.0) / 2.0
    cone = (s >= 0.0) & (s <= 1.0) & (radial <= (1.0 - s) ** 2)
    table = torch.stack([box, sphere, cyl, cone], 0)
    return table[prim, torch.arange(len(prim))]


_COVER_CACHE: dict[tuple, torch.Tensor] = {}
_COVER_CACHE_MAX = 8192


def _coverage_rows(cd: torch.Tensor, g: int, G: int) -> torch.Tensor:
    b, f = len(cd), G // g
    ax = (torch.arange(G, dtype=torch.float64) + 0.5) / G - 0.5
    pts = torch.stack(torch.meshgrid(ax, ax, ax, indexing="ij"), dim=-1).reshape(1, -1, 3)
    kind = cd[:, :6].argmax(1).tolist()
    out = torch.zeros(b, 2, G ** 3, dtype=torch.float64)
    for j, table in enumerate((_AFTER, _BEFORE)):
        rows = [i for i in range(b) if table[EDIT_TYPES[kind[i]]] is not None]
        if not rows:
            continue
        slot = torch.tensor([table[EDIT_TYPES[kind[i]]][0] for i in rows])
        scale = torch.tensor([float(table[EDIT_TYPES[kind[i]]][1]) for i in rows], dtype=torch.float64)
        sub = cd[rows]
        factor = torch.where(scale > 0, sub[:, 12], torch.ones_like(scale))
        h = torch.clamp(sub[:, 9:12] * factor[:, None], min=1e-6)
        q = (pts - sub[:, None, 6:9]) / h[:, None, :]
        out[rows, j] = _inside_t(sub[torch.arange(len(rows)), slot], q, h).double()
    cov = out.reshape(b, 2, g, f, g, f, g, f).mean(dim=(3, 5, 7))
    return cov.reshape(b, 2, -1).transpose(1, 2)


def coverage_maps(c: torch.Tensor, g: int, G: int = 32) -> torch.Tensor:
    """Fraction of each stage cell covered by the primitive the condition names,
    before and after the edit; (b, g^3, 2), zero where not described.

    For a single targeted part the condition box is that part's own box, so the
    maps are exact; for a symmetry group they are a coarse hint. Rows are cached
    by value since training revisits the same conditions.
    """
    cd = c.detach().double()
    keys = [(g, G, row.numpy().tobytes()) for row in cd]
    missing = [i for i, k in enumerate(keys) if k not in _COVER_CACHE]
    if missing:
        if len(_COVER_CACHE) + len(missing) > _COVER_CACHE_MAX:
            _COVER_CACHE.clear()
        for i, cov in zip(missing, _coverage_rows(cd[missing], g, G)):
            _COVER_CACHE[keys[i]] = cov
    return torch.stack([_COVER_CACHE[k] for k in keys]).to(c.dtype)


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

def time_embedding(t: torch.Tensor) -> torch.Tensor:
    freqs = math.pi * 2.0 ** torch.arange(TIME_FREQS, dtype=t.dtype)
    ang = t[:, None] * freqs[None, :]
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=1)


class _Trunk(nn.Module):
    """Flattened-latent residual MLP with time and condition injection."""

    def __init__(self, dim: int, width: int, n_blocks: int):
        super().__init__()
        self.inp = nn.Linear(dim, width)
        self.t_in = nn.Linear(2 * TIME_FREQS, width)
        self.c_in = nn.Linear(COND_DIM, width)
        self.blocks = nn.ModuleList(
            nn.Sequential(nn.SiLU(), nn.Linear(width, width), nn.SiLU(), nn.Linear(width, width))
            for _ in range(n_blocks))

    def forward(self, z, temb, c) -> list[torch.Tensor]:
        h = self.inp(z) + self.t_in(temb) + self.c_in(c)
        states = []
        for block in self.blocks:
            h = h + block(h)
            states.append(h)
        return states


class VelocityModel(nn.Module):
    """Backbone F over (z_t, t, c) plus control branch C over (z_s, t, c).

    Every control output layer starts at exactly zero, so a fresh model's velocity
    equals the backbone's.
    """

    def __init__(self, stage: str, width: int = WIDTH, n_blocks: int = N_BLOCKS,
                 local_hidden: int = LOCAL_HIDDEN, seed: int = 0, backbone_only: bool = False):
        super().__init__()
        if stage not in STAGE_GRID:
            raise LabError("bad_stage", stage)
        self.stage = stage
        self.g, self.d = STAGE_GRID[stage], STAGE_CHANNELS[stage]
        self.dim = self.g ** 3 * self.d
        self.width, self.n_blocks, self.local_hidden, self.seed = width, n_blocks, local_hidden, seed
        self.backbone_only = backbone_only
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(seed)
        self.backbone = _Trunk(self.dim, width, n_blocks)
        self.head = nn.Sequential(nn.SiLU(), nn.Linear(width, self.dim))
        outputs = [self.head[1]]
        if not backbone_only:
            outputs += self._build_control(width, n_blocks, local_hidden)
        torch.random.set_rng_state(gen_state)
        for lin in outputs:
            nn.init.zeros_(lin.weight)
            if lin.bias is not None:
                nn.init.zeros_(lin.bias)
        ax = (torch.arange(self.g, dtype=torch.float32) + 0.5) / self.g - 0.5
        pos = torch.stack(torch.meshgrid(ax, ax, ax, indexing="ij"), dim=-1)
        self.register_buffer("cell_pos", pos.reshape(-1, 3), persistent=False)

    def _build_control(self, width, n_blocks, local_hidden) -> list[nn.Linear]:
        self.control = _Trunk(self.dim, width, n_blocks)
        self.control_proj = nn.ModuleList(nn.Linear(width, self.dim) for _ in range(n_blocks))
        # local path over the source grid: a 3^3 conv on per-cell features,
        # modulated per example by condition and time
        ctx = COND_DIM + 2 * TIME_FREQS
        self.local_conv = nn.Conv3d(self.d + 7 + N_COVER + (6 if self.d == 4 else 0), local_hidden, 3, padding=1)
        self.local_mod1 = nn.Linear(ctx, 2 * local_hidden)
        self.local_mix = nn.Linear(local_hidden, local_hidden)
        self.local_mod2 = nn.Linear(ctx, 2 * local_hidden)
        self.local_out = nn.Linear(self.d + N_COVER + 2 * local_hidden, self.d)
        self.copy_gate = nn.Linear(2, self.d, bias=False)
        return [*self.control_proj, self.local_out, self.copy_gate]

    # -- parts ------------------------------------------------------------
    def _tau(self, t):
        return torch.clamp(t, min=T_MIN)

    def clean_backbone(self, z_t, t, c):
        states = self.backbone(z_t.reshape(len(z_t), -1), time_embedding(t), c)
        return self.head(states[-1]).reshape(z_t.shape)

    def clean_control(self, z_s, t, c):
        b = len(z_s)
        temb = time_embedding(t)
        cells = z_s.reshape(b, -1, self.d)
        feats, inside, cover = self._cell_features(cells, c)
        states = self.control(z_s.reshape(b, -1), temb, c)
        glob = sum(proj(h) for proj, h in zip(self.control_proj, states)).reshape(b, -1, self.d)
        # source copy gain: a constant plus a ramp over the clamped-time region
        ramp = torch.clamp((T_MIN - t) / T_MIN, min=0.0)
        gate = self.copy_gate(torch.stack([torch.ones_like(t), ramp], dim=1))[:, None, :]
        # every learned correction is confined to the condition's target box
        out = gate * cells + inside * (glob + self.local_control(cells, feats, cover, temb, c))
        return out.reshape(z_s.shape)

    def _cell_features(self, cells, c):
        """Per-cell inputs of the local path: source cell, absolute and box-relative
        position, inside-box flag, coverage maps and, for colour latents, colour offsets."""
        b, n, g = len(cells), cells.shape[1], self.g
        pos = self.cell_pos.to(cells.dtype).expand(b, n, 3)
        rel = (pos - c[:, None, 6:9]) / (c[:, None, 9:12] + 1.0 / g)
        inside = (rel.abs().amax(dim=-1, keepdim=True) <= 1.0).to(cells.dtype)
        # one channel pair per edit type, so each type's map reaches the readout on its own
        cover = (coverage_maps(c, g)[:, :, None, :] * c[:, None, :6, None]).reshape(b, n, N_COVER)
        feats = [cells, pos, rel, inside, cover]
        if self.d == 4:
            rgb = cells[..., 1:4]
            # the source colour at the box centre is usually the targeted part's own
            centre = torch.clamp(((c[:, 6:9] + 0.5) * g).long(), 0, g - 1)
            flat = (centre[:, 0] * g + centre[:, 1]) * g + centre[:, 2]
            own = rgb[torch.arange(b), flat][:, None, :]
            feats += [rgb - (2 * c[:, None, 13:16] - 1), rgb - own]
        return torch.cat(feats, dim=-1), inside, cover

    def local_control(self, cells, feats, cover, temb, c):
        b, g = len(cells), self.g
        n = cells.shape[1]
        x = feats.transpose(1, 2).reshape(b, -1, g, g, g)
        ctx = torch.cat([c, temb], dim=1)
        s1, b1 = self.local_mod1(ctx)[:, :, None].chunk(2, dim=1)
        h1 = self.local_conv(x).reshape(b, self.local_hidden, n)
        h1 = torch.nn.functional.silu(h1 * (1 + s1) + b1).transpose(1, 2)
        s2, b2 = self.local_mod2(ctx)[:, None, :].chunk(2, dim=2)
        h2 = torch.nn.functional.silu(self.local_mix(h1) * (1 + s2) + b2)
        return self.local_out(torch.cat([cells, cover, h1, h2], dim=-1))

    def backbone_velocity(self, z_t, t, c):
        return (z_t - self.clean_backbone(z_t, t, c)) / self._tau(t).reshape(-1, *[1] * (z_t.dim() - 1))

    def control_velocity(self, z_s, t, c):
        if self.backbone_only:
            return torch.zeros_like(z_s)
        return -self.clean_control(z_s, t, c) / self._tau(t).reshape(-1, *[1] * (z_s.dim() - 1))

    def forward(self, z_t, t, c, z_s):
        if self.backbone_only:
            return self.backbone_velocity(z_t, t, c)
        return self.backbone_velocity(z_t, t, c) + self.control_velocity(z_s, t, c)

    def config(self) -> dict:
        return {"stage": self.stage, "width": self.width, "n_blocks": self.n_blocks,
                "local_hidden": self.local_hidden, "seed": self.seed, "backbone_only": self.backbone_only}


# ---------------------------------------------------------------------------
# functional API
# ---------------------------------------------------------------------------

def _as_batch(x, shape, dtype) -> torch.Tensor:
    if isinstance(x, StageLatent):
        x = x.grid
    x = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x).to(dtype)
    if tuple(x.shape) == shape:
        x = x[None]
    if tuple(x.shape[1:]) != shape:
        raise LabError("shape_mismatch", f"expected {shape}, got {tuple(x.shape)}")
    return x


def _model_dtype(model: VelocityModel) -> torch.dtype:
    return next(model.parameters()).dtype


def _check_finite(x: torch.Tensor, code: str, detail: str = "") -> None:
    if not bool(torch.isfinite(x).all()):
        raise NumericError(code, detail)


def velocity(model: VelocityModel, z_t, t, c, z_s) -> torch.Tensor:
    """Composite velocity for a single example or a batch; same shape as ``z_t``."""
    shape = (model.g, model.g, model.g, model.d)
    dtype = _model_dtype(model)
    single = (isinstance(z_t, StageLatent) or tuple(np.shape(z_t)) == shape)
    zt = _as_batch(z_t, shape, dtype)
    zs = _as_batch(z_s, shape, dtype)
    if len(zs) != len(zt):
        raise LabError("shape_mismatch", "batch sizes differ")
    tt = torch.as_tensor(t, dtype=dtype).reshape(-1).expand(len(zt))
    if bool(((tt < 0) | (tt > 1)).any()):
        raise LabError("bad_time", "t must lie in [0, 1]")
    cc = torch.as_tensor(np.asarray(c) if not isinstance(c, torch.Tensor) else c).to(dtype).reshape(-1, COND_DIM)
    cc = cc.expand(len(zt), COND_DIM)
    out = model(zt, tt, cc, zs)
    _check_finite(out, "nonfinite_output")
    return out[0] if single else out


def _prepare(model, c, z_s, n):
    shape = (model.g, model.g, model.g, model.d)
    dtype = _model_dtype(model)
    zs = _as_batch(z_s, shape, dtype)
    cc = torch.as_tensor(np.asarray(c)).to(dtype).reshape(-1, COND_DIM)
    if len(zs) == 1 and n > 1:
        zs = zs.expand(n, *shape)
    if len(cc) == 1 and n > 1:
        cc = cc.expand(n, COND_DIM)
    return zs, cc


def noise(model_or_stage, seed: int) -> np.ndarray:
    stage = model_or_stage if isinstance(model_or_stage, str) else model_or_stage.stage
    g, d = STAGE_GRID[stage], STAGE_CHANNELS[stage]
    return np.random.default_rng(seed).standard_normal((g, g, g, d)).astype(np.float32)


@torch.no_grad()
def integrate(model: VelocityModel, z0: torch.Tensor, c, z_s, steps: int, reverse: bool,
              hook=None) -> torch.Tensor:
    """Fixed-step Euler. ``reverse`` runs t: 1 -> 0 (sampling); otherwise 0 -> 1 (inversion).

    ``hook(z, t)`` may replace the state after each step.
    """
    if steps < 1:
        raise LabError("bad_steps", str(steps))
    zs, cc = _prepare(model, c, z_s, len(z0))
    z = z0.clone()
    h = 1.0 / steps
    for i in range(steps):
        if reverse:
            k = steps - i
            t_now, t_next = k / steps, (k - 1) / steps
            z = z - h * model(z, torch.full((len(z),), t_now, dtype=z.dtype), cc, zs)
        else:
            t_now, t_next = i / steps, (i + 1) / steps
            z = z + h * model(z, torch.full((len(z),), t_now, dtype=z.dtype), cc, zs)
        if not bool(torch.isfinite(z).all()):
            raise NumericError("nonfinite_state", f"step {i}")
        if hook is not None:
            z = hook(z, t_next)
    return z


def sample(model: VelocityModel, c, z_s, steps: int, seed: int) -> StageLatent:
    eps = torch.from_numpy(noise(model, seed)).to(_model_dtype(model))[None]
    z = integrate(model, eps, c, z_s, steps, reverse=True)
    return StageLatent(model.stage, z[0].double().numpy())


def invert(model: VelocityModel, c, z_s, x, steps: int) -> StageLatent:
    shape = (model.g, model.g, model.g, model.d)
    z0 = _as_batch(x, shape, _model_dtype(model))
    z = integrate(model, z0, c, z_s, steps, reverse=False)
    return StageLatent(model.stage, z[0].double().numpy())


def predict_clean(z_t, t, v):
    """x_hat = z_t - t v; works on arrays, tensors and StageLatents."""
    if isinstance(z_t, StageLatent):
        grid = z_t.grid.astype(np.float64) - t * np.asarray(v, dtype=np.float64)
        return StageLatent(z_t.stage, grid)
    if isinstance(z_t, torch.Tensor):
        tt = torch.as_tensor(t, dtype=z_t.dtype)
        if tt.dim() == 1:
            tt = tt.reshape(-1, *[1] * (z_t.dim() - 1))
        return z_t - tt * v
    return np.asarray(z_t) - t * np.asarray(v)


# ---------------------------------------------------------------------------
# checkpoints: magic, u32 metadata length, JSON metadata, then named tensors
# ---------------------------------------------------------------------------

CKPT_MAGIC = b"PXCK"


def state_to_bytes(model: VelocityModel, meta: dict | None = None) -> bytes:
    meta = {**model.config(), **(meta or {})}
    head = json.dumps(meta, sort_keys=True).encode("utf-8")
    out = [CKPT_MAGIC, struct.pack("<I", len(head)), head]
    state = model.state_dict()
    out.append(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        raw = name.encode("utf-8")
        arr = tensor.detach().cpu().to(torch.float32).numpy()
        out.append(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def state_from_bytes(buf: bytes) -> tuple[VelocityModel, dict]:
    if buf[:4] != CKPT_MAGIC:
        raise DataError("bad_checkpoint", "magic")
    (n_meta,) = struct.unpack_from("<I", buf, 4)
    meta = json.loads(buf[8:8 + n_meta].decode("utf-8"))
    off = 8 + n_meta
    (n_tensors,) = struct.unpack_from("<I", buf, off)
    off += 4
    state = {}
    for _ in range(n_tensors):
        (n_name,) = struct.unpack_from("<H", buf, off)
        name = buf[off + 2:off + 2 + n_name].decode("utf-8")
        off += 2 + n_name
        (ndim,) = struct.unpack_from("<B", buf, off)
        shape = struct.unpack_from(f"<{ndim}I", buf, off + 1)
        off += 1 + 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        state[name] = torch.from_numpy(np.frombuffer(buf, "<f4", count, off).reshape(shape).copy())
        off += 4 * count
    model = VelocityModel(meta["stage"], meta["width"], meta["n_blocks"], meta["local_hidden"], meta["seed"],
                          bool(meta.get("backbone_only", False)))
    model.load_state_dict(state)
    return model, meta


def save_checkpoint(model: VelocityModel, path, meta: dict | None = None) -> None:
    Path(path).write_bytes(state_to_bytes(model, meta))


def load_checkpoint(path) -> tuple[VelocityModel, dict]:
    try:
        return state_from_bytes(Path(path).read_bytes())
    except FileNotFoundError as exc:
        raise DataError("missing_checkpoint", str(path)) from exc
