"""Type-aware before/after edit pairs with exact 3D masks, plus the acceptance gate."""

from __future__ import annotations

import json
import math
import multiprocessing
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import renderer
from .errors import ConfigError, DataError, LabError
from .scene_gen import (
    FAMILIES,
    PRIMITIVES,
    STRUCT_26,
    PartSpec,
    VoxelAsset,
    _hsv_to_rgb,
    _rgb_to_hsv,
    generate_asset,
    read_asset,
    voxelize_part,
    write_asset,
)

EDIT_TYPES = ("deletion", "addition", "replacement", "scaling", "color", "global_style")
SHAPE_TYPES = ("deletion", "addition", "replacement", "scaling")
APPEARANCE_TYPES = ("color", "global_style")
FACTOR_RANGE = (0.3, 0.85)
FACTOR_GRID = np.round(np.arange(30, 86) / 100.0, 2)
VOLUME_TOL = 0.1
MAX_ATTEMPT_FACTOR = 20

_COLOR_NAMES = {
    "red": (0.85, 0.15, 0.15), "orange": (0.95, 0.55, 0.1), "yellow": (0.92, 0.85, 0.2),
    "green": (0.2, 0.7, 0.25), "teal": (0.1, 0.6, 0.6), "blue": (0.15, 0.35, 0.85),
    "purple": (0.55, 0.25, 0.75), "pink": (0.95, 0.5, 0.7), "brown": (0.5, 0.3, 0.15),
    "gray": (0.5, 0.5, 0.5), "black": (0.1, 0.1, 0.1), "white": (0.95, 0.95, 0.95),
}


@dataclass
class EditCondition:
    edit_type: str
    target_part_ids: tuple[int, ...]
    params: dict = field(default_factory=dict)
    instruction: str = ""
    view_index: int = 0

    def __post_init__(self):
        self.target_part_ids = tuple(int(p) for p in self.target_part_ids)


@dataclass
class EditPair:
    source: VoxelAsset
    target: VoxelAsset
    mask: np.ndarray  # bool (G, G, G), True = edited voxel
    condition: EditCondition
    pair_id: str = ""


@dataclass
class GateReport:
    edit_executed: bool
    correct_region: bool
    preserve_other: bool
    visual_quality: bool
    artifact_free: bool
    reason: str = ""

    @property
    def accepted(self) -> bool:
        return all((self.edit_executed, self.correct_region, self.preserve_other,
                    self.visual_quality, self.artifact_free))


# ---------------------------------------------------------------------------
# instructions
# ---------------------------------------------------------------------------

def _color_name(rgb) -> str:
    rgb = np.asarray(rgb, dtype=float)
    return min(_COLOR_NAMES, key=lambda k: float(np.sum((np.asarray(_COLOR_NAMES[k]) - rgb) ** 2)))


def _part_phrase(asset: VoxelAsset, ids) -> str:
    labels: dict[str, int] = {}
    for pid in ids:
        lab = asset.spec(pid).label
        labels[lab] = labels.get(lab, 0) + 1
    words = [f"{lab}s" if n > 1 else lab for lab, n in labels.items()]
    return "the " + " and ".join(words)


def instruction_for(asset: VoxelAsset, cond: EditCondition) -> str:
    t, p = cond.edit_type, cond.params
    if t == "global_style":
        return f"Shift the whole object's color palette by {math.degrees(p['hue_shift']):.0f} degrees."
    what = _part_phrase(asset, cond.target_part_ids)
    if t == "deletion":
        return f"Remove {what}."
    if t == "addition":
        return f"Add {what[4:]} to the object."
    if t == "scaling":
        own = "their" if len(cond.target_part_ids) > 1 else "its"
        return f"Shrink {what} to {round(p['factor'] * 100)}% of {own} size."
    if t == "color":
        return f"Paint {what} {_color_name(p['target_rgb'])}."
    return f"Replace {what} with a {_color_name(p['new_color'])} {p['new_primitive']}."


# ---------------------------------------------------------------------------
# planning
# ---------------------------------------------------------------------------

def _groups(asset: VoxelAsset, ids) -> list[tuple[int, ...]]:
    by_group: dict[int, list[int]] = {}
    for pid in ids:
        by_group.setdefault(asset.spec(pid).symmetry_group, []).append(pid)
    return [tuple(sorted(v)) for _, v in sorted(by_group.items())]


def close_under_symmetry(asset: VoxelAsset, ids) -> tuple[int, ...]:
    groups = {asset.spec(p).symmetry_group for p in ids}
    return tuple(sorted(p.part_id for p in asset.part_table if p.symmetry_group in groups))


def primary_part(asset: VoxelAsset) -> int:
    """Largest-volume present part; ties go to the lowest id."""
    vols = np.bincount(asset.part_id.ravel(), minlength=len(asset.part_table) + 1)
    vols[0] = -1
    return int(np.argmax(vols))


def scaled_spec(spec: PartSpec, factor: float) -> PartSpec:
    return replace(spec, half_extent=tuple(np.asarray(spec.half_extent) * factor))


def valid_factors(spec: PartSpec, G: int) -> list[float]:
    """Factors on the 0.01 grid that keep the part resolvable and its raster volume near f^3."""
    base = int(voxelize_part(spec, G).sum())
    out = []
    for f in FACTOR_GRID:
        if min(spec.half_extent) * f < 2.0 / G - 1e-7:
            continue
        new = int(voxelize_part(scaled_spec(spec, f), G).sum())
        if abs(new / base / f ** 3 - 1.0) <= VOLUME_TOL:
            out.append(float(f))
    return out


def _best_view(asset: VoxelAsset, ids) -> int:
    view_asset = asset
    present = set(int(v) for v in np.unique(asset.part_id))
    missing = [p for p in ids if p not in present]
    if missing:
        view_asset = asset.copy()
        for pid in missing:
            vox = voxelize_part(asset.spec(pid), asset.resolution)
            view_asset.part_id[vox] = pid
        view_asset.occupancy = view_asset.part_id > 0
    counts = []
    for view in renderer.VIEWS:
        pid = renderer.render_part_ids(view_asset, view)
        counts.append(int(np.isin(pid, ids).sum()) if ids else int((pid > 0).sum()))
    return int(np.argmax(counts))


def _random_color(rng, avoid=None) -> tuple[float, float, float]:
    for _ in range(64):
        hsv = np.array([[rng.uniform(), rng.uniform(0.45, 0.95), rng.uniform(0.4, 0.95)]])
        rgb = np.round(_hsv_to_rgb(hsv)[0] * 255.0) / 255.0
        if avoid is None or np.linalg.norm(rgb - np.asarray(avoid)) >= 0.3:
            return tuple(float(c) for c in rgb)
    return tuple(float(c) for c in rgb)


def plan_edit(asset: VoxelAsset, edit_type: str, seed: int) -> EditCondition:
    if edit_type not in EDIT_TYPES:
        raise LabError("invalid_condition", f"unknown edit type {edit_type}")
    rng = np.random.default_rng([seed, EDIT_TYPES.index(edit_type)])
    G = asset.resolution
    present = asset.present_parts()
    if edit_type == "global_style":
        cond = EditCondition("global_style", (), {"hue_shift": float(rng.uniform(math.pi / 3, 5 * math.pi / 3))})
        cond.view_index = _best_view(asset, ())
        cond.instruction = instruction_for(asset, cond)
        return cond
    if edit_type == "addition":
        ghosts = [p.part_id for p in asset.part_table if p.part_id not in present]
        groups = _groups(asset, ghosts)
    else:
        if len(present) < 2:
            raise LabError("no_eligible_part", "needs at least two parts")
        groups = _groups(asset, present)
        groups = [close_under_symmetry(asset, g) for g in groups]
        if edit_type == "deletion":
            prim = primary_part(asset)
            groups = [g for g in groups if prim not in g and set(present) - set(g)]
    factors: dict[tuple, list[float]] = {}
    if edit_type == "scaling":
        keep = []
        for g in groups:
            common = None
            for pid in g:
                fs = set(valid_factors(asset.spec(pid), G))
                common = fs if common is None else common & fs
            if common:
                factors[g] = sorted(common)
                keep.append(g)
        groups = keep
    if not groups:
        raise LabError("no_eligible_part", edit_type)
    target = groups[int(rng.integers(len(groups)))]
    spec0 = asset.spec(target[0])
    params: dict = {}
    if edit_type == "scaling":
        fs = factors[target]
        params = {"factor": fs[int(rng.integers(len(fs)))]}
    elif edit_type == "color":
        params = {"target_rgb": list(_random_color(rng, spec0.color))}
    elif edit_type == "replacement":
        options = [p for p in PRIMITIVES if p != spec0.primitive]
        params = {"new_primitive": options[int(rng.integers(len(options)))],
                  "new_color": list(_random_color(rng, spec0.color))}
    cond = EditCondition(edit_type, target, params, "", _best_view(asset, list(target)))
    cond.instruction = instruction_for(asset, cond)
    return cond


# ---------------------------------------------------------------------------
# construction
# ---------------------------------------------------------------------------

def validate_condition(asset: VoxelAsset, cond: EditCondition) -> None:
    t, p = cond.edit_type, cond.params
    if t not in EDIT_TYPES:
        raise LabError("invalid_condition", f"unknown edit type {t}")
    if (t == "global_style") != (len(cond.target_part_ids) == 0):
        raise LabError("invalid_condition", "global_style iff no target parts")
    ids = {s.part_id for s in asset.part_table}
    if not set(cond.target_part_ids) <= ids:
        raise LabError("invalid_condition", f"unknown target parts {cond.target_part_ids}")
    if cond.target_part_ids and tuple(sorted(cond.target_part_ids)) != close_under_symmetry(asset, cond.target_part_ids):
        raise LabError("invalid_condition", "targets not closed under symmetry_group")
    if not 0 <= cond.view_index < renderer.N_VIEWS:
        raise LabError("invalid_condition", f"view_index {cond.view_index}")
    need = {"scaling": {"factor"}, "color": {"target_rgb"}, "replacement": {"new_primitive", "new_color"},
            "global_style": {"hue_shift"}}.get(t, set())
    if set(p) != need:
        raise LabError("invalid_condition", f"{t} expects params {sorted(need)}, got {sorted(p)}")
    if t == "scaling" and not FACTOR_RANGE[0] - 1e-9 <= p["factor"] <= FACTOR_RANGE[1] + 1e-9:
        raise LabError("invalid_condition", f"factor {p['factor']} outside {FACTOR_RANGE}")
    if t == "replacement" and p["new_primitive"] not in PRIMITIVES:
        raise LabError("invalid_condition", f"primitive {p['new_primitive']}")
    if t == "global_style" and not 0.0 <= p["hue_shift"] < 2 * math.pi:
        raise LabError("invalid_condition", "hue_shift outside [0, 2pi)")


def _u8(rgb) -> np.ndarray:
    return np.clip(np.round(np.asarray(rgb, dtype=float) * 255.0), 0, 255).astype(np.uint8)


def _regrow(asset: VoxelAsset, old_ids, new_specs: list[PartSpec]) -> tuple[VoxelAsset, np.ndarray]:
    """Remove the old parts and rasterize replacements; later-listed parts keep their voxels."""
    out = asset.copy()
    old = np.isin(out.part_id, old_ids)
    out.part_id[old] = 0
    out.color[old] = 0
    new_any = np.zeros_like(old)
    for spec in new_specs:
        vox = voxelize_part(spec, asset.resolution)
        free = (out.part_id == 0) | (out.part_id < spec.part_id)
        claim = vox & free
        out.part_id[claim] = spec.part_id
        out.color[claim] = _u8(spec.color)
        new_any |= claim
    out.occupancy = out.part_id > 0
    table = {s.part_id: s for s in new_specs}
    out.part_table = [table.get(s.part_id, s) for s in asset.part_table]
    return out, old | new_any


def hue_rotate(colors_u8: np.ndarray, shift: float) -> np.ndarray:
    hsv = _rgb_to_hsv(colors_u8.astype(np.float64) / 255.0)
    hsv[..., 0] = (hsv[..., 0] + shift / (2 * math.pi)) % 1.0
    return _u8(_hsv_to_rgb(hsv))


def apply_edit(asset: VoxelAsset, cond: EditCondition, pair_id: str = "") -> EditPair:
    validate_condition(asset, cond)
    t, p, ids = cond.edit_type, cond.params, list(cond.target_part_ids)
    if t == "deletion":
        target = asset.copy()
        mask = np.isin(asset.part_id, ids)
        target.part_id[mask] = 0
        target.color[mask] = 0
        target.occupancy = target.part_id > 0
    elif t == "addition":
        target, mask = _regrow(asset, [], [asset.spec(i) for i in ids])
    elif t == "scaling":
        target, mask = _regrow(asset, ids, [scaled_spec(asset.spec(i), p["factor"]) for i in ids])
    elif t == "replacement":
        new = [replace(asset.spec(i), primitive=p["new_primitive"], color=tuple(p["new_color"])) for i in ids]
        target, mask = _regrow(asset, ids, new)
    elif t == "color":
        target = asset.copy()
        mask = np.isin(asset.part_id, ids)
        target.color[mask] = _u8(p["target_rgb"])
        target.part_table = [replace(s, color=tuple(np.round(np.asarray(p["target_rgb"]) * 255) / 255))
                             if s.part_id in ids else s for s in asset.part_table]
    else:
        target = asset.copy()
        mask = asset.occupancy.copy()
        target.color[mask] = hue_rotate(asset.color[mask], p["hue_shift"])
        new_cols = hue_rotate(_u8([s.color for s in asset.part_table]), p["hue_shift"]) / 255.0
        target.part_table = [replace(s, color=tuple(c)) for s, c in zip(asset.part_table, new_cols)]
    if not mask.any():
        raise LabError("invalid_condition", "edit touches no voxels")
    return EditPair(asset, target, mask, cond, pair_id)


def make_addition(pair: EditPair) -> EditPair:
    """Reverse a deletion pair into an addition pair (and an addition back into its deletion)."""
    kind = pair.condition.edit_type
    if kind not in ("deletion", "addition"):
        raise LabError("not_a_deletion", kind)
    new_type = "addition" if kind == "deletion" else "deletion"
    cond = replace(pair.condition, edit_type=new_type)
    cond.instruction = instruction_for(pair.target, cond)
    return EditPair(pair.target, pair.source, pair.mask.copy(), cond, pair.pair_id)


# ---------------------------------------------------------------------------
# gate
# ---------------------------------------------------------------------------

def changed_voxels(a: VoxelAsset, b: VoxelAsset) -> np.ndarray:
    return ((a.occupancy != b.occupancy) | (a.part_id != b.part_id) | np.any(a.color != b.color, axis=-1))


def quality_gate(pair: EditPair) -> GateReport:
    changed = changed_voxels(pair.source, pair.target)
    mask = pair.mask
    executed = bool((changed & mask).any())
    in_region = not bool((changed & ~mask).any())
    preserve = True if pair.condition.edit_type == "global_style" else in_region
    occ = pair.target.occupancy
    _, n_comp = ndimage.label(occ, structure=STRUCT_26)
    neighbours = ndimage.convolve(occ.astype(np.int32), STRUCT_26.astype(np.int32), mode="constant") - occ
    isolated = bool((occ & (neighbours == 0)).any())
    report = GateReport(executed, in_region, preserve, n_comp == 1, not isolated)
    failed = [k for k, v in asdict(report).items() if v is False]
    report.reason = "ok" if not failed else "failed: " + ", ".join(failed)
    return report


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------

def largest_remainder(n: int, fractions: dict[str, float]) -> dict[str, int]:
    raw = {k: n * fractions.get(k, 0.0) for k in EDIT_TYPES}
    counts = {k: int(math.floor(v)) for k, v in raw.items()}
    left = n - sum(counts.values())
    order = sorted(EDIT_TYPES, key=lambda k: (-(raw[k] - counts[k]), EDIT_TYPES.index(k)))
    for k in order[:left]:
        counts[k] += 1
    return counts


def _make_pair(edit_type: str, asset_seed: int, family: str, plan_seed: int, pair_id: str) -> EditPair:
    asset = generate_asset(asset_seed, family)
    if edit_type == "addition":
        pair = make_addition(apply_edit(asset, plan_edit(asset, "deletion", plan_seed), pair_id))
    else:
        pair = apply_edit(asset, plan_edit(asset, edit_type, plan_seed), pair_id)
    return pair


def _fill_slot(args) -> tuple[EditPair | None, dict, int]:
    seed, edit_type, index, budget = args
    ti = EDIT_TYPES.index(edit_type)
    pair_id = f"{edit_type}_{index:04d}"
    for attempt in range(budget):
        rng = np.random.default_rng([seed, ti, index, attempt])
        asset_seed = int(rng.integers(0, 2 ** 31 - 1))
        family = FAMILIES[int(rng.integers(len(FAMILIES)))]
        plan_seed = int(rng.integers(0, 2 ** 31 - 1))
        try:
            pair = _make_pair(edit_type, asset_seed, family, plan_seed, pair_id)
        except LabError:
            continue
        gate = quality_gate(pair)
        if gate.accepted:
            rec = {"pair_id": pair_id, "edit_type": edit_type, "seed": asset_seed, "family": family,
                   "plan_seed": plan_seed, "attempts": attempt + 1, "gate": asdict(gate)}
            return pair, rec, attempt + 1
    return None, {}, budget


def build_dataset(n_pairs: int, type_mix: dict[str, float], seed: int, out_dir=None, jobs: int = 1):
    """Generate exactly ``n_pairs`` gate-accepted pairs; returns (pairs, manifest records)."""
    if abs(sum(type_mix.values()) - 1.0) > 1e-6:
        raise ConfigError("bad_type_mix", f"fractions sum to {sum(type_mix.values())}")
    unknown = set(type_mix) - set(EDIT_TYPES)
    if unknown:
        raise ConfigError("bad_type_mix", f"unknown types {sorted(unknown)}")
    quotas = largest_remainder(n_pairs, type_mix)
    budget = MAX_ATTEMPT_FACTOR * n_pairs
    slots = [(seed, t, i, budget) for t in EDIT_TYPES for i in range(quotas[t])]
    if jobs > 1 and len(slots) > 1:
        with multiprocessing.get_context("spawn").Pool(jobs) as pool:
            results = pool.map(_fill_slot, slots)
    else:
        results = [_fill_slot(s) for s in slots]
    total = sum(r[2] for r in results)
    if any(r[0] is None for r in results) or total > budget:
        raise DataError("quota_unreachable", f"{total} attempts for {n_pairs} pairs")
    pairs = [r[0] for r in results]
    manifest = [r[1] for r in results]
    if out_dir is not None:
        write_dataset(pairs, manifest, out_dir)
    return pairs, manifest


# ---------------------------------------------------------------------------
# pair directory I/O
# ---------------------------------------------------------------------------

CONDITION_KEYS = ("edit_type", "target_part_ids", "params", "instruction", "view_index")


def condition_to_text(cond: EditCondition) -> str:
    lines = [
        f"edit_type: {cond.edit_type}",
        f"target_part_ids: {','.join(str(i) for i in cond.target_part_ids)}",
        f"params: {json.dumps(cond.params, sort_keys=True)}",
        f"instruction: {cond.instruction}",
        f"view_index: {cond.view_index}",
    ]
    return "\n".join(lines) + "\n"


def condition_from_text(text: str) -> EditCondition:
    fields = {}
    for line in text.splitlines():
        if not line.strip():
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise DataError("bad_condition_file", f"line without key: {line!r}")
        fields[key.strip()] = value.strip()
    if set(fields) != set(CONDITION_KEYS):
        raise DataError("bad_condition_file", f"keys {sorted(fields)}")
    try:
        ids = tuple(int(x) for x in fields["target_part_ids"].split(",") if x.strip())
        return EditCondition(fields["edit_type"], ids, json.loads(fields["params"]),
                             fields["instruction"], int(fields["view_index"]))
    except ValueError as exc:
        raise DataError("bad_condition_file", str(exc)) from exc


def mask_to_bytes(mask: np.ndarray) -> bytes:
    return np.packbits(np.asarray(mask, bool).ravel(order="F").astype(np.uint8), bitorder="little").tobytes()


def mask_from_bytes(buf: bytes, G: int = 32) -> np.ndarray:
    bits = np.unpackbits(np.frombuffer(buf, np.uint8), bitorder="little")[:G ** 3].astype(bool)
    return bits.reshape((G, G, G), order="F")


def write_pair(pair: EditPair, root) -> Path:
    d = Path(root) / pair.pair_id
    d.mkdir(parents=True, exist_ok=True)
    write_asset(pair.source, d / "source.pxva")
    write_asset(pair.target, d / "target.pxva")
    (d / "mask.bin").write_bytes(mask_to_bytes(pair.mask))
    (d / "condition.txt").write_text(condition_to_text(pair.condition), encoding="utf-8")
    return d


def read_pair(pair_dir) -> EditPair:
    d = Path(pair_dir)
    try:
        source = read_asset(d / "source.pxva")
        target = read_asset(d / "target.pxva")
        mask = mask_from_bytes((d / "mask.bin").read_bytes(), source.resolution)
        cond = condition_from_text((d / "condition.txt").read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DataError("missing_pair_file", str(exc)) from exc
    return EditPair(source, target, mask, cond, d.name)


def write_manifest(records: list[dict], path) -> None:
    lines = [json.dumps(r, sort_keys=True) for r in records]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> list[dict]:
    text = Path(path).read_text(encoding="utf-8")
    return [json.loads(line) for line in text.splitlines() if line.strip()]


def write_dataset(pairs: list[EditPair], manifest: list[dict], out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for pair in pairs:
        write_pair(pair, out)
    write_manifest(manifest, out / "manifest.jsonl")
