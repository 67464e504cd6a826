import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from partflow_lab.edit_engine import (EDIT_TYPES, EditCondition, EditPair, apply_edit, build_dataset,
                                      changed_voxels, close_under_symmetry, condition_from_text,
                                      condition_to_text, largest_remainder, make_addition, plan_edit,
                                      primary_part, quality_gate, read_manifest, read_pair, scaled_spec,
                                      voxelize_part, write_dataset)
from partflow_lab.errors import ConfigError, LabError
from partflow_lab.scene_gen import PartSpec, compose, generate_asset

from conftest import UNIFORM


def animal_with_pair():
    for seed in range(50):
        asset = generate_asset(seed, "animal")
        groups = {}
        for p in asset.part_table:
            groups.setdefault(p.symmetry_group, []).append(p.part_id)
        if any(len(v) == 2 for v in groups.values()):
            return asset, groups
    raise AssertionError("no symmetric animal found")


def test_deletion_closes_under_symmetry():
    asset, groups = animal_with_pair()
    for seed in range(30):
        try:
            cond = plan_edit(asset, "deletion", seed)
        except LabError:
            continue
        ids = set(cond.target_part_ids)
        for members in groups.values():
            assert set(members) <= ids or not set(members) & ids


def test_deletion_never_targets_primary():
    for seed in range(20):
        asset = generate_asset(seed, "chair")
        prim = primary_part(asset)
        cond = plan_edit(asset, "deletion", seed)
        assert prim not in cond.target_part_ids


def test_plan_is_deterministic():
    asset = generate_asset(3, "table")
    for t in ("deletion", "scaling", "color", "replacement", "global_style"):
        try:
            first = plan_edit(asset, t, 11)
        except LabError as exc:
            assert exc.code == "no_eligible_part"
            continue
        assert first == plan_edit(asset, t, 11)


def test_no_eligible_part_with_single_part():
    asset = compose([PartSpec(1, "body", "box", (0, 0, 0), (0.3, 0.3, 0.3), (1, 0, 0), 0)])
    with pytest.raises(LabError) as exc:
        plan_edit(asset, "deletion", 0)
    assert exc.value.code == "no_eligible_part"


def test_deletion_is_set_subtraction():
    asset = generate_asset(1, "chair")
    cond = plan_edit(asset, "deletion", 2)
    pair = apply_edit(asset, cond)
    removed = np.isin(asset.part_id, cond.target_part_ids)
    assert np.array_equal(pair.target.occupancy, asset.occupancy & ~removed)
    assert np.array_equal(pair.mask, removed)


def test_scaling_isolated_box_volume():
    body = PartSpec(1, "body", "box", (0, 0, -0.2), (0.4, 0.4, 0.1), (1, 0, 0), 0)
    top = PartSpec(2, "top", "box", (0, 0, 0.15), (0.25, 0.25, 0.25), (0, 1, 0), 1)
    asset = compose([body, top])
    pair = apply_edit(asset, EditCondition("scaling", (2,), {"factor": 0.5}, "", 0))
    ratio = pair.target.part_volume(2) / asset.part_volume(2)
    assert 0.9 * 0.125 <= ratio <= 1.1 * 0.125
    # mask is the union of old and new footprints
    assert np.array_equal(pair.mask, (asset.part_id == 2) | (pair.target.part_id == 2))


def test_replacement_keeps_envelope():
    asset = generate_asset(2, "table")
    cond = plan_edit(asset, "replacement", 5)
    pair = apply_edit(asset, cond)
    for pid in cond.target_part_ids:
        old, new = asset.spec(pid), pair.target.spec(pid)
        assert new.center == old.center and new.half_extent == old.half_extent
        assert new.primitive == cond.params["new_primitive"]


def test_global_style_zero_shift_is_identity():
    asset = generate_asset(0, "vehicle")
    pair = apply_edit(asset, EditCondition("global_style", (), {"hue_shift": 0.0}, "", 0))
    assert np.array_equal(pair.target.color, asset.color)
    assert np.array_equal(pair.target.occupancy, asset.occupancy)
    assert np.array_equal(pair.mask, asset.occupancy)


def test_invalid_conditions():
    asset = generate_asset(0, "chair")
    pid = asset.part_table[0].part_id
    bad = [
        EditCondition("scaling", (pid,), {"factor": 0.95}),
        EditCondition("scaling", (pid,), {}),
        EditCondition("global_style", (pid,), {"hue_shift": 1.0}),
        EditCondition("color", (), {"target_rgb": [1, 0, 0]}),
        EditCondition("twist", (pid,), {}),
        EditCondition("deletion", (99,), {}),
    ]
    for cond in bad:
        with pytest.raises(LabError) as exc:
            apply_edit(asset, cond)
        assert exc.value.code == "invalid_condition"


def test_make_addition_involution():
    asset = generate_asset(4, "animal")
    pair = apply_edit(asset, plan_edit(asset, "deletion", 1), "p")
    add = make_addition(pair)
    assert add.condition.edit_type == "addition"
    assert add.target.same_as(pair.source)
    assert np.array_equal(add.mask, pair.mask)
    back = make_addition(add)
    assert back.source.same_as(pair.source) and back.target.same_as(pair.target)
    assert replace(back.condition, instruction="") == replace(pair.condition, instruction="")


def test_make_addition_rejects_other_types():
    asset = generate_asset(4, "animal")
    pair = apply_edit(asset, plan_edit(asset, "color", 1))
    with pytest.raises(LabError) as exc:
        make_addition(pair)
    assert exc.value.code == "not_a_deletion"


def test_gate_examples():
    asset = generate_asset(5, "chair")
    pair = apply_edit(asset, plan_edit(asset, "deletion", 0))
    assert quality_gate(pair).accepted
    noop = EditPair(asset, asset.copy(), pair.mask, pair.condition)
    assert not quality_gate(noop).edit_executed
    broken = pair.target.copy()
    outside = np.argwhere(~pair.mask & ~broken.occupancy)[0]
    broken.occupancy[tuple(outside)] = True
    broken.part_id[tuple(outside)] = 1
    assert not quality_gate(EditPair(asset, broken, pair.mask, pair.condition)).preserve_other


def test_gate_flags_fragments():
    asset = generate_asset(6, "table")
    pair = apply_edit(asset, plan_edit(asset, "color", 0))
    target = pair.target.copy()
    # a lone voxel far from everything: isolated and a second component
    far = np.argwhere(~target.occupancy)[0]
    target.occupancy[tuple(far)] = True
    target.part_id[tuple(far)] = 1
    mask = pair.mask.copy()
    mask[tuple(far)] = True
    rep = quality_gate(EditPair(asset, target, mask, pair.condition))
    assert not rep.visual_quality and not rep.artifact_free


def test_largest_remainder_quotas():
    counts = largest_remainder(100, UNIFORM)
    assert sum(counts.values()) == 100
    assert sorted(counts.values()) == [16, 16, 17, 17, 17, 17]


def test_bad_mix():
    with pytest.raises(ConfigError):
        build_dataset(10, {"deletion": 0.5}, 0)


def test_dataset_counts_and_gates(small_pairs):
    types = [p.condition.edit_type for p in small_pairs]
    assert all(types.count(t) == 10 for t in EDIT_TYPES)
    for pair in small_pairs:
        assert quality_gate(pair).accepted
        if pair.condition.edit_type != "global_style":
            assert not (changed_voxels(pair.source, pair.target) & ~pair.mask).any()
        if pair.condition.edit_type in ("color", "global_style"):
            assert np.array_equal(pair.source.occupancy, pair.target.occupancy)


def test_dataset_rebuild_and_disk_roundtrip(tmp_path):
    pairs, manifest = build_dataset(12, UNIFORM, seed=3)
    pairs2, manifest2 = build_dataset(12, UNIFORM, seed=3)
    assert manifest == manifest2
    write_dataset(pairs, manifest, tmp_path)
    assert read_manifest(tmp_path / "manifest.jsonl") == manifest
    for rec, pair in zip(manifest, pairs):
        assert all(rec["gate"][k] for k in ("edit_executed", "correct_region", "preserve_other",
                                            "visual_quality", "artifact_free"))
        back = read_pair(tmp_path / rec["pair_id"])
        assert back.source.same_as(pair.source) and back.target.same_as(pair.target)
        assert np.array_equal(back.mask, pair.mask)
        assert back.condition == pair.condition


def test_condition_text_keys():
    asset = generate_asset(0, "chair")
    cond = plan_edit(asset, "replacement", 0)
    text = condition_to_text(cond)
    keys = [line.split(":", 1)[0] for line in text.splitlines()]
    assert keys == ["edit_type", "target_part_ids", "params", "instruction", "view_index"]
    assert condition_from_text(text) == cond


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 5000), plan=st.integers(0, 5000),
       kind=st.sampled_from(("deletion", "replacement", "scaling", "color")))
def test_locality_and_gate_soundness(seed, plan, kind):
    asset = generate_asset(seed, "free")
    try:
        pair = apply_edit(asset, plan_edit(asset, kind, plan))
    except LabError:
        return
    assert not (changed_voxels(pair.source, pair.target) & ~pair.mask).any()
    # flipping any single out-of-mask voxel must break preserve_other
    outside = np.argwhere(~pair.mask)
    v = tuple(outside[plan % len(outside)])
    target = pair.target.copy()
    target.occupancy[v] = not target.occupancy[v]
    target.part_id[v] = 0 if not target.occupancy[v] else 1
    target.color[v] = 0
    assert not quality_gate(EditPair(pair.source, target, pair.mask, pair.condition)).preserve_other


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 5000), plan=st.integers(0, 5000))
def test_addition_deletion_duality(seed, plan):
    asset = generate_asset(seed, "animal")
    try:
        pair = apply_edit(asset, plan_edit(asset, "deletion", plan))
    except LabError:
        return
    twice = make_addition(make_addition(pair))
    assert twice.source.same_as(pair.source) and twice.target.same_as(pair.target)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 5000), shift=st.floats(0.0, 2 * math.pi, exclude_max=True))
def test_global_style_keeps_geometry(seed, shift):
    asset = generate_asset(seed, "vehicle")
    pair = apply_edit(asset, EditCondition("global_style", (), {"hue_shift": shift}, "", 0))
    assert np.array_equal(pair.target.occupancy, asset.occupancy)
    assert np.array_equal(pair.target.part_id, asset.part_id)
