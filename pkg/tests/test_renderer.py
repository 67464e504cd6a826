import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from partflow_lab import renderer
from partflow_lab.errors import LabError
from partflow_lab.latent_codec import encode
from partflow_lab.renderer import (EXTENT, OPACITY_GAIN, SPLAT_SIGMA, VIEWS, draw_feature_weights,
                                   feature_distance, feature_distance_t, feature_weights, get_view, pixel_grid,
                                   read_ppm, render_hard, render_part_ids, render_soft, write_ppm)
from partflow_lab.scene_gen import generate_asset


def slab_first_hit(occ, view, pixel):
    """Exact ray/box test against every occupied voxel; returns (linear id, entry axis) or None."""
    G = occ.shape[0]
    right, up, d = view.basis()
    u, v = pixel_grid(view)
    origin = (u[pixel] * right + v[pixel] * up + 2.0 * d + 0.5) * G
    ray = -d
    best = None
    for idx in np.argwhere(occ):
        t_a = (idx - origin) / ray
        t_b = (idx + 1 - origin) / ray
        t_near, t_far = np.minimum(t_a, t_b), np.maximum(t_a, t_b)
        t0, t1 = t_near.max(), t_far.min()
        if t0 < t1 and (best is None or t0 < best[0]):
            best = (t0, int((idx[0] * G + idx[1]) * G + idx[2]), int(t_near.argmax()))
    return None if best is None else best[1:]


def splat_oracle(grid, view, pixel):
    """Per-pixel front-to-back compositing written as a plain loop."""
    g = grid.shape[0]
    right, up, d = view.basis()
    H, W = view.height, view.width
    row_p, col_p = divmod(pixel, W)
    ppu = W / (2 * EXTENT)
    sigma = SPLAT_SIGMA * ppu / g
    items = []
    for i in range(g):
        for j in range(g):
            for k in range(g):
                c = (np.array([i, j, k]) + 0.5) / g - 0.5
                col = (c @ right + EXTENT) * ppu - 0.5
                row = (EXTENT - c @ up) * H / (2 * EXTENT) - 0.5
                d2 = (col_p - col) ** 2 + (row_p - row) ** 2
                r = int(np.ceil(3 * sigma))
                if abs(col_p - round(col)) > r or abs(row_p - round(row)) > r or d2 > (3 * sigma) ** 2:
                    continue
                items.append((-(c @ d), (i * g + j) * g + k, np.exp(-d2 / (2 * sigma ** 2)), (i, j, k)))
    items.sort()
    trans, out = 1.0, np.zeros(3)
    for _, _, w, (i, j, k) in items:
        a = w / (1 + np.exp(-OPACITY_GAIN * grid[i, j, k, 0]))
        out += trans * a * (grid[i, j, k, 1:] + 1) / 2
        trans *= 1 - a
    return np.clip(out + trans, 0, 1)


def test_views():
    assert len(VIEWS) == 10
    dirs = np.array([v.direction for v in VIEWS])
    assert np.allclose(np.linalg.norm(dirs, axis=1), 1.0)
    assert len({tuple(np.round(x, 9)) for x in dirs}) == 10
    with pytest.raises(LabError):
        get_view(10)


def test_hard_render_matches_slab_oracle():
    asset = generate_asset(3, "chair")
    occ = asset.occupancy
    rng = np.random.default_rng(0)
    for view in (VIEWS[0], VIEWS[7]):
        has, vid, axis = renderer._first_hit(occ.ravel(), 32, view)
        for p in rng.choice(len(has), 40, replace=False):
            hit = slab_first_hit(occ, view, int(p))
            assert has[p] == (hit is not None)
            if hit is not None:
                assert (vid[p], axis[p]) == hit


def test_hard_render_background_and_ids():
    asset = generate_asset(1, "table")
    img = render_hard(asset, VIEWS[2])
    ids = render_part_ids(asset, VIEWS[2])
    assert img.shape == (64, 64, 3)
    assert np.all(img[ids == 0] == 1.0)
    assert set(np.unique(ids)) - {0} <= {p.part_id for p in asset.part_table}


def test_soft_render_matches_loop_oracle():
    rng = np.random.default_rng(1)
    grid = rng.uniform(-1, 1, size=(4, 4, 4, 4))
    view = VIEWS[3]
    img = render_soft(torch.as_tensor(grid), view).numpy().reshape(-1, 3)
    for p in rng.choice(64 * 64, 30, replace=False):
        assert np.allclose(img[p], splat_oracle(grid, view, int(p)), atol=1e-10)


def test_soft_render_gradients():
    grid = torch.as_tensor(np.random.default_rng(2).uniform(-1, 1, size=(4, 4, 4, 4)), dtype=torch.float64)
    grid.requires_grad_(True)
    assert torch.autograd.gradcheck(lambda x: render_soft(x, VIEWS[5]).sum(dim=(0, 1)), (grid,))


def test_soft_render_rejects_ss():
    with pytest.raises(LabError):
        render_soft(encode(generate_asset(0, "free"), "SS"), VIEWS[0])


def test_feature_weights_are_the_seeded_draw():
    drawn = draw_feature_weights()
    stored = feature_weights()
    assert len(drawn) == len(stored)
    for a, b in zip(drawn, stored):
        assert np.array_equal(a, b)


def test_feature_distance():
    a = render_hard(generate_asset(0, "animal"), VIEWS[0])
    b = render_hard(generate_asset(1, "animal"), VIEWS[0])
    assert feature_distance(a, a) == 0.0
    assert feature_distance(a, b) > 0.0
    t = feature_distance_t(torch.as_tensor(a), torch.as_tensor(b))
    assert abs(float(t) - feature_distance(a, b)) < 1e-12
    with pytest.raises(LabError):
        feature_distance(a, b[:32])


def test_ppm_roundtrip(tmp_path):
    img = render_hard(generate_asset(2, "vehicle"), VIEWS[4])
    write_ppm(tmp_path / "x.ppm", img)
    back = read_ppm(tmp_path / "x.ppm")
    assert back.shape == img.shape
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 5000), view=st.integers(0, 9))
def test_soft_render_range(seed, view):
    lat = encode(generate_asset(seed, "free"), "SLAT")
    img = render_soft(lat, VIEWS[view]).numpy()
    assert img.shape == (64, 64, 3)
    assert np.all((img >= 0) & (img <= 1))
