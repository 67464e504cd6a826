"""Geometry metrics on sampled surface points, image metrics on the fixed views,
and the benchmark harness."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
from scipy.spatial import cKDTree

from . import renderer
from .edit_engine import APPEARANCE_TYPES, SHAPE_TYPES, EditPair
from .errors import LabError
from .scene_gen import VoxelAsset, surface_points

PSNR_CAP = 100.0
SSIM_WIN = 8
SSIM_STRIDE = 4
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
F1_TAU = 0.01
METRIC_FIELDS = ("cd", "nc", "f1", "psnr", "ssim", "feat_dist", "feat_sim")
IMAGE_FIELDS = ("psnr", "ssim", "feat_dist", "feat_sim")
LOWER_IS_BETTER = {"cd", "feat_dist"}


@dataclass
class MetricsReport:
    cd: float
    nc: float
    f1: float
    psnr: float
    ssim: float
    feat_sim: float
    feat_dist: float = 0.0


# ---------------------------------------------------------------------------
# nearest neighbours
# ---------------------------------------------------------------------------

def _check_sets(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if len(a) == 0 or len(b) == 0:
        raise LabError("empty_set", f"sizes {len(a)}, {len(b)}")
    return a, b


def sq_dist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = a - b
    return d[..., 0] * d[..., 0] + d[..., 1] * d[..., 1] + d[..., 2] * d[..., 2]


def nearest_brute(a: np.ndarray, b: np.ndarray, chunk: int = 256) -> tuple[np.ndarray, np.ndarray]:
    """Exact O(N*M) search; argmin returns the lowest index on distance ties."""
    dist = np.empty(len(a))
    idx = np.empty(len(a), dtype=np.int64)
    for s in range(0, len(a), chunk):
        d2 = sq_dist(a[s:s + chunk, None, :], b[None, :, :])
        j = np.argmin(d2, axis=1)
        idx[s:s + chunk] = j
        dist[s:s + chunk] = np.sqrt(d2[np.arange(len(j)), j])
    return dist, idx


def nearest(a: np.ndarray, b: np.ndarray, k: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Same answer as :func:`nearest_brute`, via a KD-tree shortlist.

    The shortlist is re-ranked with the brute-force distance formula; rows whose
    shortlist cannot rule out a tie beyond its last candidate fall back to brute force.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    k = min(k, len(b))
    _, cand = cKDTree(b).query(a, k=k)
    cand = cand.reshape(len(a), k)
    d2 = sq_dist(a[:, None, :], b[cand])
    order = np.lexsort((cand, d2), axis=1)
    rows = np.arange(len(a))
    best = cand[rows, order[:, 0]]
    best_d2 = d2[rows, order[:, 0]]
    if k < len(b):
        unsure = d2[rows, order[:, -1]] <= best_d2 * (1 + 1e-9) + 1e-300
        if unsure.any():
            dd, ii = nearest_brute(a[unsure], b)
            best[unsure], best_d2[unsure] = ii, dd * dd
    dist = np.sqrt(best_d2)
    return dist, best


def chamfer(a, b) -> float:
    a, b = _check_sets(a, b)
    return 0.5 * (nearest(a, b)[0].mean() + nearest(b, a)[0].mean()) * 1e3


def normal_consistency(a, na, b, nb) -> float:
    a, b = _check_sets(a, b)
    na, nb = np.asarray(na, dtype=np.float64), np.asarray(nb, dtype=np.float64)
    for n in (na, nb):
        if np.any(np.abs(np.linalg.norm(n, axis=1) - 1.0) > 1e-6):
            raise LabError("non_unit_normal")
    _, ia = nearest(a, b)
    _, ib = nearest(b, a)
    ab = np.abs(np.sum(na * nb[ia], axis=1)).mean()
    ba = np.abs(np.sum(nb * na[ib], axis=1)).mean()
    return float(0.5 * (ab + ba))


def fscore(a, b, tau: float = F1_TAU) -> float:
    """F1 as a percentage; ``a`` is the prediction, ``b`` the reference."""
    if tau <= 0:
        raise LabError("bad_tau", str(tau))
    a, b = _check_sets(a, b)
    p = float(np.mean(nearest(a, b)[0] <= tau))
    r = float(np.mean(nearest(b, a)[0] <= tau))
    return 0.0 if p + r == 0 else 200.0 * p * r / (p + r)


def _geometry(pa, na, pb, nb, tau: float = F1_TAU) -> tuple[float, float, float]:
    """CD, NC and F1 sharing one pair of nearest-neighbour passes."""
    da, ia = nearest(pa, pb)
    db, ib = nearest(pb, pa)
    cd = 0.5 * (da.mean() + db.mean()) * 1e3
    nc = 0.5 * (np.abs(np.sum(na * nb[ia], axis=1)).mean() + np.abs(np.sum(nb * na[ib], axis=1)).mean())
    p, r = float(np.mean(da <= tau)), float(np.mean(db <= tau))
    f1 = 0.0 if p + r == 0 else 200.0 * p * r / (p + r)
    return float(cd), float(nc), f1


# ---------------------------------------------------------------------------
# images
# ---------------------------------------------------------------------------

def _check_images(a, b) -> tuple[np.ndarray, np.ndarray]:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise LabError("size_mismatch", f"{a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    a, b = _check_images(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def ssim(a, b) -> float:
    """Mean SSIM over 8x8 windows at stride 4, averaged over channels."""
    a, b = _check_images(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    h, w = a.shape[:2]
    if h < SSIM_WIN or w < SSIM_WIN:
        raise LabError("too_small", f"{h}x{w}")
    wa = np.lib.stride_tricks.sliding_window_view(a, (SSIM_WIN, SSIM_WIN), axis=(0, 1))[::SSIM_STRIDE, ::SSIM_STRIDE]
    wb = np.lib.stride_tricks.sliding_window_view(b, (SSIM_WIN, SSIM_WIN), axis=(0, 1))[::SSIM_STRIDE, ::SSIM_STRIDE]
    mu_a, mu_b = wa.mean(axis=(-2, -1)), wb.mean(axis=(-2, -1))
    var_a = ((wa - mu_a[..., None, None]) ** 2).mean(axis=(-2, -1))
    var_b = ((wb - mu_b[..., None, None]) ** 2).mean(axis=(-2, -1))
    cov = ((wa - mu_a[..., None, None]) * (wb - mu_b[..., None, None])).mean(axis=(-2, -1))
    s = ((2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)) / (
        (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (var_a + var_b + SSIM_C2))
    return float(s.mean())


def _cos_sim(fa: np.ndarray, fb: np.ndarray) -> float:
    na, nb = np.linalg.norm(fa), np.linalg.norm(fb)
    if na == 0.0 and nb == 0.0:
        return 1.0
    if na == 0.0 or nb == 0.0:
        return 0.5
    cos = float(np.dot(fa, fb) / (na * nb))
    return min(1.0, max(0.0, (1.0 + cos) / 2.0))


def feature_similarity(a, b) -> float:
    a, b = _check_images(a, b)
    return _cos_sim(renderer.features(a), renderer.features(b))


# ---------------------------------------------------------------------------
# per pair and benchmark
# ---------------------------------------------------------------------------

def render_views(asset: VoxelAsset) -> list[np.ndarray]:
    return [renderer.render_hard(asset, v) for v in renderer.VIEWS]


def evaluate_pair(pred: VoxelAsset, gt: VoxelAsset, n_points: int = 4096, seed: int = 0,
                  gt_views: list[np.ndarray] | None = None) -> MetricsReport:
    if not pred.occupancy.any() or not gt.occupancy.any():
        raise LabError("empty_asset", "cannot evaluate an empty asset")
    pa, na = surface_points(pred, n_points, seed)
    pb, nb = surface_points(gt, n_points, seed)
    cd, nc, f1 = _geometry(pa, na, pb, nb)
    gt_views = gt_views if gt_views is not None else render_views(gt)
    vals = {k: [] for k in IMAGE_FIELDS}
    for img_p, img_g in zip(render_views(pred), gt_views):
        fp, fg = renderer.features(img_p), renderer.features(img_g)
        vals["psnr"].append(psnr(img_p, img_g))
        vals["ssim"].append(ssim(img_p, img_g))
        vals["feat_dist"].append(float(np.mean((fp - fg) ** 2)))
        vals["feat_sim"].append(_cos_sim(fp, fg))
    means = {k: float(np.mean(v)) for k, v in vals.items()}
    return MetricsReport(cd=cd, nc=nc, f1=f1, **means)


Editor = Callable[[VoxelAsset, object], VoxelAsset]


def split_of(edit_type: str) -> str:
    return "shape" if edit_type in SHAPE_TYPES else "appearance"


def run_benchmark(editor: Editor, pairs: list[EditPair], n_points: int = 4096, seed: int = 0) -> dict:
    """Evaluate ``editor`` on every pair; returns per-pair rows and split aggregates."""
    if not pairs:
        raise LabError("empty_manifest")
    rows = []
    for pair in sorted(pairs, key=lambda p: p.pair_id):
        row = {"pair_id": pair.pair_id, "edit_type": pair.condition.edit_type}
        try:
            # editors that need more than (source, condition), e.g. the mask, mark themselves
            pred = editor(pair) if getattr(editor, "takes_pair", False) else editor(pair.source, pair.condition)
            rep = asdict(evaluate_pair(pred, pair.target, n_points, seed))
            if split_of(row["edit_type"]) == "appearance":
                rep = {k: (v if k in IMAGE_FIELDS else None) for k, v in rep.items()}
            row.update(rep)
            row["status"] = "ok"
        except LabError as exc:
            row.update({k: None for k in METRIC_FIELDS})
            row["status"] = exc.code
        rows.append(row)
    return {"rows": rows, "aggregate": aggregate(rows)}


def aggregate(rows: list[dict]) -> dict:
    out = {}
    groups = {"shape": SHAPE_TYPES, "appearance": APPEARANCE_TYPES}
    for t in SHAPE_TYPES + APPEARANCE_TYPES:
        groups[t] = (t,)
    for name, types in groups.items():
        sel = [r for r in rows if r["edit_type"] in types]
        ok = [r for r in sel if r["status"] == "ok"]
        fields = METRIC_FIELDS if name == "shape" or name in SHAPE_TYPES else IMAGE_FIELDS
        agg = {"n": len(sel), "failures": len(sel) - len(ok)}
        for k in METRIC_FIELDS:
            agg[k] = float(np.mean([r[k] for r in ok])) if ok and k in fields else None
        out[name] = agg
    return out


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.4f}"


def table_lines(result: dict) -> str:
    """Machine-readable form: one JSON record per pair, then one per aggregate group."""
    lines = [json.dumps(r, sort_keys=True) for r in result["rows"]]
    for name, agg in result["aggregate"].items():
        lines.append(json.dumps({"aggregate": name, **agg}, sort_keys=True))
    return "\n".join(lines) + "\n"


def table_text(result: dict, title: str = "") -> str:
    header = ["group", "n", "failures", *METRIC_FIELDS]
    body = [[name, str(a["n"]), str(a["failures"]), *(_fmt(a[k]) for k in METRIC_FIELDS)]
            for name, a in result["aggregate"].items()]
    widths = [max(len(r[i]) for r in [header, *body]) for i in range(len(header))]
    out = [title] if title else []
    out.append("# feat_dist is the perceptual-distance column (lower is better); feat_sim the similarity column")
    out += ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in [header, *body]]
    return "\n".join(out) + "\n"
