"""Losses and the two-phase training loop for one stage."""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np
import torch

from . import renderer
from .edit_engine import EditPair
from .errors import LabError, NumericError
from .flow_core import VelocityModel, condition_vector, predict_clean
from .latent_codec import LatentMask, StageLatent, encode, project_mask

RENDER_GATE = 0.5


@dataclass
class LossWeights:
    lambda_mask_ss: float = 1.0
    lambda_mask_slat: float = 1.0
    lambda_mse: float = 1.0
    lambda_ds: float = 0.5
    lambda_render: float = 0.1

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0:
                raise LabError("bad_weight", f"{k}={v}")

    def mask_weight(self, stage: str) -> float:
        return self.lambda_mask_ss if stage == "SS" else self.lambda_mask_slat


@dataclass
class TrainConfig:
    base_steps: int = 2000
    aux_steps: int = 250
    batch_size: int = 16
    learning_rate: float = 0.05
    seed: int = 0
    stage: str = "SLAT"
    momentum: float = 0.0

    def __post_init__(self):
        if self.base_steps < 0 or self.aux_steps < 0:
            raise LabError("bad_schedule", "step counts must be >= 0")
        if self.batch_size < 1 or self.learning_rate <= 0:
            raise LabError("bad_schedule", "batch_size >= 1 and learning_rate > 0")


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def _tensor(x, like=None) -> torch.Tensor:
    if isinstance(x, StageLatent):
        x = x.grid
    if isinstance(x, LatentMask):
        x = x.grid
    if not isinstance(x, torch.Tensor):
        x = torch.as_tensor(np.asarray(x))
    if like is not None:
        x = x.to(like.dtype)
    return x


def loss_flow(v_pred, v_e) -> torch.Tensor:
    v_pred = _tensor(v_pred)
    v_e = _tensor(v_e, v_pred)
    if v_pred.shape != v_e.shape:
        raise LabError("shape_mismatch", f"{tuple(v_pred.shape)} vs {tuple(v_e.shape)}")
    return torch.mean((v_pred - v_e) ** 2)


def loss_mask(v_pred, v_s, m_pres) -> torch.Tensor:
    """Mean squared velocity gap over preserved entries; 0 when nothing is preserved."""
    v_pred = _tensor(v_pred)
    v_s = _tensor(v_s, v_pred)
    m = _tensor(m_pres).to(v_pred.dtype)
    if v_pred.shape != v_s.shape:
        raise LabError("shape_mismatch", f"{tuple(v_pred.shape)} vs {tuple(v_s.shape)}")
    if m.dim() == v_pred.dim() - 1:
        m = m[..., None]
    if m.dim() != v_pred.dim() or any(a not in (1, b) for a, b in zip(m.shape, v_pred.shape)):
        raise LabError("shape_mismatch", f"mask {tuple(m.shape)} vs {tuple(v_pred.shape)}")
    m = m.expand(v_pred.shape)
    count = m.sum()
    if float(count) == 0.0:
        return (v_pred * 0.0).sum()
    return torch.sum(m * (v_pred - v_s) ** 2) / count


def make_targets(x_e, x_s, eps, t):
    """z_t = (1 - t) x_e + t eps, v_e = eps - x_e, v_s = eps - x_s."""
    if isinstance(x_e, StageLatent):
        x_e, x_s = x_e.grid, x_s.grid
    if isinstance(x_e, torch.Tensor):
        tt = torch.as_tensor(t, dtype=x_e.dtype)
        if tt.dim() == 1:
            tt = tt.reshape(-1, *[1] * (x_e.dim() - 1))
    else:
        x_e, x_s, eps = (np.asarray(a, dtype=np.float64) for a in (x_e, x_s, eps))
        tt = np.asarray(t, dtype=np.float64)
        if tt.ndim == 1:
            tt = tt.reshape(-1, *[1] * (x_e.ndim - 1))
    return (1 - tt) * x_e + tt * eps, eps - x_e, eps - x_s


def loss_render(x_hat_slat, view, ref_image, t: float, w: LossWeights) -> torch.Tensor:
    """Gated image loss: 0 for t >= 0.5, else lambda_mse * MSE + lambda_ds * feature distance."""
    if isinstance(x_hat_slat, StageLatent):
        if x_hat_slat.stage != "SLAT":
            raise LabError("wrong_stage", x_hat_slat.stage)
        x_hat_slat = torch.as_tensor(x_hat_slat.grid, dtype=torch.float64)
    x_hat_slat = _tensor(x_hat_slat)
    if x_hat_slat.dim() != 4 or x_hat_slat.shape[-1] != 4:
        raise LabError("wrong_stage", f"shape {tuple(x_hat_slat.shape)}")
    if float(t) >= RENDER_GATE:
        return torch.zeros((), dtype=x_hat_slat.dtype)
    view = renderer.get_view(view) if isinstance(view, (int, np.integer)) else view
    img = renderer.render_soft(x_hat_slat, view)
    ref = _tensor(ref_image, img)
    out = w.lambda_mse * torch.mean((img - ref) ** 2)
    if w.lambda_ds:
        out = out + w.lambda_ds * renderer.feature_distance_t(img, ref)
    return out


# ---------------------------------------------------------------------------
# stage data
# ---------------------------------------------------------------------------

@dataclass
class StageData:
    stage: str
    x_e: np.ndarray  # (N, g, g, g, d)
    x_s: np.ndarray
    m_pres: np.ndarray  # (N, g, g, g) bool
    cond: np.ndarray  # (N, 17)
    views: np.ndarray  # (N,)
    refs: np.ndarray | None = None  # (N, H, W, 3) soft renders of the target latent

    def __len__(self) -> int:
        return len(self.x_e)


def reference_image(target_latent: StageLatent, view_index: int) -> np.ndarray:
    with torch.no_grad():
        img = renderer.render_soft(torch.as_tensor(target_latent.grid, dtype=torch.float64),
                                   renderer.get_view(view_index))
    return img.numpy()


def prepare_stage(pairs: list[EditPair], stage: str, refs: list[np.ndarray] | None = None) -> StageData:
    if not pairs:
        raise LabError("empty_dataset")
    x_e = [encode(p.target, stage).grid for p in pairs]
    x_s = [encode(p.source, stage).grid for p in pairs]
    m = [project_mask(p.mask, stage).grid for p in pairs]
    c = [condition_vector(p.condition, p.source, stage) for p in pairs]
    views = np.array([p.condition.view_index for p in pairs])
    if stage == "SLAT" and refs is None:
        refs = [reference_image(StageLatent("SLAT", x), v) for x, v in zip(x_e, views)]
    return StageData(stage, np.stack(x_e), np.stack(x_s), np.stack(m), np.stack(c), views,
                     None if refs is None else np.stack(refs).astype(np.float32))


def generator_data(data: StageData) -> StageData:
    """Targets as a plain conditional-generation set: no source latent, no preservation."""
    zeros = np.zeros_like(data.x_s)
    return StageData(data.stage, data.x_e, zeros, np.zeros_like(data.m_pres), data.cond, data.views, data.refs)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainLog:
    records: list[dict] = field(default_factory=list)

    def add(self, **rec) -> None:
        self.records.append(rec)

    def to_text(self, with_time: bool = False) -> str:
        lines = []
        for r in self.records:
            parts = [f"step={r['step']}", f"phase={r['phase']}"]
            parts += [f"{k}={r[k]:.8g}" for k in ("loss_flow", "loss_mask", "loss_render", "total") if k in r]
            if with_time:
                parts.append(f"wall={r['wall']:.3f}")
            lines.append(" ".join(parts))
        return "\n".join(lines) + "\n"


def batch_at(n: int, batch: int, seed: int, step: int, shape) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-step draws keyed by (seed, step), so any phase can restart from a checkpoint exactly."""
    rng = np.random.default_rng([seed, step])
    idx = rng.choice(n, size=batch, replace=n < batch)
    t = rng.uniform(size=batch)
    eps = rng.standard_normal((batch, *shape)).astype(np.float32)
    return idx, t, eps


def step_losses(model: VelocityModel, data: StageData, idx, t, eps, phase: str, w: LossWeights,
                dtype=torch.float32, condition_drop: np.ndarray | None = None) -> dict[str, torch.Tensor]:
    x_e = torch.as_tensor(data.x_e[idx], dtype=dtype)
    x_s = torch.as_tensor(data.x_s[idx], dtype=dtype)
    c = torch.as_tensor(data.cond[idx], dtype=dtype)
    if condition_drop is not None:
        c = c * torch.as_tensor(~condition_drop, dtype=dtype)[:, None]
    tt = torch.as_tensor(t, dtype=dtype)
    ee = torch.as_tensor(eps, dtype=dtype)
    z_t, v_e, v_s = make_targets(x_e, x_s, ee, tt)
    v = model(z_t, tt, c, x_s)
    out = {"loss_flow": loss_flow(v, v_e)}
    if phase == "B":
        lam = w.mask_weight(data.stage)
        if lam:
            out["loss_mask"] = loss_mask(v, v_s, torch.as_tensor(data.m_pres[idx]))
        if data.stage == "SLAT" and w.lambda_render:
            x_hat = predict_clean(z_t, tt, v)
            terms = [loss_render(x_hat[i], int(data.views[j]), data.refs[j], float(t[i]), w)
                     for i, j in enumerate(idx) if t[i] < RENDER_GATE]
            out["loss_render"] = (torch.stack(terms).sum() / len(idx)) if terms else (v * 0.0).sum()
    total = out["loss_flow"]
    if "loss_mask" in out:
        total = total + w.mask_weight(data.stage) * out["loss_mask"]
    if "loss_render" in out:
        total = total + w.lambda_render * out["loss_render"]
    out["total"] = total
    return out


def new_model(stage: str, seed: int) -> VelocityModel:
    return VelocityModel(stage, seed=seed)


def train_stage(data: StageData, stage: str, cfg: TrainConfig, w: LossWeights,
                model: VelocityModel | None = None, start_step: int = 0, phases: str = "AB",
                freeze_control: bool = False, condition_dropout: float = 0.0,
                log: TrainLog | None = None) -> tuple[VelocityModel, TrainLog]:
    """Phase A (base_steps) minimizes the flow loss; phase B (aux_steps) adds the
    preservation loss and, for SLAT, the gated render loss.

    ``model``/``start_step`` resume a run, e.g. to branch several phase-B variants
    from one phase-A checkpoint.
    """
    if len(data) == 0:
        raise LabError("empty_dataset")
    if data.stage != stage:
        raise LabError("wrong_stage", f"data is {data.stage}, asked for {stage}")
    if stage == "SLAT" and "B" in phases and w.lambda_render and data.refs is None:
        raise LabError("missing_reference", "SLAT phase B needs reference images")
    model = model if model is not None else new_model(stage, cfg.seed)
    log = log if log is not None else TrainLog()
    params = [p for n, p in model.named_parameters()
              if not (freeze_control and n.startswith(("control", "local", "copy")))]
    buf = [torch.zeros_like(p) for p in params] if cfg.momentum else None
    shape = data.x_e.shape[1:]
    schedule = [("A", s) for s in range(cfg.base_steps)] + [("B", cfg.base_steps + s) for s in range(cfg.aux_steps)]
    t0 = time.perf_counter()
    for phase, step in schedule:
        if phase not in phases or step < start_step:
            continue
        idx, t, eps = batch_at(len(data), cfg.batch_size, cfg.seed, step, shape)
        drop = None
        if condition_dropout:
            drop = np.random.default_rng([cfg.seed, step, 1]).uniform(size=len(idx)) < condition_dropout
        losses = step_losses(model, data, idx, t, eps, phase, w, condition_drop=drop)
        for name, val in losses.items():
            if not bool(torch.isfinite(val)):
                raise NumericError("nonfinite_loss", f"step {step} term {name}")
        for p in params:
            p.grad = None
        losses["total"].backward()
        with torch.no_grad():
            for i, p in enumerate(params):
                if p.grad is None:
                    continue
                g = p.grad
                if buf is not None:
                    buf[i].mul_(cfg.momentum).add_(g)
                    g = buf[i]
                p.sub_(cfg.learning_rate * g)
        rec = {"step": step, "phase": phase, "wall": time.perf_counter() - t0}
        rec.update({k: float(v.detach()) for k, v in losses.items()})
        log.add(**rec)
    return model, log


# ---------------------------------------------------------------------------
# gradient check
# ---------------------------------------------------------------------------

def grad_check(loss_fn, params: list[torch.Tensor], n_probes: int, seed: int, h: float = 1e-4) -> float:
    """Max relative error between autograd and central differences on random entries.

    ``loss_fn()`` must rebuild the loss from ``params`` (float64 leaves).
    """
    loss = loss_fn()
    if not bool(torch.isfinite(loss)):
        raise NumericError("nonfinite_loss", "at probe point")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    sizes = np.array([p.numel() for p in params])
    rng = np.random.default_rng(seed)
    flat = rng.choice(int(sizes.sum()), size=min(n_probes, int(sizes.sum())), replace=False)
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    worst = 0.0
    with torch.no_grad():
        for f in flat:
            k = int(np.searchsorted(offsets, f, side="right") - 1)
            j = int(f - offsets[k])
            p = params[k].view(-1)
            orig = p[j].item()
            p[j] = orig + h
            up = float(loss_fn())
            p[j] = orig - h
            down = float(loss_fn())
            p[j] = orig
            num = (up - down) / (2 * h)
            ana = 0.0 if grads[k] is None else float(grads[k].reshape(-1)[j])
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            worst = max(worst, err)
    return worst
