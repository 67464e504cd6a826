"""Command-line entry point: gen | train | edit | eval | ablate."""

from __future__ import annotations

import argparse
import copy
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import renderer
from .baseline_editor import edit_by_inpainting
from .edit_engine import (EDIT_TYPES, SHAPE_TYPES, build_dataset, condition_from_text, read_manifest, read_pair,
                          validate_condition, write_manifest, write_pair)
from .errors import ConfigError, DataError, LabError
from .flow_core import VelocityModel, condition_vector, load_checkpoint, sample, save_checkpoint
from .latent_codec import decode_with_reference, encode, unchanged_cells
from .metrics import METRIC_FIELDS, run_benchmark, table_lines, table_text
from .scene_gen import read_asset, write_asset
from .training import (LossWeights, StageData, TrainConfig, TrainLog, generator_data, prepare_stage,
                       reference_image, train_stage)

OUT_ENV = "PARTFLOW_LAB_OUT"
SS_ACTIVE = -0.9  # an SS cell counts as occupied above this value (about 3 of its 64 voxels)
VARIANTS = ("full", "no-render", "no-mask")

DEFAULTS: dict[str, str] = {
    "data.train_pairs": "600",
    "data.test_pairs": "60",
    "data.types": ",".join(EDIT_TYPES),
    "train.base_steps": "2000",
    "train.aux_steps": "250",
    "train.batch_size": "16",
    "train.lr_ss": "0.01",
    "train.lr_slat": "0.05",
    "train.momentum": "0",
    "loss.lambda_mask_ss": "1.0",
    "loss.lambda_mask_slat": "1.0",
    "loss.lambda_mse": "1.0",
    "loss.lambda_ds": "0.5",
    "loss.lambda_render": "0.1",
    "gen.base_steps": "2000",
    "gen.lr": "0.1",
    "gen.condition_dropout": "0.1",
    "edit.steps": "10",
    "eval.points": "4096",
    "eval.baseline_steps": "50",
    "ablate.seeds": "0,1,2",
}


# ---------------------------------------------------------------------------
# config
# ---------------------------------------------------------------------------

class Config(dict):
    def int(self, key: str) -> int:
        return _parse(self, key, int)

    def float(self, key: str) -> float:
        return _parse(self, key, float)

    def list(self, key: str) -> list[str]:
        return [x.strip() for x in self[key].split(",") if x.strip()]


def _parse(cfg: Config, key: str, kind):
    try:
        return kind(cfg[key])
    except ValueError as exc:
        raise ConfigError("bad_value", f"{key}: {cfg[key]!r}") from exc


def parse_config_text(text: str) -> dict[str, str]:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition(":")
        if not sep:
            raise ConfigError("bad_config_line", f"line {n}: {line!r}")
        out[key.strip()] = value.strip()
    return out


def load_config(path=None, overrides: dict[str, str] | None = None) -> Config:
    cfg = Config(DEFAULTS)
    supplied = {}
    if path is not None:
        try:
            supplied.update(parse_config_text(Path(path).read_text(encoding="utf-8")))
        except FileNotFoundError as exc:
            raise ConfigError("missing_config", str(path)) from exc
    supplied.update(overrides or {})
    unknown = sorted(set(supplied) - set(DEFAULTS))
    if unknown:
        raise ConfigError("unknown_key", ", ".join(unknown))
    cfg.update(supplied)
    types = cfg.list("data.types")
    if not types or set(types) - set(EDIT_TYPES):
        raise ConfigError("bad_value", f"data.types: {cfg['data.types']!r}")
    return cfg


def loss_weights(cfg: Config) -> LossWeights:
    return LossWeights(cfg.float("loss.lambda_mask_ss"), cfg.float("loss.lambda_mask_slat"),
                       cfg.float("loss.lambda_mse"), cfg.float("loss.lambda_ds"), cfg.float("loss.lambda_render"))


def train_config(cfg: Config, stage: str, seed: int) -> TrainConfig:
    lr = cfg.float("train.lr_ss" if stage == "SS" else "train.lr_slat")
    return TrainConfig(cfg.int("train.base_steps"), cfg.int("train.aux_steps"), cfg.int("train.batch_size"),
                       lr, seed, stage, cfg.float("train.momentum"))


# ---------------------------------------------------------------------------
# dataset on disk
# ---------------------------------------------------------------------------

def data_dirs(out: Path) -> tuple[Path, Path]:
    return out / "data" / "train", out / "data" / "test"


def split_seeds(seed: int) -> tuple[int, int]:
    return 2 * seed, 2 * seed + 1


def write_split(pairs, manifest: list[dict], split: Path) -> None:
    """Pair directories, each with the soft reference render of its target, plus the manifest."""
    split.mkdir(parents=True, exist_ok=True)
    for pair in pairs:
        d = write_pair(pair, split)
        ref = reference_image(encode(pair.target, "SLAT"), pair.condition.view_index)
        renderer.write_ppm(d / "reference.ppm", ref)
    write_manifest(manifest, split / "manifest.jsonl")


def cmd_gen(cfg: Config, out: Path, seed: int, jobs: int = 1) -> None:
    types = cfg.list("data.types")
    mix = {t: 1.0 / len(types) for t in types}
    for split, n, split_seed in zip(data_dirs(out), (cfg.int("data.train_pairs"), cfg.int("data.test_pairs")),
                                    split_seeds(seed)):
        if n <= 0:
            continue
        pairs, manifest = build_dataset(n, mix, split_seed, jobs=jobs)
        write_split(pairs, manifest, split)


def load_split(split: Path):
    mpath = split / "manifest.jsonl"
    if not mpath.exists():
        raise DataError("missing_dataset", str(mpath))
    records = read_manifest(mpath)
    pairs = [read_pair(split / r["pair_id"]) for r in records]
    return pairs


def load_refs(split: Path, pairs) -> list[np.ndarray]:
    return [renderer.read_ppm(split / p.pair_id / "reference.ppm") for p in pairs]


def stage_data(split: Path) -> dict[str, StageData]:
    pairs = load_split(split)
    return {"SS": prepare_stage(pairs, "SS"), "SLAT": prepare_stage(pairs, "SLAT", load_refs(split, pairs))}


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def _write_log(log: TrainLog, root: Path, name: str) -> None:
    """Loss curve (deterministic) and the same records with wall-clock times, kept apart."""
    root.mkdir(parents=True, exist_ok=True)
    (root / f"{name}_loss.txt").write_text(log.to_text(), encoding="utf-8")
    (root / f"{name}_wall.txt").write_text(log.to_text(with_time=True), encoding="utf-8")


def train_variants(data: dict[str, StageData], cfg: Config, seed: int, variants=VARIANTS):
    """Train the requested variants for one seed, sharing every phase-A run.

    Returns {variant: (ss_model, slat_model, {stage: log})}.
    """
    w_full = loss_weights(cfg)
    weights = {"full": w_full,
               "no-render": replace(w_full, lambda_render=0.0),
               "no-mask": replace(w_full, lambda_mask_ss=0.0, lambda_mask_slat=0.0)}
    out = {v: [None, None, {}] for v in variants}
    for stage_i, stage in enumerate(("SS", "SLAT")):
        tc = train_config(cfg, stage, seed)
        base, base_log = train_stage(data[stage], stage, tc, w_full, phases="A")
        cache = {}
        for v in variants:
            w = weights[v]
            # without a render term the SS objective is the same for full and no-render
            key = (w.mask_weight(stage), w.lambda_render if stage == "SLAT" else 0.0)
            if key not in cache:
                log = TrainLog(list(base_log.records))
                model, log = train_stage(data[stage], stage, tc, w, model=copy.deepcopy(base),
                                         start_step=tc.base_steps, phases="B", log=log)
                cache[key] = (model, log)
            out[v][stage_i] = cache[key][0]
            out[v][2][stage] = cache[key][1]
    return {v: tuple(x) for v, x in out.items()}


def train_generator(data: StageData, cfg: Config, seed: int) -> tuple[VelocityModel, TrainLog]:
    tc = TrainConfig(cfg.int("gen.base_steps"), 0, cfg.int("train.batch_size"), cfg.float("gen.lr"), seed, "SLAT")
    model = VelocityModel("SLAT", seed=seed, backbone_only=True)
    return train_stage(generator_data(data), "SLAT", tc, loss_weights(cfg), model=model, phases="A",
                       condition_dropout=cfg.float("gen.condition_dropout"))


def save_models(ss: VelocityModel, slat: VelocityModel, logs: dict, root: Path, cfg: Config, seed: int) -> None:
    root.mkdir(parents=True, exist_ok=True)
    meta = {"steps": cfg.int("train.base_steps") + cfg.int("train.aux_steps"), "train_seed": seed}
    save_checkpoint(ss, root / "ss.ckpt", meta)
    save_checkpoint(slat, root / "slat.ckpt", meta)
    for stage, log in logs.items():
        _write_log(log, root, stage.lower())


def cmd_train(cfg: Config, out: Path, seed: int) -> None:
    train_split, _ = data_dirs(out)
    data = stage_data(train_split)
    ss, slat, logs = train_variants(data, cfg, seed, variants=("full",))["full"]
    save_models(ss, slat, logs, out / "models", cfg, seed)
    gen, glog = train_generator(data["SLAT"], cfg, seed)
    save_checkpoint(gen, out / "models" / "gen.ckpt", {"steps": cfg.int("gen.base_steps"), "train_seed": seed})
    _write_log(glog, out / "models", "gen")


# ---------------------------------------------------------------------------
# editing
# ---------------------------------------------------------------------------

def partflow_edit(ss_model: VelocityModel, slat_model: VelocityModel, source, cond, steps: int = 10,
                  seed: int = 0):
    """Two-stage mask-free edit: the SS sample fixes coarse structure, the SLAT
    sample supplies occupancy and color, both conditioned on (c, source latent)."""
    z_ss = encode(source, "SS")
    ss = sample(ss_model, condition_vector(cond, source, "SS"), z_ss, steps, seed)
    same = unchanged_cells(ss, source)
    structure = np.where(same, z_ss.grid[..., 0] > -1.0, ss.grid[..., 0] > SS_ACTIVE)
    slat = sample(slat_model, condition_vector(cond, source, "SLAT"), encode(source, "SLAT"), steps, seed + 1)
    return decode_with_reference(slat, source, keep=structure)


def load_partflow(ckpt_dir: Path) -> tuple[VelocityModel, VelocityModel]:
    ss, _ = load_checkpoint(ckpt_dir / "ss.ckpt")
    slat, _ = load_checkpoint(ckpt_dir / "slat.ckpt")
    return ss, slat


def cmd_edit(ckpt_dir: Path, source_file: Path, condition_file: Path, out_file: Path, steps: int,
             seed: int) -> None:
    source = read_asset(source_file)
    try:
        cond = condition_from_text(Path(condition_file).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise DataError("missing_condition", str(condition_file)) from exc
    try:
        validate_condition(source, cond)
    except LabError as exc:
        raise DataError(exc.code, f"{condition_file}: {exc.detail}") from exc
    ss, slat = load_partflow(ckpt_dir)
    result = partflow_edit(ss, slat, source, cond, steps, seed)
    out_file.parent.mkdir(parents=True, exist_ok=True)
    write_asset(result, out_file)
    for view in renderer.VIEWS:
        renderer.write_ppm(out_file.with_name(f"{out_file.stem}_view{view.view_id}.ppm"),
                           renderer.render_hard(result, view))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def make_editor(kind: str, ckpt_dir: Path | None, cfg: Config, seed: int):
    if kind == "identity":
        return lambda source, cond: source.copy()
    if kind == "oracle":
        def oracle(pair):
            return pair.target
        oracle.takes_pair = True
        return oracle
    if kind == "partflow":
        ss, slat = load_partflow(ckpt_dir)
        steps = cfg.int("edit.steps")
        return lambda source, cond: partflow_edit(ss, slat, source, cond, steps, seed)
    if kind == "baseline":
        gen, _ = load_checkpoint(ckpt_dir / "gen.ckpt")
        steps = cfg.int("eval.baseline_steps")

        def baseline(pair):
            return edit_by_inpainting(gen, pair.source, pair.condition, pair.mask, steps, seed)
        baseline.takes_pair = True
        return baseline
    raise ConfigError("unknown_editor", kind)


def write_tables(result: dict, root: Path, title: str) -> None:
    root.mkdir(parents=True, exist_ok=True)
    (root / "table.jsonl").write_text(table_lines(result), encoding="utf-8")
    (root / "table.txt").write_text(table_text(result, title), encoding="utf-8")


def cmd_eval(cfg: Config, out: Path, editor: str, seed: int, ckpt_dir: Path | None = None,
             test_dir: Path | None = None) -> dict:
    test_dir = test_dir or data_dirs(out)[1]
    pairs = load_split(test_dir)
    ed = make_editor(editor, ckpt_dir or out / "models", cfg, seed)
    result = run_benchmark(ed, pairs, cfg.int("eval.points"), seed)
    write_tables(result, out / "eval" / editor, f"editor: {editor}")
    return result


# ---------------------------------------------------------------------------
# ablation
# ---------------------------------------------------------------------------

def ablation_table(per_seed: dict[int, dict[str, dict]]) -> tuple[str, str]:
    seeds = sorted(per_seed)
    rows = []
    for v in VARIANTS:
        vals = {k: float(np.mean([per_seed[s][v][k] for s in seeds])) for k in METRIC_FIELDS}
        rows.append({"method": v, "seeds": seeds, **vals})
    lines = [json.dumps(r, sort_keys=True) for r in rows]
    for s in seeds:
        for v in VARIANTS:
            lines.append(json.dumps({"method": v, "seed": s, **per_seed[s][v]}, sort_keys=True))
    header = ["method", *METRIC_FIELDS]
    body = [[r["method"], *(f"{r[k]:.4f}" for k in METRIC_FIELDS)] for r in rows]
    widths = [max(len(x[i]) for x in [header, *body]) for i in range(len(header))]
    text = [f"# shape split, mean over seeds {','.join(str(s) for s in seeds)}",
            "# feat_dist stands in for the learned perceptual distance column (lower is better)"]
    text += ["  ".join(c.rjust(w) for c, w in zip(r, widths)) for r in [header, *body]]
    return "\n".join(lines) + "\n", "\n".join(text) + "\n"


def cmd_ablate(cfg: Config, out: Path, seeds: list[int] | None = None) -> dict:
    seeds = seeds if seeds is not None else [int(s) for s in cfg.list("ablate.seeds")]
    train_split, test_split = data_dirs(out)
    data = stage_data(train_split)
    test_pairs = [p for p in load_split(test_split) if p.condition.edit_type in SHAPE_TYPES]
    per_seed: dict[int, dict[str, dict]] = {}
    steps = cfg.int("edit.steps")
    for s in seeds:
        per_seed[s] = {}
        models = train_variants(data, cfg, s)
        for v, (ss, slat, logs) in models.items():
            root = out / "ablate" / f"seed{s}" / v
            save_models(ss, slat, logs, root, cfg, s)
            result = run_benchmark(lambda src, c: partflow_edit(ss, slat, src, c, steps, s), test_pairs,
                                   cfg.int("eval.points"), s)
            write_tables(result, root, f"variant: {v}, seed {s}")
            per_seed[s][v] = {k: result["aggregate"]["shape"][k] for k in METRIC_FIELDS}
    lines, text = ablation_table(per_seed)
    (out / "ablate").mkdir(parents=True, exist_ok=True)
    (out / "ablate" / "ablation.jsonl").write_text(lines, encoding="utf-8")
    (out / "ablate" / "ablation.txt").write_text(text, encoding="utf-8")
    return per_seed


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key: value config file")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--jobs", type=int, default=os.cpu_count() or 1)
    common.add_argument("--out", type=Path, help=f"output root (default ${OUT_ENV} or ./partflow_out)")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")

    parser = argparse.ArgumentParser(prog="partflow-lab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    gen = sub.add_parser("gen", parents=[common], help="generate train/test edit pairs")
    gen.add_argument("--pairs", type=int, help="number of training pairs")
    gen.add_argument("--test-pairs", type=int, help="number of test pairs")
    gen.add_argument("--types", help="comma-separated edit types (uniform mix)")
    sub.add_parser("train", parents=[common], help="train both stages and the baseline generator")
    edit = sub.add_parser("edit", parents=[common], help="edit one asset without any mask")
    edit.add_argument("--checkpoints", type=Path, help="directory holding ss.ckpt and slat.ckpt")
    edit.add_argument("--source", type=Path, required=True)
    edit.add_argument("--condition", type=Path, required=True)
    edit.add_argument("--output", type=Path, required=True)
    ev = sub.add_parser("eval", parents=[common], help="benchmark an editor on the test split")
    ev.add_argument("--editor", choices=("partflow", "baseline", "identity", "oracle"), default="partflow")
    ev.add_argument("--checkpoints", type=Path)
    ev.add_argument("--test", type=Path, help="test split directory")
    sub.add_parser("ablate", parents=[common], help="full / no-render / no-mask comparison over seeds")
    return parser


def _overrides(args) -> dict[str, str]:
    out = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError("bad_override", item)
        out[key.strip()] = value.strip()
    if args.command == "gen":
        if args.pairs is not None:
            out["data.train_pairs"] = str(args.pairs)
        if args.test_pairs is not None:
            out["data.test_pairs"] = str(args.test_pairs)
        if args.types:
            out["data.types"] = args.types
    return out


def run(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    out = args.out or Path(os.environ.get(OUT_ENV, "partflow_out"))
    cfg = load_config(args.config, _overrides(args))
    torch.use_deterministic_algorithms(True)
    t0 = time.perf_counter()
    if args.command == "gen":
        cmd_gen(cfg, out, args.seed, args.jobs)
    elif args.command == "train":
        cmd_train(cfg, out, args.seed)
    elif args.command == "edit":
        cmd_edit(args.checkpoints or out / "models", args.source, args.condition, args.output,
                 cfg.int("edit.steps"), args.seed)
    elif args.command == "eval":
        result = cmd_eval(cfg, out, args.editor, args.seed, args.checkpoints, args.test)
        sys.stdout.write(table_text(result, f"editor: {args.editor}"))
    elif args.command == "ablate":
        cmd_ablate(cfg, out)
        sys.stdout.write((out / "ablate" / "ablation.txt").read_text(encoding="utf-8"))
    print(f"{args.command} done in {time.perf_counter() - t0:.1f}s", file=sys.stderr)
    return 0


def main(argv: list[str] | None = None) -> int:
    try:
        return run(argv)
    except LabError as exc:
        print(f"error [{exc.code}]: {exc.detail}", file=sys.stderr)
        return exc.exit_code if exc.exit_code in (2, 3, 4) else 3
    except (FileNotFoundError, IsADirectoryError) as exc:
        print(f"error [missing_file]: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
