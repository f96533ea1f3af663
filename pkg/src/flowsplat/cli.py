"""Command-line entry point: ``flowsplat {synth,init,train,render,flow,eval}``.

Every command writes only under its output directory, prints one
``key=value`` summary line on success, and exits 0 (success), 1 (usage
error), 2 (numerical failure) or 3 (I/O error).
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
import torch

from . import io as fio
from .canonical import AlignConfig, LabeledCloud
from .errors import AlignmentFailure, CheckpointError, ConfigError, FlowSplatError, NumericalFailure
from .field import FieldConfig
from .flowrender import scene_flow_pipeline
from .geometry import DTYPE, Camera, Intrinsics, Pose
from .harness import generate, preset
from .model import GROUPS, SceneModel
from .optim import DEFAULT_LR, TrainConfig, held_out
from .pipeline import InitConfig, ModelSetup, build_model, dataset, evaluate, initialize, train_model
from .splat import render
from .warploss import LOSS_TERMS, LossWeights

log = logging.getLogger("flowsplat")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


# --------------------------------------------------------------------------- configuration


@dataclass
class Config:
    """Flat run configuration; ``lambda_ff``/``lambda_cf`` left at -1 take the preset values."""

    scene: str = ""  # scene directory
    out: str = ""  # output directory
    steps: int = 7000  # training steps
    seed: int = 0  # model init and pair sampling
    clip_len: int = 25  # frames per alignment clip
    stride: int = 1  # frame gap of training pairs
    preset: str = "simple"  # flow weight regime: simple (5.0, 0.3) or complex (1.0, 0.1)
    lambda_ff: float = -1.0  # full flow weight, -1 = preset
    lambda_cf: float = -1.0  # camera flow weight, -1 = preset
    lambda_mc: float = 1.0
    lambda_cr: float = 0.1
    lambda_mc_cam: float = 1.0
    lambda_cr_cam: float = 0.1
    lambda_dssim: float = 0.2
    lambda_tv: float = 1e-4
    lr_means: float = DEFAULT_LR["gaussian_means"]  # multiplied by the scene diameter
    lr_rotations: float = DEFAULT_LR["gaussian_rotations"]
    lr_scales: float = DEFAULT_LR["gaussian_scales"]
    lr_opacities: float = DEFAULT_LR["gaussian_opacities"]
    lr_colors: float = DEFAULT_LR["gaussian_colors"]
    lr_spatial_planes: float = DEFAULT_LR["spatial_planes"]
    lr_temporal_planes: float = DEFAULT_LR["temporal_planes"]
    lr_static_decoder: float = DEFAULT_LR["static_decoder"]
    lr_dynamic_decoder: float = DEFAULT_LR["dynamic_decoder"]
    warmup_frac: float = 0.1  # coarse phase length as a fraction of steps
    resolution: int = 0  # training width in pixels, 0 = native; must divide the native width
    align_init: str = "procrustes"  # procrustes or identity
    oracle_noise: float = 0.0  # multiplicative depth noise of the point-map oracle
    max_static: int = 800  # static seed cap
    checkpoint_interval: int = 1000  # steps between checkpoints, 0 = final only
    threads: int = 1  # torch intra-op threads

    def weights(self) -> LossWeights:
        over = {k: getattr(self, k) for k in ("lambda_mc", "lambda_cr", "lambda_mc_cam", "lambda_cr_cam",
                                              "lambda_dssim", "lambda_tv")}
        w = LossWeights.preset(self.preset, **over)
        if self.lambda_ff >= 0:
            w.lambda_ff = self.lambda_ff
        if self.lambda_cf >= 0:
            w.lambda_cf = self.lambda_cf
        return w

    def lrs(self) -> dict[str, float]:
        short = {"gaussian_means": "lr_means", "gaussian_rotations": "lr_rotations", "gaussian_scales": "lr_scales",
                 "gaussian_opacities": "lr_opacities", "gaussian_colors": "lr_colors"}
        return {g: getattr(self, short.get(g, "lr_" + g)) for g in GROUPS}

    def validate(self) -> "Config":
        if self.steps < 1:
            raise ConfigError("steps must be positive")
        if self.stride < 1 or self.clip_len < 2 or self.threads < 1 or self.resolution < 0:
            raise ConfigError("stride, threads and resolution must be positive and clip_len at least 2")
        if not 0 <= self.warmup_frac < 1:
            raise ConfigError("warmup_frac must be in [0, 1)")
        if self.align_init not in ("procrustes", "identity"):
            raise ConfigError(f"unknown align_init {self.align_init!r}")
        self.weights()
        return self

    def dump(self, skip: tuple[str, ...] = ()) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self) if f.name not in skip)


def _coerce(kind, text: str, key: str):
    try:
        if kind is int or kind == "int":
            return int(text)
        if kind is float or kind == "float":
            return float(text)
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {text!r}") from e
    return text


def parse_config_text(text: str, base: Config | None = None) -> Config:
    """``key = value`` lines; ``#`` starts a comment; unknown keys are rejected."""
    cfg = dataclasses.replace(base) if base is not None else Config()
    kinds = {f.name: f.type for f in fields(Config)}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in kinds:
            raise ConfigError(f"unknown config key {k!r}")
        setattr(cfg, k, _coerce(kinds[k], v, k))
    return cfg


def load_config(path: str | None, overrides: dict[str, str]) -> Config:
    cfg = Config()
    if path:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        cfg = parse_config_text(text, cfg)
    kinds = {f.name: f.type for f in fields(Config)}
    for k, v in overrides.items():
        if v is not None:
            setattr(cfg, k, _coerce(kinds[k], v, k))
    return cfg.validate()


# --------------------------------------------------------------------------- helpers


def _summary(cmd: str, **kv) -> str:
    def fmt(v):
        if isinstance(v, float):
            return f"{v:.6g}"
        return str(v)

    line = " ".join([cmd, "status=ok"] + [f"{k}={fmt(v)}" for k, v in kv.items()])
    print(line)
    return line


def _outdir(path: str) -> Path:
    if not path:
        raise ConfigError("an output directory is required")
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


def _resize(gt, width: int):
    """Box-downsample images (and nearest-sample masks) of a loaded scene to ``width``."""
    from .harness import Frame

    if width == 0 or width == gt.frames[0].image.shape[1]:
        return gt
    w0 = gt.frames[0].image.shape[1]
    if w0 % width:
        raise ConfigError(f"resolution {width} does not divide the native width {w0}")
    f = w0 // width
    frames = []
    for fr in gt.frames:
        h, w = fr.image.shape[:2]
        if h % f:
            raise ConfigError("native height is not a multiple of the downsampling factor")
        img = fr.image.reshape(h // f, f, w // f, f, 3).mean((1, 3))
        sub = lambda a: a[f // 2 :: f, f // 2 :: f]
        k = fr.camera.intrinsics
        intr = Intrinsics(k.fx / f, k.fy / f, (k.cx + 0.5) / f - 0.5, (k.cy + 0.5) / f - 0.5, w // f, h // f)
        cam = Camera(intr, fr.camera.pose, fr.camera.timestamp)
        frames.append(Frame(img, sub(fr.depth).copy(), sub(fr.mask).copy(), sub(fr.ids).copy(), sub(fr.points).copy(), cam))
    return dataclasses.replace(gt, frames=frames, flows=[], flow_valid=[])


def _cloud_from_ply(path) -> LabeledCloud:
    pts, cols, flag = fio.read_ply(path)
    n = len(pts)
    return LabeledCloud(pts, cols, np.zeros(n, dtype=np.int64), flag, np.zeros((n, 2), dtype=np.int64))


def _layout_text(setup: ModelSetup) -> str:
    c = setup.cfg
    return (f"n_static = {setup.n_static}\nspatial_res = {c.spatial_res}\ntemporal_res = {c.temporal_res}\n"
            f"channels = {c.channels}\nhidden = {c.hidden}\nhidden_layers = {c.hidden_layers}\n")


def _camera_tensor(cams: list[Camera]) -> torch.Tensor:
    return torch.stack([torch.cat([c.pose.matrix().reshape(-1), torch.tensor([c.timestamp], dtype=DTYPE)]) for c in cams])


def _cameras_from_tensor(t: torch.Tensor, k: torch.Tensor) -> list[Camera]:
    intr = Intrinsics(float(k[0]), float(k[1]), float(k[2]), float(k[3]), int(k[4]), int(k[5]))
    out = []
    for row in t:
        m = row[:12].reshape(3, 4)
        out.append(Camera(intr, Pose(m[:, :3], m[:, 3]), float(row[12])))
    return out


# execution settings that do not change the result; kept out of checkpoints so they stay byte-identical
RUNTIME_ONLY = ("threads",)


def make_checkpoint(setup: ModelSetup, params, step: int, cfg: Config, cameras: list[Camera]) -> fio.Checkpoint:
    k = cameras[0].intrinsics
    groups = {g: params[g] for g in params}
    groups["aux.cameras"] = _camera_tensor(cameras)
    groups["aux.intrinsics"] = torch.tensor([float(k.fx), float(k.fy), k.cx, k.cy, k.width, k.height], dtype=DTYPE)
    return fio.Checkpoint(groups, setup.bounds, step, "# layout\n" + _layout_text(setup) + "# config\n" + cfg.dump(RUNTIME_ONLY))


def model_from_checkpoint(ck: fio.Checkpoint) -> tuple[SceneModel, list[Camera]]:
    layout = {}
    for line in ck.config.split("# config")[0].splitlines():
        if "=" in line:
            k, v = (s.strip() for s in line.split("=", 1))
            layout[k] = int(v)
    if "n_static" not in layout:
        raise CheckpointError("checkpoint has no model layout")
    fc = FieldConfig(layout["spatial_res"], layout["temporal_res"], layout["channels"], layout["hidden"],
                     layout["hidden_layers"])
    params = {g: v for g, v in ck.groups.items() if not g.startswith("aux.")}
    cams = _cameras_from_tensor(ck.groups["aux.cameras"], ck.groups["aux.intrinsics"])
    return SceneModel(params, layout["n_static"], fc, ck.bounds), cams


# --------------------------------------------------------------------------- commands


def cmd_synth(spec_file: str, out: str) -> str:
    """Spec file: ``key = value`` with ``preset`` plus scalar scene overrides, or a JSON scene."""
    from .harness import SceneSpec

    text = Path(spec_file).read_text()
    if text.lstrip().startswith("{"):
        spec = SceneSpec.from_dict(json.loads(text))
    else:
        kv = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                if "=" not in line:
                    raise ConfigError(f"bad spec line {line!r}")
                k, v = (s.strip() for s in line.split("=", 1))
                kv[k] = v
        name = kv.pop("preset", "moving-sphere")
        kinds = {"n_frames": int, "width": int, "height": int, "focal": float, "seed": int, "supersample": int}
        unknown = set(kv) - set(kinds)
        if unknown:
            raise ConfigError(f"unknown spec keys {sorted(unknown)}")
        try:
            spec = preset(name, **{k: kinds[k](v) for k, v in kv.items()})
        except KeyError as e:
            raise ConfigError(str(e)) from e
    gt = generate(spec)
    o = _outdir(out)
    fio.save_scene(gt, o)
    return _summary("synth", frames=len(gt.frames), width=spec.width, height=spec.height, out=o)


def cmd_init(scene: str, out: str, cfg: Config) -> str:
    gt = _resize(fio.load_scene(scene), cfg.resolution)
    o = _outdir(out)
    icfg = InitConfig(cfg.clip_len, AlignConfig(init=cfg.align_init), cfg.oracle_noise, cfg.seed, cfg.max_static, cfg.seed)
    init = initialize(gt, icfg)
    zeros = lambda c: np.zeros(len(c))
    fio.write_ply(o / "static.ply", init.static.points, init.static.colors, zeros(init.static))
    fio.write_ply(o / "dynamic.ply", init.dynamic.points, init.dynamic.colors, np.ones(len(init.dynamic)))
    fio.write_poses(o / "poses.txt", init.state.poses)
    from .pipeline import aligned_cameras

    cams = aligned_cameras(init.state, [f.camera.timestamp for f in gt.frames])
    fio.write_cameras(o / "cameras.txt", cams)
    (o / "init_report.txt").write_text("".join(f"{k} = {v}\n" for k, v in init.report.items()))
    r = init.report
    return _summary("init", frames=r["frames"], focal=r["focal"], reference=r["reference_frame"],
                    static=r["static_seed"], dynamic=r["dynamic_seed"], out=o)


def cmd_train(scene: str, init_dir: str, out: str, cfg: Config) -> str:
    gt = _resize(fio.load_scene(scene), cfg.resolution)
    idir = Path(init_dir)
    cams = fio.read_cameras(idir / "cameras.txt")
    if len(cams) != len(gt.frames):
        raise ConfigError("init cameras and scene frames differ in number")
    stat = _cloud_from_ply(idir / "static.ply")
    dyn = _cloud_from_ply(idir / "dynamic.ply")
    o = _outdir(out)
    lrs = cfg.lrs()
    from .canonical import scene_diameter

    lrs["gaussian_means"] = cfg.lr_means * scene_diameter(stat.points)
    setup = build_model(stat, dyn, seed=cfg.seed, lrs=lrs)
    data = dataset([f.image for f in gt.frames], [f.mask for f in gt.frames], cams)
    tcfg = TrainConfig(cfg.steps, cfg.warmup_frac, cfg.seed, cfg.stride, cfg.weights(), cfg.checkpoint_interval)
    (o / "config.txt").write_text(cfg.dump())

    def on_ckpt(step, params, state):
        make_checkpoint(setup, params, step, cfg, cams).save(o / f"ckpt_{step:06d}.rflw")

    try:
        res = train_model(setup, data, tcfg, on_checkpoint=on_ckpt)
    except NumericalFailure as err:
        fio.write_csv(o / "metrics.csv", ("step",) + LOSS_TERMS, getattr(err, "rows", []))
        raise
    make_checkpoint(setup, res.params, cfg.steps, cfg, cams).save(o / "final.rflw")
    fio.write_csv(o / "metrics.csv", ("step",) + LOSS_TERMS, res.rows)
    last = res.rows[-1]
    return _summary("train", steps=cfg.steps, gaussians=setup.model().n_gaussians, final_loss=last[-1],
                    checkpoint=o / "final.rflw")


def cmd_render(checkpoint: str, cameras: str | None, out: str, times: list[float] | None = None) -> str:
    model, train_cams = model_from_checkpoint(fio.Checkpoint.load(checkpoint))
    cams = fio.read_cameras(cameras) if cameras else train_cams
    if times:
        # fixed camera positions swept over novel times
        cams = [dataclasses.replace(c, timestamp=float(t)) for c in cams for t in times]
    o = _outdir(out)
    with torch.no_grad():
        static = model.static_gaussians()
        for i, c in enumerate(cams):
            r = render(model.gaussians_at(c.timestamp, static), c)
            fio.write_png(o / f"color_{i:04d}.png", r.color)
            fio.write_pfm(o / f"depth_{i:04d}.pfm", torch.where(r.depth_valid, r.depth, torch.zeros_like(r.depth)))
    return _summary("render", views=len(cams), out=o)


def cmd_flow(checkpoint: str, a: int, b: int, out: str, cameras: str | None = None) -> str:
    model, cams = model_from_checkpoint(fio.Checkpoint.load(checkpoint))
    if cameras:
        cams = fio.read_cameras(cameras)
    n = len(cams)
    if not (0 <= a < n and 0 <= b < n):
        raise ConfigError(f"frame indices must be in [0, {n})")
    o = _outdir(out)
    with torch.no_grad():
        f_full, f_cam, _ = scene_flow_pipeline(model, cams[a], cams[b])
    mx = {}
    for name, fl in (("full", f_full), ("cam", f_cam)):
        fio.write_flo(o / f"F_{name}.flo", fl.flow, fl.valid)
        rgb, top = fio.flow_to_color(fl.flow, fl.valid)
        fio.write_png(o / f"F_{name}.png", rgb)
        mx[name] = top
    return _summary("flow", pair=f"{a}-{b}", max_full=mx["full"], max_cam=mx["cam"], out=o)


def cmd_eval(checkpoint: str, scene: str, out: str | None = None) -> str:
    model, cams = model_from_checkpoint(fio.Checkpoint.load(checkpoint))
    gt = fio.load_scene(scene)
    if len(gt.frames) != len(cams):
        raise ConfigError("checkpoint cameras and scene frames differ in number")
    if gt.frames[0].image.shape[1] != cams[0].width:
        gt = _resize(gt, cams[0].width)
    images = [f.image for f in gt.frames]
    masks = [f.mask for f in gt.frames]
    test = held_out(len(cams))
    flows = gt.flows if len(gt.flows) == len(cams) - 1 else None
    ev = evaluate(model, images, masks, cams, test, flows, gt.flow_valid if flows else None)
    table = ["frame  psnr     ssim"] + [f"{i:5d}  {p:7.3f}  {s:.4f}" for i, p, s in ev.per_frame]
    print("\n".join(table))
    if out:
        o = _outdir(out)
        fio.write_csv(o / "eval.csv", ("frame", "psnr", "ssim"), ev.per_frame)
    return _summary("eval", **ev.row())


# --------------------------------------------------------------------------- entry point


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowsplat", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True)
    s = sub.add_parser("synth", help="generate a harness scene")
    s.add_argument("spec")
    s.add_argument("out")
    for name, extra in (("init", ["scene", "out"]), ("train", ["scene", "init", "out"])):
        q = sub.add_parser(name)
        for a in extra:
            q.add_argument(a)
        q.add_argument("--config")
        for f in fields(Config):
            if f.name not in ("scene", "out"):
                q.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name)
    r = sub.add_parser("render")
    r.add_argument("checkpoint")
    r.add_argument("out")
    r.add_argument("--cameras")
    r.add_argument("--times", type=float, nargs="+")
    fl = sub.add_parser("flow")
    fl.add_argument("checkpoint")
    fl.add_argument("a", type=int)
    fl.add_argument("b", type=int)
    fl.add_argument("out")
    fl.add_argument("--cameras")
    e = sub.add_parser("eval")
    e.add_argument("checkpoint")
    e.add_argument("scene")
    e.add_argument("--out")
    return p


def run(argv: list[str] | None = None) -> int:
    p = _parser()
    try:
        args = p.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    try:
        if args.cmd in ("init", "train"):
            over = {k[4:]: v for k, v in vars(args).items() if k.startswith("cfg_")}
            cfg = load_config(args.config, over)
            torch.set_num_threads(cfg.threads)
            if args.cmd == "init":
                cmd_init(args.scene, args.out, cfg)
            else:
                cmd_train(args.scene, args.init, args.out, cfg)
        elif args.cmd == "synth":
            cmd_synth(args.spec, args.out)
        elif args.cmd == "render":
            cmd_render(args.checkpoint, args.cameras, args.out, args.times)
        elif args.cmd == "flow":
            cmd_flow(args.checkpoint, args.a, args.b, args.out, args.cameras)
        else:
            cmd_eval(args.checkpoint, args.scene, args.out)
    except (NumericalFailure, AlignmentFailure, FloatingPointError) as e:
        print(f"error: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, CheckpointError) as e:
        print(f"error: i/o: {e}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, FlowSplatError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK


def main() -> None:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    sys.exit(run())


if __name__ == "__main__":
    main()
