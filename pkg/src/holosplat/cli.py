"""Command-line entry point: train, render, eval, make-synthetic."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from holosplat import training as tr
from holosplat.config import ConfigError, RunConfig, load_config, make_config
from holosplat.io import DataError
from holosplat.io.checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from holosplat.io.images import write_depth, write_image
from holosplat.io.ply import export_ply
from holosplat.io.scenes import load_scene, write_report, write_synthetic

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_ORDER = 0, 2, 3, 4
STAGE_FILES = {"init": "init.ckpt", "coarse": "coarse.ckpt", "detail": "detail.ckpt", "joint": "joint.ckpt"}


class _Log:
    def __init__(self, path: Path | None, quiet: bool):
        self.fh = open(path, "a", encoding="utf-8") if path else None
        self.quiet = quiet

    def __call__(self, line: str) -> None:
        if not self.quiet:
            print(line, flush=True)
        if self.fh:
            self.fh.write(line + "\n")
            self.fh.flush()

    def close(self):
        if self.fh:
            self.fh.close()


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else make_config(args.profile)
    over = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = (s.strip() for s in item.split("=", 1))
        over[k] = v
    if over:
        from holosplat.config import parse_config
        text = cfg.to_text()
        lines = [ln for ln in text.splitlines() if ln.split("=")[0].strip() not in over]
        lines += [f"{k} = {v}" for k, v in over.items()]
        cfg = parse_config("\n".join(lines), "--set")
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "downsample", None) is not None:
        cfg = replace(cfg, downsample=args.downsample)
    return cfg.validate()


def _views(bundle, cfg: RunConfig):
    images = bundle.load_images()
    views = [tr.TrainView(c, img, c.name) for c, img in zip(bundle.cameras, images)]
    return tr.split_views(views, cfg.test_every)


def _mean_psnr(rows):
    return float(np.mean([r[0] for r in rows])) if rows else float("nan")


def cmd_train(args) -> int:
    cfg = _config(args)
    bundle = load_scene(args.scene, cfg.downsample)
    if bundle.background is not None:
        cfg = replace(cfg, background=tuple(bundle.background))
    if len(bundle.points) == 0:
        raise DataError(f"{args.scene}: seed point cloud is empty")
    train, test = _views(bundle, cfg)
    if not train:
        raise DataError(f"{args.scene}: no training views after the test split")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")
    log = _Log(out / "train.log", args.quiet)

    stages = ["coarse", "detail", "joint"] if args.stage == "all" else [args.stage]
    if args.resume:
        state = load_checkpoint(args.resume)
    elif stages[0] == "coarse":
        state = tr.init_state(cfg, bundle.points, bundle.colors, [v.cam for v in train])
        state.meta["scene"] = str(Path(args.scene).resolve())
        save_checkpoint(out / STAGE_FILES["init"], state)
    else:
        prev = tr.STAGES[tr.STAGES.index(stages[0]) - 1]
        ck = out / STAGE_FILES[prev]
        if not ck.is_file():
            raise tr.OrderingError(f"stage {stages[0]!r} needs {ck} from the {prev!r} stage")
        state = load_checkpoint(ck)
    state.require(stages[0])
    try:
        for st in stages:
            fn = {"coarse": tr.train_coarse, "detail": tr.train_detail, "joint": tr.train_joint}[st]
            rep = fn(state, train, log=log)
            log(f"stage={st} done=1 seconds={rep.seconds:.1f} skipped={rep.skipped} "
                f"gaussians={rep.n_gaussians} loss_start={rep.smoothed('start'):.6f} "
                f"loss_end={rep.smoothed('end'):.6f}")
            save_checkpoint(out / STAGE_FILES[st], state)
        mode = "all" if state.stage == "coarse" else "mixed"
        metrics = {"stage": state.stage, "gaussians": len(state.coarse),
                   "train_psnr": _mean_psnr(tr.evaluate(state, train, mode)),
                   "test_psnr": _mean_psnr(tr.evaluate(state, test, mode)) if test else None}
        if state.stage != "coarse":
            metrics["test_psnr_coarse"] = _mean_psnr(tr.evaluate(state, test, "coarse")) if test else None
        (out / "metrics.json").write_text(json.dumps(metrics, indent=1), encoding="utf-8")
        export_ply(out / "coarse.ply", state.coarse)
        log("final " + " ".join(f"{k}={v}" for k, v in metrics.items()))
    finally:
        log.close()
    return EXIT_OK


def _scene_for(state, args):
    scene = args.scene or state.meta.get("scene")
    if not scene:
        raise DataError("checkpoint does not record its scene; pass --scene")
    return scene


def cmd_render(args) -> int:
    state = load_checkpoint(args.ckpt)
    bundle = load_scene(_scene_for(state, args), state.cfg.downsample)
    names = [c.name for c in bundle.cameras]
    if args.views in ("train", "test"):
        k = state.cfg.test_every if state.cfg.test_every > 0 else max(4, len(names) // 20)
        idx = [i for i in range(len(names)) if (i % k == 0) == (args.views == "test")]
    else:
        try:
            wanted = [ln.strip() for ln in Path(args.views).read_text(encoding="utf-8").splitlines()
                      if ln.strip()]
        except OSError as e:
            raise DataError(f"cannot read view list {args.views}: {e}") from None
        idx = []
        for w in wanted:
            if w not in names:
                raise DataError(f"unknown view id {w!r}")
            idx.append(names.index(w))
    mode = args.mode
    if state.stage in ("init", "coarse") and mode != "coarse":
        raise tr.OrderingError(f"mode {mode!r} needs a checkpoint from the detail stage or later")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in idx:
        cam = bundle.cameras[i]
        res = tr.render_view(state, cam, mode, with_depth=args.depth)
        stem = Path(cam.name).stem or f"view_{i:03d}"
        write_image(out / f"{stem}.png", res.color)
        if args.depth:
            write_depth(out / f"{stem}_depth.png", res.depth, res.alpha)
    return EXIT_OK


def cmd_eval(args) -> int:
    state = load_checkpoint(args.ckpt)
    bundle = load_scene(args.scene, state.cfg.downsample)
    _, test = _views(bundle, state.cfg)
    if not test:
        raise DataError("no test split defined for this scene")
    mode = args.mode
    if state.stage in ("init", "coarse") and mode != "coarse":
        mode = "all"
    rows = tr.evaluate(state, test, mode)
    write_report(args.out, [(v.name, p, s) for v, (p, s) in zip(test, rows)])
    return EXIT_OK


def cmd_make_synthetic(args) -> int:
    from holosplat.synthetic import make_scene

    scene = make_scene(args.gaussians, args.views, args.size, args.seed)
    write_synthetic(args.out, scene)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="holosplat", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run one or all training stages")
    t.add_argument("--scene", required=True)
    t.add_argument("--config")
    t.add_argument("--profile", default="desk", help="used when --config is not given")
    t.add_argument("--stage", choices=("coarse", "detail", "joint", "all"), default="all")
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.add_argument("--seed", type=int)
    t.add_argument("--downsample", type=int)
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="config override")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render views from a checkpoint")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--views", default="test", help="'test', 'train', or a file of view names")
    r.add_argument("--out", required=True)
    r.add_argument("--mode", choices=("mixed", "coarse", "decoded"), default="mixed")
    r.add_argument("--depth", action="store_true")
    r.add_argument("--scene")
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="PSNR/SSIM report on the test split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--scene", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--mode", choices=("mixed", "coarse", "decoded"), default="mixed")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("make-synthetic", help="write a procedural test scene")
    s.add_argument("--out", required=True)
    s.add_argument("--gaussians", type=int, default=48)
    s.add_argument("--views", type=int, default=16)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_make_synthetic)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except tr.OrderingError as e:
        print(f"ordering error: {e}", file=sys.stderr)
        return EXIT_ORDER
    except (DataError, CheckpointError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
