"""Command-line entry point wiring all pipeline stages.

Workflow order: ``synth`` makes toy scenes/styles with exact flows,
``pretrain`` trains the geometric backbone, ``train-vae`` the style encoder,
``train-style`` the hypernetwork, ``render`` produces (stylized) novel
views, ``flow`` runs the naive estimator, ``eval`` computes consistency
reports.  Each experiment lives in one run directory:
``runs/<name>/{checkpoints,renders,flows,reports,config.echo}``.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import flowwarp, metrics_eval, scene_io, stylizer, trainer
from .errors import StylefieldError, ValidationError


def _parse_overrides(pairs):
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ValidationError(f"override {pair!r} is not key=value")
        k, v = pair.split("=", 1)
        out[k] = v
    return out


def _config(args) -> trainer.TrainConfig:
    overrides = _parse_overrides(getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    cfg = trainer.load_config(getattr(args, "config", None), overrides)
    return cfg


def _run_dir(args) -> Path:
    run = Path(args.run)
    for sub in ("checkpoints", "renders", "flows", "reports"):
        (run / sub).mkdir(parents=True, exist_ok=True)
    return run


def _echo_config(run: Path, cfg: trainer.TrainConfig) -> None:
    (run / "config.echo").write_text(json.dumps(cfg.to_dict(), indent=1))


def _load_scene_dirs(root) -> list:
    root = Path(root)
    dirs = sorted(p for p in root.iterdir() if (p / "cameras.json").exists()) \
        if root.is_dir() else []
    if (Path(root) / "cameras.json").exists():
        dirs = [Path(root)]
    if not dirs:
        raise ValidationError(f"no scene directories under {root}")
    return dirs


def _load_scene_flows(scene_dir: Path):
    bundle = scene_io.load_scene(scene_dir)
    flows = {}
    masks = {}
    flow_dir = scene_dir / "flows"
    if flow_dir.exists():
        for p in sorted(flow_dir.glob("f*_*.flo")):
            j, i = (int(x) for x in p.stem[1:].split("_"))
            flows[(j, i)] = scene_io.read_flo(p, src_view=j, dst_view=i)
            mpath = flow_dir / f"m{j:02d}_{i:02d}.png"
            if mpath.exists():
                masks[(j, i)] = scene_io.VisibilityMask(
                    mask=scene_io.load_png(mpath)[..., 0] > 0.5)
            else:
                masks[(j, i)] = scene_io.VisibilityMask(
                    mask=np.ones(flows[(j, i)].shape, dtype=bool))
    return bundle, flows, masks


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_synth(args):
    cfg = _config(args)
    out = Path(args.out)
    for k in range(args.scenes):
        spec = scene_io.SynthSpec(
            geometry="box" if k % 2 else "plane",
            texture_seed=cfg.seed + k,
            n_views=args.views,
            image_size=cfg.resolution,
            scene_id=f"scene{k:02d}",
        )
        bundle, flows, masks = scene_io.synth_scene(spec)
        scene_dir = out / "scenes" / spec.scene_id
        scene_io.save_scene(bundle, scene_dir)
        flow_dir = scene_dir / "flows"
        flow_dir.mkdir(exist_ok=True)
        for (j, i), fl in flows.items():
            scene_io.write_flo(fl, flow_dir / f"f{j:02d}_{i:02d}.flo")
            scene_io.save_png(
                masks[(j, i)].mask[..., None].repeat(3, axis=2).astype(float),
                flow_dir / f"m{j:02d}_{i:02d}.png")
    styles = scene_io.synth_styles(args.styles, seed=cfg.seed, size=32)
    style_dir = out / "styles"
    style_dir.mkdir(parents=True, exist_ok=True)
    for s in styles:
        scene_io.save_png(s.pixels, style_dir / f"{s.id}.png")
    print(f"wrote {args.scenes} scenes and {args.styles} styles to {out}")


def cmd_pretrain(args):
    cfg = _config(args)
    run = _run_dir(args)
    _echo_config(run, cfg)
    scenes = [scene_io.load_scene(d) for d in _load_scene_dirs(args.scenes)]
    ckpt = run / "checkpoints" / "geo_state.ckpt"
    resume = ckpt if args.resume and ckpt.exists() else None
    backbone, log = trainer.pretrain_geometry(
        scenes, cfg, resume_path=resume, checkpoint_path=ckpt,
        checkpoint_every=args.checkpoint_every)
    backbone.freeze()
    trainer.save_backbone(backbone, run / "checkpoints" / "backbone.ckpt")
    trainer.write_log(log, run / "reports" / "pretrain_log.jsonl")
    print(f"pretrained backbone saved; final loss "
          f"{log[-1]['L_total']:.5f}" if log else "no steps run")


def cmd_train_vae(args):
    cfg = _config(args)
    run = _run_dir(args)
    _echo_config(run, cfg)
    styles = scene_io.load_style_set(args.styles)
    scfg = stylizer.StylizerConfig(d_latent=cfg.d_latent)
    params = stylizer.train_style_vae(styles, epochs=args.epochs, seed=cfg.seed,
                                      cfg=scfg)
    trainer.save_stylevae(params, run / "checkpoints" / "stylevae.ckpt")
    print("style VAE saved")


def cmd_train_style(args):
    cfg = _config(args)
    run = _run_dir(args)
    _echo_config(run, cfg)
    backbone = trainer.load_backbone(run / "checkpoints" / "backbone.ckpt")
    backbone.freeze()
    vae = trainer.load_stylevae(run / "checkpoints" / "stylevae.ckpt")
    vae.freeze()
    scene_data = [_load_scene_flows(d) for d in _load_scene_dirs(args.scenes)]
    styles = scene_io.load_style_set(args.styles)
    ckpt = run / "checkpoints" / "style_state.ckpt"
    resume = ckpt if args.resume and ckpt.exists() else None
    hp, log = trainer.train_stylization(
        scene_data, styles, backbone, vae, cfg, resume_path=resume,
        checkpoint_path=ckpt, checkpoint_every=args.checkpoint_every)
    trainer.save_hypernet(hp, run / "checkpoints" / "hypernet.ckpt")
    trainer.save_bundle(run / "checkpoints" / "bundle.json",
                        "backbone.ckpt", "stylevae.ckpt", "hypernet.ckpt")
    trainer.write_log(log, run / "reports" / "style_log.jsonl")
    print(f"hypernetwork saved; final loss "
          f"{log[-1]['L_total']:.5f}" if log else "no steps run")


def cmd_render(args):
    bundle_path = Path(args.bundle)
    backbone, vae, hp = trainer.load_bundle(bundle_path)
    backbone.freeze()
    vae.freeze()
    scene = scene_io.load_scene(args.scene)
    view = args.view
    cam = scene.cameras[view]
    if args.style == "none":
        image = backbone.render_view(scene, cam, exclude_view=view)
    else:
        style = scene_io.StyleImage(pixels=scene_io.load_png(args.style),
                                    id=Path(args.style).stem)
        image = stylizer.stylize_render(scene, cam, style, backbone, vae, hp,
                                        exclude_view=view)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    scene_io.save_png(image.detach().numpy(), out)
    print(f"wrote {out}")


def cmd_flow(args):
    a = scene_io.load_png(args.a)
    b = scene_io.load_png(args.b)
    flow = flowwarp.estimate_flow_naive(a, b, block=args.block, radius=args.radius)
    scene_io.write_flo(flow, args.out)
    print(f"wrote {args.out}")


def cmd_eval(args):
    cfg = _config(args)
    metrics_eval.check_flow_sources(cfg.train_flow_source, cfg.eval_flow_source)
    offsets = {
        "1": (metrics_eval.SHORT_OFFSET,),
        "7": (metrics_eval.LONG_OFFSET,),
        "both": (metrics_eval.SHORT_OFFSET, metrics_eval.LONG_OFFSET),
    }[args.offset]
    rows = metrics_eval.eval_report(args.run, offsets=offsets)
    for row in rows:
        print(f"{row['sequence']} offset={row['offset']} rmse={row['rmse']:.6f}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stylefield")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, run=True):
        sp.add_argument("--config", default=None, help="JSON config file")
        sp.add_argument("--set", nargs="*", metavar="KEY=VALUE",
                        help="config overrides")
        sp.add_argument("--seed", type=int, default=None)
        if run:
            sp.add_argument("--run", required=True, help="run directory")

    sp = sub.add_parser("synth", help="generate toy scenes and styles")
    common(sp, run=False)
    sp.add_argument("--out", required=True)
    sp.add_argument("--scenes", type=int, default=4)
    sp.add_argument("--styles", type=int, default=10)
    sp.add_argument("--views", type=int, default=8)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("pretrain", help="geometry pretraining")
    common(sp)
    sp.add_argument("--scenes", required=True)
    sp.add_argument("--resume", action="store_true")
    sp.add_argument("--checkpoint-every", type=int, default=None)
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("train-vae", help="style VAE training")
    common(sp)
    sp.add_argument("--styles", required=True)
    sp.add_argument("--epochs", type=int, default=200)
    sp.set_defaults(func=cmd_train_vae)

    sp = sub.add_parser("train-style", help="hypernetwork stylization training")
    common(sp)
    sp.add_argument("--scenes", required=True)
    sp.add_argument("--styles", required=True)
    sp.add_argument("--resume", action="store_true")
    sp.add_argument("--checkpoint-every", type=int, default=None)
    sp.set_defaults(func=cmd_train_style)

    sp = sub.add_parser("render", help="render a (stylized) novel view")
    sp.add_argument("--scene", required=True)
    sp.add_argument("--bundle", required=True)
    sp.add_argument("--style", required=True,
                    help="style image path, or 'none' for the plain view")
    sp.add_argument("--view", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_render)

    sp = sub.add_parser("flow", help="naive block-matching flow between two images")
    sp.add_argument("--a", required=True)
    sp.add_argument("--b", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--block", type=int, default=8)
    sp.add_argument("--radius", type=int, default=4)
    sp.set_defaults(func=cmd_flow)

    sp = sub.add_parser("eval", help="consistency report over a run directory")
    common(sp)
    sp.add_argument("--offset", choices=["1", "7", "both"], default="both")
    sp.set_defaults(func=cmd_eval)

    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
    except StylefieldError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
