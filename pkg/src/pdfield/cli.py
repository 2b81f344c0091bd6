"""Command line entry point: ``pdfield <subcommand> ...``.

Failures print a single ``error: <Type>: <message>`` line to stderr and exit
with status 1.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import pipeline as P
from .geometry import load_ply
from .scene import load_scene


def _common(p: argparse.ArgumentParser, scene: bool = True) -> None:
    p.add_argument("--config", type=Path, help="INI file overriding the built-in defaults")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", type=Path, required=True, help="output / run directory")
    if scene:
        p.add_argument("--scene", type=Path, required=True, help="scene directory (cameras.json, images, prior.ply)")


def _modes(value: str | None) -> tuple[str, ...]:
    return P.MODES if value in (None, "all") else (value,)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="pdfield", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="render a synthetic scene with analytic and corrupted clouds")
    _common(p, scene=False)
    p.add_argument("--preset", help="scene preset (overrides [scene] preset)")

    p = sub.add_parser("prepare-pairs", help="write nested-downsample training pairs of a cloud")
    _common(p, scene=False)
    p.add_argument("--input", type=Path, required=True, help="source PLY")
    p.add_argument("--count", type=int, default=8)

    p = sub.add_parser("train-diffusion", help="stage 1: train the denoiser and write dense.ply")
    _common(p)

    p = sub.add_parser("upsample", help="densify a PLY with a trained denoiser")
    _common(p, scene=False)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--input", type=Path, required=True)
    p.add_argument("--factor", type=int, help="defaults to [diffusion] upsample_factor")

    ablation = dict(choices=P.MODES + ("all",), help="ablation mode ('none' is the full model)")
    p = sub.add_parser("train-renderer", help="stage 2: fit the radiance field")
    _common(p)
    p.add_argument("--ablation", default="none", **ablation)

    p = sub.add_parser("render", help="render views with a trained field")
    _common(p)
    p.add_argument("--ablation", default="none", **ablation)
    p.add_argument("--views", type=int, nargs="*", help="view indices (default: test views)")

    p = sub.add_parser("eval", help="PSNR/SSIM of every mode on the test views")
    _common(p)
    p.add_argument("--ablation", default="all", **ablation)

    p = sub.add_parser("bench", help="retained fraction and throughput with/without pruning")
    _common(p)
    p.add_argument("--rays", type=int, default=1024)
    return ap


def run(args: argparse.Namespace) -> None:
    cfg = P.load_config(args.config, args.seed)
    cmd = args.command
    if cmd == "gen-scene":
        if args.preset:
            cfg.scene.preset = args.preset
        root = P.make_scene(cfg, args.out)
        print(f"scene\t{root}")
    elif cmd == "prepare-pairs":
        dirs = P.prepare_pairs(load_ply(args.input), args.count, args.out, cfg.seed,
                               cfg.diffusion.retention_low, cfg.diffusion.retention_high)
        print(f"pairs\t{len(dirs)}\t{args.out}")
    elif cmd == "upsample":
        dense = P.upsample_file(args.checkpoint, args.input, args.out,
                                args.factor or cfg.diffusion.upsample_factor, cfg.seed,
                                cfg.diffusion.chunk_size or None)
        print(f"points\t{len(dense)}\t{args.out}")
    else:
        scene = load_scene(args.scene)
        if cmd == "train-diffusion":
            res = P.run_stage1(scene, cfg, args.out)
            print(f"dense\t{len(res.dense)}\t{args.out / 'dense.ply'}")
        elif cmd == "train-renderer":
            for mode in _modes(args.ablation):
                res = P.run_stage2(scene, cfg, args.out, mode)
                print(f"field\t{mode}\t{res.losses[-1] if res.losses else float('nan'):.6g}")
        elif cmd == "render":
            for mode in _modes(args.ablation):
                imgs = P.render_views(scene, args.out, mode, args.views)
                print(f"rendered\t{mode}\t{len(imgs)}")
        elif cmd == "eval":
            res = P.evaluate(scene, args.out, _modes(args.ablation))
            print("mode,mean_psnr,mean_ssim")
            for mode, s in res.summary.items():
                print(f"{mode},{s['psnr']:.4f},{s['ssim']:.4f}")
            print(f"mean-color-baseline,{res.baseline_psnr:.4f},")
        elif cmd == "bench":
            b = P.bench(scene, cfg, args.out, n_rays=args.rays)
            print("radius,retained_fraction,queries_per_s,rays_per_s_pruned,rays_per_s_unpruned,speedup")
            print(f"{b.radius:.6g},{b.retained_fraction:.4f},{b.queries_per_s:.0f},"
                  f"{b.rays_per_s_pruned:.1f},{b.rays_per_s_unpruned:.1f},{b.speedup:.2f}")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run(args)
    except Exception as err:  # noqa: BLE001 - every failure becomes one parsable line
        msg = " ".join(str(err).split())
        print(f"error: {type(err).__name__}: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
