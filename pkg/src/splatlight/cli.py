"""Command-line renderer.

Renders a scene file over N frames, optionally emitting the four-layer
lighting decomposition, running the estimator oracle report, or serving the
interactive HTTP control plane.  ``bundled:micro`` and ``bundled:desk``
resolve to the packaged demo scenes.
"""

import argparse
import os
import sys

import numpy as np

from .imagefiles import write_images, write_pfm, write_ppm
from .pipeline import FrameState, RenderConfig, render_frame, tonemap
from .sceneio import SceneDescription, SceneError, load_scene

ASSET_DIR = os.path.join(os.path.dirname(__file__), "assets")
BUNDLED = {
    "bundled:micro": os.path.join(ASSET_DIR, "micro_scene.json"),
    "bundled:desk": os.path.join(ASSET_DIR, "desk_scene.json"),
}


def build_parser():
    p = argparse.ArgumentParser(
        prog="splatlight",
        description="Global-illumination renderer for Gaussian-splat and mesh scenes.",
    )
    p.add_argument("scene", help="scene file path, or bundled:micro / bundled:desk")
    p.add_argument("--out", default=None, help="output file prefix")
    p.add_argument("--frames", type=int, default=None, help="frame count")
    p.add_argument("--seed", type=int, default=None, help="master random seed")
    p.add_argument("--size", default=None, metavar="WxH",
                   help="resolution override, e.g. 256x256")
    p.add_argument("--no-direct", action="store_true", help="disable direct lighting")
    p.add_argument("--no-indirect", action="store_true",
                   help="disable indirect diffuse lighting")
    p.add_argument("--no-glossy", action="store_true", help="disable glossy pass")
    p.add_argument("--no-emission", action="store_true", help="disable emission")
    p.add_argument("--decompose", action="store_true",
                   help="emit the four lighting layers alongside the composite")
    p.add_argument("--oracle", action="store_true",
                   help="run the estimator verification suite and exit")
    p.add_argument("--bias-scale", type=float, default=None,
                   help="stochastic tracing bias scale in (0, 1]")
    p.add_argument("--save-all", action="store_true",
                   help="write every frame instead of only the last")
    p.add_argument("--serve", default=None, metavar="HOST:PORT",
                   help="start the interactive HTTP service")
    p.add_argument("--converge-frames", type=int, default=None,
                   help="frames accumulated for converged service requests")
    return p


def resolve_scene_path(arg):
    if arg in BUNDLED:
        return BUNDLED[arg]
    return arg


def load_described_scene(path) -> SceneDescription:
    full = resolve_scene_path(path)
    if not os.path.exists(full):
        raise SceneError(f"scene file not found: {path}")
    return load_scene(full)


def config_from(desc: SceneDescription, args) -> RenderConfig:
    passes = desc.settings.passes
    return RenderConfig(
        enable_direct=passes.get("direct", True) and not args.no_direct,
        enable_indirect=passes.get("indirect", True) and not args.no_indirect,
        enable_glossy=passes.get("glossy", True) and not args.no_glossy,
        enable_emission=passes.get("emission", True) and not args.no_emission,
        bias_scale=args.bias_scale if args.bias_scale is not None
        else desc.settings.bias_scale,
        probe_spacing=desc.settings.probe_spacing,
        rays_per_probe=desc.settings.rays_per_probe,
    )


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)

    try:
        desc = load_described_scene(args.scene)
    except (SceneError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2

    frames = args.frames if args.frames is not None else desc.settings.frames
    if frames <= 0:
        print("error: --frames must be positive", file=sys.stderr)
        return 2
    if args.bias_scale is not None and not 0.0 < args.bias_scale <= 1.0:
        print("error: --bias-scale must lie in (0, 1]", file=sys.stderr)
        return 2
    seed = args.seed if args.seed is not None else desc.settings.seed
    out_prefix = args.out if args.out is not None else desc.settings.output_prefix

    width = height = None
    if args.size:
        try:
            w, h = args.size.lower().split("x")
            width, height = int(w), int(h)
        except ValueError:
            print("error: --size expects WxH, e.g. 128x128", file=sys.stderr)
            return 2
        if width <= 0 or height <= 0:
            print("error: --size components must be positive", file=sys.stderr)
            return 2

    try:
        scene = desc.build_runtime()
        camera = desc.make_camera(width, height)
    except (SceneError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2

    if args.serve:
        from .service import serve_forever

        host, _, port = args.serve.rpartition(":")
        if not host or not port.isdigit():
            print("error: --serve expects HOST:PORT", file=sys.stderr)
            return 2
        cfg = config_from(desc, args)
        converge = (args.converge_frames if args.converge_frames is not None
                    else desc.settings.converge_frames)
        return serve_forever(desc, scene, camera, cfg, seed, host, int(port),
                             converge)

    if args.oracle:
        from .report import run_oracle_report

        _, ok = run_oracle_report(scene, out_prefix=out_prefix)
        return 0 if ok else 1

    cfg = config_from(desc, args)
    state = FrameState(master_seed=seed)
    out_dir = os.path.dirname(out_prefix)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)

    out = None
    for frame in range(frames):
        out = render_frame(scene, camera, state, cfg)
        if args.save_all or frame == frames - 1:
            hdr_path, ldr_path = write_images(out.hdr, out.ldr, out_prefix, frame)
            print(f"frame {frame}: {ldr_path}")

    if args.decompose and out is not None:
        for name, layer in out.layers.items():
            write_pfm(f"{out_prefix}_layer_{name}.pfm", layer)
            write_ppm(f"{out_prefix}_layer_{name}.ppm", tonemap(layer))
            print(f"layer {name}: {out_prefix}_layer_{name}.ppm")
        total = sum(out.layers.values())
        err = float(np.abs(total - out.hdr).max())
        print(f"decomposition residual: {err:.2e}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
