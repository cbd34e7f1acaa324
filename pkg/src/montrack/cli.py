"""Command-line client for the tracking service.

Every command builds a request and posts it to the HTTP API — by default an
in-process instance of the service, or a remote one via --server — and
prints the JSON response.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import sys
from pathlib import Path


def _post(path: str, payload: dict, server: str | None) -> dict:
    import httpx

    if server:
        resp = httpx.post(server.rstrip("/") + path, json=payload, timeout=None)
    else:
        from .service import create_app

        async def go():
            transport = httpx.ASGITransport(app=create_app())
            async with httpx.AsyncClient(transport=transport,
                                         base_url="http://montrack") as client:
                return await client.post(path, json=payload, timeout=None)

        resp = asyncio.run(go())
    if resp.status_code != 200:
        try:
            detail = resp.json().get("detail", resp.text)
        except ValueError:
            detail = resp.text
        raise SystemExit(f"error ({resp.status_code}): {detail}")
    return resp.json()


def _track_config(args) -> dict:
    config = {}
    if args.config:
        config = json.loads(Path(args.config).read_text())
    if args.mode is not None:
        config["mode"] = args.mode
    for flag, key in (("no_directional", "directional"),
                      ("no_warping", "enable_warping"),
                      ("no_part_mask", "enable_part_mask"),
                      ("no_snapping", "enable_snapping"),
                      ("no_smoothing", "smooth_output")):
        if getattr(args, flag):
            config[key] = False
    if args.uniform_material is not None:
        config["uniform_material_weight"] = args.uniform_material
    return config


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="montrack",
                                description="monocular performance capture")
    p.add_argument("--server", default=None,
                   help="base URL of a running service (default: in-process)")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic sequence")
    s.add_argument("output_dir")
    s.add_argument("--preset", default="small")
    s.add_argument("--frames", type=int, default=30)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--image-size", type=int, default=256)
    s.add_argument("--no-skirt", action="store_true")
    s.add_argument("--no-cloth-motion", action="store_true")
    s.add_argument("--sigma2d", type=float, default=1.0)
    s.add_argument("--sigma3d", type=float, default=0.008)
    s.add_argument("--dropout2d", type=float, default=0.0)
    s.add_argument("--dropout3d", type=float, default=0.0)
    s.add_argument("--image-noise", type=float, default=0.0)
    s.add_argument("--script", default=None, help="motion script JSON file")

    t = sub.add_parser("track", help="run the tracker on a sequence")
    t.add_argument("sequence_dir")
    t.add_argument("output_dir")
    t.add_argument("--config", default=None, help="JSON config file")
    t.add_argument("--mode", choices=("full", "pose_only", "detections_only"),
                   default=None)
    t.add_argument("--pipelined", action="store_true")
    t.add_argument("--no-directional", action="store_true")
    t.add_argument("--no-warping", action="store_true")
    t.add_argument("--no-part-mask", action="store_true")
    t.add_argument("--no-snapping", action="store_true")
    t.add_argument("--no-smoothing", action="store_true")
    t.add_argument("--uniform-material", type=float, default=None)

    e = sub.add_parser("eval", help="score a run against ground truth")
    e.add_argument("sequence_dir")
    e.add_argument("result_dir")
    e.add_argument("--raw", action="store_true",
                   help="evaluate unsmoothed outputs")

    g = sub.add_parser("gradcheck", help="finite-difference Jacobian check")
    g.add_argument("--configs", type=int, default=25)
    g.add_argument("--step", type=float, default=1e-6)
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.add_argument("--seed", type=int, default=2024)
    g.add_argument("--image-size", type=int, default=128)

    v = sub.add_parser("serve", help="run the HTTP service")
    v.add_argument("--host", default="127.0.0.1")
    v.add_argument("--port", type=int, default=8000)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)

    if args.command == "serve":
        import uvicorn

        from .service import app
        uvicorn.run(app, host=args.host, port=args.port)
        return 0

    if args.command == "synth":
        payload = {
            "output_dir": args.output_dir, "preset": args.preset,
            "n_frames": args.frames, "seed": args.seed,
            "with_skirt": not args.no_skirt,
            "with_cloth_motion": not args.no_cloth_motion,
            "image_size": args.image_size, "sigma2d": args.sigma2d,
            "sigma3d": args.sigma3d, "dropout2d": args.dropout2d,
            "dropout3d": args.dropout3d, "image_noise": args.image_noise,
        }
        if args.script:
            payload["script"] = json.loads(Path(args.script).read_text())
        out = _post("/synth", payload, args.server)
    elif args.command == "track":
        out = _post("/track", {
            "sequence_dir": args.sequence_dir, "output_dir": args.output_dir,
            "config": _track_config(args), "pipelined": args.pipelined,
        }, args.server)
    elif args.command == "eval":
        out = _post("/eval", {
            "sequence_dir": args.sequence_dir, "result_dir": args.result_dir,
            "use_smoothed": not args.raw,
        }, args.server)
    elif args.command == "gradcheck":
        out = _post("/gradcheck", {
            "n_configs": args.configs, "step": args.step,
            "tolerance": args.tolerance, "seed": args.seed,
            "image_size": args.image_size,
        }, args.server)
        print(json.dumps(out, indent=2))
        return 0 if out["passed"] else 1
    else:  # pragma: no cover - argparse enforces the choices
        raise SystemExit(2)

    print(json.dumps(out, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
