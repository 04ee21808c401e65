"""Command-line entry points: gen-data, train, segment, track, edit, velocity, serve."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .checkpoint import affinity_key, load_checkpoint, save_checkpoint
from .coarse import coarse_segmentation, default_outlier_radius, remove_outliers, CoarseSegmentation
from .dataset import Dataset, GroundTruthMaskProvider
from .fine import AffinityConfig, DirectoryMaskProvider, ingest_masks, segment_by_click, train_affinity
from .render import render
from .scene import Camera
from .synth import AnalyticScene, blobs3, write_dataset
from .tracking import Edit, SegmentRegistry, scene_render, velocity_colormap
from .trainer import Trainer, TrainConfig, jsonl_logger


def _save_image(path, image: torch.Tensor):
    arr = (image.clamp(0, 1).cpu().numpy() * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(arr).save(path)


def _camera_arg(args, ckpt, data: Dataset | None) -> Camera:
    if args.view is not None:
        if data is None:
            sys.exit("--view needs --data")
        for cam in data.train_cameras + data.test_cameras:
            if cam.name == args.view:
                return cam
        sys.exit(f"unknown view {args.view!r}")
    pos = [float(v) for v in args.pose.split(",")]
    look = [float(v) for v in args.look_at.split(",")]
    return Camera.look_at(pos, look, args.fov, args.width, args.height)


def _add_camera_args(p):
    p.add_argument("--view", help="named dataset camera (needs --data)")
    p.add_argument("--pose", default="0,-2.6,0.5", help="camera position x,y,z")
    p.add_argument("--look-at", default="0,0,0")
    p.add_argument("--fov", type=float, default=0.75)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=256)


def cmd_gen_data(args):
    if args.scene == "blobs3":
        scene = blobs3()
    else:
        scene = AnalyticScene.from_dict(json.loads(Path(args.scene).read_text()))
    w, h = (int(v) for v in args.res.split(","))
    write_dataset(
        scene, args.out, n_views=args.views, n_test_views=args.test_views,
        n_timesteps=args.timesteps, width=w, height=h, seed=args.seed,
    )
    print(f"dataset written to {args.out}")


def cmd_train(args):
    config = TrainConfig.load(args.config) if args.config else TrainConfig()
    if args.seed is not None:
        config.seed = args.seed
    if args.loss:
        config.loss = args.loss
    if args.no_tv:
        config.tv = False
    if args.encoder:
        config.encoder = args.encoder
    if args.no_warmup:
        config.warmup = False
    if args.no_opacity_deform:
        config.opacity_deform = False

    dataset = Dataset(args.data)
    log_fh = open(args.log, "w") if args.log else None
    trainer = Trainer(dataset, config, log=jsonl_logger(log_fh) if log_fh else None)
    try:
        ckpt = trainer.run()
    finally:
        if log_fh:
            log_fh.close()
    save_checkpoint(args.out, ckpt)
    print(f"checkpoint written to {args.out} ({trainer.gaussians.count} gaussians)")


def cmd_segment_coarse(args):
    ckpt = load_checkpoint(args.ckpt)
    seg = coarse_segmentation(ckpt.gaussians, args.k, args.seed)
    params = dict(seg.params)
    if args.radius is not None or args.min_neighbors is not None:
        min_n = args.min_neighbors if args.min_neighbors is not None else 3
        labels = seg.labels.copy()
        removed_total = 0
        for label in range(seg.k):
            ids = seg.ids_of(label)
            radius = args.radius if args.radius is not None else default_outlier_radius(ids, ckpt.gaussians)
            kept = remove_outliers(ids, ckpt.gaussians, radius, min_n)
            dropped = np.setdiff1d(ids, kept)
            removed_total += dropped.size
            for gid in dropped:
                labels[np.nonzero(seg.gaussian_ids == gid)[0][0]] = -1
        seg.labels = labels
        params.update({"radius": args.radius, "min_neighbors": min_n, "removed": int(removed_total)})
        seg.params = params
    Path(args.out).write_text(json.dumps(seg.to_dict(), indent=1))
    ckpt.coarse = seg
    save_checkpoint(args.ckpt, ckpt)
    print(f"coarse segmentation (k={args.k}) written to {args.out} and into {args.ckpt}")


def cmd_segment_fine(args):
    ckpt = load_checkpoint(args.ckpt)
    seg = CoarseSegmentation.from_dict(json.loads(Path(args.coarse).read_text()))
    data = Dataset(args.data) if args.data else None
    member_ids = seg.ids_of(args.label)
    rows = torch.isin(ckpt.gaussians.ids, torch.from_numpy(member_ids))
    members = ckpt.gaussians.select(rows)

    if args.masks:
        provider = DirectoryMaskProvider(args.masks)
    else:
        if data is None:
            sys.exit("either --masks DIR or --data DIR (GT provider) is required")
        provider = GroundTruthMaskProvider(data, data.t_index_of(args.time), include_parent=True)
    if data is None:
        sys.exit("--data is required to supply the mask views")
    views = [(str(i), cam) for i, cam in enumerate(data.train_cameras)]
    mask_set = ingest_masks(provider, members, views, args.time, args.label, deform=ckpt.field)
    cfg = AffinityConfig(iters=args.iters, lr=args.lr)
    deformed = ckpt.field.deform(members, args.time) if ckpt.field else members
    afield = train_affinity(mask_set, deformed, cfg, seed=args.seed)
    ckpt.affinity[affinity_key(args.label, args.time)] = afield
    save_checkpoint(args.out if args.out else args.ckpt, ckpt)
    where = args.out if args.out else args.ckpt
    print(f"affinity field for label {args.label} at t={args.time} written into {where}")


def cmd_segment_pick(args):
    ckpt = load_checkpoint(args.ckpt)
    data = Dataset(args.data) if args.data else None
    seg = ckpt.coarse
    if args.coarse:
        seg = CoarseSegmentation.from_dict(json.loads(Path(args.coarse).read_text()))
    if seg is None:
        sys.exit("no coarse segmentation available")
    x, y = (int(v) for v in args.pixel.split(","))
    camera = _camera_arg(args, ckpt, data)
    deformed = ckpt.field.deform(ckpt.gaussians, args.time) if ckpt.field else ckpt.gaussians
    with torch.no_grad():
        out = render(deformed, camera, with_contrib=True)
    from .coarse import segment_of_pixel

    label = segment_of_pixel(out, ckpt.gaussians, seg, x, y)
    if label is None:
        print("no segment at pixel")
        return
    result = {"label": int(label)}
    if args.scale is not None:
        afield = ckpt.affinity.get(affinity_key(label, args.time))
        if afield is None:
            sys.exit(f"no affinity field for label {label} at t={args.time}; run `segment fine` first")
        member_rows = torch.isin(ckpt.gaussians.ids, torch.from_numpy(seg.ids_of(label)))
        members = deformed.select(member_rows)
        fine = segment_by_click(members, afield, label, camera, x, y, args.scale, args.tau)
        result["fine_ids"] = fine.ids.tolist() if fine else []
        result["count"] = len(result["fine_ids"])
    print(json.dumps(result))


def cmd_track(args):
    ckpt = load_checkpoint(args.ckpt)
    data = Dataset(args.data) if args.data else None
    registry = SegmentRegistry.load(args.segments)
    camera = _camera_arg(args, ckpt, data)
    out = scene_render(
        ckpt.gaussians, ckpt.field, registry.snapshot(), args.time, camera,
        mode=args.mode, target_id=args.segment,
    )
    _save_image(args.out, out.image)
    print(f"tracked render written to {args.out}")


def cmd_edit(args):
    registry = SegmentRegistry.load(args.segments) if Path(args.segments).exists() else SegmentRegistry()
    if args.recolor:
        rgb = tuple(float(v) for v in args.recolor.split(","))
        edit = Edit(segment_id=args.segment, kind="recolor", rgb=rgb)
    elif args.opacity_scale is not None:
        edit = Edit(segment_id=args.segment, kind="opacity_scale", factor=args.opacity_scale)
    else:
        ckpt = load_checkpoint(args.ckpt)
        ids = registry.member_gaussian_ids(args.segment)
        rows = torch.isin(ckpt.gaussians.ids, torch.from_numpy(ids))
        seg = registry.segments.get(args.segment)
        creation_t = float(seg.provenance.get("time", 0.0)) if seg else 0.0
        with torch.no_grad():
            deformed = ckpt.field.deform(ckpt.gaussians, creation_t) if ckpt.field else ckpt.gaussians
            pivot = tuple(float(v) for v in deformed.means[rows].mean(dim=0))
        translation = tuple(float(v) for v in args.translate.split(",")) if args.translate else (0, 0, 0)
        edit = Edit(
            segment_id=args.segment, kind="affine",
            translation=translation, scale=args.scale, pivot=pivot,
        )
    registry.add_edit(edit)
    registry.save(args.segments)
    print(f"edit appended to {args.segments}")


def cmd_velocity(args):
    ckpt = load_checkpoint(args.ckpt)
    if ckpt.field is None:
        sys.exit("checkpoint has no deformation field")
    data = Dataset(args.data) if args.data else None
    camera = _camera_arg(args, ckpt, data)
    payload = velocity_colormap(ckpt.gaussians, ckpt.field, args.time)
    deformed = ckpt.field.deform(ckpt.gaussians, args.time)
    with torch.no_grad():
        out = render(deformed, camera, payload=payload)
    _save_image(args.out, out.image)
    print(f"velocity render written to {args.out}")


def cmd_serve(args):
    import uvicorn

    from .service import SessionState, create_app

    state = SessionState(
        checkpoint=load_checkpoint(args.ckpt),
        dataset=Dataset(args.data) if args.data else None,
    )
    if args.segments and Path(args.segments).exists():
        state.registry = SegmentRegistry.load(args.segments)
    frontend = args.frontend or str(Path(__file__).resolve().parents[2] / "frontend" / "dist")
    app = create_app(state, frontend_dir=frontend)
    uvicorn.run(app, host=args.host, port=args.port, log_level="warning")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dynsplat")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic multi-view dataset")
    g.add_argument("--scene", default="blobs3", help="blobs3 or a scene JSON file")
    g.add_argument("--views", type=int, default=20)
    g.add_argument("--test-views", type=int, default=10)
    g.add_argument("--timesteps", type=int, default=5)
    g.add_argument("--res", default="64,64")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="two-stage training")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="flat key=value config file")
    t.add_argument("--seed", type=int)
    t.add_argument("--loss", choices=["l1", "l2", "l2+dssim"])
    t.add_argument("--no-tv", action="store_true")
    t.add_argument("--encoder", choices=["hybrid", "implicit"])
    t.add_argument("--no-warmup", action="store_true")
    t.add_argument("--no-opacity-deform", action="store_true")
    t.add_argument("--log", help="JSONL metrics stream path")
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("segment", help="segmentation commands")
    ssub = s.add_subparsers(dest="segment_command", required=True)

    sc = ssub.add_parser("coarse")
    sc.add_argument("--ckpt", required=True)
    sc.add_argument("--k", type=int, required=True)
    sc.add_argument("--seed", type=int, default=0)
    sc.add_argument("--radius", type=float)
    sc.add_argument("--min-neighbors", type=int)
    sc.add_argument("--out", required=True)
    sc.set_defaults(fn=cmd_segment_coarse)

    sf = ssub.add_parser("fine")
    sf.add_argument("--ckpt", required=True)
    sf.add_argument("--coarse", required=True)
    sf.add_argument("--label", type=int, required=True)
    sf.add_argument("--time", type=float, required=True)
    sf.add_argument("--masks", help="mask directory (index.json + PNGs)")
    sf.add_argument("--data", help="dataset dir (provides views; enables GT provider)")
    sf.add_argument("--iters", type=int, default=5000)
    sf.add_argument("--lr", type=float, default=1e-3)
    sf.add_argument("--seed", type=int, default=0)
    sf.add_argument("--out", help="output checkpoint (defaults to --ckpt in place)")
    sf.set_defaults(fn=cmd_segment_fine)

    sp = ssub.add_parser("pick")
    sp.add_argument("--ckpt", required=True)
    sp.add_argument("--coarse", help="coarse segmentation JSON (else embedded in ckpt)")
    sp.add_argument("--pixel", required=True, help="X,Y")
    sp.add_argument("--time", type=float, default=0.0)
    sp.add_argument("--scale", type=float, help="query scale (fine level)")
    sp.add_argument("--tau", type=float, default=0.75)
    sp.add_argument("--data")
    _add_camera_args(sp)
    sp.set_defaults(fn=cmd_segment_pick)

    tr = sub.add_parser("track", help="render a tracked segment at a timestep")
    tr.add_argument("--ckpt", required=True)
    tr.add_argument("--segments", required=True, help="segment registry JSON")
    tr.add_argument("--segment", type=int, required=True)
    tr.add_argument("--time", type=float, required=True)
    tr.add_argument("--mode", default="isolate", choices=["isolate", "highlight", "hide-others", "full"])
    tr.add_argument("--out", required=True)
    tr.add_argument("--data")
    _add_camera_args(tr)
    tr.set_defaults(fn=cmd_track)

    e = sub.add_parser("edit", help="append a persistent segment edit")
    e.add_argument("--ckpt", help="needed for affine pivot computation")
    e.add_argument("--segments", required=True)
    e.add_argument("--segment", type=int, required=True)
    e.add_argument("--recolor", help="R,G,B in [0,1]")
    e.add_argument("--opacity-scale", type=float)
    e.add_argument("--translate", help="X,Y,Z")
    e.add_argument("--scale", type=float, default=1.0)
    e.set_defaults(fn=cmd_edit)

    v = sub.add_parser("velocity", help="render the x deformation-velocity colormap")
    v.add_argument("--ckpt", required=True)
    v.add_argument("--time", type=float, required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--data")
    _add_camera_args(v)
    v.set_defaults(fn=cmd_velocity)

    sv = sub.add_parser("serve", help="run the HTTP render/segmentation service")
    sv.add_argument("--ckpt", required=True)
    sv.add_argument("--port", type=int, default=8000)
    sv.add_argument("--host", default="127.0.0.1")
    sv.add_argument("--data")
    sv.add_argument("--segments")
    sv.add_argument("--frontend")
    sv.set_defaults(fn=cmd_serve)

    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    args.fn(args)


if __name__ == "__main__":
    main()
