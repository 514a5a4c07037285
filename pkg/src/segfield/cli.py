"""Command-line front end: ``segfield <subcommand> ...``.

Every subcommand loads and validates all inputs before writing anything.
Failures print one JSON line ``{"error": <type>, "message": <text>}`` to
stderr and exit with status 1. ``SEGFIELD_THREADS`` sets the worker count
for nearest-neighbor queries; results do not depend on it.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from segfield import config as config_mod
from segfield import fileio, synth
from segfield.association import associate_sequence, independent_labels
from segfield.data import LabeledMaskSet
from segfield.errors import InvalidInputError, SegfieldError
from segfield.field import delete_object, init_from_cloud, move_object
from segfield.metrics import chamfer, miou_3d, miou_multi, miou_single, psnr, ssim
from segfield.render import Camera, render
from segfield.train import TrainView, train, write_loss_log

log = logging.getLogger("segfield")

# Rendered pixels with less accumulated opacity are reported as unlabeled.
MASK_ALPHA_THRESHOLD = 0.5


def _threads() -> int:
    raw = os.environ.get("SEGFIELD_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise InvalidInputError(f"SEGFIELD_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise InvalidInputError(f"SEGFIELD_THREADS must be a positive integer, got {raw!r}")
    return n


def _require_dir(path, what: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise InvalidInputError(f"{what} not found: {p}")
    return p


def _require_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise InvalidInputError(f"{what} not found: {p}")
    return p


def _load_config(args) -> config_mod.RunConfig:
    return config_mod.load(getattr(args, "config", None), getattr(args, "set", None))


def _scene_dir(args, cfg) -> Path:
    scene = getattr(args, "scene", None) or cfg.paths.scene_dir
    if scene is None:
        raise InvalidInputError("no scene directory given (--scene or paths.scene_dir)")
    _require_file(Path(scene) / "manifest.json", "scene manifest")
    return Path(scene)


def _out_dir(args, cfg) -> Path:
    out = getattr(args, "out", None) or cfg.paths.out_dir
    if out is None:
        raise InvalidInputError("no output directory given (--out or paths.out_dir)")
    return Path(out)


def _associate(bundle: synth.SceneBundle, cfg: config_mod.RunConfig):
    frames = [(f.pointmap, f.masks) for f in bundle.frames]
    a = cfg.association
    if not a.pointmap_fusion:
        return independent_labels(frames)
    return associate_sequence(
        frames, a.mode, a.reject_above, a.min_mask_pixels, a.gamma_assoc, workers=_threads()
    )


def _report(values: dict, json_path) -> None:
    for k, v in values.items():
        print(f"{k}={v!r}")
    if json_path:
        Path(json_path).write_text(json.dumps(values, indent=2, sort_keys=True) + "\n")


# -- subcommands ---------------------------------------------------------------


def cmd_gen_scene(args) -> int:
    if args.spec:
        try:
            data = json.loads(_require_file(args.spec, "scene spec").read_text())
        except json.JSONDecodeError as exc:
            raise InvalidInputError(f"scene spec is not valid JSON: {exc}") from None
        spec = synth.SceneSpec.from_dict(data)
    else:
        spec = synth.default_scene_spec(args.frames, args.width)
    if args.noise is not None:
        if args.noise < 0:
            raise InvalidInputError("--noise must be non-negative")
        spec.noise_sigma = args.noise
    bundle = synth.generate(spec, args.seed)
    print(synth.write_bundle(bundle, args.out))
    return 0


def cmd_associate(args) -> int:
    cfg = _load_config(args)
    bundle = synth.read_bundle(_scene_dir(args, cfg))
    out = _out_dir(args, cfg)
    masks, cloud = _associate(bundle, cfg)
    out.mkdir(parents=True, exist_ok=True)
    for t, m in enumerate(masks):
        fileio.write_mask(out / f"mask_{t:03d}.pgm", m)
    fileio.write_cloud(out / "cloud.ply", cloud)
    ids = sorted({i for m in masks for i in m.id_list})
    print(f"frames={len(masks)} global_ids={len(ids)} cloud_points={len(cloud)}")
    return 0


def _read_masks(d: Path, n: int) -> list[LabeledMaskSet]:
    paths = [d / f"mask_{t:03d}.pgm" for t in range(n)]
    for p in paths:
        _require_file(p, "mask file")
    return [fileio.read_mask(p) for p in paths]


def cmd_train(args) -> int:
    cfg = _load_config(args)
    bundle = synth.read_bundle(_scene_dir(args, cfg))
    out = _out_dir(args, cfg)
    if args.assoc:
        d = _require_dir(args.assoc, "association directory")
        masks = _read_masks(d, len(bundle.frames))
        cloud = fileio.read_cloud(_require_file(d / "cloud.ply", "association cloud"))
    else:
        masks, cloud = _associate(bundle, cfg)
    views = [TrainView(f.rgb, m, f.camera) for f, m in zip(bundle.frames, masks)]
    for f, m in zip(bundle.frames, masks):
        if m.shape != f.rgb.shape[:2]:
            raise InvalidInputError("association masks do not match the scene frame size")
    field0 = init_from_cloud(cloud, voxel_size=cfg.training.voxel_size)
    result = train(field0, views, cfg.training.to_train_config())
    out.mkdir(parents=True, exist_ok=True)
    fileio.write_field(out / "field.ply", result.field)
    write_loss_log(out / "loss_log.csv", result.history)
    last = result.history[-1].losses.total if result.history else float("nan")
    print(f"splats={len(result.field)} iterations={len(result.history)} final_total={last!r}")
    return 0


def cmd_eval2d(args) -> int:
    cfg = _load_config(args)
    bundle = synth.read_bundle(_scene_dir(args, cfg))
    preds = _read_masks(_require_dir(args.pred, "prediction directory"), len(bundle.frames))
    gts = [f.gt_masks for f in bundle.frames]
    per_view = [miou_single(p, g) for p, g in zip(preds, gts) if g.id_list]
    values = {
        "miou_s": float(np.mean(per_view)) if per_view else float("nan"),
        "miou_m": miou_multi(preds, gts),
        "views": len(preds),
    }
    _report(values, args.json)
    return 0


def cmd_eval3d(args) -> int:
    cfg = _load_config(args)
    bundle = synth.read_bundle(_scene_dir(args, cfg))
    f = fileio.read_field(_require_file(args.field, "field file"))
    values = {
        "miou_3d": miou_3d(f, bundle.gt_cloud, gamma=cfg.eval.gamma),
        "chamfer": chamfer(f.positions, bundle.gt_cloud.positions),
        "surface_distance_mean": float(synth.surface_distance(bundle.spec, f.positions).mean()),
        "splats": len(f),
    }
    if args.render:
        outs = [render(f, fr.camera) for fr in bundle.frames]
        values["psnr"] = float(np.mean([psnr(np.clip(o.color_image, 0, 1), fr.rgb) for o, fr in zip(outs, bundle.frames)]))
        values["ssim"] = float(np.mean([ssim(o.color_image, fr.rgb) for o, fr in zip(outs, bundle.frames)]))
    _report(values, args.json)
    return 0


def cmd_edit(args) -> int:
    f = fileio.read_field(_require_file(args.field, "field file"))
    if args.op == "delete":
        edited = delete_object(f, args.id)
    else:
        if args.translation is None:
            raise InvalidInputError("move needs --translation X Y Z")
        edited = move_object(f, args.id, args.translation)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    fileio.write_field(args.out, edited)
    print(f"splats_before={len(f)} splats_after={len(edited)}")
    return 0


def _render_mask(out) -> LabeledMaskSet:
    labels = np.argmax(out.logits, axis=-1)
    labels[out.alpha_image < MASK_ALPHA_THRESHOLD] = 0
    return LabeledMaskSet(labels.astype(np.int64))


def cmd_render(args) -> int:
    f = fileio.read_field(_require_file(args.field, "field file"))
    jobs: list[tuple[str, Camera]] = []
    if args.pose:
        try:
            cam = Camera.from_dict(json.loads(_require_file(args.pose, "pose file").read_text()))
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise InvalidInputError(f"pose file is not a valid camera: {exc}") from None
        jobs.append(("pose", cam))
    else:
        if not args.scene:
            raise InvalidInputError("render needs --pose or --scene with --camera/--all")
        bundle = synth.read_bundle(_require_dir(args.scene, "scene directory"))
        if args.all:
            idx = range(len(bundle.frames))
        elif args.camera is not None:
            if not 0 <= args.camera < len(bundle.frames):
                raise InvalidInputError(f"camera index {args.camera} outside 0..{len(bundle.frames) - 1}")
            idx = [args.camera]
        else:
            raise InvalidInputError("render needs --camera N or --all with --scene")
        jobs = [(f"{t:03d}", bundle.frames[t].camera) for t in idx]
    rendered = [(tag, render(f, cam)) for tag, cam in jobs]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for tag, o in rendered:
        fileio.write_image(out / f"rgb_{tag}.ppm", np.clip(o.color_image, 0.0, 1.0))
        fileio.write_mask(out / f"mask_{tag}.pgm", _render_mask(o))
    print(f"rendered={len(rendered)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="segfield", description="Consistent 3D instance segmentation from pointmaps.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def with_config(sp):
        sp.add_argument("--config", help="JSON run config")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config value")

    g = sub.add_parser("gen-scene", help="generate a synthetic scene bundle")
    g.add_argument("--spec", help="JSON scene spec (default: built-in four-object scene)")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--noise", type=float, help="pointmap noise sigma override")
    g.add_argument("--frames", type=int, default=20)
    g.add_argument("--width", type=int, default=128)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_scene)

    a = sub.add_parser("associate", help="relabel per-frame masks with consistent global IDs")
    a.add_argument("--scene")
    a.add_argument("--out")
    with_config(a)
    a.set_defaults(func=cmd_associate)

    t = sub.add_parser("train", help="optimize a Gaussian segmentation field")
    t.add_argument("--scene")
    t.add_argument("--assoc", help="directory written by 'associate' (default: associate in-process)")
    t.add_argument("--out")
    with_config(t)
    t.set_defaults(func=cmd_train)

    e2 = sub.add_parser("eval2d", help="per-view and multi-view mIoU of predicted masks")
    e2.add_argument("--pred", required=True, help="directory with mask_NNN.pgm files")
    e2.add_argument("--scene")
    e2.add_argument("--json", help="also write the report as JSON")
    with_config(e2)
    e2.set_defaults(func=cmd_eval2d)

    e3 = sub.add_parser("eval3d", help="3D mIoU, Chamfer and surface distance of a field")
    e3.add_argument("--field", required=True)
    e3.add_argument("--scene")
    e3.add_argument("--render", action="store_true", help="also report mean PSNR/SSIM over the scene views")
    e3.add_argument("--json")
    with_config(e3)
    e3.set_defaults(func=cmd_eval3d)

    ed = sub.add_parser("edit", help="delete or move one object of a field")
    ed.add_argument("--field", required=True)
    ed.add_argument("--op", choices=("delete", "move"), required=True)
    ed.add_argument("--id", type=int, required=True)
    ed.add_argument("--translation", type=float, nargs=3, metavar=("X", "Y", "Z"))
    ed.add_argument("--out", required=True)
    ed.set_defaults(func=cmd_edit)

    r = sub.add_parser("render", help="render color and argmax masks")
    r.add_argument("--field", required=True)
    r.add_argument("--scene")
    r.add_argument("--camera", type=int)
    r.add_argument("--all", action="store_true")
    r.add_argument("--pose", help="JSON camera (same keys as the scene manifest)")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (SegfieldError, OSError, ValueError) as exc:
        msg = " ".join(str(exc).split())
        print(json.dumps({"error": type(exc).__name__, "message": msg}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
