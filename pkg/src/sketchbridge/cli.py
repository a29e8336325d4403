"""``sketchbridge`` command line: build-pairs, train-stroke-net, train, infer, eval, ablate."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import evaluation
from .config import RunManifest, dir_digest, file_digest, load_config
from .errors import BadConfig, SketchError
from .imaging import align_face, load_landmarks, read_png, write_png
from .line_drawing import (
    DOG_DEFAULTS,
    build_pairs_from_dir,
    dog_operator,
    load_pseudo_pairs,
    operator_from_description,
)
from .networks import (
    PROFILES,
    StrokeLabel,
    get_profile,
    load_checkpoint,
    load_stroke_classifier,
    read_checkpoint_header,
    save_stroke_classifier,
)
from .training import (
    StrokePatchDataset,
    TrainConfig,
    latest_checkpoint,
    pairs_fingerprint,
    train,
    train_stroke_classifier,
)

log = logging.getLogger("sketchbridge")

PSI_NAME = "psi.ckpt"


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    # SUPPRESS lets the flags appear before or after the subcommand.
    p.add_argument("--seed", type=int, default=argparse.SUPPRESS,
                   help="overrides the config seed")
    p.add_argument("--profile", choices=sorted(p for p in PROFILES if p != "micro_8"),
                   default=argparse.SUPPRESS, help="overrides the config profile")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="sketchbridge", parents=[common])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("build-pairs", parents=[common], help="line-draw a sketch directory")
    p.add_argument("--sketch-dir", "--sketches", dest="sketches", required=True, type=Path)
    p.add_argument("--out-dir", "--out", dest="out", required=True, type=Path)
    p.add_argument("--operator", choices=["dog"], default="dog")
    for name, value in DOG_DEFAULTS.items():
        p.add_argument(f"--{name}", type=float, default=value)

    p = sub.add_parser("train-stroke-net", parents=[common],
                       help="pretrain the 7-class stroke classifier")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--patches", type=Path,
                     help="directory with one subdirectory of PNG patches per stroke label")
    src.add_argument("--synthetic", type=int, metavar="PER_CLASS",
                     help="train on procedural stroke textures instead")
    p.add_argument("--config", type=Path)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("train", parents=[common], help="train G and D on pseudo pairs")
    p.add_argument("--pairs", required=True, type=Path, help="pairs.jsonl manifest")
    p.add_argument("--config", type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--psi", type=Path, help=f"stroke classifier (default: <pairs dir>/{PSI_NAME})")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--max-steps", type=int)

    p = sub.add_parser("infer", parents=[common], help="photo -> line drawing -> sketch")
    p.add_argument("--photo", required=True, type=Path)
    p.add_argument("--checkpoint", required=True, type=Path, help="checkpoint file or run dir")
    p.add_argument("--out-line", required=True, type=Path)
    p.add_argument("--out-sketch", required=True, type=Path)
    p.add_argument("--landmarks", type=Path, help="eye landmarks JSON for alignment")

    p = sub.add_parser("eval", parents=[common], help="score generated against real sketches")
    p.add_argument("--real", required=True, type=Path)
    p.add_argument("--fake", required=True, type=Path)
    p.add_argument("--metrics", default="fid,scoot,acc")
    p.add_argument("--patches", type=int, default=10_000)
    p.add_argument("--patch-size", type=int, default=256)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("ablate", parents=[common], help="full vs no-stroke-loss comparison")
    p.add_argument("--pairs", required=True, type=Path)
    p.add_argument("--config", type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.add_argument("--psi", type=Path)
    p.add_argument("--held-out", type=float, default=0.2)
    p.add_argument("--patches", type=int, default=10_000)
    p.add_argument("--patch-size", type=int, default=256)
    p.add_argument("--max-steps", type=int)
    return parser


def _config(args) -> TrainConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else TrainConfig()
    overrides = {k: getattr(args, k) for k in ("seed", "profile") if hasattr(args, k)}
    return replace(cfg, **overrides)


def _seed(args) -> int:
    return getattr(args, "seed", 0)


def _manifest(command, config, data_hashes, operator_fp, seed, directory):
    path = RunManifest(command, config, data_hashes, operator_fp, seed).write(directory)
    log.info("run manifest: %s", path)
    return path


def _pairs_op(manifest: Path):
    """Load pairs; with an operator.json beside the manifest, also check fingerprints."""
    op_path = manifest.parent / "operator.json"
    op = operator_from_description(json.loads(op_path.read_text())) if op_path.exists() else None
    pairs = load_pseudo_pairs(manifest, op)
    fps = {p.operator_fingerprint for p in pairs}
    if len(fps) != 1:
        raise BadConfig(f"{manifest}: pairs come from {len(fps)} different operators")
    return pairs, op, fps.pop()


def _psi(args, cfg: TrainConfig):
    path = args.psi or args.pairs.parent / PSI_NAME
    if path.exists():
        return load_stroke_classifier(path), path
    if args.psi is not None:
        raise FileNotFoundError(f"stroke classifier {path} not found")
    if cfg.lambda_str > 0 and not getattr(args, "resume", False):
        raise BadConfig(f"lambda_str = {cfg.lambda_str} needs a stroke classifier; "
                        f"run train-stroke-net or pass --psi")
    return None, None


def cmd_build_pairs(args) -> None:
    op = dog_operator(**{k: getattr(args, k) for k in DOG_DEFAULTS})
    manifest = build_pairs_from_dir(args.sketches, args.out, op)
    (args.out / "operator.json").write_text(json.dumps(op.describe(), sort_keys=True))
    _manifest("build-pairs", {"operator": op.describe()},
              {"sketches": dir_digest(args.sketches)}, op.fingerprint(), _seed(args), args.out)
    print(manifest)


def _read_patch_dir(root: Path):
    patches = []
    for label in StrokeLabel:
        for path in sorted((root / label.name).glob("*.png")):
            im = read_png(path, "sketch")
            patches.append((im.with_pixels(im.gray()) if im.channels == 3 else im, label.value))
    if not patches:
        names = ", ".join(label.name for label in StrokeLabel)
        raise FileNotFoundError(f"no patches under {root}/<label>/*.png (labels: {names})")
    return patches


def cmd_train_stroke_net(args) -> None:
    from .synthetic import texture_dataset

    cfg = _config(args)
    size = get_profile(cfg.profile).stroke.patch_size
    if args.patches is not None:
        patches = _read_patch_dir(args.patches)
        data = {"patches": dir_digest(args.patches)}
    else:
        patches = texture_dataset(size, args.synthetic, cfg.seed)
        data = {"synthetic_textures": f"per_class={args.synthetic},size={size}"}
    psi, acc = train_stroke_classifier(StrokePatchDataset(patches), cfg)
    save_stroke_classifier(psi, args.out, acc)
    _manifest("train-stroke-net", cfg.as_dict(), data, None, cfg.seed, args.out.parent)
    print(f"held-out accuracy {acc:.4f}")


def cmd_train(args) -> None:
    cfg = _config(args)
    pairs, op, op_fp = _pairs_op(args.pairs)
    psi, psi_path = _psi(args, cfg)
    data = {"pairs_manifest": file_digest(args.pairs), "pairs": pairs_fingerprint(pairs)}
    if psi_path is not None:
        data["psi"] = file_digest(psi_path)
    _manifest("train", cfg.as_dict(), data, op_fp, cfg.seed, args.out)
    train(pairs, cfg, args.out, psi=psi, resume=args.resume, max_steps=args.max_steps,
          operator=op.describe() if op is not None else None)
    print(args.out)


def _load_run(checkpoint: Path):
    path = latest_checkpoint(checkpoint) if checkpoint.is_dir() else checkpoint
    if path is None or not path.exists():
        raise FileNotFoundError(f"no checkpoint in {checkpoint}")
    header = read_checkpoint_header(path)
    bundle, header = load_checkpoint(path, get_profile(header["profile"]))
    desc = header.get("operator") or {}
    op = operator_from_description(desc) if desc else dog_operator()
    return bundle, op, path


def cmd_infer(args) -> None:
    bundle, op, ckpt = _load_run(args.checkpoint)
    photo = read_png(args.photo, "photo")
    if args.landmarks is not None:
        photo = align_face(photo, load_landmarks(args.landmarks), bundle.profile.image_size)
    line, sketch = evaluation.infer(bundle, op, photo)
    write_png(line, args.out_line)
    write_png(sketch, args.out_sketch)
    data = {"photo": file_digest(args.photo), "checkpoint": file_digest(ckpt)}
    _manifest("infer", {"profile": bundle.profile.name}, data, op.fingerprint(), _seed(args),
              args.out_sketch.parent)


def _paired_dirs(real: Path, fake: Path):
    real_files = {p.name: p for p in sorted(real.glob("*.png"))}
    fake_files = {p.name: p for p in sorted(fake.glob("*.png"))}
    names = sorted(set(real_files) & set(fake_files))
    if not names:
        raise evaluation.EmptySet(f"no PNG names shared by {real} and {fake}")
    reals = [read_png(real_files[n], "sketch") for n in names]
    fakes = [read_png(fake_files[n], "sketch") for n in names]
    return names, reals, fakes


def cmd_eval(args) -> None:
    metrics = tuple(m.strip() for m in args.metrics.split(",") if m.strip())
    bad = set(metrics) - {"fid", "scoot", "acc"}
    if bad:
        raise BadConfig(f"unknown metric(s) {sorted(bad)}")
    names, reals, fakes = _paired_dirs(args.real, args.fake)
    ids = [evaluation.default_identity(Path(n).stem) for n in names]
    sample_cfg = evaluation.PatchSampleConfig(args.patches, args.patch_size, _seed(args))
    report = evaluation.evaluate_images(reals, fakes, metrics, sample_cfg, ids=ids)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    report.write(args.out)
    data = {"real": dir_digest(args.real), "fake": dir_digest(args.fake)}
    _manifest("eval", {"metrics": list(metrics), **report.to_dict()["sample_config"]}, data,
              None, _seed(args), args.out.parent)
    print(json.dumps(report.to_dict(), sort_keys=True))


def cmd_ablate(args) -> None:
    cfg = _config(args)
    pairs, op, op_fp = _pairs_op(args.pairs)
    op = op or dog_operator()
    psi, psi_path = _psi(args, cfg)
    train_pairs, held = evaluation.split_pairs(pairs, args.held_out, cfg.seed)
    sample_cfg = evaluation.PatchSampleConfig(args.patches, args.patch_size, cfg.seed)
    data = {"pairs_manifest": file_digest(args.pairs), "pairs": pairs_fingerprint(pairs)}
    if psi_path is not None:
        data["psi"] = file_digest(psi_path)
    _manifest("ablate", cfg.as_dict(), data, op_fp, cfg.seed, args.out)
    rows = evaluation.run_ablation(train_pairs, held, cfg, psi, args.out, op,
                                   sample_cfg=sample_cfg, max_steps=args.max_steps)
    print(evaluation.format_ablation(rows), end="")


COMMANDS = {
    "build-pairs": cmd_build_pairs,
    "train-stroke-net": cmd_train_stroke_net,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
}


def dispatch(argv=None) -> int:
    """Run one command; 0 on success, 1 on a runtime failure, 2 on usage errors."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 2
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (SketchError, OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        print(f"sketchbridge {args.command}: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


def main() -> None:
    sys.exit(dispatch())
