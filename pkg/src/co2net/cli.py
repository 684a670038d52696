"""Command-line entry point: synth, train, eval, gradcheck, localize."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .autograd import ConfigError, DeterminismError
from .config import RunConfig, load_config
from .data import DecodeError, LoadError, SyntheticSpec, generate_synthetic, load_manifest, manifest_hash
from .evaluation import ReportError
from .localization import localize_video, video_class_scores
from .losses import LOSS_TERMS
from .model import FUSION_MODES, ROLE_MODES, CheckpointError, Co2Net, load_checkpoint
from .pipeline import (
    NonFiniteLossError, PairingError, evaluate, gradcheck_model, infer, proposal_dump, train, write_json,
)
from .plotting import plot_localization, plot_loss_curve, plot_map_vs_iou

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_DATA = 4
EXIT_CHECKPOINT = 5
EXIT_HASH_MISMATCH = 6
EXIT_NONFINITE = 7
EXIT_GRADCHECK = 8
EXIT_REPORT = 9
EXIT_IO = 10


class HashMismatchError(RuntimeError):
    pass


class GradcheckFailed(RuntimeError):
    pass


def _meta_path(checkpoint) -> Path:
    return Path(str(checkpoint) + ".meta.json")


def _add_config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="run configuration JSON")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.FIELD=VALUE",
                   help="override one leaf field; VALUE is parsed as JSON when possible (repeatable)")
    p.add_argument("--fusion", choices=FUSION_MODES, help="shorthand for model.fusion_mode")
    p.add_argument("--delta", choices=("mse", "mae", "kl", "js"), help="shorthand for model.delta_mode")
    p.add_argument("--roles", choices=ROLE_MODES, help="shorthand for model.role_mode")
    p.add_argument("--loss-off", action="append", default=[], choices=[t for t in LOSS_TERMS if t != "mil"],
                   help="disable one loss term (repeatable)")


def _config(args) -> RunConfig:
    overrides = list(args.overrides)
    if args.fusion:
        overrides.append(f"model.fusion_mode={args.fusion}")
    if args.delta:
        overrides.append(f"model.delta_mode={args.delta}")
    if args.roles:
        overrides.append(f"model.role_mode={args.roles}")
    cfg = load_config(args.config, overrides)
    if args.loss_off:
        cfg.loss.enabled = [t for t in cfg.loss.enabled if t not in set(args.loss_off)]
        cfg.validate()
    return cfg


def _manifest(cfg: RunConfig, which: str):
    path = getattr(cfg.paths, which)
    if not path:
        raise ConfigError(f"paths.{which} is not set")
    manifest = load_manifest(path)
    if manifest.feature_dim != cfg.model.D or manifest.num_classes != cfg.model.C:
        raise CheckpointError(
            f"{path}: data has D={manifest.feature_dim}, C={manifest.num_classes} but the model is "
            f"configured for D={cfg.model.D}, C={cfg.model.C}")
    return manifest


def _load_trained(cfg: RunConfig, checkpoint=None) -> tuple[Co2Net, dict]:
    ckpt = Path(checkpoint or cfg.paths.checkpoint)
    meta_file = _meta_path(ckpt)
    if not ckpt.exists():
        raise CheckpointError(f"checkpoint {ckpt} not found")
    if not meta_file.exists():
        raise CheckpointError(f"checkpoint {ckpt} has no {meta_file.name}")
    meta = json.loads(meta_file.read_text(encoding="utf-8"))
    if meta.get("training_hash") != cfg.training_hash():
        raise HashMismatchError(
            f"checkpoint {ckpt} was trained under config {meta.get('training_hash')}, "
            f"current config is {cfg.training_hash()}")
    model = Co2Net(cfg.model, rng=0)
    load_checkpoint(model, ckpt)
    return model, meta


def cmd_synth(args) -> int:
    doc = {}
    if args.spec:
        try:
            doc = json.loads(Path(args.spec).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"spec {args.spec} not found") from None
    if args.seed is not None:
        doc["seed"] = args.seed
    spec = SyntheticSpec.from_dict(doc)
    out = Path(args.out)
    splits = generate_synthetic(spec, out)
    cfg_path = out / "config.json"
    if not cfg_path.exists():
        cfg = RunConfig()
        # desk-scale protocol used for the synthetic ablations
        cfg.model.D, cfg.model.C, cfg.model.hidden = spec.D, spec.C, 64
        cfg.train.snippets_per_video, cfg.train.lr, cfg.train.max_steps = 80, 1e-4, 2000
        cfg.train.seed = 0
        cfg.paths.manifest, cfg.paths.test_manifest = "train.json", "test.json"
        cfg.paths.checkpoint, cfg.paths.report_dir = "checkpoint.co2w", "reports"
        write_json(cfg_path, cfg.to_dict())
    for split, (manifest, records) in splits.items():
        n_seg = sum(len(r.gt_segments) for r in records)
        print(f"{split}: {len(records)} videos, {manifest.num_classes} classes, {n_seg} segments")
    print(f"manifest hash: {manifest_hash(out)}")
    print(f"config: {cfg_path}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    manifest = _manifest(cfg, "manifest")
    records = manifest.load_all()
    report_dir = Path(cfg.paths.report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    ckpt = Path(cfg.paths.checkpoint)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    tag = {"config_hash": cfg.training_hash()}
    log_path = report_dir / "train_log.jsonl"
    result = train(cfg, records, log_path=log_path, checkpoint_path=ckpt, tag=tag)
    write_json(_meta_path(ckpt), {"training_hash": cfg.training_hash(), "config_hash": cfg.full_hash(),
                                  "steps": result.steps, "config": cfg.to_dict(), "version": __version__})
    plot_loss_curve(result.log_lines, report_dir / "loss_curve.png")
    if result.log_lines:
        print(result.log_lines[-1])
    print(f"checkpoint: {ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    manifest = _manifest(cfg, "test_manifest")
    model, meta = _load_trained(cfg, args.checkpoint)
    records = manifest.load_all()
    report, proposals = evaluate(model, cfg, records, manifest.class_names)
    report.metadata = {"config_hash": cfg.full_hash(), "training_hash": meta["training_hash"],
                       "steps": meta.get("steps"), "num_videos": len(records)}
    out = Path(cfg.paths.report_dir)
    write_json(out / "report.json", report.to_json())
    csv_text = report.to_csv() + f"config_hash,{cfg.full_hash()}\n"
    (out / "report.csv").write_text(csv_text, encoding="utf-8")
    fps = {r.id: r.fps for r in records if r.fps}
    write_json(out / "proposals.json", {"config_hash": cfg.full_hash(),
                                        "proposals": proposal_dump(proposals, manifest.class_names, fps)})
    title = f"fusion={cfg.model.fusion_mode} roles={cfg.model.role_mode} [{cfg.full_hash()}]"
    plot_map_vs_iou(report, out / "map_vs_iou.png", title)
    print(json.dumps({"avg_map": report.avg_map, "config_hash": cfg.full_hash()}))
    return EXIT_OK


def cmd_localize(args) -> int:
    cfg = _config(args)
    manifest = _manifest(cfg, args.split)
    entry = next((v for v in manifest.videos if v.id == args.video), None)
    if entry is None:
        raise LoadError(f"video {args.video!r} not in {getattr(cfg.paths, args.split)}")
    model, _ = _load_trained(cfg, args.checkpoint)
    record = manifest.load_video(entry)
    out = infer(model, record)
    props = localize_video(out, cfg.localize, cfg.loss.topk_divisor)
    dumped = proposal_dump({record.id: props}, manifest.class_names, {record.id: record.fps} if record.fps else None)
    tracks = {k: getattr(out, k).data.tolist() for k in ("a_rgb", "a_flow", "a_fused")}
    scores = video_class_scores(out.tcam_supp.data, cfg.loss.topk_divisor)
    doc = {"config_hash": cfg.full_hash(), "video_id": record.id, "tracks": tracks,
           "class_scores": dict(zip(manifest.class_names, scores.tolist())),
           "gt_segments": [[s, e, manifest.class_names[c]] for s, e, c in record.gt_segments],
           "proposals": dumped}
    dest = Path(cfg.paths.report_dir) / f"localize_{record.id}.json"
    write_json(dest, doc)
    plot_localization(tracks, dumped, record.gt_segments, dest.with_suffix(".png"),
                      title=f"{record.id} [{cfg.full_hash()}]")
    print(f"{len(dumped)} proposals -> {dest}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _config(args)
    records = _manifest(cfg, "manifest").load_all()
    report = gradcheck_model(cfg, records, h=args.h, T_fixed=args.snippets)
    doc = {"config_hash": cfg.training_hash(), "h": args.h, "tolerance": args.tol,
           "max_rel_error": report.max_rel_error, "evaluations": report.evaluations,
           "per_param": report.per_param}
    if args.out:
        write_json(args.out, doc)
    print(json.dumps({k: doc[k] for k in ("config_hash", "max_rel_error", "evaluations")}))
    if report.max_rel_error > args.tol:
        raise GradcheckFailed(f"max relative error {report.max_rel_error:.3e} exceeds {args.tol:.1e}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="co2net", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a seeded synthetic two-modality dataset")
    s.add_argument("--spec", help="JSON with SyntheticSpec fields (defaults otherwise)")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train and write checkpoint, loss log and loss curve")
    _add_config_args(t)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="localize the test split and write mAP reports")
    _add_config_args(e)
    e.add_argument("--checkpoint", help="defaults to paths.checkpoint")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of all parameter gradients")
    _add_config_args(g)
    g.add_argument("--h", type=float, default=1e-3, help="central-difference step")
    g.add_argument("--tol", type=float, default=1e-4, help="maximum relative error")
    g.add_argument("--snippets", type=int, default=20, help="snippets per sampled video")
    g.add_argument("--out", help="write the per-parameter report here")
    g.set_defaults(func=cmd_gradcheck)

    lo = sub.add_parser("localize", help="dump attention tracks and proposals for one video")
    _add_config_args(lo)
    lo.add_argument("--video", required=True)
    lo.add_argument("--split", choices=("manifest", "test_manifest"), default="test_manifest")
    lo.add_argument("--checkpoint")
    lo.set_defaults(func=cmd_localize)
    return p


_EXIT_FOR = [
    (ConfigError, EXIT_CONFIG),
    (PairingError, EXIT_CONFIG),
    (HashMismatchError, EXIT_HASH_MISMATCH),
    (CheckpointError, EXIT_CHECKPOINT),
    ((LoadError, DecodeError), EXIT_DATA),
    (NonFiniteLossError, EXIT_NONFINITE),
    ((GradcheckFailed, DeterminismError), EXIT_GRADCHECK),
    (ReportError, EXIT_REPORT),
    (OSError, EXIT_IO),
]


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        for types, code in _EXIT_FOR:
            if isinstance(exc, types):
                print(f"error: {exc}", file=sys.stderr)
                return code
        raise


if __name__ == "__main__":
    sys.exit(main())
