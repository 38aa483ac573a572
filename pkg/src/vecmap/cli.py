"""Command line entry points: ``vecmap generate|train|eval|render``."""

from __future__ import annotations

import argparse
import logging
import re
import sys
from pathlib import Path

from .checkpoint import CheckpointError, load_checkpoint
from .config import RunConfig
from .evaluate import detections_from_ground_truth, evaluate
from .geometry import MapInstance
from .numerics import ConfigError
from .render import render_svg
from .scene import Scene, SceneParseError, generate_scene, load_scene, save_scene
from .train import TrainingDiverged, detect, model_from_checkpoint, train

log = logging.getLogger("vecmap")


class CliError(Exception):
    pass


def _config(path: str | None) -> RunConfig:
    return RunConfig.load(path) if path else RunConfig()


def scene_files(path: str | Path) -> list[Path]:
    """Scene files in ``path`` (a directory or a single file), ordered by numeric index."""
    p = Path(path)
    if p.is_file():
        return [p]
    if not p.is_dir():
        raise CliError(f"no such scene file or directory: {p}")

    def key(f: Path):
        m = re.search(r"(\d+)$", f.stem)
        return (int(m.group(1)) if m else -1, f.name)

    return sorted((f for f in p.glob("scene_*.txt")), key=key)


def load_scenes(path: str | Path) -> tuple[list[Path], list[Scene]]:
    files = scene_files(path)
    if not files:
        raise CliError(f"no scene_*.txt files in {path}")
    return files, [load_scene(f) for f in files]


def cmd_generate(args) -> int:
    cfg = _config(args.config)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for i in range(args.count):
            save_scene(generate_scene(args.seed + i, cfg.scene_config()), out / f"scene_{i:04d}.txt")
    except OSError as e:
        raise CliError(f"cannot write scenes to {e.filename or out}: {e.strerror}") from e
    log.info("wrote %d scenes to %s", args.count, out)
    return 0


def cmd_train(args) -> int:
    cfg = _config(args.config)
    if args.iterations is not None:
        cfg = cfg.replace(iterations=args.iterations)
    _, scenes = load_scenes(args.scenes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.txt")
    res = train(cfg, scenes, out_dir=out, resume=args.resume)
    if res.log_lines:
        log.info("final: %s", res.log_lines[-1])
    return 0


def cmd_eval(args) -> int:
    expect = RunConfig.load(args.config) if args.config else None
    ck = load_checkpoint(args.checkpoint, expect=expect, force=args.force)
    cfg = ck.config if expect is None else expect
    files, scenes = load_scenes(args.scenes)
    if args.gt_as_predictions:
        dets = detections_from_ground_truth(scenes)
    else:
        model = model_from_checkpoint(ck)
        dets = detect(model, scenes, cfg, args.score_threshold)
    report = evaluate(dets, scenes)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(report.table())
    (out / "report.kv").write_text(report.key_values())
    for i, f in enumerate(files):
        keep = [MapInstance(d.class_id, d.points, d.class_id == 0)
                for d in dets if d.scene == i and d.score >= args.save_threshold]
        save_scene(Scene(scenes[i].seed, keep, scenes[i].range), out / f"pred_{f.stem}.txt")
    sys.stdout.write(report.table())
    return 0


def cmd_render(args) -> int:
    scene = load_scene(args.scene)
    pred = load_scene(args.pred).instances if args.pred else None
    svg = render_svg(scene.instances, scene.range, pred, title=Path(args.scene).name)
    Path(args.out).write_text(svg)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vecmap", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write synthetic scene files")
    g.add_argument("--config")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train the decoder on scene files")
    t.add_argument("--config")
    t.add_argument("--scenes", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume")
    t.add_argument("--iterations", type=int, help="override the config's iteration count")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="Chamfer AP of a checkpoint on scene files")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--scenes", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--config", help="expected config; refuse on fingerprint mismatch")
    e.add_argument("--force", action="store_true", help="ignore a fingerprint mismatch")
    e.add_argument("--score-threshold", type=float, default=0.0)
    e.add_argument("--save-threshold", type=float, default=0.3,
                   help="minimum score for detections written to pred_*.txt")
    e.add_argument("--gt-as-predictions", action="store_true",
                   help="score the ground truth itself (evaluator self-check)")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="draw a scene (and predictions) as SVG")
    r.add_argument("--scene", required=True)
    r.add_argument("--pred")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (CliError, ConfigError, CheckpointError, SceneParseError, TrainingDiverged) as e:
        print(f"vecmap: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
