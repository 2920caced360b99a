"""Command-line surface tying the engine together.

Exit codes: 0 success, 2 validation errors (bad flags, files, or config
values), 1 runtime failures.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .config import ConfigError, MiningConfig
from .features import FeatureMap
from .formats import (
    DetectionDump,
    FormatError,
    ImageRecord,
    load_detections,
    load_features,
    load_params,
    load_pool,
    save_detections,
    save_params,
    save_pool,
    write_stats_csv,
)
from .geometry import Box
from .metrics import pool_tp_count
from .offline import adaptive_threshold, calibrate, candidates_from_detections
from .features import build_prototypes
from .online import finetune, train_loop
from .toy.benchmark import evaluate_model, run_benchmark, train_initial
from .toy.io import load_world, save_world
from .toy.world import generate_world


def _load_config(path: str | None, seed: int | None = None) -> MiningConfig:
    overrides = {} if seed is None else {"seed": seed}
    if path is None:
        return MiningConfig(**overrides)
    return MiningConfig.from_file(path, **overrides)


def _load_shots(path: Path, fmap_dir: Path) -> list[tuple[FeatureMap, Box, int]]:
    import json

    raw = json.loads(path.read_text())
    shots = []
    for i, entry in enumerate(raw):
        try:
            box = Box(*entry["box"])
            fmap = load_features(fmap_dir / f"{entry['image_id']}.fmap")
            shots.append((fmap, box, int(entry["label"])))
        except (KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"{path}: shots[{i}]: {exc}") from exc
    return shots


def cmd_mine_offline(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    dump = load_detections(args.detections)
    fmap_dir = Path(args.features)
    shots = _load_shots(Path(args.shots), fmap_dir)
    prototypes = build_prototypes(shots, config.roi_pool_size)
    novel = set(dump.novel_class_ids)

    candidates = []
    for img in dump.images:
        if not img.detections:
            continue
        cands = candidates_from_detections(img.image_id, list(img.detections), config.nms_iou)
        candidates.extend(c for c in cands if c.label in novel)
    candidates = calibrate(
        candidates,
        lambda image_id: load_features(fmap_dir / f"{image_id}.fmap"),
        prototypes,
        config.temperature,
        config.roi_pool_size,
        novel_classes=novel,
    )
    grouped = {c: [] for c in sorted(novel)}
    for cand in candidates:
        grouped[cand.label].append(cand)
    pool = adaptive_threshold(grouped, config.alpha, config.max_per_class)
    save_pool(pool, args.out)

    print(f"{'class':>8} {'mean':>10} {'std':>10} {'threshold':>10} {'kept':>6}")
    for class_id in pool.classes:
        st = pool.stats[class_id]
        if st.defined:
            print(
                f"{class_id:>8} {st.mean:>10.4f} {st.std:>10.4f} "
                f"{st.threshold:>10.4f} {pool.count(class_id):>6}"
            )
        else:
            print(f"{class_id:>8} {'-':>10} {'-':>10} {'-':>10} {0:>6}")
    print(f"pool written to {args.out} ({pool.total()} instances)")
    return 0


def cmd_mine_online(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    world = load_world(args.world)
    config = config.replace(seed=world.config.seed)
    pool = load_pool(args.pool)

    from .toy.learner import ToyLearner

    init_path = Path(args.world) / "initial_model.bin"
    if init_path.exists():
        learner = ToyLearner(world.n_classes, world.latent_dim, config)
        learner.set_params(load_params(init_path))
    else:
        learner = train_initial(world, config)

    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 5000]))
    params, records, losses = train_loop(
        learner, world.base_pairs(), pool, config, world.novel_classes, rng
    )
    ft_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 5001]))
    params = finetune(learner, world.shot_pairs(), config, ft_rng)
    save_params(params, args.out)
    if args.stats:
        write_stats_csv(records, losses, args.stats)
    kept_online = sum(r.n_online_kept for r in records)
    kept_offline = sum(r.n_offline_kept for r in records)
    print(
        f"trained {config.online_iters} iterations "
        f"(+{config.finetune_iters} fine-tune); kept online={kept_online} "
        f"offline={kept_offline}; model written to {args.out}"
    )
    return 0


def cmd_evaluate(args: argparse.Namespace) -> int:
    world = load_world(args.world)
    config = world.config
    from .toy.learner import ToyLearner

    learner = ToyLearner(world.n_classes, world.latent_dim, config)
    learner.set_params(load_params(args.model))
    report = evaluate_model(learner, None, world, config)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(report.to_table())
    return 0


def cmd_bench(args: argparse.Namespace) -> int:
    config = _load_config(args.config, seed=args.seed)
    report = run_benchmark(config)
    print(report.to_table())
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n")
    return 0


def cmd_audit_pool(args: argparse.Namespace) -> int:
    pool = load_pool(args.pool)
    dump = load_detections(args.gt)
    counts = pool_tp_count(pool, dump.gts_by_image(include_unannotated=True))
    print(f"{'class':>8} {'TP':>6} {'FP':>6}")
    total_tp = total_fp = 0
    for class_id in sorted(counts):
        tp, fp = counts[class_id]
        total_tp += tp
        total_fp += fp
        print(f"{class_id:>8} {tp:>6} {fp:>6}")
    print(f"{'total':>8} {total_tp:>6} {total_fp:>6}")
    return 0


def cmd_gen_world(args: argparse.Namespace) -> int:
    config = _load_config(args.config, seed=args.seed)
    world = generate_world(config)
    out = Path(args.out)
    save_world(world, out)

    learner = train_initial(world, config)
    save_params(learner.get_params(), out / "initial_model.bin")

    from .offline import detect_image

    detector = learner.as_detector()
    dump = load_detections(out / "detections.json")
    by_id = {}
    for image_id, scene in world.base_pairs():
        cands = detect_image(detector, image_id, scene, config.nms_iou)
        by_id[image_id] = tuple(c.scored_box for c in cands)
    images = tuple(
        ImageRecord(
            image_id=img.image_id,
            width=img.width,
            height=img.height,
            detections=by_id.get(img.image_id, ()),
            gts=img.gts,
        )
        for img in dump.images
    )
    save_detections(DetectionDump(classes=dump.classes, images=images), out / "detections.json")
    n_dets = sum(len(v) for v in by_id.values())
    print(
        f"world written to {out}: {len(world.base_scenes)} base scenes, "
        f"{len(world.shot_scenes)} shot scenes, {len(world.test_scenes)} test scenes, "
        f"{n_dets} initial detections"
    )
    return 0


def cmd_print_config(args: argparse.Namespace) -> int:
    config = _load_config(args.config)
    for line in config.to_lines():
        print(line)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="iminer",
        description="Pseudo-label mining engine with a synthetic benchmark world.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("mine-offline", help="mine a candidate pool from detection dumps")
    p.add_argument("--config", default=None)
    p.add_argument("--detections", required=True)
    p.add_argument("--features", required=True, help="directory of <image_id>.fmap files")
    p.add_argument("--shots", required=True, help="shots JSON (image_id, box, label)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_mine_offline)

    p = sub.add_parser("mine-online", help="teacher-student training against a pool")
    p.add_argument("--config", default=None)
    p.add_argument("--pool", required=True)
    p.add_argument("--world", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stats", default=None)
    p.set_defaults(func=cmd_mine_online)

    p = sub.add_parser("evaluate", help="AP report for a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--world", required=True)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench", help="run the full ablation ladder")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("audit-pool", help="TP/FP table of a pool against ground truth")
    p.add_argument("--pool", required=True)
    p.add_argument("--gt", required=True)
    p.set_defaults(func=cmd_audit_pool)

    p = sub.add_parser("gen-world", help="generate and dump a synthetic world")
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_world)

    p = sub.add_parser("print-config", help="echo the effective configuration")
    p.add_argument("--config", default=None)
    p.set_defaults(func=cmd_print_config)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
