"""Command-line surface: dataset generation, training, evaluation, single
scene fusion, and relation-matrix export.

Exit codes: 0 success, 1 usage error, 2 data/format error, 3 numeric
failure. All randomness flows from explicit --seed flags, so every
subcommand is byte-for-byte reproducible, at any --jobs count.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import fusion, imageio, relembed, report, trainer
from .dataset import load_dataset, load_scene, write_dataset
from .errors import ConfigError, DataFormatError, NumericError, SogsegError
from .scenegen import SceneConfig, perturb_detections
from .tensorcore import finite_diff_check, write_tensor


class CliParser(argparse.ArgumentParser):
    """Argument parser that exits 1 (not 2) on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def build_parser() -> CliParser:
    parser = CliParser(prog="sogseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CliParser)

    p_gen = sub.add_parser("gen", help="generate a synthetic dataset directory")
    p_gen.add_argument("--out", required=True, help="output dataset directory")
    p_gen.add_argument("--count", required=True, type=int, help="number of scenes")
    p_gen.add_argument("--seed", required=True, type=int)
    p_gen.add_argument("--config", help="JSON file overriding scene-config fields")
    p_gen.add_argument("--jobs", type=int, default=1, help="parallel scene workers")
    p_gen.set_defaults(func=cmd_gen)

    p_train = sub.add_parser("train", help="train the overlap embedding")
    p_train.add_argument("--data", required=True, help="dataset directory")
    p_train.add_argument("--out", required=True, help="model file to write")
    p_train.add_argument("--epochs", type=int, default=30)
    p_train.add_argument(
        "--mode",
        choices=list(trainer.MODES),
        default=trainer.MODE_SYM,
        help="supervision mode",
    )
    p_train.add_argument("--ph", type=int, choices=(1, 2), default=2)
    p_train.add_argument("--lr", type=float, default=0.01)
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--batch-size", type=int, default=1)
    p_train.add_argument("--report", help="report prefix (default: <out>_report)")
    p_train.add_argument(
        "--self-check",
        action="store_true",
        help="gradient-check the composed pipeline before training (exit 3 on failure)",
    )
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="evaluate a model on a dataset")
    p_eval.add_argument("--data", required=True)
    p_eval.add_argument("--model", required=True)
    p_eval.add_argument("--report", required=True, help="JSON report path")
    p_eval.add_argument("--ph", type=int, choices=(1, 2), default=2)
    p_eval.add_argument("--jobs", type=int, default=1)
    p_eval.set_defaults(func=cmd_eval)

    p_fuse = sub.add_parser("fuse", help="run one scene through a fusion pipeline")
    p_fuse.add_argument("--scene", required=True, help="scene directory (DIR/sceneK)")
    p_fuse.add_argument("--model", required=True)
    p_fuse.add_argument("--mode", choices=("sog", "heuristic", "prior"), required=True)
    p_fuse.add_argument("--priors", help="JSON file of [above, below] class-id pairs")
    p_fuse.add_argument("--ph", type=int, choices=(1, 2), default=2)
    p_fuse.add_argument("--out", required=True, help="output file prefix")
    p_fuse.set_defaults(func=cmd_fuse)

    p_export = sub.add_parser("export", help="export relation matrices for one scene")
    p_export.add_argument("--scene", required=True, help="scene directory (DIR/sceneK)")
    p_export.add_argument("--model", required=True)
    p_export.add_argument("--out", required=True, help="output file prefix")
    p_export.set_defaults(func=cmd_export)
    return parser


def _load_scene_config(path: str | None) -> SceneConfig:
    if path is None:
        return SceneConfig()
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataFormatError(f"{path}: cannot read config ({exc})") from exc
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: malformed config JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise DataFormatError(f"{path}: config must be a JSON object")
    return SceneConfig.from_dict(doc)


def cmd_gen(args) -> int:
    config = _load_scene_config(args.config)
    write_dataset(args.out, config, args.count, args.seed, jobs=max(1, args.jobs))
    print(f"wrote {args.count} scenes to {args.out}")
    return 0


def _self_check(records, config, cfg) -> None:
    preps = [trainer.prepare_scene(r) for r in records]
    preps = [p for p in preps if p.subset.size >= 2]
    if not preps:
        raise ConfigError("--self-check needs a scene with overlapping instances")
    prep = preps[0]
    model = relembed.EmbedModel.init(
        cfg.dims(config.n_thing_classes),
        np.random.default_rng(cfg.seed),
    )

    def loss_fn(store):
        lp, lr_ = trainer.scene_loss(store, prep, cfg, accumulate=True)
        return cfg.lambda_panoptic * lp + cfg.lambda_relation * lr_

    result = finite_diff_check(loss_fn, model.store, eps=1e-3, tol=1e-4, max_coords=8)
    if not result.passed:
        raise NumericError(
            f"gradient self-check failed: worst relative error {result.worst:.3e}"
            + (f"; {result.failures[0]}" if result.failures else "")
        )
    print(f"self-check passed: worst relative error {result.worst:.3e}")


def cmd_train(args) -> int:
    config, records = load_dataset(args.data)
    cfg = trainer.TrainConfig(
        epochs=args.epochs,
        lr=args.lr,
        mode=args.mode,
        ph=args.ph,
        seed=args.seed,
        batch_size=args.batch_size,
    )
    cfg.validate()
    if args.self_check:
        _self_check(records, config, cfg)
    model, train_report = trainer.train(records, config, cfg)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    relembed.save_model(out, model)
    prefix = args.report if args.report else str(out.with_suffix("")) + "_report"
    paths = report.write_train_report(prefix, train_report)
    last = train_report.epochs[-1]
    print(
        f"trained {cfg.epochs} epochs in {train_report.wall_time_s:.1f}s: "
        f"loss_panoptic={last.loss_panoptic:.4f} eval_oa={last.eval_oa:.4f} "
        f"eval_pq={last.eval_pq:.4f}",
        file=sys.stderr,
    )
    print(f"wrote {out} and {', '.join(str(p) for p in paths)}")
    return 0


def cmd_eval(args) -> int:
    config, records = load_dataset(args.data)
    model = relembed.load_model(args.model)
    fuse_cfg = fusion.FusionConfig(ph=args.ph)
    result = trainer.evaluate(records, config, model, fuse_cfg, jobs=max(1, args.jobs))
    paths = report.write_eval_report(args.report, result)
    print(
        f"mean_oa={result.mean_oa:.4f} pq_sog={result.pq_sog.pq:.4f} "
        f"pq_heuristic={result.pq_heuristic.pq:.4f} pq_prior={result.pq_prior.pq:.4f}"
    )
    print(f"wrote {', '.join(str(p) for p in paths)}")
    return 0


def _load_priors(path: str | None) -> tuple[tuple[int, int], ...]:
    if path is None:
        return ()
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataFormatError(f"{path}: cannot read priors ({exc})") from exc
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: malformed priors JSON ({exc})") from exc
    try:
        pairs = tuple((int(a), int(b)) for a, b in doc)
    except (TypeError, ValueError) as exc:
        raise DataFormatError(f"{path}: priors must be a list of [above, below] pairs") from exc
    return pairs


def cmd_fuse(args) -> int:
    config, record = load_scene(args.scene)
    model = relembed.load_model(args.model)
    scene = record.scene
    priors = _load_priors(args.priors)
    fuse_cfg = fusion.FusionConfig(ph=args.ph, priors=priors or fusion.default_priors(scene.n_thing_classes))
    dets = perturb_detections(scene, config, record.seed)
    if args.mode == "sog":
        pano = fusion.sog_infer(dets, record.pack.sem_logits, model, fuse_cfg)
    else:
        kept = fusion.confidence_filter(dets, fuse_cfg.min_score)
        if args.mode == "heuristic":
            pano = fusion.heuristic_fuse(kept, record.pack.sem_logits, fuse_cfg, scene.n_thing_classes)
        else:
            pano = fusion.prior_fuse(kept, record.pack.sem_logits, fuse_cfg, scene.n_thing_classes)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    imageio.write_map_pgm(prefix.with_suffix(".pgm"), pano.ids)
    imageio.write_ppm(prefix.with_suffix(".ppm"), imageio.panoptic_rgb(pano.ids))
    table = {
        "mode": args.mode,
        "scene": record.index,
        "segments": {
            str(sid): {"category": info.category, "isthing": info.isthing}
            for sid, info in sorted(pano.segments.items())
        },
    }
    report.dump_json(prefix.with_suffix(".json"), table)
    print(f"wrote {prefix}.pgm, {prefix}.ppm, {prefix}.json")
    return 0


def cmd_export(args) -> int:
    config, record = load_scene(args.scene)
    model = relembed.load_model(args.model)
    prep = trainer.prepare_scene(record)
    overlaps = trainer.predict_overlaps(model, prep)
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    outputs = {
        "overlap": overlaps,
        "sym_gt": prep.sym_gt,
        "asym_gt": prep.asym_gt,
    }
    written = []
    for name, matrix in outputs.items():
        ppm = Path(f"{prefix}_{name}.ppm")
        imageio.write_ppm(ppm, imageio.heatmap_rgb(matrix))
        sogt = Path(f"{prefix}_{name}.sogt")
        write_tensor(sogt, matrix)
        written += [ppm, sogt]
    print(f"wrote {', '.join(str(p) for p in written)}")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"sogseg: numeric failure: {exc}", file=sys.stderr)
        return 3
    except (DataFormatError, ConfigError, SogsegError) as exc:
        print(f"sogseg: error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"sogseg: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
