"""Desk-scale training and evaluation of the overlap embedding.

Training uses ground-truth boxes, classes, and mask patches as embedding
inputs; the synthetic logits are fixed data, so the embedding parameters are
the only thing learned. Per scene, instances that overlap nobody are filtered
out of the embedding batch (their overlap rows stay zero), logits are pasted
and resolved, and the per-pixel channel cross-entropy plus an optional
relation loss drive the chained vector-Jacobian products back into the store.
"""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict

import numpy as np

from . import fusion, panohead, relations, relembed, resolver
from .dataset import SceneRecord
from .errors import ConfigError, NumericError
from .metrics import PQReport, panoptic_quality
from .relembed import EmbedDims, EmbedModel
from .scenegen import SceneConfig, gt_panoptic_map, perturb_detections
from .tensorcore import ParamStore, sgd_step, stable_rng

MODE_PANOPTIC = "panoptic_only"
MODE_SYM = "panoptic+lr"
MODE_ASYM = "panoptic+lrstar"
MODES = (MODE_PANOPTIC, MODE_SYM, MODE_ASYM)

# RNG streams under the training seed.
STREAM_INIT = 10
STREAM_SHUFFLE = 11


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    lr: float = 0.01
    lr_decay_factor: float = 0.1
    lr_decay_epochs: tuple[int, ...] | None = None  # default: one drop at 2/3
    warmup_epochs: int = 2
    momentum: float = 0.9
    weight_decay: float = 1e-4
    # Optional cap on the global gradient norm per step. Off by default: the
    # per-scene gradient noise is what lets wrongly locked overlap directions
    # escape; capping it freezes them.
    grad_clip: float | None = None
    lambda_panoptic: float = 0.1
    lambda_relation: float = 1.0
    mode: str = MODE_SYM
    ph: int = 2
    k: float = 2.0
    batch_size: int = 1
    seed: int = 0
    cat_rank: int = 16
    cat_dim: int = 16
    app_rank: int = 16
    app_dim: int = 16
    geom_dim: int = 16
    epoch_eval_scenes: int = 32

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.lambda_panoptic < 0 or self.lambda_relation < 0:
            raise ConfigError("loss weights must be >= 0")
        if self.mode not in MODES:
            raise ConfigError(f"unknown supervision mode {self.mode!r}")
        if self.ph not in (1, 2):
            raise ConfigError(f"unknown panoptic-head variant {self.ph}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")

    def decay_epochs(self) -> tuple[int, ...]:
        if self.lr_decay_epochs is not None:
            return self.lr_decay_epochs
        return ((2 * self.epochs) // 3,)

    def lr_at(self, epoch: int) -> float:
        drops = sum(1 for e in self.decay_epochs() if epoch >= e)
        lr = self.lr * self.lr_decay_factor**drops
        if epoch < self.warmup_epochs:
            # Linear ramp, uniform across all parameters.
            lr *= (epoch + 1) / (self.warmup_epochs + 1)
        return lr

    def dims(self, n_thing_classes: int) -> EmbedDims:
        return EmbedDims(
            n_thing_classes=n_thing_classes,
            cat_rank=self.cat_rank,
            cat_dim=self.cat_dim,
            app_rank=self.app_rank,
            app_dim=self.app_dim,
            geom_dim=self.geom_dim,
        )


@dataclass
class EpochStats:
    epoch: int
    lr: float
    loss_panoptic: float
    loss_relation: float
    eval_oa: float
    eval_pq: float


@dataclass
class TrainReport:
    epochs: list[EpochStats] = field(default_factory=list)
    wall_time_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "wall_time_s": self.wall_time_s,
            "epochs": [asdict(e) for e in self.epochs],
        }


@dataclass
class PreparedScene:
    """Static per-scene features shared across epochs: embedding inputs,
    relation targets, and the pasted/extracted logit stacks."""

    record: SceneRecord
    cats: np.ndarray
    boxes: np.ndarray
    patches784: np.ndarray
    sym_gt: np.ndarray
    asym_gt: np.ndarray
    subset: np.ndarray
    stack: np.ndarray
    sem_stack: np.ndarray


def prepare_scene(record: SceneRecord) -> PreparedScene:
    scene, pack = record.scene, record.pack
    sym = relations.sym_relation(scene.amodal_stack())
    asym = relations.approx_overlap_gt(scene.amodal_stack(), scene.visible_stack())
    boxes = scene.boxes()
    stack, _ = resolver.paste_stack(pack.patch_logits, boxes, scene.height, scene.width)
    sem_stack = np.empty_like(stack)
    for i in range(scene.n_instances):
        sem_stack[:, :, i] = panohead.extract_sem_logit(
            pack.sem_logits, boxes[i], scene.instances[i].class_id
        )
    return PreparedScene(
        record=record,
        cats=scene.cat_onehot(),
        boxes=boxes,
        patches784=scene.mask_patches(),
        sym_gt=sym,
        asym_gt=asym,
        subset=relations.filter_overlapping(sym),
        stack=stack,
        sem_stack=sem_stack,
    )


def scene_loss(
    store: ParamStore,
    prep: PreparedScene,
    cfg: TrainConfig,
    accumulate: bool = True,
) -> tuple[float, float]:
    """Forward pass for one scene; optionally accumulates parameter
    gradients of lambda_pan * L_panoptic + lambda_rel * L_relation."""
    scene, pack = prep.record.scene, prep.record.pack
    n = scene.n_instances
    sub = prep.subset
    embedded = sub.size >= 2

    full = np.zeros((n, n))
    vjp_embed = None
    if embedded:
        overlaps, vjp_embed = relembed.overlap_from_features(
            store, prep.cats[sub], prep.boxes[sub], prep.patches784[sub]
        )
        full[np.ix_(sub, sub)] = overlaps

    resolved, vjp_resolve = resolver.resolve(prep.stack, full)

    if cfg.ph == 1:
        inst_logits, vjp_combine = panohead.combine_ph1(prep.sem_stack, resolved)
    else:
        inst_logits, vjp_combine = panohead.combine_ph2(prep.sem_stack, resolved, cfg.k)
    stuff_logits = pack.sem_logits[:, :, scene.n_thing_classes :]
    panoptic, vjp_assemble = panohead.assemble(inst_logits, stuff_logits)
    loss_pan, vjp_ce = panohead.panoptic_ce_loss(panoptic, scene.id_map)

    loss_rel = 0.0
    vjp_rel = None
    if embedded and cfg.mode != MODE_PANOPTIC:
        if cfg.mode == MODE_SYM:
            loss_rel, vjp_rel = relations.relation_loss(overlaps, prep.sym_gt[np.ix_(sub, sub)])
        else:
            loss_rel, vjp_rel = relations.weak_relation_loss(
                overlaps, prep.asym_gt[np.ix_(sub, sub)]
            )

    if not np.isfinite(loss_pan) or not np.isfinite(loss_rel):
        raise NumericError(
            f"non-finite loss on scene {prep.record.index}: "
            f"panoptic={loss_pan}, relation={loss_rel}"
        )

    if accumulate and embedded:
        d_panoptic = vjp_ce(cfg.lambda_panoptic)
        d_inst, _ = vjp_assemble(d_panoptic)
        _, d_resolved = vjp_combine(d_inst)
        _, d_full = vjp_resolve(d_resolved)
        d_overlaps = d_full[np.ix_(sub, sub)]
        if vjp_rel is not None:
            d_overlaps = d_overlaps + vjp_rel(cfg.lambda_relation)
        for name, g in vjp_embed(d_overlaps).items():
            store.accumulate(name, g)

    return loss_pan, loss_rel


def clip_gradients(store: ParamStore, max_norm: float | None) -> None:
    """Scale accumulated gradients so their global L2 norm is at most
    ``max_norm``."""
    if max_norm is None:
        return
    total = np.sqrt(sum(float((store.grad(n) ** 2).sum()) for n in store.names()))
    if total > max_norm:
        store.scale_grads(max_norm / total)


def predict_overlaps(model: EmbedModel, prep: PreparedScene) -> np.ndarray:
    """Overlap relation matrix for every instance in a scene (no filtering)."""
    overlaps, _ = relembed.overlap_from_features(
        model.store, prep.cats, prep.boxes, prep.patches784
    )
    return overlaps


def train(
    records: list[SceneRecord],
    config: SceneConfig,
    cfg: TrainConfig,
    checkpoint_dir=None,
    checkpoint_every: int = 0,
) -> tuple[EmbedModel, TrainReport]:
    """Train the embedding on a dataset; deterministic in ``cfg.seed``."""
    cfg.validate()
    if not records:
        raise ConfigError("training dataset is empty")
    t0 = time.perf_counter()
    dims = cfg.dims(config.n_thing_classes)
    model = EmbedModel.init(dims, stable_rng(cfg.seed, STREAM_INIT))
    store = model.store

    prepared = [prepare_scene(r) for r in records]
    if cfg.mode != MODE_PANOPTIC and not any(p.subset.size >= 2 for p in prepared):
        import warnings

        warnings.warn(
            "no scene has overlapping instances; relation supervision is inactive",
            stacklevel=2,
        )

    eval_preps = prepared[: cfg.epoch_eval_scenes]
    fuse_cfg = fusion.FusionConfig(ph=cfg.ph, k=cfg.k)
    report = TrainReport()
    for epoch in range(cfg.epochs):
        lr = cfg.lr_at(epoch)
        order = stable_rng(cfg.seed, STREAM_SHUFFLE, epoch).permutation(len(prepared))
        pan_sum = 0.0
        rel_sum = 0.0
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start : start + cfg.batch_size]
            for idx in batch:
                lp, lr_loss = scene_loss(store, prepared[idx], cfg, accumulate=True)
                pan_sum += lp
                rel_sum += lr_loss
            if len(batch) > 1:
                store.scale_grads(1.0 / len(batch))
            clip_gradients(store, cfg.grad_clip)
            sgd_step(store, lr, cfg.momentum, cfg.weight_decay)

        oa = _epoch_oa(model, eval_preps)
        pq = _epoch_pq(model, config, eval_preps, fuse_cfg)
        report.epochs.append(
            EpochStats(
                epoch=epoch,
                lr=lr,
                loss_panoptic=pan_sum / len(prepared),
                loss_relation=rel_sum / len(prepared),
                eval_oa=oa,
                eval_pq=pq,
            )
        )
        if checkpoint_dir is not None and checkpoint_every > 0 and (epoch + 1) % checkpoint_every == 0:
            from pathlib import Path

            relembed.save_model(Path(checkpoint_dir) / f"checkpoint_{epoch + 1}.json", model)

    report.wall_time_s = time.perf_counter() - t0
    return model, report


def _epoch_oa(model: EmbedModel, preps: list[PreparedScene]) -> float:
    vals = []
    for p in preps:
        if p.record.scene.n_instances >= 2:
            vals.append(relations.overlap_accuracy(predict_overlaps(model, p), p.asym_gt))
    return float(np.mean(vals)) if vals else 0.0


def _epoch_pq(
    model: EmbedModel,
    config: SceneConfig,
    preps: list[PreparedScene],
    fuse_cfg: fusion.FusionConfig,
) -> float:
    reports = []
    for p in preps:
        dets = perturb_detections(p.record.scene, config, p.record.seed)
        pred = fusion.sog_infer(dets, p.record.pack.sem_logits, model, fuse_cfg)
        reports.append(panoptic_quality(pred, gt_panoptic_map(p.record.scene)))
    return PQReport.merge(reports).pq if reports else 0.0


# ---------------------------------------------------------------------------
# Evaluation


@dataclass
class SceneEval:
    index: int
    n_instances: int
    oa: float | None
    pq_sog: PQReport
    pq_heuristic: PQReport
    pq_prior: PQReport


@dataclass
class EvalReport:
    mean_oa: float
    baseline_oa: float
    pq_sog: PQReport
    pq_heuristic: PQReport
    pq_prior: PQReport
    scenes: list[SceneEval]

    def to_dict(self) -> dict:
        return {
            "mean_oa": self.mean_oa,
            "baseline_oa": self.baseline_oa,
            "pq_sog": self.pq_sog.to_dict(),
            "pq_heuristic": self.pq_heuristic.to_dict(),
            "pq_prior": self.pq_prior.to_dict(),
            "n_scenes": len(self.scenes),
        }


def _eval_one(
    record: SceneRecord,
    config: SceneConfig,
    model: EmbedModel,
    fuse_cfg: fusion.FusionConfig,
    relation_fn=None,
) -> SceneEval:
    prep = prepare_scene(record)
    scene = record.scene
    oa = None
    if scene.n_instances >= 2:
        overlaps = relation_fn(record) if relation_fn else predict_overlaps(model, prep)
        oa = relations.overlap_accuracy(overlaps, prep.asym_gt)

    dets = perturb_detections(scene, config, record.seed)
    gt = gt_panoptic_map(scene)
    # All three routes see the same detection preprocessing; they differ
    # only in how they resolve the surviving masks into a panoptic map.
    kept = [
        d
        for d, _ in fusion.nms_like(
            fusion.confidence_filter(dets, fuse_cfg.min_score),
            fuse_cfg.overlap_threshold,
            scene.height,
            scene.width,
        )
    ]
    prior_cfg = fuse_cfg
    if not prior_cfg.priors:
        prior_cfg = fusion.FusionConfig(
            min_score=fuse_cfg.min_score,
            overlap_threshold=fuse_cfg.overlap_threshold,
            min_stuff_area=fuse_cfg.min_stuff_area,
            priors=fusion.default_priors(scene.n_thing_classes),
            ph=fuse_cfg.ph,
            k=fuse_cfg.k,
        )
    return SceneEval(
        index=record.index,
        n_instances=scene.n_instances,
        oa=oa,
        pq_sog=panoptic_quality(
            fusion.sog_infer(dets, record.pack.sem_logits, model, fuse_cfg), gt
        ),
        pq_heuristic=panoptic_quality(
            fusion.heuristic_fuse(kept, record.pack.sem_logits, fuse_cfg, scene.n_thing_classes),
            gt,
        ),
        pq_prior=panoptic_quality(
            fusion.prior_fuse(kept, record.pack.sem_logits, prior_cfg, scene.n_thing_classes),
            gt,
        ),
    )


def _eval_worker(args) -> SceneEval:
    return _eval_one(*args)


def evaluate(
    records: list[SceneRecord],
    config: SceneConfig,
    model: EmbedModel,
    fuse_cfg: fusion.FusionConfig | None = None,
    relation_fn=None,
    jobs: int = 1,
) -> EvalReport:
    """Relation accuracy plus panoptic quality of the three fusion routes on
    perturbed detections. Results are identical at any job count."""
    if not records:
        raise ConfigError("evaluation dataset is empty")
    fuse_cfg = fuse_cfg or fusion.FusionConfig()
    if jobs > 1 and relation_fn is None:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            evals = list(
                pool.map(
                    _eval_worker,
                    [(r, config, model, fuse_cfg, None) for r in records],
                    chunksize=max(1, len(records) // (jobs * 4)),
                )
            )
    else:
        evals = [_eval_one(r, config, model, fuse_cfg, relation_fn) for r in records]
    evals.sort(key=lambda e: e.index)

    oas = [e.oa for e in evals if e.oa is not None]
    baseline = _baseline_oa(records)
    return EvalReport(
        mean_oa=float(np.mean(oas)) if oas else 0.0,
        baseline_oa=baseline,
        pq_sog=PQReport.merge([e.pq_sog for e in evals]),
        pq_heuristic=PQReport.merge([e.pq_heuristic for e in evals]),
        pq_prior=PQReport.merge([e.pq_prior for e in evals]),
        scenes=evals,
    )


def _baseline_oa(records: list[SceneRecord]) -> float:
    """Overlap accuracy of the degenerate all-zero relation matrix: the
    fraction of ordered pairs with no overlap relation."""
    vals = []
    for r in records:
        scene = r.scene
        if scene.n_instances < 2:
            continue
        asym = relations.approx_overlap_gt(scene.amodal_stack(), scene.visible_stack())
        vals.append(relations.overlap_accuracy(np.zeros_like(asym), asym))
    return float(np.mean(vals)) if vals else 0.0
