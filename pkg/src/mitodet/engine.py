"""End-to-end training, checkpointing, and detection evaluation.

Training is a single deterministic sequence: batch composition is a pure
function of (seed, step), model init is seeded, and no RNG is consumed
during steps, so identical configs reproduce identical logs and resuming
from a checkpoint continues the exact run. Evaluation reports per-class
average precision at a fixed IoU threshold, their mean, and PR curves.
"""

from __future__ import annotations

import dataclasses
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import boxgeom, checkpoint as ckpt, data as data_mod
from .boxgeom import CLASS_NAMES, BBox, Detection
from .errors import ConfigError, DatasetError, DivergenceError
from .losses import FocalParams, LossWeights
from .nets import DetectionPipeline, ModelConfig, build_model

DIVERGENCE_CAP = 1e4

LOG_COLUMNS = ("step", "l_bb", "l_inst", "l_percep", "l_ce", "total", "domain_acc", "lr")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 12
    learning_rate: float = 1e-4
    max_steps: int = 1000
    seed: int = 0
    lambda1: float = 10.0
    lambda2: float = 25.0
    eval_interval: int = 0
    checkpoint_interval: int = 0
    include_unlabeled: bool = False
    grl_strength: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    smooth_l1_beta: float = 1.0
    pos_threshold: float = 0.5
    neg_threshold: float = 0.4
    lr_schedule: str = "constant"

    def __post_init__(self):
        if self.batch_size < 1 or self.learning_rate <= 0 or self.max_steps < 0:
            raise ConfigError("batch_size and learning_rate must be positive, "
                              "max_steps non-negative")
        if self.lambda1 < 0 or self.lambda2 < 0 or self.grl_strength < 0:
            raise ConfigError("lambda1, lambda2 and grl_strength must be >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule '{self.lr_schedule}'")

    def lr_at(self, step: int) -> float:
        """Learning rate for a step; cosine decays over max_steps."""
        if self.lr_schedule == "constant" or self.max_steps == 0:
            return self.learning_rate
        return self.learning_rate * 0.5 * (1.0 + math.cos(math.pi * step / self.max_steps))

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda1, self.lambda2)

    @property
    def focal_params(self) -> FocalParams:
        return FocalParams(self.focal_alpha, self.focal_gamma)


@dataclass
class TrainLogRow:
    step: int
    l_bb: float
    l_inst: float
    l_percep: float
    l_ce: float
    total: float
    domain_acc: float
    lr: float
    wall_time: float


@dataclass
class TrainLog:
    """Append-only per-step record plus the header metadata echoed into the
    CSV; loss weights appear verbatim in the header."""

    lambda1: float
    lambda2: float
    batch_size: int
    learning_rate: float
    seed: int
    grl_strength: float
    rows: list[TrainLogRow] = field(default_factory=list)
    eval_history: list[tuple[int, float]] = field(default_factory=list)

    def header_lines(self) -> list[str]:
        return [
            "# mitodet-train-log v1",
            f"# lambda1={self.lambda1!r} lambda2={self.lambda2!r} "
            f"batch_size={self.batch_size} learning_rate={self.learning_rate!r} "
            f"seed={self.seed} grl_strength={self.grl_strength!r}",
        ]

    def write_csv(self, path) -> None:
        with open(path, "w") as f:
            for line in self.header_lines():
                f.write(line + "\n")
            f.write(",".join(LOG_COLUMNS) + "\n")
            for r in self.rows:
                f.write(_format_row(r) + "\n")


def _format_row(r: TrainLogRow) -> str:
    return (f"{r.step},{r.l_bb!r},{r.l_inst!r},{r.l_percep!r},{r.l_ce!r},"
            f"{r.total!r},{r.domain_acc!r},{r.lr!r}")


def read_log_csv(path) -> tuple[list[str], list[dict]]:
    """Parse a training log CSV into (header comment lines, row dicts)."""
    header, rows = [], []
    columns = None
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            header.append(line)
        elif columns is None:
            columns = line.split(",")
        elif line:
            vals = line.split(",")
            row = {c: (int(v) if c == "step" else float(v))
                   for c, v in zip(columns, vals)}
            rows.append(row)
    return header, rows


@dataclass
class EvalReport:
    """Per-class AP at the evaluation IoU, their mean, match counts, and
    PR-curve points (one per distinct score threshold)."""

    ap: dict[int, float]
    m_ap: float
    counts: dict[int, dict[str, int]]
    pr_points: dict[int, list[tuple[float, float, float]]]
    num_images: int
    per_domain_ap: dict[int, dict[int, float]] | None = None

    def write_metrics_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("class,ap,tp,fp,fn\n")
            for cls in sorted(self.ap):
                c = self.counts[cls]
                f.write(f"{CLASS_NAMES[cls]},{self.ap[cls]!r},"
                        f"{c['tp']},{c['fp']},{c['fn']}\n")
            f.write(f"mAP,{self.m_ap!r},,,\n")

    def write_pr_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write("class,score_threshold,precision,recall\n")
            for cls in sorted(self.pr_points):
                for thr, prec, rec in self.pr_points[cls]:
                    f.write(f"{CLASS_NAMES[cls]},{thr!r},{prec!r},{rec!r}\n")


def average_precision(tp_flags, num_gt: int) -> float:
    """All-points interpolated AP from TP/FP flags ordered by descending
    score. num_gt == 0 yields 0 with a warning."""
    if num_gt < 0:
        raise ValueError("num_gt must be >= 0")
    flags = np.asarray(tp_flags, dtype=bool)
    if num_gt == 0:
        warnings.warn("average_precision: no ground truths; AP defined as 0")
        return 0.0
    if flags.size == 0:
        return 0.0
    tp_cum = np.cumsum(flags)
    recall = tp_cum / num_gt
    precision = tp_cum / np.arange(1, flags.size + 1)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    ap = 0.0
    prev_r = 0.0
    for i in range(flags.size):
        if recall[i] > prev_r:
            ap += (recall[i] - prev_r) * envelope[i]
            prev_r = recall[i]
    return float(ap)


def _pr_points(scores: np.ndarray, flags: np.ndarray, num_gt: int
               ) -> list[tuple[float, float, float]]:
    """(threshold, precision, recall) at every distinct score, descending."""
    points = []
    if scores.size == 0:
        return points
    tp_cum = np.cumsum(flags)
    for i in range(scores.size):
        last_of_tie = i + 1 == scores.size or scores[i + 1] != scores[i]
        if last_of_tie:
            prec = tp_cum[i] / (i + 1)
            rec = tp_cum[i] / num_gt if num_gt else 0.0
            points.append((float(scores[i]), float(prec), float(rec)))
    return points


def postprocess_detections(class_logits: np.ndarray, box_offsets: np.ndarray,
                           anchors: np.ndarray, image_height: int, image_width: int,
                           nms_iou: float = 0.5, score_floor: float = 0.05,
                           max_detections: int = 100) -> list[Detection]:
    """Logits + offsets for one image -> scored, clipped, NMS-filtered boxes."""
    probs = 1.0 / (1.0 + np.exp(-class_logits.astype(np.float64)))
    boxes = boxgeom.decode_boxes(anchors, box_offsets.astype(np.float64))
    cand: list[Detection] = []
    anchor_idx, cls_idx = np.nonzero(probs >= score_floor)
    for a, k in zip(anchor_idx, cls_idx):
        x0, y0, x1, y1 = boxes[a]
        x0, y0 = max(0.0, x0), max(0.0, y0)
        x1, y1 = min(float(image_width), x1), min(float(image_height), y1)
        if x0 >= x1 or y0 >= y1:
            continue
        cand.append(Detection(BBox(x0, y0, x1, y1), int(k), float(probs[a, k])))
    kept = boxgeom.nms(cand, nms_iou)
    return kept[:max_detections]


def infer(model: DetectionPipeline, image: np.ndarray, nms_iou: float = 0.5,
          score_floor: float = 0.05, max_detections: int = 100
          ) -> tuple[list[Detection], np.ndarray]:
    """Detections plus the homogenized image for one (H, W, 3) input."""
    x = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)) \
             .permute(2, 0, 1)[None]
    with torch.no_grad():
        h = model.homogenize(x)
        out = model.detect(h)
    anchors = model.anchors_for(image.shape[0], image.shape[1])
    dets = postprocess_detections(out.class_logits[0].numpy(),
                                  out.box_offsets[0].numpy(), anchors,
                                  image.shape[0], image.shape[1],
                                  nms_iou, score_floor, max_detections)
    homog = h[0].permute(1, 2, 0).numpy()
    return dets, homog


def evaluate_detections(dets_per_image: Sequence[Sequence[Detection]],
                        records: Sequence[data_mod.PatchRecord],
                        iou_threshold: float = 0.5,
                        per_domain: bool = True) -> EvalReport:
    """Score externally produced detections against record annotations."""
    if len(dets_per_image) != len(records):
        raise ValueError("need one detection list per record")
    per_class: dict[int, dict] = {c: {"scores": [], "flags": [], "num_gt": 0}
                                  for c in range(len(CLASS_NAMES))}
    per_image_flags = []
    for dets, rec in zip(dets_per_image, records):
        gt_boxes, gt_classes = rec.gt_arrays()
        flags = boxgeom.greedy_match_detections(list(dets), gt_boxes, gt_classes,
                                                iou_threshold)
        per_image_flags.append(flags)
        for c in per_class:
            per_class[c]["num_gt"] += int((gt_classes == c).sum())
            for d, f in zip(dets, flags):
                if d.class_id == c:
                    per_class[c]["scores"].append(d.score)
                    per_class[c]["flags"].append(bool(f))

    ap, counts, pr = {}, {}, {}
    for c, acc in per_class.items():
        scores = np.asarray(acc["scores"])
        flags = np.asarray(acc["flags"], dtype=bool)
        order = np.argsort(-scores, kind="stable")
        scores, flags = scores[order], flags[order]
        ap[c] = average_precision(flags, acc["num_gt"])
        tp = int(flags.sum())
        counts[c] = {"tp": tp, "fp": int(flags.size - tp),
                     "fn": acc["num_gt"] - tp}
        pr[c] = _pr_points(scores, flags, acc["num_gt"])
    m_ap = float(np.mean([ap[c] for c in sorted(ap)]))

    per_domain_ap = None
    if per_domain:
        per_domain_ap = {}
        for dom in sorted({r.domain_id for r in records}):
            idx = [i for i, r in enumerate(records) if r.domain_id == dom]
            per_domain_ap[dom] = {}
            for c in per_class:
                scores, flags, num_gt = [], [], 0
                for i in idx:
                    gt_classes = records[i].gt_arrays()[1]
                    num_gt += int((gt_classes == c).sum())
                    for d, f in zip(dets_per_image[i], per_image_flags[i]):
                        if d.class_id == c:
                            scores.append(d.score)
                            flags.append(bool(f))
                order = np.argsort(-np.asarray(scores), kind="stable")
                with warnings.catch_warnings():
                    warnings.simplefilter("ignore")
                    per_domain_ap[dom][c] = average_precision(
                        np.asarray(flags, dtype=bool)[order], num_gt)
    return EvalReport(ap=ap, m_ap=m_ap, counts=counts, pr_points=pr,
                      num_images=len(records), per_domain_ap=per_domain_ap)


def evaluate(model: DetectionPipeline, records: Sequence[data_mod.PatchRecord],
             iou_threshold: float = 0.5, nms_iou: float = 0.5,
             score_floor: float = 0.05, max_detections: int = 100,
             per_domain: bool = True) -> EvalReport:
    """Run the model over records and score it: homogenize -> detect ->
    decode -> NMS -> greedy matching -> AP/PR accumulation."""
    if not records:
        raise ConfigError("evaluation split is empty")
    dets_per_image = [infer(model, r.load_image(), nms_iou, score_floor,
                            max_detections)[0] for r in records]
    return evaluate_detections(dets_per_image, records, iou_threshold, per_domain)


def evaluate_domain_accuracy(model: DetectionPipeline,
                             records: Sequence[data_mod.PatchRecord],
                             id_to_index: dict[int, int]) -> float:
    """Domain-classifier accuracy on (homogenized) records whose domain is
    in the classifier's index map."""
    usable = [r for r in records if r.domain_id in id_to_index]
    if not usable:
        raise ConfigError("no records from classifier domains")
    correct = 0
    with torch.no_grad():
        for r in usable:
            x = torch.from_numpy(r.load_image()).permute(2, 0, 1)[None]
            logits = model.predict_domain(x)
            correct += int(logits.argmax(dim=1).item() == id_to_index[r.domain_id])
    return correct / len(usable)


def reconstruction_mse(model: DetectionPipeline,
                       records: Sequence[data_mod.PatchRecord]) -> float:
    """Mean per-pixel squared distance between inputs and homogenized
    outputs."""
    if not records:
        raise ConfigError("no records")
    total = 0.0
    with torch.no_grad():
        for r in records:
            x = torch.from_numpy(r.load_image()).permute(2, 0, 1)[None]
            h = model.homogenize(x)
            total += float(((x - h) ** 2).mean().item())
    return total / len(records)


# ---------------------------------------------------------------------------
# Training

@dataclass
class TrainResult:
    model: DetectionPipeline
    log: TrainLog
    checkpoint_path: Path | None
    id_to_index: dict[int, int]


def _model_config_echo(cfg: ModelConfig) -> dict:
    d = dataclasses.asdict(cfg)
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


def model_config_from_echo(echo: dict) -> ModelConfig:
    kwargs = {}
    for f in dataclasses.fields(ModelConfig):
        if f.name in echo:
            v = echo[f.name]
            kwargs[f.name] = tuple(v) if isinstance(v, list) else v
    return ModelConfig(**kwargs)


def build_model_from_checkpoint(path) -> tuple[DetectionPipeline, ckpt.CheckpointData]:
    """Rebuild the exact model a checkpoint was written from."""
    data = ckpt.load_checkpoint(path)
    model = DetectionPipeline(model_config_from_echo(data.config_echo["model"]))
    model.load_state_dict(data.model_state)
    return model, data


def _save_state(path, model, optimizer, step, model_cfg, extra_echo) -> None:
    echo = {"model": _model_config_echo(model_cfg), "step": step}
    echo.update(extra_echo or {})
    ckpt.save_checkpoint(path, step=step, config_echo=echo,
                         model_state=model.state_dict(),
                         optim_state_dict=optimizer.state_dict() if optimizer else None)


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, table: data_mod.DomainTable,
          records: Sequence[data_mod.PatchRecord], out_dir=None,
          resume_from=None, config_echo: dict | None = None,
          extractor_weights=None) -> TrainResult:
    """Run the end-to-end training loop.

    Writes `train_log.csv`, periodic checkpoints and `checkpoint_final.bin`
    under out_dir when given. Aborts with DivergenceError (recording the
    step) if the total loss goes non-finite or beyond the cap. Fully
    deterministic for a given config and seed.
    """
    torch.use_deterministic_algorithms(True)
    training_ids = table.training_ids(train_cfg.include_unlabeled)
    if not table.role_ids(data_mod.LABELED_SOURCE):
        raise DatasetError("training needs at least one labeled_source domain")
    if model_cfg.num_domains != len(training_ids):
        raise ConfigError(f"model num_domains={model_cfg.num_domains} but "
                          f"{len(training_ids)} domains feed training batches")
    id_to_index = {d: i for i, d in enumerate(training_ids)}

    train_records = [r for r in data_mod.records_for_split(records, "train")
                     if r.domain_id in id_to_index]
    by_domain: dict[int, list] = {d: [] for d in training_ids}
    for r in train_records:
        if table.by_id(r.domain_id).role == data_mod.LABELED_SOURCE \
                and not r.annotations:
            raise DatasetError("labeled_source training record without annotations "
                               f"(domain {r.domain_id}); only unlabeled_source "
                               "records may be unannotated")
        r.image = r.load_image()
        by_domain[r.domain_id].append(r)
    for d, recs in by_domain.items():
        if not recs:
            raise ConfigError(f"training domain {d} has no train records")

    val_records = data_mod.records_for_split(records, "val")

    model = build_model(model_cfg, seed=train_cfg.seed)
    if extractor_weights is not None:
        if model.extractor is None:
            raise ConfigError("extractor weights given but the homogenizer "
                              "(and its perceptual extractor) is disabled")
        model.extractor.load_weights(extractor_weights)
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=train_cfg.learning_rate)
    start_step = 0
    if resume_from is not None:
        saved = ckpt.load_checkpoint(resume_from)
        model.load_state_dict(saved.model_state)
        if saved.optim_state is not None:
            optimizer.load_state_dict(saved.optim_state)
        start_step = saved.step

    log = TrainLog(lambda1=train_cfg.lambda1, lambda2=train_cfg.lambda2,
                   batch_size=train_cfg.batch_size,
                   learning_rate=train_cfg.learning_rate, seed=train_cfg.seed,
                   grl_strength=train_cfg.grl_strength)
    out_dir = Path(out_dir) if out_dir is not None else None
    log_file = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_file = open(out_dir / "train_log.csv", "w")
        for line in log.header_lines():
            log_file.write(line + "\n")
        log_file.write(",".join(LOG_COLUMNS) + "\n")
        log_file.flush()

    weights = train_cfg.weights
    t0 = time.time()
    final_path = None
    try:
        for step in range(start_step, train_cfg.max_steps):
            batch = data_mod.compose_batch(by_domain, train_cfg.batch_size,
                                           train_cfg.seed, step)
            images = np.stack([r.image for r in batch])
            x = torch.from_numpy(images).permute(0, 3, 1, 2).contiguous()
            dom_idx = torch.tensor([id_to_index[r.domain_id] for r in batch])
            labeled = torch.tensor(
                [table.by_id(r.domain_id).role == data_mod.LABELED_SOURCE
                 for r in batch])
            anns = [r.gt_arrays() for r in batch]

            lr = train_cfg.lr_at(step)
            for group in optimizer.param_groups:
                group["lr"] = lr
            optimizer.zero_grad(set_to_none=True)
            breakdown, bundle = model.forward_train(
                x, dom_idx, anns, labeled, weights,
                focal_params=train_cfg.focal_params,
                smooth_l1_beta=train_cfg.smooth_l1_beta,
                pos_threshold=train_cfg.pos_threshold,
                neg_threshold=train_cfg.neg_threshold,
                grl_strength=train_cfg.grl_strength)
            if not math.isfinite(breakdown.total) or breakdown.total > DIVERGENCE_CAP:
                raise DivergenceError(
                    f"training diverged at step {step}: total={breakdown.total}")
            bundle.total.backward()
            optimizer.step()

            if bundle.domain_logits is not None:
                domain_acc = float((bundle.domain_logits.argmax(dim=1) == dom_idx)
                                   .float().mean().item())
            else:
                domain_acc = float("nan")
            row = TrainLogRow(step=step, l_bb=breakdown.l_bb, l_inst=breakdown.l_inst,
                              l_percep=breakdown.l_percep, l_ce=breakdown.l_ce,
                              total=breakdown.total, domain_acc=domain_acc,
                              lr=lr, wall_time=time.time() - t0)
            log.rows.append(row)
            if log_file is not None:
                log_file.write(_format_row(row) + "\n")
                log_file.flush()

            done = step + 1
            if train_cfg.eval_interval and done % train_cfg.eval_interval == 0 \
                    and val_records:
                report = evaluate(model, val_records, per_domain=False)
                log.eval_history.append((done, report.m_ap))
            if out_dir is not None and train_cfg.checkpoint_interval \
                    and done % train_cfg.checkpoint_interval == 0:
                _save_state(out_dir / f"checkpoint_{done:06d}.bin", model,
                            optimizer, done, model_cfg, config_echo)
    finally:
        if out_dir is not None:
            final_step = len(log.rows) + start_step
            final_path = out_dir / "checkpoint_final.bin"
            _save_state(final_path, model, optimizer, final_step, model_cfg,
                        config_echo)
        if log_file is not None:
            log_file.close()
    return TrainResult(model=model, log=log, checkpoint_path=final_path,
                       id_to_index=id_to_index)
