"""Joint training of the classifier and the prompted segmenter.

Every batch pays the classification loss.  Samples whose ids carry seg
supervision additionally contribute a mask loss, driven by box prompts read
off the classifier's own activation maps (the box coordinates are constants
within a step; no gradient flows through prompt extraction).  Unlabeled
samples never touch the segmenter.

Modes
-----
sam_mix_e2e       : classifier and segmenter adapt together, prompts evolve.
sam_pp_two_stage  : classifier trains alone first, then freezes; prompts are
                    precomputed once and the segmenter trains on them.
cls_only          : no segmentation loss at all.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .classifier import ClassifierConfig, ConvClassifier, compute_cam, focal_loss
from .dataio import Dataset, Sample, split_supervision
from .metrics import EvalReport, SampleEval, dice_score, hausdorff_distance, json_float
from .promptgen import (
    BoxPrompt,
    ThresholdConfig,
    boxes_to_prompt_coords,
    cam_to_boxes,
    mask_bounding_box,
)
from .segnet import Segnet, SegnetConfig, select_best_mask, seg_training_loss

CONFIG_VERSION = 1

MODES = ("sam_mix_e2e", "sam_pp_two_stage", "cls_only")
LR_SCHEDULES = ("constant", "cosine_warm_restart")


class TrainingDivergedError(RuntimeError):
    """Raised when a loss goes non-finite; carries the offending step record."""

    def __init__(self, message: str, record: dict):
        super().__init__(message)
        self.record = record


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "sam_mix_e2e"
    n_labeled: int = 50
    epochs: int = 10
    lr: float = 0.001
    batch_size: int = 30
    seg_loss_weight: float = 1.0
    score_loss_weight: float = 1.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    weight_decay: float = 1e-4
    seed: int = 0
    lr_schedule: str = "constant"
    lr_min: float = 0.0
    restart_period: int = 10
    gt_box_fallback: bool = True
    per_box_decode: bool = False
    deterministic: bool = True
    threshold: ThresholdConfig = field(default_factory=ThresholdConfig)
    classifier: ClassifierConfig = field(default_factory=ClassifierConfig)
    segnet: SegnetConfig = field(default_factory=SegnetConfig)

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lr_schedule not in LR_SCHEDULES:
            raise ValueError(f"lr_schedule must be one of {LR_SCHEDULES}, got {self.lr_schedule!r}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.lr <= 0 or self.lr_min < 0:
            raise ValueError("learning rates must be positive (lr_min >= 0)")
        if self.restart_period < 1:
            raise ValueError(f"restart_period must be >= 1, got {self.restart_period}")
        if self.n_labeled < 0:
            raise ValueError(f"n_labeled must be >= 0, got {self.n_labeled}")
        if self.seg_loss_weight < 0 or self.score_loss_weight < 0:
            raise ValueError("loss weights must be >= 0")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("threshold", "classifier", "segnet"):
                out[f.name] = {g.name: _plain(getattr(v, g.name)) for g in fields(v)}
            else:
                out[f.name] = _plain(v)
        return out

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        version = d.pop("config_version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ValueError(f"unsupported config_version {version!r}")
        nested = {
            "threshold": ThresholdConfig,
            "classifier": ClassifierConfig,
            "segnet": SegnetConfig,
        }
        kwargs = {}
        known = {f.name for f in fields(TrainConfig)}
        for key, value in d.items():
            if key not in known:
                raise ValueError(f"unknown config key {key!r}")
            if key in nested:
                sub_known = {f.name for f in fields(nested[key])}
                unknown = set(value) - sub_known
                if unknown:
                    raise ValueError(f"unknown config key {key}.{sorted(unknown)[0]!r}")
                value = nested[key](**{k: _tuplify(nested[key], k, v) for k, v in value.items()})
            kwargs[key] = value
        return TrainConfig(**kwargs)


def _plain(v):
    if isinstance(v, tuple):
        return list(v)
    return v


def _tuplify(cls, name: str, v):
    # JSON has no tuples; dataclass defaults tell us which lists to convert back
    default = next(f for f in fields(cls) if f.name == name).default
    if isinstance(default, tuple) and isinstance(v, list):
        return tuple(v)
    return v


@dataclass
class ModelState:
    """The two networks plus the resolved config they were built from."""

    classifier: ConvClassifier
    segnet: Segnet
    config: TrainConfig

    @property
    def image_size(self) -> int:
        return self.segnet.cfg.image_size


@dataclass
class TrainState:
    model: ModelState
    optimizer: torch.optim.AdamW
    shuffle_rng: np.random.Generator
    labeled_ids: set[str]
    epoch: int = 0
    global_step: int = 0
    best_val_dice: float = -1.0


def build_model_state(config: TrainConfig, image_size: int) -> ModelState:
    """Construct both networks deterministically from config.seed."""
    torch.manual_seed(config.seed)
    seg_cfg = replace(config.segnet, image_size=image_size)
    resolved = replace(config, segnet=seg_cfg)
    return ModelState(
        classifier=ConvClassifier(config.classifier),
        segnet=Segnet(seg_cfg),
        config=resolved,
    )


def _named_trainable(model: ModelState, include_classifier: bool = True) -> list[tuple[str, torch.nn.Parameter]]:
    out = []
    if include_classifier:
        out += [(f"classifier.{n}", p) for n, p in model.classifier.named_parameters() if p.requires_grad]
    out += [(f"segnet.{n}", p) for n, p in model.segnet.named_parameters() if p.requires_grad]
    return out


def build_optimizer(model: ModelState, config: TrainConfig, include_classifier: bool = True) -> torch.optim.AdamW:
    params = [p for _, p in _named_trainable(model, include_classifier)]
    return torch.optim.AdamW(params, lr=config.lr, weight_decay=config.weight_decay)


# ---------------------------------------------------------------------------
# learning-rate schedule
# ---------------------------------------------------------------------------


def cosine_lr(t: float, period: float, lr_min: float, lr_max: float) -> float:
    """lr_min + (lr_max - lr_min) * (1 + cos(pi * t / period)) / 2 for t in [0, period]."""
    return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + math.cos(math.pi * t / period))


def lr_at(epoch_fraction: float, config: TrainConfig) -> float:
    """Learning rate at a (possibly fractional) epoch position.

    The cosine schedule restarts from lr every restart_period epochs.
    """
    if epoch_fraction < 0:
        raise ValueError(f"epoch_fraction must be >= 0, got {epoch_fraction}")
    if config.lr_schedule == "constant":
        return config.lr
    t = math.fmod(epoch_fraction, config.restart_period)
    return cosine_lr(t, config.restart_period, config.lr_min, config.lr)


# ---------------------------------------------------------------------------
# single optimization step
# ---------------------------------------------------------------------------


def prompt_boxes_for_sample(
    f_last_i: torch.Tensor,
    fc_weights: torch.Tensor,
    image_size: tuple[int, int],
    threshold: ThresholdConfig,
    seg_label: np.ndarray | None,
    gt_box_fallback: bool,
) -> tuple[list[BoxPrompt], bool]:
    """Activation-map boxes for one sample; optionally fall back to the
    ground-truth bounding box when the map produces none.  Never builds a
    gradient path."""
    with torch.no_grad():
        cam = compute_cam(f_last_i, fc_weights, 1, image_size)
    boxes = cam_to_boxes(cam.numpy(), threshold)
    used_fallback = False
    if not boxes and gt_box_fallback and seg_label is not None:
        fb = mask_bounding_box(seg_label)
        if fb is not None:
            boxes = [fb]
            used_fallback = True
    return boxes, used_fallback


def train_step(
    batch: list[Sample],
    state: TrainState,
    config: TrainConfig,
    fixed_boxes: dict[str, list[BoxPrompt]] | None = None,
) -> tuple[TrainState, dict]:
    """One optimization step over a batch.

    Returns the state and a loss record.  The reported total is recomputed in
    float64 from the two reported components, so it decomposes exactly as
    l_cls + seg_loss_weight * l_seg.
    """
    model = state.model
    classifier, segnet = model.classifier, model.segnet
    h = w = model.image_size

    images = torch.from_numpy(np.stack([s.image for s in batch]))[:, None]
    labels = torch.tensor([s.cls_label for s in batch], dtype=torch.long)
    logits, f_last = classifier(images)
    if not torch.isfinite(logits).all():
        raise TrainingDivergedError(
            f"non-finite classifier logits at step {state.global_step}",
            {"step": state.global_step},
        )
    l_cls = focal_loss(logits, labels, config.focal_alpha, config.focal_gamma)

    gated = [
        i
        for i, s in enumerate(batch)
        if s.sample_id in state.labeled_ids and s.seg_label is not None
    ]
    seg_terms: list[torch.Tensor] = []
    n_boxes = 0
    n_fallback = 0
    if config.mode != "cls_only" and config.seg_loss_weight > 0 and gated:
        per_sample_boxes: list[list[BoxPrompt]] = []
        for i in gated:
            if fixed_boxes is not None:
                boxes = fixed_boxes.get(batch[i].sample_id, [])
            else:
                boxes, fb = prompt_boxes_for_sample(
                    f_last[i], classifier.fc.weight, (h, w), config.threshold,
                    batch[i].seg_label, config.gt_box_fallback,
                )
                n_fallback += int(fb)
            per_sample_boxes.append(boxes)
        usable = [(i, b) for i, b in zip(gated, per_sample_boxes) if b]
        if usable:
            dense = segnet.encode_image(images[[i for i, _ in usable]])
            for j, (i, boxes) in enumerate(usable):
                n_boxes += len(boxes)
                coords = boxes_to_prompt_coords(boxes, (h, w))
                masks, scores = segnet.decode(dense[j], torch.from_numpy(coords).float())
                gt = torch.from_numpy(batch[i].seg_label.astype(np.float32))
                term, _ = seg_training_loss(masks, scores, gt, config.score_loss_weight)
                seg_terms.append(term)

    l_seg = torch.stack(seg_terms).mean() if seg_terms else torch.zeros(())
    total = l_cls + config.seg_loss_weight * l_seg

    record = {
        "step": state.global_step,
        "l_cls": float(l_cls.detach()),
        "l_seg": float(l_seg.detach()),
        "loss_total": float(l_cls.detach()) + config.seg_loss_weight * float(l_seg.detach()),
        "n_gated": len(gated),
        "n_seg_contributions": len(seg_terms),
        "n_boxes": n_boxes,
        "n_fallback": n_fallback,
    }
    if not math.isfinite(record["loss_total"]):
        raise TrainingDivergedError(
            f"non-finite loss at step {state.global_step}: "
            f"l_cls={record['l_cls']}, l_seg={record['l_seg']}",
            record,
        )

    state.optimizer.zero_grad(set_to_none=True)
    if total.requires_grad:
        total.backward()
        state.optimizer.step()
    state.global_step += 1
    return state, record


# ---------------------------------------------------------------------------
# checkpoint plumbing
# ---------------------------------------------------------------------------


def _module_arrays(prefix: str, module: torch.nn.Module, arrays: dict, trainable: dict) -> None:
    grads = {n: p.requires_grad for n, p in module.named_parameters()}
    for name, tensor in module.state_dict().items():
        arrays[f"{prefix}/{name}"] = tensor.detach().cpu().numpy().copy()
        trainable[f"{prefix}/{name}"] = bool(grads.get(name, False))


def state_to_checkpoint(state: TrainState, kind: str = "train_state", extra_meta: dict | None = None) -> Checkpoint:
    arrays: dict[str, np.ndarray] = {}
    trainable: dict[str, bool] = {}
    _module_arrays("model/classifier", state.model.classifier, arrays, trainable)
    _module_arrays("model/segnet", state.model.segnet, arrays, trainable)

    named = _named_trainable(state.model, include_classifier=True)
    by_param = {id(p): n for n, p in named}
    for group in state.optimizer.param_groups:
        for p in group["params"]:
            pstate = state.optimizer.state.get(p)
            if not pstate:
                continue
            name = by_param.get(id(p))
            if name is None:
                continue
            arrays[f"optim/{name}/exp_avg"] = pstate["exp_avg"].detach().numpy().copy()
            arrays[f"optim/{name}/exp_avg_sq"] = pstate["exp_avg_sq"].detach().numpy().copy()
            arrays[f"optim/{name}/step"] = np.asarray(float(pstate["step"]), dtype=np.float64)
            trainable[f"optim/{name}/exp_avg"] = False
            trainable[f"optim/{name}/exp_avg_sq"] = False
            trainable[f"optim/{name}/step"] = False

    rng_state = state.shuffle_rng.bit_generator.state
    meta = {
        "kind": kind,
        "config": state.model.config.to_dict(),
        "image_size": state.model.image_size,
        "epoch": state.epoch,
        "global_step": state.global_step,
        "best_val_dice": state.best_val_dice,
        "labeled_ids": sorted(state.labeled_ids),
        "shuffle_rng": rng_state,
        "optimizer": {"type": "AdamW", "betas": [0.9, 0.999], "eps": 1e-8},
    }
    if extra_meta:
        meta.update(extra_meta)
    return Checkpoint(arrays=arrays, trainable=trainable, meta=meta)


def save_train_state(state: TrainState, path: str | Path, extra_meta: dict | None = None) -> None:
    save_checkpoint(state_to_checkpoint(state, extra_meta=extra_meta), path)


def _load_module(prefix: str, module: torch.nn.Module, arrays: dict[str, np.ndarray]) -> None:
    sd = {}
    plen = len(prefix) + 1
    for name, arr in arrays.items():
        if name.startswith(prefix + "/"):
            sd[name[plen:]] = torch.from_numpy(arr.copy())
    module.load_state_dict(sd, strict=True)


def load_model_state(path: str | Path) -> ModelState:
    """Rebuild just the networks from a checkpoint (enough for predict/evaluate)."""
    ckpt = load_checkpoint(path)
    config = TrainConfig.from_dict(ckpt.meta["config"])
    model = build_model_state(config, int(ckpt.meta["image_size"]))
    _load_module("model/classifier", model.classifier, ckpt.arrays)
    _load_module("model/segnet", model.segnet, ckpt.arrays)
    # restore recorded freeze flags (a two-stage checkpoint froze its classifier)
    for prefix, module in (("model/classifier", model.classifier), ("model/segnet", model.segnet)):
        for name, p in module.named_parameters():
            key = f"{prefix}/{name}"
            if key in ckpt.trainable:
                p.requires_grad_(ckpt.trainable[key])
    return model


def load_train_state(path: str | Path) -> TrainState:
    """Rebuild the full training state: models, optimizer moments, RNG, counters."""
    ckpt = load_checkpoint(path)
    model = load_model_state(path)
    config = model.config
    optimizer = build_optimizer(model, config)
    named = _named_trainable(model)
    for name, p in named:
        key = f"optim/{name}/exp_avg"
        if key not in ckpt.arrays:
            continue
        optimizer.state[p] = {
            "step": torch.tensor(float(ckpt.arrays[f"optim/{name}/step"])),
            "exp_avg": torch.from_numpy(ckpt.arrays[key].copy()),
            "exp_avg_sq": torch.from_numpy(ckpt.arrays[f"optim/{name}/exp_avg_sq"].copy()),
        }
    rng = np.random.default_rng()
    rng.bit_generator.state = ckpt.meta["shuffle_rng"]
    return TrainState(
        model=model,
        optimizer=optimizer,
        shuffle_rng=rng,
        labeled_ids=set(ckpt.meta["labeled_ids"]),
        epoch=int(ckpt.meta["epoch"]),
        global_step=int(ckpt.meta["global_step"]),
        best_val_dice=float(ckpt.meta["best_val_dice"]),
    )


# ---------------------------------------------------------------------------
# inference and evaluation
# ---------------------------------------------------------------------------


def predict(image: np.ndarray, model: ModelState) -> tuple[np.ndarray, dict]:
    """Full pipeline on one image: classify, map, boxes, masks.

    A negative classification or an empty box list suppresses segmentation and
    yields an all-zero mask.  Diagnostics always carry logits, the activation
    map, the boxes used, and the mask scores (empty when nothing was decoded).
    """
    cfg = model.config
    img = np.ascontiguousarray(image, dtype=np.float32)
    if img.shape != (model.image_size, model.image_size):
        raise ValueError(f"expected {model.image_size}px square image, got {img.shape}")
    with torch.no_grad():
        t = torch.from_numpy(img)[None, None]
        logits, f_last = model.classifier(t)
        cam = compute_cam(f_last[0], model.classifier.fc.weight, 1, img.shape).numpy()
    pred_class = int(torch.argmax(logits[0]))
    boxes: list[BoxPrompt] = []
    scores = np.zeros((0,), dtype=np.float32)
    mask = np.zeros(img.shape, dtype=np.uint8)
    if pred_class == 1:
        boxes = cam_to_boxes(cam, cfg.threshold)
        if boxes:
            coords = boxes_to_prompt_coords(boxes, img.shape)
            pred = model.segnet.predict(img, coords, per_box_decode=cfg.per_box_decode)
            best_mask, _ = select_best_mask(pred)
            mask = (best_mask >= 0.5).astype(np.uint8)
            scores = pred.scores
    diagnostics = {
        "logits": logits[0].numpy().astype(np.float32),
        "pred_class": pred_class,
        "cam": cam.astype(np.float32),
        "boxes": boxes,
        "scores": scores,
    }
    return mask, diagnostics


def evaluate(model: ModelState, dataset: Dataset, domain: str = "in_domain", run_seed: int | None = None) -> EvalReport:
    """Per-sample overlap and boundary metrics over every mask-bearing sample."""
    report = EvalReport(
        run_seed=model.config.seed if run_seed is None else run_seed,
        domain=domain,
    )
    for s in dataset.samples:
        if s.seg_label is None:
            continue
        mask, _ = predict(s.image, model)
        report.samples.append(
            SampleEval(
                sample_id=s.sample_id,
                dice=dice_score(mask, s.seg_label),
                hausdorff_px=hausdorff_distance(mask, s.seg_label),
            )
        )
    return report


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


def _prepare_supervision(dataset: Dataset, config: TrainConfig) -> Dataset:
    # a fully-labeled split is narrowed to the requested budget; an already
    # narrowed split must match it exactly
    if len(dataset.labeled_ids) == config.n_labeled:
        return dataset
    return split_supervision(dataset, config.n_labeled, config.seed)


def _epoch_batches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _write_jsonl(path: Path, entry: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(entry, sort_keys=True) + "\n")


def _run_epochs(
    state: TrainState,
    dataset: Dataset,
    config: TrainConfig,
    out_dir: Path,
    val_dataset: Dataset | None,
    epochs: int,
    fixed_boxes: dict[str, list[BoxPrompt]] | None = None,
    stage: str = "main",
) -> list[dict]:
    """Epoch loop shared by both protocols; resumes from state.epoch."""
    log: list[dict] = []
    jsonl = out_dir / "epochs.jsonl"
    while state.epoch < epochs:
        e = state.epoch
        lr_now = lr_at(float(e), config)
        for group in state.optimizer.param_groups:
            group["lr"] = lr_now

        step_records = []
        for idx in _epoch_batches(len(dataset), config.batch_size, state.shuffle_rng):
            batch = [dataset.samples[int(i)] for i in idx]
            try:
                state, rec = train_step(batch, state, config, fixed_boxes=fixed_boxes)
            except TrainingDivergedError as err:
                dump = {"stage": stage, "epoch": e, "record": err.record}
                (out_dir / "diverged.json").write_text(json.dumps(dump, indent=2, sort_keys=True))
                raise
            step_records.append(rec)

        entry = {
            "stage": stage,
            "epoch": e,
            "lr": lr_now,
            "l_cls": float(np.mean([r["l_cls"] for r in step_records])),
            "l_seg": float(np.mean([r["l_seg"] for r in step_records])),
            "n_fallback": int(sum(r["n_fallback"] for r in step_records)),
            "val_dice": None,
            "val_hausdorff_px": None,
        }
        if val_dataset is not None:
            report = evaluate(state.model, val_dataset, domain="in_domain")
            entry["val_dice"] = json_float(report.mean_dice)
            entry["val_hausdorff_px"] = json_float(report.mean_hausdorff)
            if report.mean_dice > state.best_val_dice:
                state.best_val_dice = float(report.mean_dice)
                save_train_state(state, out_dir / "best.ckpt", extra_meta={"best_epoch": e, "stage": stage})
        state.epoch = e + 1
        save_train_state(state, out_dir / "last.ckpt", extra_meta={"stage": stage})
        _write_jsonl(jsonl, entry)
        log.append(entry)
    if val_dataset is None or not (out_dir / "best.ckpt").exists():
        save_train_state(state, out_dir / "best.ckpt", extra_meta={"stage": stage})
    return log


def train(
    dataset: Dataset,
    config: TrainConfig,
    out_dir: str | Path,
    val_dataset: Dataset | None = None,
    resume_from: str | Path | None = None,
) -> tuple[TrainState, list[dict]]:
    """End-to-end training (sam_mix_e2e or cls_only).

    Writes epochs.jsonl, train_log.json, resolved_config.json, last.ckpt and
    best.ckpt (best validation overlap; final state when no val set is given).
    With resume_from, picks up the run bit-compatibly, including shuffle
    order and optimizer moments.
    """
    if config.mode == "sam_pp_two_stage":
        return train_two_stage(dataset, config, out_dir, val_dataset)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if config.deterministic:
        torch.set_num_threads(1)

    dataset = _prepare_supervision(dataset, config)
    if resume_from is not None:
        state = load_train_state(resume_from)
        if state.model.config.to_dict() != replace(
            config, segnet=state.model.config.segnet
        ).to_dict():
            raise ValueError("checkpoint config does not match the requested config")
    else:
        image_size = dataset.samples[0].image.shape[0]
        model = build_model_state(config, image_size)
        state = TrainState(
            model=model,
            optimizer=build_optimizer(model, config),
            shuffle_rng=np.random.default_rng(config.seed),
            labeled_ids=set(dataset.labeled_ids),
        )
        (out_dir / "resolved_config.json").write_text(
            json.dumps(model.config.to_dict(), indent=2, sort_keys=True)
        )

    log = _run_epochs(state, dataset, state.model.config, out_dir, val_dataset, config.epochs)
    _write_train_log(out_dir, log)
    return state, log


def _write_train_log(out_dir: Path, log: list[dict]) -> None:
    path = out_dir / "train_log.json"
    existing = []
    if path.exists():
        existing = json.loads(path.read_text())
    path.write_text(json.dumps(existing + log, indent=2, sort_keys=True))


def precompute_prompt_boxes(
    model: ModelState, dataset: Dataset, config: TrainConfig
) -> dict[str, list[BoxPrompt]]:
    """Freeze the prompt set: activation-map boxes for every labeled sample."""
    h = w = model.image_size
    out: dict[str, list[BoxPrompt]] = {}
    with torch.no_grad():
        for s in dataset.samples:
            if s.sample_id not in dataset.labeled_ids or s.seg_label is None:
                continue
            t = torch.from_numpy(s.image)[None, None]
            _, f_last = model.classifier(t)
            boxes, _ = prompt_boxes_for_sample(
                f_last[0], model.classifier.fc.weight, (h, w), config.threshold,
                s.seg_label, config.gt_box_fallback,
            )
            out[s.sample_id] = boxes
    return out


def train_two_stage(
    dataset: Dataset,
    config: TrainConfig,
    out_dir: str | Path,
    val_dataset: Dataset | None = None,
) -> tuple[TrainState, list[dict]]:
    """Classifier first, then a frozen-prompt segmentation stage.

    Stage 1 trains the classifier alone for config.epochs.  Its final weights
    are frozen, prompts are precomputed once for every labeled sample, and
    stage 2 trains the segmenter for another config.epochs on those fixed
    prompts.  A zero label budget skips stage 2 entirely.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if config.deterministic:
        torch.set_num_threads(1)

    dataset = _prepare_supervision(dataset, config)
    stage1_cfg = replace(config, mode="cls_only")
    # stage 1 logs live in a subdirectory; no val-based selection is
    # meaningful before the segmenter exists, so the final weights carry over
    state1, log1 = train(dataset, stage1_cfg, out_dir / "stage1", val_dataset=None)

    model = state1.model
    for p in model.classifier.parameters():
        p.requires_grad_(False)
    model = ModelState(model.classifier, model.segnet, replace(model.config, mode=config.mode))

    (out_dir / "resolved_config.json").write_text(
        json.dumps(model.config.to_dict(), indent=2, sort_keys=True)
    )
    log = [dict(entry, stage="stage1_cls") for entry in log1]

    if config.n_labeled == 0 or not dataset.labeled_ids:
        state = TrainState(
            model=model,
            optimizer=build_optimizer(model, config, include_classifier=False),
            shuffle_rng=np.random.default_rng(config.seed + 1),
            labeled_ids=set(dataset.labeled_ids),
            epoch=config.epochs,
        )
        save_train_state(state, out_dir / "last.ckpt", extra_meta={"stage": "stage2_skipped"})
        save_train_state(state, out_dir / "best.ckpt", extra_meta={"stage": "stage2_skipped"})
        _write_train_log(out_dir, log)
        return state, log

    fixed = precompute_prompt_boxes(model, dataset, config)
    state = TrainState(
        model=model,
        optimizer=build_optimizer(model, config, include_classifier=False),
        shuffle_rng=np.random.default_rng(config.seed + 1),
        labeled_ids=set(dataset.labeled_ids),
    )
    log2 = _run_epochs(
        state, dataset, model.config, out_dir, val_dataset, config.epochs,
        fixed_boxes=fixed, stage="stage2_seg",
    )
    _write_train_log(out_dir, log + log2)
    return state, log + log2
