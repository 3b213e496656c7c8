"""Training loops: supervised baseline, triplet / SimCLR pretraining and
classifier finetuning, plus evaluation and the CSV result ledger."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from gslab import augment as A
from gslab import combos
from gslab.data import (
    Dataset,
    SplitSpec,
    TripletBatch,
    contrastive_views,
    generate_glyphs,
    load_image_folder,
    make_triplet_batch,
    split,
)
from gslab.errors import ConfigError, GslabError, LoadError
from gslab.losses import ContrastiveBatchLayout, cross_entropy, info_nce, triplet_loss
from gslab.numerics import checkpoint
from gslab.numerics.optim import CosineAnnealing, StepDecay, lr_at, make_optimizer
from gslab.numerics.resnet import MicroResNet, ModelConfig

METHODS = ("baseline", "triplet", "simclr")
LEDGER_COLUMNS = ["aug_spec", "seed", "method", "stage", "train_acc", "valid_acc", "test_acc", "wall_time_s"]


@dataclass
class ExperimentManifest:
    """Everything a run depends on. Serialised as JSON."""

    method: str = "baseline"
    stage: str = "train"  # train (baseline) | pretrain | finetune
    dataset: dict = field(default_factory=lambda: {"kind": "glyphs", "class_count": 5, "per_class": 200,
                                                    "side": 40, "seed": 0})
    split_seed: int = 0
    aug_spec: str = combos.BASE_TOKEN
    seed: int = 0
    epochs: int = 10
    batch_size: int = 32
    optimizer: dict = field(default_factory=lambda: {"kind": "adam", "lr": 1e-3})
    schedule: dict = field(default_factory=lambda: {"kind": "step"})
    model: dict = field(default_factory=lambda: {"widths": [8, 16, 32], "embed_dim": 64, "proj_dim": 128})
    geometry: object = "desk"
    margin: float = 1.0
    temperature: float = 0.07
    pixel_probability: float = 0.5
    spatial_probability: float = 0.5
    finetune: Optional[dict] = None  # {checkpoint, freeze_backbone, augmentation: same|base}

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}")
        if self.stage not in ("train", "pretrain", "finetune"):
            raise ConfigError(f"unknown stage {self.stage!r}")
        if self.method == "baseline" and self.stage != "train":
            raise ConfigError("the baseline method has a single 'train' stage")
        if self.method != "baseline" and self.stage == "train":
            raise ConfigError(f"{self.method} runs have 'pretrain' and 'finetune' stages")
        if self.stage == "finetune":
            ft = self.finetune or {}
            if not ft.get("checkpoint"):
                raise ConfigError("finetune requires finetune.checkpoint")
            if ft.get("augmentation", "same") not in ("same", "base"):
                raise ConfigError("finetune.augmentation must be 'same' or 'base'")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2")
        if self.method == "simclr" and self.stage == "pretrain" and self.batch_size < 4:
            raise ConfigError("simclr batch_size must be >= 4 so every view has a negative")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentManifest":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown manifest fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentManifest":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    # -- derived settings -------------------------------------------------

    @property
    def geometry_obj(self) -> A.Geometry:
        if self.geometry == "desk":
            return A.DESK_GEOMETRY
        if self.geometry == "full":
            return A.FULL_GEOMETRY
        if isinstance(self.geometry, dict):
            g = dict(self.geometry)
            if "blur_limit" in g:
                g["blur_limit"] = tuple(g["blur_limit"])
            return A.Geometry(**g)
        raise ConfigError(f"unknown geometry {self.geometry!r}")

    @property
    def input_side(self) -> int:
        g = self.geometry_obj
        return g.final_side if self.method == "simclr" else g.crop_side

    @property
    def freeze_backbone(self) -> bool:
        return bool((self.finetune or {}).get("freeze_backbone", False))

    def schedule_obj(self):
        kind = (self.schedule or {}).get("kind", "none")
        if kind == "none":
            return None
        if kind == "step":
            step = self.schedule.get("step_epochs") or max(self.epochs // 2, 1)
            return StepDecay(step, self.schedule.get("gamma", 0.1))
        if kind == "cosine":
            return CosineAnnealing(self.schedule.get("t_max") or max(self.epochs, 1), self.schedule.get("eta_min", 0.0))
        raise ConfigError(f"unknown schedule kind {kind!r}")

    def pipeline(self, spec: Optional[str] = None) -> A.AugPipeline:
        try:
            return combos.parse_spec(spec or self.aug_spec, self.geometry_obj, self.method, self.seed,
                                     self.pixel_probability, self.spatial_probability)
        except GslabError as exc:
            raise ConfigError(f"bad augmentation spec {spec or self.aug_spec!r}: {exc}") from None

    def eval_pipeline(self) -> A.AugPipeline:
        g = self.geometry_obj
        return A.eval_pipeline(g, g.final_side if self.method == "simclr" else None)


@dataclass
class RunResult:
    aug_spec: str
    seed: int
    method: str
    stage: str
    train_loss: list = field(default_factory=list)
    valid_loss: list = field(default_factory=list)
    train_acc_curve: list = field(default_factory=list)
    valid_acc_curve: list = field(default_factory=list)
    train_acc: Optional[float] = None
    valid_acc: Optional[float] = None
    test_acc: Optional[float] = None
    best_epoch: Optional[int] = None
    wall_time: float = 0.0
    checkpoint: Optional[str] = None
    monitors: dict = field(default_factory=dict)

    def ledger_row(self) -> dict:
        fmt = lambda v: "" if v is None else repr(float(v))  # noqa: E731
        return {"aug_spec": self.aug_spec, "seed": self.seed, "method": self.method, "stage": self.stage,
                "train_acc": fmt(self.train_acc), "valid_acc": fmt(self.valid_acc),
                "test_acc": fmt(self.test_acc), "wall_time_s": f"{self.wall_time:.3f}"}


def append_ledger(path, result: RunResult) -> None:
    path = Path(path)
    new = not path.exists() or path.stat().st_size == 0
    with open(path, "a", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=LEDGER_COLUMNS, lineterminator="\n")
        if new:
            writer.writeheader()
        writer.writerow(result.ledger_row())


# -- data plumbing ----------------------------------------------------------

def load_dataset(cfg: dict) -> Dataset:
    cfg = dict(cfg)
    kind = cfg.pop("kind", "glyphs")
    if kind == "glyphs":
        return generate_glyphs(cfg.get("class_count", 5), cfg.get("per_class", 200), cfg.get("side", 40),
                               cfg.get("seed", 0))
    if kind == "folder":
        return load_image_folder(cfg["path"])[0]
    raise ConfigError(f"unknown dataset kind {kind!r}")


def load_splits(m: ExperimentManifest) -> tuple[Dataset, Dataset, Dataset]:
    return split(load_dataset(m.dataset), SplitSpec(seed=m.split_seed))


def _eval_array(ds: Dataset, pipeline: A.AugPipeline) -> np.ndarray:
    return pipeline.apply_batch(ds.images, range(len(ds)), 0, id_map=ds.ids)


def _batches(n: int, batch_size: int, rng: np.random.Generator, min_size: int = 2):
    perm = rng.permutation(n)
    for i in range(0, n, batch_size):
        chunk = perm[i:i + batch_size]
        if len(chunk) >= min_size:
            yield chunk


def _epoch_rng(seed: int, epoch: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, epoch, tag]))


def _model_config(m: ExperimentManifest, num_classes: Optional[int]) -> ModelConfig:
    mc = dict(m.model)
    cfg = ModelConfig(widths=tuple(mc.get("widths", (8, 16, 32))), input_side=m.input_side,
                      blocks_per_stage=mc.get("blocks_per_stage", 2), num_classes=num_classes)
    if m.method == "triplet":
        cfg.embed_dim = mc.get("embed_dim", 64)
    if m.method == "simclr":
        cfg.proj_dim = mc.get("proj_dim", 128)
        cfg.proj_hidden = mc.get("proj_hidden")
    return cfg


def predict(model: MicroResNet, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
    preds = []
    for i in range(0, len(x), batch_size):
        out = model.forward(x[i:i + batch_size], train=False, heads=("logits",))
        preds.append(out.logits.argmax(axis=1))
    return np.concatenate(preds) if preds else np.empty(0, dtype=int)


def _loss_and_accuracy(model: MicroResNet, x: np.ndarray, labels: np.ndarray, batch_size: int = 256):
    if len(x) == 0:
        raise ValueError("cannot evaluate an empty split")
    total, correct = 0.0, 0
    for i in range(0, len(x), batch_size):
        logits = model.forward(x[i:i + batch_size], train=False, heads=("logits",)).logits
        y = labels[i:i + batch_size]
        total += cross_entropy(logits, y).value * len(y)
        correct += int((logits.argmax(axis=1) == y).sum())
    return total / len(x), correct / len(x)


def accuracy(model: MicroResNet, x: np.ndarray, labels, batch_size: int = 256) -> float:
    labels = np.asarray(labels)
    if len(x) == 0:
        raise ValueError("cannot evaluate an empty split")
    return float((predict(model, x, batch_size) == labels).mean())


def evaluate(model_or_checkpoint, ds: Dataset, geometry: A.Geometry = A.DESK_GEOMETRY,
             batch_size: int = 256) -> float:
    """Accuracy (argmax) under the deterministic evaluation pipeline."""
    if len(ds) == 0:
        raise ValueError("cannot evaluate an empty split")
    model = model_or_checkpoint
    if not isinstance(model, MicroResNet):
        model, _ = checkpoint.load(model_or_checkpoint)
    if "cls.w" not in model.params:
        raise LoadError("model has no classifier head")
    side = model.config.input_side
    final = side if side != geometry.crop_side else None
    x = _eval_array(ds, A.eval_pipeline(geometry, final))
    return accuracy(model, x, ds.labels, batch_size)


# -- supervised training (baseline and finetune) ----------------------------

def _supervised_loop(m: ExperimentManifest, model: MicroResNet, trainable: list, train_backbone: bool,
                     splits, pipeline: A.AugPipeline, result: RunResult, out_dir=None) -> RunResult:
    train, valid, test = splits
    eval_p = m.eval_pipeline()
    x_valid = _eval_array(valid, eval_p)
    opt = make_optimizer(m.optimizer.get("kind", "adam"), m.optimizer.get("lr", 1e-3))
    schedule = m.schedule_obj()
    base_lr = opt.lr
    heads = ("logits",)

    best, best_acc = model.copy(), -1.0
    if m.epochs == 0:
        best_acc = _loss_and_accuracy(model, x_valid, valid.labels)[1]
        result.best_epoch = 0
    for epoch in range(m.epochs):
        opt.lr = lr_at(schedule, epoch, base_lr)
        losses, correct, seen = [], 0, 0
        for chunk in _batches(len(train), m.batch_size, _epoch_rng(m.seed, epoch, 1)):
            x = pipeline.apply_batch(train.images, chunk, epoch, id_map=train.ids)
            y = train.labels[chunk]
            out = model.forward(x, train=train_backbone, heads=heads)
            loss = cross_entropy(out.logits, y)
            grads = model.backward(grad_logits=loss.grad, backbone=train_backbone)
            opt.step(model.params, {k: grads[k] for k in trainable})
            losses.append(loss.value * len(chunk))
            correct += int((out.logits.argmax(axis=1) == y).sum())
            seen += len(chunk)
        v_loss, v_acc = _loss_and_accuracy(model, x_valid, valid.labels)
        result.train_loss.append(sum(losses) / max(seen, 1))
        result.train_acc_curve.append(correct / max(seen, 1))
        result.valid_loss.append(v_loss)
        result.valid_acc_curve.append(v_acc)
        if v_acc > best_acc:  # ties keep the earlier epoch
            best, best_acc, result.best_epoch = model.copy(), v_acc, epoch + 1

    result.valid_acc = best_acc
    result.train_acc = accuracy(best, _eval_array(train, eval_p), train.labels)
    result.test_acc = accuracy(best, _eval_array(test, eval_p), test.labels)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        path = Path(out_dir) / "model.gslab"
        checkpoint.save(best, path, {"manifest": json.loads(m.to_json()), "best_epoch": result.best_epoch})
        result.checkpoint = str(path)
    return result


def train_baseline(m: ExperimentManifest, out_dir=None, splits=None) -> RunResult:
    """Backbone + classifier trained end to end with cross-entropy."""
    if m.method != "baseline":
        raise ConfigError("train_baseline needs method 'baseline'")
    pipeline = m.pipeline()  # parse errors surface before any work
    start = time.perf_counter()
    splits = splits or load_splits(m)
    model = MicroResNet(_model_config(m, splits[0].class_count), seed=m.seed)
    result = RunResult(m.aug_spec, m.seed, m.method, m.stage)
    result = _supervised_loop(m, model, list(model.params), True, splits, pipeline, result, out_dir)
    result.wall_time = time.perf_counter() - start
    return result


def finetune(m: ExperimentManifest, out_dir=None, splits=None) -> RunResult:
    """Fresh classifier on a pretrained checkpoint: on the triplet embedding
    for triplet runs, on the backbone features for SimCLR runs."""
    if m.stage != "finetune":
        raise ConfigError("finetune needs stage 'finetune'")
    ft = m.finetune
    source, extra = checkpoint.load(ft["checkpoint"])
    pre_spec = (extra.get("manifest") or {}).get("aug_spec", m.aug_spec)
    spec = pre_spec if ft.get("augmentation", "same") == "same" else combos.parse_tokens(pre_spec).names[0]
    pipeline = m.pipeline(spec)
    start = time.perf_counter()
    splits = splits or load_splits(m)
    k = splits[0].class_count

    expected = _model_config(m, None)
    model = MicroResNet(expected, seed=m.seed)
    checkpoint.load_backbone_into(model, source, include_heads=("triplet",) if m.method == "triplet" else ())
    if m.method == "simclr":
        for name in model.head_names("proj"):
            del model.params[name]
        model.config.proj_dim = None
    on = "embedding" if m.method == "triplet" else "features"
    model.attach_classifier(k, on, seed=m.seed)

    if m.freeze_backbone:
        trainable = model.head_names("cls")
    else:
        trainable = list(model.params)
    result = RunResult(spec, m.seed, m.method, m.stage)
    result.monitors["freeze_backbone"] = m.freeze_backbone
    result = _supervised_loop(m, model, trainable, not m.freeze_backbone, splits, pipeline, result, out_dir)
    result.wall_time = time.perf_counter() - start
    return result


# -- embedding pretraining ----------------------------------------------------

def _fixed_triplets(ds: Dataset, n: int, seed: int):
    """Validation triplets; returned positions index ``ds``. Classes with a
    single item cannot supply a positive, so they are left out."""
    keep = np.concatenate([c for c in ds.by_class if len(c) >= 2] or [np.empty(0, dtype=int)])
    keep = np.sort(keep)
    if len(np.unique(ds.labels[keep])) < 2:
        raise ConfigError("validation split needs two classes with at least two items each for triplet monitoring")
    tb = make_triplet_batch(ds.subset(keep), n, np.random.default_rng(np.random.SeedSequence([seed, 0x7A11])))
    return TripletBatch(keep[tb.anchor], keep[tb.positive], keep[tb.negative])


def _triplet_value(model, x_blocks, margin):
    emb = [model.forward(x, train=False, heads=("embedding",)).embedding for x in x_blocks]
    loss = triplet_loss(*emb, margin=margin)
    d_p = np.linalg.norm(emb[0] - emb[1], axis=1)
    d_n = np.linalg.norm(emb[0] - emb[2], axis=1)
    return loss.value, float((d_p - d_n + margin > 0).mean())


def _infonce_value(model, views, temperature, batch_size):
    """Mean InfoNCE over consecutive chunks of precomputed interleaved views."""
    total, count = 0.0, 0
    for i in range(0, len(views), batch_size):
        chunk = views[i:i + batch_size]
        if len(chunk) < 4:
            continue
        z = model.forward(chunk, train=False, heads=("projection",)).projection
        total += info_nce(ContrastiveBatchLayout(z), temperature).value * len(chunk)
        count += len(chunk)
    return total / count


def pretrain_embedding(m: ExperimentManifest, out_dir=None, splits=None) -> RunResult:
    """Triplet or SimCLR pretraining. A checkpoint is written after every
    epoch when ``out_dir`` is given; the returned result carries loss curves
    in ``train_loss`` / ``valid_loss`` and no accuracies."""
    if m.method not in ("triplet", "simclr") or m.stage != "pretrain":
        raise ConfigError("pretrain_embedding needs method triplet|simclr and stage 'pretrain'")
    pipeline = m.pipeline()
    start = time.perf_counter()
    splits = splits or load_splits(m)
    train, valid, _ = splits
    model = MicroResNet(_model_config(m, None), seed=m.seed)
    opt = make_optimizer(m.optimizer.get("kind", "adam"), m.optimizer.get("lr", 1e-3))
    schedule = m.schedule_obj()
    base_lr = opt.lr
    result = RunResult(m.aug_spec, m.seed, m.method, m.stage)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    extra = {"manifest": json.loads(m.to_json())}

    if m.method == "triplet":
        trainable = model.backbone_names() + model.head_names("triplet")
        n_val = max(2, min(len(valid), 64))
        vt = _fixed_triplets(valid, n_val, m.seed)
        eval_p = m.eval_pipeline()
        x_val = [eval_p.apply_batch(valid.images, idx, 0, id_map=valid.ids) for idx in (vt.anchor, vt.positive, vt.negative)]
        hinge_curve = []
    else:
        trainable = model.backbone_names() + model.head_names("proj")
        images = train.unlabeled()
        # fixed validation views so the metric is comparable across epochs
        val_views = contrastive_views(valid.unlabeled(), np.arange(len(valid)), pipeline, epoch=0).views
        result.monitors["valid_infonce_initial"] = _infonce_value(model, val_views, m.temperature, m.batch_size)

    for epoch in range(m.epochs):
        opt.lr = lr_at(schedule, epoch, base_lr)
        losses, active = [], []
        if m.method == "triplet":
            steps = math.ceil(len(train) / m.batch_size)
            for step in range(steps):
                batch = make_triplet_batch(train, m.batch_size, _epoch_rng(m.seed, epoch, 1000 + step))
                x = batch.images(train, pipeline, epoch, step)
                emb = model.forward(x, train=True, heads=("embedding",)).embedding
                n = len(batch.anchor)
                a, p, ng = emb[:n], emb[n:2 * n], emb[2 * n:]
                loss = triplet_loss(a, p, ng, m.margin)
                grads = model.backward(grad_embedding=np.concatenate(loss.grad))
                opt.step(model.params, {k: grads[k] for k in trainable})
                losses.append(loss.value)
                active.append(float((np.linalg.norm(a - p, axis=1) - np.linalg.norm(a - ng, axis=1) + m.margin > 0).mean()))
            v_loss, _ = _triplet_value(model, x_val, m.margin)
            hinge_curve.append(float(np.mean(active)))
        else:
            n_src = m.batch_size // 2
            for chunk in _batches(len(images), n_src, _epoch_rng(m.seed, epoch, 2)):
                views = contrastive_views(images, chunk, pipeline, epoch).views
                z = model.forward(views, train=True, heads=("projection",)).projection
                loss = info_nce(ContrastiveBatchLayout(z), m.temperature)
                grads = model.backward(grad_projection=loss.grad)
                opt.step(model.params, {k: grads[k] for k in trainable})
                losses.append(loss.value)
            v_loss = _infonce_value(model, val_views, m.temperature, m.batch_size)
        result.train_loss.append(float(np.mean(losses)))
        result.valid_loss.append(v_loss)
        if out_dir is not None:
            checkpoint.save(model, out_dir / f"epoch{epoch + 1:03d}.gslab", dict(extra, epoch=epoch + 1))

    if m.method == "triplet":
        result.monitors["hinge_active_fraction"] = hinge_curve
    if out_dir is not None:
        path = out_dir / "model.gslab"
        checkpoint.save(model, path, dict(extra, epoch=m.epochs))
        result.checkpoint = str(path)
    result.monitors["model"] = model
    result.wall_time = time.perf_counter() - start
    return result


def run(m: ExperimentManifest, out_dir=None, splits=None) -> RunResult:
    """Dispatch on method and stage."""
    if m.stage == "train":
        return train_baseline(m, out_dir, splits)
    if m.stage == "pretrain":
        return pretrain_embedding(m, out_dir, splits)
    return finetune(m, out_dir, splits)
