"""Transfer-learning image classifier.

A compact conv backbone (4 x conv3x3/relu/maxpool2, global average pool)
is first trained on a 3-class pretext task (vessel-count buckets), then its
head is replaced by dense(512) -> dropout(0.4) -> dense(2) -> softmax and the
whole model is fine-tuned on Yes/No phantoms with Adam.
"""

import csv
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .augment import AugmentConfig, augment_image, resize_bilinear
from .engine import Network, Optimizer, OptimizerState, cross_entropy_with_l2, no_grad, softmax
from .engine import layers as L
from .engine.checkpoint import save_checkpoint
from .errors import ConfigError, InputError, LoadError, NumericError, TrainingError

CLASSES = ("yes", "no")


@dataclass
class ClassifierConfig:
    input_size: int = 64
    widths: tuple = (8, 16, 32, 64)
    dense_units: int = 512
    dropout: float = 0.4
    learning_rate: float = 1e-4
    l2: float = 0.005
    epochs: int = 40
    batch_size: int = 16
    freeze_backbone: bool = False
    augment: bool = True
    augment_config: AugmentConfig = field(default_factory=AugmentConfig)
    pretext_epochs: int = 20
    pretext_learning_rate: float = 1e-3
    seed: int = 7

    def __post_init__(self):
        if self.input_size < 16 or self.input_size % (2 ** len(self.widths)):
            raise ConfigError(
                f"input size {self.input_size} must stay even through {len(self.widths)} pooling stages"
            )
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")

    def to_dict(self):
        return asdict(self)


class ClassifierOutput(NamedTuple):
    p_yes: float
    p_no: float


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_accuracy: float


@dataclass
class TrainRunLog:
    name: str = "classifier"
    param_count: int = 0
    seed: int = 0
    config: dict = field(default_factory=dict)
    records: list = field(default_factory=list)

    @property
    def val_accuracies(self):
        return [r.val_accuracy for r in self.records]

    def add(self, epoch, train_loss, val_accuracy):
        if self.records and epoch <= self.records[-1].epoch:
            raise InputError("epochs must be strictly increasing")
        self.records.append(EpochRecord(epoch, float(train_loss), float(val_accuracy)))

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(f"# model={self.name}\n# param_count={self.param_count}\n# seed={self.seed}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "val_accuracy"])
            for r in self.records:
                w.writerow([r.epoch, f"{r.train_loss:.6f}", f"{r.val_accuracy:.6f}"])

    @classmethod
    def read_csv(cls, path):
        path = Path(path)
        meta, rows = {}, []
        with open(path) as fh:
            for line in fh:
                if line.startswith("#"):
                    k, _, v = line[1:].strip().partition("=")
                    meta[k.strip()] = v.strip()
                else:
                    rows.append(line)
        reader = csv.DictReader(rows)
        log = cls(meta.get("model", path.stem), int(meta.get("param_count", 0)), int(meta.get("seed", 0)))
        for row in reader:
            log.add(int(row["epoch"]), float(row["train_loss"]), float(row["val_accuracy"]))
        return log


class ClassifierModel:
    def __init__(self, backbone, head, frozen_backbone=False, input_size=64):
        self.backbone = backbone
        self.head = head
        self.frozen_backbone = frozen_backbone
        self.input_size = input_size
        if head.input_shape != backbone.output_shape:
            raise ConfigError("head input length must equal backbone output length")

    @property
    def n_classes(self):
        return self.head.output_shape[0]

    @property
    def param_count(self):
        return self.backbone.param_count + self.head.param_count

    def trainable_parameters(self):
        params = [] if self.frozen_backbone else self.backbone.parameters()
        return params + self.head.parameters()

    def head_weights(self):
        return self.head.parameters()

    def logits(self, x, train=False, rng=None):
        x = np.asarray(x, dtype=np.float32) * np.float32(2.0) - np.float32(1.0)  # [0, 1] -> [-1, 1]
        return self.head(self.backbone(x, train, rng), train, rng)

    def forward(self, x, train=False, rng=None):
        return softmax(self.logits(x, train, rng))

    def predict_logits(self, images, chunk=64):
        images = np.asarray(images, dtype=np.float32)
        out = []
        with no_grad():
            for i in range(0, len(images), chunk):
                out.append(self.logits(images[i : i + chunk]).data)
        return np.concatenate(out) if out else np.zeros((0, self.n_classes), np.float32)

    def predict_proba(self, images):
        z = self.predict_logits(images).astype(np.float64)
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    def accuracy(self, images, labels):
        if len(images) == 0:
            return 0.0
        return float(np.mean(self.predict_proba(images).argmax(axis=1) == np.asarray(labels)))

    def state_dict(self):
        return {**self.backbone.state_dict(), **self.head.state_dict()}

    def load_state_dict(self, state):
        self.backbone.load_state_dict(state)
        self.head.load_state_dict(state)


def backbone_specs(widths):
    specs = []
    for w in widths:
        specs += [L.conv(w), L.RELU, L.MAXPOOL2]
    return specs + [L.GAP]


def head_specs(config, n_classes):
    return [L.fc(config.dense_units), L.RELU, L.dropout(config.dropout), L.fc(n_classes)]


def build_classifier(config, n_classes=2, seed=None):
    """He-uniform initialized backbone + head; ``seed`` defaults to ``config.seed``."""
    seed = config.seed if seed is None else seed
    init = np.random.default_rng([seed, 101])
    size = config.input_size
    backbone = Network(backbone_specs(config.widths), (size, size, 1), init, prefix="backbone.")
    head = Network(head_specs(config, n_classes), backbone.output_shape, init, prefix="head.")
    return ClassifierModel(backbone, head, config.freeze_backbone, size)


def fresh_head(model, config, n_classes=2, seed=None):
    seed = config.seed if seed is None else seed
    init = np.random.default_rng([seed, 202])
    model.head = Network(head_specs(config, n_classes), model.backbone.output_shape, init, prefix="head.")
    return model


def _run_epochs(model, train, val, config, epochs, lr, seed, log, l2_params=None):
    """Shared Adam training loop; returns (best_state, best_epoch)."""
    images, labels = train
    val_images, val_labels = val
    stream = np.random.default_rng([seed, 303])
    opt = Optimizer(model.trainable_parameters(), OptimizerState("adam", lr))
    best_state, best_acc, best_epoch = model.state_dict(), -1.0, 0
    n = len(images)
    for epoch in range(1, epochs + 1):
        order = stream.permutation(n)
        losses = []
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            batch = images[idx]
            if config.augment:
                batch = np.stack([augment_image(im, config.augment_config, stream) for im in batch])
            try:
                probs = model.forward(batch, train=True, rng=stream)
                weights = model.head_weights() if l2_params is None else l2_params
                loss = cross_entropy_with_l2(probs, labels[idx], weights, config.l2)
            except NumericError as exc:
                raise TrainingError(f"numeric failure: {exc}", step=epoch) from exc
            if not np.isfinite(loss.item()):
                raise TrainingError("loss diverged", step=epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item() * len(idx))
        acc = model.accuracy(val_images, val_labels)
        log.add(epoch, sum(losses) / n, acc)
        if acc > best_acc:
            best_state, best_acc, best_epoch = model.state_dict(), acc, epoch
    return best_state, best_epoch


@dataclass
class PretrainResult:
    backbone_state: dict
    val_accuracy: float
    log: TrainRunLog


def pretrain_pretext(model, train, val, config, epochs=None, seed=None):
    """Train ``model`` (3-class head) on pretext data; returns the backbone weights.

    With 0 epochs the returned weights are the initialization.
    """
    epochs = config.pretext_epochs if epochs is None else epochs
    seed = config.seed if seed is None else seed
    log = TrainRunLog("pretext", model.param_count, seed, config.to_dict())
    if epochs > 0:
        _run_epochs(model, train, val, config, epochs, config.pretext_learning_rate, seed + 1000, log)
    acc = model.accuracy(*val)
    return PretrainResult(model.backbone.state_dict(), acc, log)


def save_backbone(path, result, config):
    meta = {"kind": "pretext-backbone", "val_accuracy": result.val_accuracy,
            "input_size": config.input_size, "widths": list(config.widths)}
    return save_checkpoint(path, result.backbone_state, meta)


@dataclass
class FinetuneResult:
    model: ClassifierModel
    log: TrainRunLog
    best_state: dict
    best_epoch: int
    baseline_accuracy: float


def finetune(model, backbone_state, train, val, config, name="classifier", seed=None):
    """Load pretrained backbone weights, attach a fresh head and train on Yes/No data.

    ``backbone_state`` may be None to train from scratch.  The best-validation
    weights are returned alongside the full per-epoch log.
    """
    seed = config.seed if seed is None else seed
    if backbone_state is not None:
        try:
            model.backbone.load_state_dict(backbone_state)
        except LoadError:
            raise
        except Exception as exc:
            raise LoadError(f"incompatible backbone checkpoint: {exc}") from exc
    fresh_head(model, config, 2, seed)
    model.frozen_backbone = config.freeze_backbone
    baseline = model.accuracy(*val)
    log = TrainRunLog(name, model.param_count, seed, config.to_dict())
    best_state, best_epoch = _run_epochs(model, train, val, config, config.epochs, config.learning_rate, seed, log)
    if config.epochs == 0:
        best_state = model.state_dict()
    return FinetuneResult(model, log, best_state, best_epoch, baseline)


def save_classifier(path, model, config, extra=None):
    meta = {"kind": "classifier", "input_size": model.input_size, "widths": list(config.widths),
            "dense_units": config.dense_units, "n_classes": model.n_classes}
    meta.update(extra or {})
    return save_checkpoint(path, model.state_dict(), meta)


def load_classifier(checkpoint):
    meta = checkpoint.meta
    if meta.get("kind") != "classifier":
        raise LoadError(f"not a classifier checkpoint (kind={meta.get('kind')!r})")
    config = ClassifierConfig(input_size=meta["input_size"], widths=tuple(meta["widths"]),
                              dense_units=meta["dense_units"])
    model = build_classifier(config, meta.get("n_classes", 2), seed=0)
    model.load_state_dict(checkpoint.params)
    return model


def classify_image(model, image):
    """Eval-mode class probabilities; resizes bilinearly to the model input if needed."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = img[..., None]
    if img.shape[:2] != (model.input_size, model.input_size):
        img = resize_bilinear(img, model.input_size, model.input_size)
    p = model.predict_proba(img[None])[0]
    return ClassifierOutput(float(p[0]), float(p[1]))


class RankRow(NamedTuple):
    rank: int
    model: str
    param_count: float
    score: float


def rank_models(logs, window=20):
    """Rank runs by mean validation accuracy over their final ``window`` epochs."""
    scored = []
    for log in logs:
        if len(log.records) < window:
            raise InputError(f"log {log.name!r} has {len(log.records)} epochs, fewer than window {window}")
        scored.append((float(np.mean(log.val_accuracies[-window:])), log))
    scored.sort(key=lambda s: (-s[0], s[1].param_count, s[1].name))
    return [RankRow(i + 1, log.name, log.param_count, score) for i, (score, log) in enumerate(scored)]


def format_ranking(rows):
    lines = [f"{'Rank':<6}{'Model':<20}{'Parameters':>12}{'Score (%)':>12}"]
    for r in rows:
        lines.append(f"{r.rank:<6}{r.model:<20}{r.param_count:>12}{100 * r.score:>12.2f}")
    return "\n".join(lines) + "\n"


def write_ranking_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["rank", "model", "param_count", "score"])
        for r in rows:
            w.writerow([r.rank, r.model, r.param_count, f"{r.score:.6f}"])
