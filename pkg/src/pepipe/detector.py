"""Single-class one-stage anchor-grid detector.

The network maps an ``(H, W, 1)`` image to an ``S x S x (A*5)`` grid; every
cell/anchor slot predicts ``(tx, ty, tw, th, objectness-logit)``.  Decoding::

    bx = (col + sigmoid(tx)) * stride      bw = anchor_w * exp(tw)
    by = (row + sigmoid(ty)) * stride      bh = anchor_h * exp(th)
    confidence = sigmoid(objectness)
"""

import csv
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from .augment import flip_boxes, hflip, resize_bilinear
from .boxes import Detection, check_rect, clip_rect
from .engine import Network, Optimizer, OptimizerState, no_grad
from .engine import layers as L
from .engine.checkpoint import save_checkpoint
from .engine.ops import sigmoid
from .engine.tensor import Tensor
from .errors import ConfigError, DimensionError, InputError, LoadError, NumericError, TrainingError
from .metrics import average_precision, iou, select_checkpoint

EVAL_CHUNK = 32
TARGET_EPS = 1e-6


@dataclass
class DetectorConfig:
    input_size: int = 64
    stride: int = 0  # 0: 8 up to 128 px input, 32 above
    n_anchors: int = 3
    anchors: tuple = ()  # (w, h) pairs; empty -> estimated from training boxes
    anchor_iters: int = 100
    learning_rate: float = 0.001
    momentum: float = 0.949
    weight_decay: float = 0.0005
    burn_in: int = 200
    iterations: int = 4000
    batch_size: int = 16
    eval_every: int = 250
    lambda_coord: float = 5.0
    lambda_noobj: float = 0.5
    ignore_iou: float = 0.5
    conf_threshold: float = 0.25
    eval_conf_threshold: float = 0.005
    nms_iou: float = 0.45
    hflip: bool = True
    seed: int = 7

    def __post_init__(self):
        if self.stride == 0:
            self.stride = 8 if self.input_size <= 128 else 32
        if self.stride & (self.stride - 1) or self.input_size % self.stride:
            raise ConfigError(f"input size {self.input_size} must be a multiple of power-of-two stride {self.stride}")
        if not 0 < self.conf_threshold < 1 or not 0 < self.nms_iou < 1:
            raise ConfigError("thresholds must be in (0, 1)")
        if self.iterations < 0 or self.batch_size < 1 or self.eval_every < 1:
            raise ConfigError("iterations >= 0, batch_size >= 1, eval_every >= 1 required")

    @property
    def grid(self):
        return self.input_size // self.stride

    def to_dict(self):
        return asdict(self)


# -- anchors -------------------------------------------------------------------

class AnchorSet(NamedTuple):
    anchors: tuple  # ((w, h), ...) ascending by area

    def __len__(self):
        return len(self.anchors)

    @property
    def array(self):
        return np.asarray(self.anchors, dtype=np.float64)


def make_anchor_set(sizes, input_size):
    sizes = sorted((float(w), float(h)) for w, h in sizes)
    sizes.sort(key=lambda wh: (wh[0] * wh[1], wh[0]))
    for w, h in sizes:
        if not (0 < w <= input_size and 0 < h <= input_size):
            raise InputError(f"anchor {(w, h)} outside (0, {input_size}]")
    return AnchorSet(tuple(sizes))


def wh_iou(a, b):
    """Co-centered IoU between (w, h) arrays; broadcasts over leading axes."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    inter = np.minimum(a[..., 0], b[..., 0]) * np.minimum(a[..., 1], b[..., 1])
    return inter / (a[..., 0] * a[..., 1] + b[..., 0] * b[..., 1] - inter)


def estimate_anchors(boxes_wh, k=3, iters=100, seed=0, input_size=None):
    """k-medoids over box sizes with distance ``1 - IoU`` of co-centered boxes."""
    wh = np.asarray(boxes_wh, dtype=np.float64).reshape(-1, 2)
    if len(wh) < k:
        raise InputError(f"need at least {k} boxes to estimate {k} anchors, got {len(wh)}")
    uniq = np.unique(wh, axis=0)
    if len(uniq) < k:
        centers = np.concatenate([uniq, np.repeat(uniq[-1:], k - len(uniq), axis=0)])
    else:
        rng = np.random.default_rng(seed)
        centers = uniq[np.sort(rng.choice(len(uniq), k, replace=False))]
        dist = 1.0 - wh_iou(wh[:, None, :], wh[None, :, :])
        assign = None
        for _ in range(iters):
            new = np.argmax(wh_iou(wh[:, None, :], centers[None, :, :]), axis=1)
            if assign is not None and np.array_equal(new, assign):
                break
            assign = new
            for c in range(k):
                members = np.nonzero(assign == c)[0]
                if members.size:
                    cost = dist[np.ix_(members, members)].sum(axis=1)
                    centers[c] = wh[members[np.argmin(cost)]]
    size = input_size if input_size is not None else float(np.max(centers))
    return make_anchor_set(centers, size)


# -- targets and loss ----------------------------------------------------------

class Targets(NamedTuple):
    values: np.ndarray  # (S, S, A, 5): sig_tx, sig_ty, tw, th, obj
    positive: np.ndarray  # (S, S, A) bool
    ignore: np.ndarray  # (S, S, A) bool
    dropped: int  # GTs with no free anchor slot in their cell


def encode_targets(gt_boxes, anchors, grid, input_size, ignore_iou=0.5):
    """Assign each GT to its center cell and best co-centered-IoU anchor."""
    stride = input_size / grid
    anc = anchors.array
    a = len(anc)
    values = np.zeros((grid, grid, a, 5))
    pos = np.zeros((grid, grid, a), dtype=bool)
    dropped = 0
    for box in gt_boxes:
        check_rect(box)
        x0, y0, x1, y1 = box
        if x0 < -1e-9 or y0 < -1e-9 or x1 > input_size + 1e-9 or y1 > input_size + 1e-9:
            raise InputError(f"box {tuple(box)} outside the {input_size}px input")
        gw, gh = x1 - x0, y1 - y0
        cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
        col = min(int(cx // stride), grid - 1)
        row = min(int(cy // stride), grid - 1)
        ranked = np.argsort(-wh_iou(anc, np.array([gw, gh])), kind="stable")
        slot = next((int(k) for k in ranked if not pos[row, col, k]), None)
        if slot is None:
            dropped += 1
            continue
        pos[row, col, slot] = True
        values[row, col, slot] = (
            np.clip(cx / stride - col, TARGET_EPS, 1 - TARGET_EPS),
            np.clip(cy / stride - row, TARGET_EPS, 1 - TARGET_EPS),
            math.log(gw / anc[slot, 0]),
            math.log(gh / anc[slot, 1]),
            1.0,
        )
    ignore = np.zeros_like(pos)
    if gt_boxes:
        centers = (np.arange(grid) + 0.5) * stride
        cyy, cxx = np.meshgrid(centers, centers, indexing="ij")
        prior = np.stack([
            cxx[..., None] - anc[:, 0] / 2, cyy[..., None] - anc[:, 1] / 2,
            cxx[..., None] + anc[:, 0] / 2, cyy[..., None] + anc[:, 1] / 2,
        ], axis=-1)  # (S, S, A, 4)
        g = np.asarray(gt_boxes, dtype=np.float64)
        ix = np.clip(np.minimum(prior[..., None, 2], g[:, 2]) - np.maximum(prior[..., None, 0], g[:, 0]), 0, None)
        iy = np.clip(np.minimum(prior[..., None, 3], g[:, 3]) - np.maximum(prior[..., None, 1], g[:, 1]), 0, None)
        inter = ix * iy
        union = (anc[:, 0] * anc[:, 1])[None, None, :, None] + ((g[:, 2] - g[:, 0]) * (g[:, 3] - g[:, 1])) - inter
        best = (inter / union).max(axis=-1)
        ignore = (best > ignore_iou) & ~pos
    return Targets(values, pos, ignore, dropped)


def stack_targets(targets):
    return Targets(
        np.stack([t.values for t in targets]),
        np.stack([t.positive for t in targets]),
        np.stack([t.ignore for t in targets]),
        sum(t.dropped for t in targets),
    )


def detector_loss(pred, targets, lambda_coord=5.0, lambda_noobj=0.5):
    """Squared-error box terms + BCE objectness, averaged over the batch.

    ``pred`` is a Tensor ``(S, S, A*5)`` or ``(N, S, S, A*5)``; ``targets`` the
    matching (stacked) :class:`Targets`.  Ignored slots contribute nothing.
    """
    values, pos, ign = targets.values, targets.positive, targets.ignore
    pd = pred.data
    single = pd.ndim == 3
    if single:
        values, pos, ign = values[None], pos[None], ign[None]
        pd = pd[None]
    if values.ndim != 5 or pos.shape != values.shape[:4] or ign.shape != pos.shape:
        raise DimensionError("targets/masks have inconsistent shapes")
    n, s1, s2, a, _ = values.shape
    if pd.shape != (n, s1, s2, a * 5):
        raise DimensionError(f"predictions {pred.shape} do not match targets {values.shape}")
    p = pd.reshape(n, s1, s2, a, 5).astype(np.float64)
    neg = ~pos & ~ign
    sxy = sigmoid(p[..., :2])
    dxy = sxy - values[..., :2]
    dwh = p[..., 2:4] - values[..., 2:4]
    obj = p[..., 4]
    posf = pos[..., None]
    coord = lambda_coord * (np.sum((dxy**2) * posf) + np.sum((dwh**2) * posf))
    obj_loss = np.sum(np.logaddexp(0.0, -obj) * pos)
    noobj = lambda_noobj * np.sum(np.logaddexp(0.0, obj) * neg)
    loss = np.asarray((coord + obj_loss + noobj) / n, dtype=pred.dtype)

    def backward(g):
        sig_o = sigmoid(obj)
        grad = np.zeros_like(p)
        grad[..., :2] = lambda_coord * 2.0 * dxy * sxy * (1.0 - sxy) * posf
        grad[..., 2:4] = lambda_coord * 2.0 * dwh * posf
        grad[..., 4] = (sig_o - 1.0) * pos + lambda_noobj * sig_o * neg
        grad = (grad * (float(g) / n)).reshape(pd.shape).astype(pred.dtype)
        return (grad[0] if single else grad,)

    return Tensor._from_op(loss, (pred,), backward, "detector_loss")


# -- decode / nms --------------------------------------------------------------

def decode(pred, anchors, stride, conf_threshold=0.25, input_size=None):
    """Grid predictions ``(S, S, A*5)`` -> clipped detections at or above threshold."""
    pred = np.asarray(pred, dtype=np.float64)
    s = pred.shape[0]
    anc = anchors.array
    p = pred.reshape(s, s, len(anc), 5)
    conf = sigmoid(p[..., 4])
    size = input_size if input_size is not None else s * stride
    rows, cols, ks = np.nonzero(conf >= conf_threshold)
    out = []
    for r, c, k in zip(rows, cols, ks):
        tx, ty, tw, th, _ = p[r, c, k]
        bx = (c + sigmoid(tx)) * stride
        by = (r + sigmoid(ty)) * stride
        bw = anc[k, 0] * math.exp(min(tw, 20.0))
        bh = anc[k, 1] * math.exp(min(th, 20.0))
        x0, y0, x1, y1 = clip_rect((bx - bw / 2, by - bh / 2, bx + bw / 2, by + bh / 2), size, size)
        if x1 > x0 and y1 > y0:
            out.append(Detection(float(x0), float(y0), float(x1), float(y1), float(conf[r, c, k])))
    return out


def nms(detections, iou_threshold=0.45):
    """Greedy suppression: drop boxes overlapping a kept one by IoU > threshold."""
    order = sorted(range(len(detections)), key=lambda i: (-detections[i].confidence, i))
    kept = []
    for i in order:
        d = detections[i]
        if all(iou(d.box, k.box) <= iou_threshold for k in kept):
            kept.append(d)
    return kept


# -- model ---------------------------------------------------------------------

def backbone_widths(n_pools):
    return tuple(min(16 * 2**i, 128) for i in range(n_pools))


class DetectorModel:
    def __init__(self, config, anchors, seed=None):
        self.config = config
        self.anchors = anchors
        self.input_size = config.input_size
        self.stride = config.stride
        self.grid = config.grid
        n_pools = int(math.log2(config.stride))
        widths = backbone_widths(n_pools)
        specs = []
        for w in widths:
            specs += [L.conv(w), L.RELU, L.MAXPOOL2]
        specs += [L.conv(widths[-1]), L.RELU, L.conv(len(anchors) * 5, kernel_size=1)]
        rng = np.random.default_rng([config.seed if seed is None else seed, 404])
        size = config.input_size
        self.net = Network(specs, (size, size, 1), rng, prefix="det.")
        head_w = self.net.params[f"det.layer{len(specs) - 1}.weight"]
        head_b = self.net.params[f"det.layer{len(specs) - 1}.bias"]
        head_w.data *= 0.1
        bias = head_b.data.reshape(len(anchors), 5)
        bias[:, 4] = -4.0  # objectness prior ~ 0.018
        head_b.data = bias.reshape(-1)

    @property
    def output_shape(self):
        return self.net.output_shape

    def parameters(self):
        return self.net.parameters()

    def forward(self, x):
        return self.net(x)

    def predict_raw(self, images):
        images = np.asarray(images, dtype=np.float32)
        with no_grad():
            return self.net(images).data

    def state_dict(self):
        return self.net.state_dict()

    def load_state_dict(self, state):
        self.net.load_state_dict(state)


def build_detector(config, anchors, seed=None):
    return DetectorModel(config, anchors, seed)


def save_detector(path, model, extra=None):
    meta = {"kind": "detector", "config": model.config.to_dict(), "anchors": [list(a) for a in model.anchors.anchors]}
    meta.update(extra or {})
    return save_checkpoint(path, model.state_dict(), meta)


def load_detector(checkpoint):
    meta = checkpoint.meta
    if meta.get("kind") != "detector":
        raise LoadError(f"not a detector checkpoint (kind={meta.get('kind')!r})")
    cfg = dict(meta["config"])
    cfg["anchors"] = tuple(tuple(a) for a in cfg.get("anchors", ()))
    config = DetectorConfig(**cfg)
    anchors = make_anchor_set(meta["anchors"], config.input_size)
    model = DetectorModel(config, anchors, seed=0)
    model.load_state_dict(checkpoint.params)
    return model


def _detect_chunk(args):
    model, images, conf_threshold = args
    raw = model.predict_raw(images)
    return [nms(decode(r, model.anchors, model.stride, conf_threshold, model.input_size), model.config.nms_iou)
            for r in raw]


def predict_detections(model, images, conf_threshold=None, workers=1):
    """Decode + NMS for a stack of model-sized images, in fixed-size chunks.

    Chunking is independent of ``workers`` so results are bit-identical for
    any worker count.
    """
    conf = model.config.conf_threshold if conf_threshold is None else conf_threshold
    jobs = [(model, images[i : i + EVAL_CHUNK], conf) for i in range(0, len(images), EVAL_CHUNK)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_detect_chunk, jobs))
    else:
        parts = [_detect_chunk(j) for j in jobs]
    return [d for part in parts for d in part]


def detect_image(model, image, conf_threshold=None):
    """Detections in the original image's pixel coordinates."""
    img = np.asarray(image, dtype=np.float32)
    if img.ndim == 2:
        img = img[..., None]
    h, w = img.shape[:2]
    size = model.input_size
    resized = resize_bilinear(img, size, size)
    (dets,) = predict_detections(model, resized[None], conf_threshold)
    sx, sy = w / size, h / size
    out = []
    for d in dets:
        x0, y0, x1, y1 = clip_rect((d.x_min * sx, d.y_min * sy, d.x_max * sx, d.y_max * sy), w, h)
        out.append(Detection(x0, y0, x1, y1, d.confidence))
    return out


# -- training ------------------------------------------------------------------

@dataclass
class IterationRecord:
    iteration: int
    loss: float
    val_ap50: float


@dataclass
class DetectorRun:
    model: DetectorModel
    log: list = field(default_factory=list)
    best_state: dict = field(default_factory=dict)
    best_iteration: int = 0

    def write_log(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iteration", "loss", "val_ap50"])
            for r in self.log:
                w.writerow([r.iteration, f"{r.loss:.6f}", f"{r.val_ap50:.6f}"])


def anchors_for(config, train_boxes):
    if config.anchors:
        return make_anchor_set(config.anchors, config.input_size)
    wh = [(b[2] - b[0], b[3] - b[1]) for boxes in train_boxes for b in boxes]
    return estimate_anchors(wh, config.n_anchors, config.anchor_iters, config.seed, config.input_size)


def evaluate_ap(model, images, boxes, iou_threshold=0.5, workers=1):
    dets = predict_detections(model, images, model.config.eval_conf_threshold, workers)
    return average_precision(dets, boxes, iou_threshold)


def train_detector(model, train, val, config=None, workers=1, progress=None):
    """Momentum-SGD training with periodic val AP@0.5 and best-checkpoint retention."""
    config = config or model.config
    images, boxes = train
    val_images, val_boxes = val
    size, grid = config.input_size, config.grid
    if images.shape[1:3] != (size, size):
        raise InputError(f"training images must be {size}x{size}")
    plain = [encode_targets(b, model.anchors, grid, size, config.ignore_iou) for b in boxes]
    flipped_imgs = np.stack([hflip(im) for im in images]) if config.hflip else None
    flipped = ([encode_targets(flip_boxes(b, size), model.anchors, grid, size, config.ignore_iou) for b in boxes]
               if config.hflip else None)

    state = OptimizerState("sgd_momentum", config.learning_rate, momentum_coefficient=config.momentum,
                           l2_coefficient=config.weight_decay)
    opt = Optimizer(model.parameters(), state)
    stream = np.random.default_rng([config.seed, 505])
    run = DetectorRun(model, [], model.state_dict(), 0)
    states = {0: run.best_state}
    order, cursor = stream.permutation(len(images)), 0
    window = []
    for it in range(1, config.iterations + 1):
        if cursor + config.batch_size > len(order):
            order, cursor = stream.permutation(len(images)), 0
        idx = order[cursor : cursor + config.batch_size]
        cursor += config.batch_size
        flips = stream.random(len(idx)) < 0.5 if config.hflip else np.zeros(len(idx), bool)
        batch = np.stack([flipped_imgs[i] if f else images[i] for i, f in zip(idx, flips)])
        tgt = stack_targets([flipped[i] if f else plain[i] for i, f in zip(idx, flips)])
        if it <= config.burn_in:
            state.learning_rate = config.learning_rate * (it / config.burn_in) ** 4
        else:
            state.learning_rate = config.learning_rate
        try:
            loss = detector_loss(model.forward(batch), tgt, config.lambda_coord, config.lambda_noobj)
        except NumericError as exc:
            raise TrainingError(f"numeric failure: {exc}", step=it) from exc
        value = loss.item()
        if not np.isfinite(value):
            raise TrainingError("loss diverged", step=it)
        opt.zero_grad()
        loss.backward()
        opt.step()
        window.append(value)
        if it % config.eval_every == 0 or it == config.iterations:
            ap = evaluate_ap(model, val_images, val_boxes, 0.5, workers)
            run.log.append(IterationRecord(it, float(np.mean(window)), ap))
            window = []
            states[it] = model.state_dict()
            if progress:
                progress(run.log[-1])
    if run.log:
        run.best_iteration = select_checkpoint(run.log)
        run.best_state = states[run.best_iteration]
    return run
