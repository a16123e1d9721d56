"""End-to-end stages on disk: data generation, training, evaluation, prediction.

Each stage reads a :class:`RunConfig`, writes its artifacts into one run
directory (always including a ``runconfig.ini`` snapshot) and returns a small
summary object.  No stage writes wall-clock times, so reruns are
byte-identical.
"""

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .augment import resize_bilinear
from .boxes import write_detections
from .classifier import (
    CLASSES,
    TrainRunLog,
    build_classifier,
    classify_image,
    finetune,
    format_ranking,
    load_classifier,
    pretrain_pretext,
    rank_models,
    save_backbone,
    save_classifier,
    write_ranking_csv,
)
from .dataset import Manifest, load_classification, load_detection, load_png_gray, split_dataset
from .detector import (
    anchors_for,
    build_detector,
    detect_image,
    load_detector,
    predict_detections,
    save_detector,
    train_detector,
)
from .engine import load_checkpoint
from .errors import InputError
from .fusion import fuse, overlay_path, render_overlay, write_verdicts
from .metrics import threshold_sweep, write_report_files
from .phantom import generate_dataset, generate_pretext_dataset

PRETEXT_CLASSES = ("bucket0", "bucket1", "bucket2")
SNAPSHOT = "runconfig.ini"


def prepare_out(cfg, out):
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / SNAPSHOT)
    return out


def fit_size(images, size):
    if images.shape[1:3] == (size, size):
        return images
    return np.stack([resize_bilinear(im, size, size) for im in images]).astype(np.float32)


# -- data ----------------------------------------------------------------------

def _write_splits(manifest, fractions, seed, out_dir, names=("train", "val"), stratify=None):
    parts = split_dataset(manifest, fractions, seed, stratify)
    for name, part in zip(names, parts):
        part.write(Path(out_dir) / f"{name}.txt")
    return parts


def generate_data(cfg, out, workers=1):
    """classification/, detection/ and pretext/ datasets with train/val manifests."""
    out = prepare_out(cfg, out)
    ds = cfg.dataset
    lines = []

    cls = generate_dataset(cfg.phantom_for("classification"), ds.n_positive, ds.n_negative,
                           out / "classification", workers)
    _write_splits(cls, (1 - ds.val_fraction, ds.val_fraction), cfg.seed, out / "classification")
    lines.append(f"classification {cls.checksum()}")

    if ds.detection_val >= ds.detection_images:
        raise InputError("detection_val must be smaller than detection_images")
    det = generate_dataset(cfg.phantom_for("detection"), ds.detection_images, 0, out / "detection", workers)
    n = ds.detection_images
    _write_splits(det, ((n - ds.detection_val) / n, ds.detection_val / n), cfg.seed + 1, out / "detection",
                  stratify=False)
    lines.append(f"detection {det.checksum()}")

    pre = generate_pretext_dataset(cfg.phantom_for("pretext"), ds.pretext_images, out / "pretext", workers)
    _write_splits(pre, (1 - ds.pretext_val_fraction, ds.pretext_val_fraction), cfg.seed + 2, out / "pretext")
    lines.append(f"pretext {pre.checksum()}")

    (out / "checksums.txt").write_text("\n".join(lines) + "\n")
    return out


def read_split(data_dir, task, split):
    return Manifest.read(Path(data_dir) / task / f"{split}.txt")


def classification_arrays(data_dir, split, size):
    x, y = load_classification(read_split(data_dir, "classification", split), CLASSES)
    return fit_size(x, size), y


# -- classifier ----------------------------------------------------------------

@dataclass
class PretrainSummary:
    checkpoint: Path
    val_accuracy: float


def run_pretrain(cfg, data_dir, out):
    out = prepare_out(cfg, out)
    ccfg = cfg.classifier_config()
    size = ccfg.input_size
    sets = []
    for split in ("train", "val"):
        x, y = load_classification(read_split(data_dir, "pretext", split), PRETEXT_CLASSES)
        sets.append((fit_size(x, size), y))
    res = pretrain_pretext(build_classifier(ccfg, len(PRETEXT_CLASSES)), sets[0], sets[1], ccfg)
    res.log.write_csv(out / "pretext_log.csv")
    ckpt = save_backbone(out / "backbone.ckpt", res, ccfg)
    return PretrainSummary(Path(ckpt), res.val_accuracy)


@dataclass
class ClassifierSummary:
    checkpoint: Path
    log: TrainRunLog
    best_epoch: int

    @property
    def final_accuracy(self):
        return self.log.records[-1].val_accuracy if self.log.records else float("nan")


def run_train_classifier(cfg, data_dir, out, backbone=None, name="classifier", epochs=None):
    """Fine-tune from ``backbone`` (a checkpoint path) or from scratch when None."""
    out = prepare_out(cfg, out)
    ccfg = cfg.classifier_config()
    if epochs is not None:
        ccfg = replace(ccfg, epochs=epochs)
    train = classification_arrays(data_dir, "train", ccfg.input_size)
    val = classification_arrays(data_dir, "val", ccfg.input_size)
    state = load_checkpoint(backbone).params if backbone else None
    res = finetune(build_classifier(ccfg), state, train, val, ccfg, name)
    res.log.write_csv(out / "train_log.csv")
    res.model.load_state_dict(res.best_state)
    ckpt = save_classifier(out / "classifier.ckpt", res.model, ccfg,
                           {"best_epoch": res.best_epoch, "pretrained": bool(backbone)})
    return ClassifierSummary(Path(ckpt), res.log, res.best_epoch)


def _proba_chunk(args):
    model, images = args
    return model.predict_proba(images)


EVAL_CHUNK = 32


def predict_proba(model, images, workers=1):
    """Chunked so any worker count gives bit-identical probabilities."""
    jobs = [(model, images[i : i + EVAL_CHUNK]) for i in range(0, len(images), EVAL_CHUNK)]
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_proba_chunk, jobs))
    else:
        parts = [_proba_chunk(j) for j in jobs]
    return np.concatenate(parts) if parts else np.zeros((0, 2))


def run_eval_classifier(cfg, data_dir, checkpoint, out, workers=1):
    out = prepare_out(cfg, out)
    model = load_classifier(load_checkpoint(checkpoint))
    manifest = read_split(data_dir, "classification", "val")
    x, y = load_classification(manifest, CLASSES)
    p = predict_proba(model, fit_size(x, model.input_size), workers)
    pred = p.argmax(axis=1)
    with open(out / "predictions.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image", "label", "p_yes", "p_no", "predicted"])
        for e, lab, row, k in zip(manifest.entries, y, p, pred):
            w.writerow([e, CLASSES[lab], f"{row[0]:.6f}", f"{row[1]:.6f}", CLASSES[k]])
    acc = float(np.mean(pred == y)) if len(y) else 0.0
    conf = np.zeros((2, 2), dtype=int)
    for t, k in zip(y, pred):
        conf[t, k] += 1
    (out / "metrics.txt").write_text(
        f"accuracy={acc:.6f}\nn_images={len(y)}\n"
        f"yes_as_yes={conf[0, 0]}\nyes_as_no={conf[0, 1]}\nno_as_yes={conf[1, 0]}\nno_as_no={conf[1, 1]}\n")
    return acc


# -- detector ------------------------------------------------------------------

@dataclass
class DetectorSummary:
    checkpoint: Path
    log: list
    best_iteration: int

    @property
    def best_ap50(self):
        return max((r.val_ap50 for r in self.log), default=0.0)


def detection_arrays(data_dir, split, size):
    images, boxes = load_detection(read_split(data_dir, "detection", split))
    if images.shape[1] != size:
        scale = size / images.shape[1]
        images = fit_size(images, size)
        boxes = [[tuple(v * scale for v in b) for b in bs] for bs in boxes]
    return images, boxes


def run_train_detector(cfg, data_dir, out, workers=1, progress=None):
    out = prepare_out(cfg, out)
    dcfg = cfg.detector_config()
    train = detection_arrays(data_dir, "train", dcfg.input_size)
    val = detection_arrays(data_dir, "val", dcfg.input_size)
    anchors = anchors_for(dcfg, train[1])
    model = build_detector(dcfg, anchors)
    run = train_detector(model, train, val, dcfg, workers, progress)
    run.write_log(out / "iteration_log.csv")
    model.load_state_dict(run.best_state)
    ckpt = save_detector(out / "detector.ckpt", model, {"best_iteration": run.best_iteration})
    return DetectorSummary(Path(ckpt), run.log, run.best_iteration)


def run_eval_detector(cfg, data_dir, checkpoint, out, workers=1):
    out = prepare_out(cfg, out)
    model = load_detector(load_checkpoint(checkpoint))
    manifest = read_split(data_dir, "detection", "val")
    images, boxes = detection_arrays(data_dir, "val", model.input_size)
    dets = predict_detections(model, images, model.config.eval_conf_threshold, workers)
    report = threshold_sweep(dets, boxes, cfg.eval.iou_thresholds, cfg.eval.conf_threshold)
    write_report_files(report, out)
    det_dir = out / "detections"
    det_dir.mkdir(exist_ok=True)
    for entry, ds in zip(manifest.entries, dets):
        write_detections(det_dir / f"{Path(entry).stem}.txt", ds)
    return report


# -- ranking / prediction --------------------------------------------------------

def run_rank(cfg, log_paths, out, window=20):
    out = prepare_out(cfg, out)
    rows = rank_models([TrainRunLog.read_csv(p) for p in log_paths], window)
    text = format_ranking(rows)
    (out / "ranking.txt").write_text(text)
    write_ranking_csv(rows, out / "ranking.csv")
    return text


def image_paths(target):
    target = Path(target)
    if target.is_dir():
        paths = sorted(p for p in target.rglob("*.png") if not p.name.endswith(".overlay.png"))
        if not paths:
            raise InputError(f"no PNG images under {target}")
        return target, paths
    if not target.is_file():
        raise InputError(f"no such image or directory: {target}")
    return target.parent, [target]


def run_predict(cfg, target, classifier_ckpt, detector_ckpt, out):
    """Classify, detect, fuse and render every PNG under ``target``."""
    out = prepare_out(cfg, out)
    cls_model = load_classifier(load_checkpoint(classifier_ckpt))
    det_model = load_detector(load_checkpoint(detector_ckpt))
    base, paths = image_paths(target)
    records = []
    for p in paths:
        image = load_png_gray(p)
        verdict = fuse(classify_image(cls_model, image), detect_image(det_model, image),
                       cfg.fusion.tau_cls, cfg.fusion.tau_det)
        rel = p.relative_to(base).as_posix()
        dest = overlay_path(rel, out / Path(rel).parent)  # mirrors input sub-directories
        dest.parent.mkdir(parents=True, exist_ok=True)
        render_overlay(image, verdict, dest)
        records.append(verdict.to_record(rel))
    write_verdicts(records, out / "verdicts.jsonl")
    return records
