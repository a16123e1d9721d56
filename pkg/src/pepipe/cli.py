"""``pepipe`` command line.

Exit status: 0 success, 2 usage error, 3 data/validation error, 4 numeric
failure, 1 anything else raised by the pipeline.
"""

import argparse
import os
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

from . import pipeline
from .config import PROFILES, load_run_config, profile_defaults
from .errors import DataError, InputError, NumericError, PepipeError

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC, EXIT_OTHER = 2, 3, 4, 1

DESK, PAPER = profile_defaults("desk"), profile_defaults("paper")


def _root():
    return Path(os.environ.get("PEPIPE_OUT", "runs"))


def _dflt(section, key):
    a, b = getattr(getattr(DESK, section), key), getattr(getattr(PAPER, section), key)
    return f"(default: {a})" if a == b else f"(default: desk {a}, paper {b})"


def shipped_checkpoint(name):
    return Path(str(resources.files("pepipe") / "models" / name))


# -- parser ----------------------------------------------------------------------

def _common(p, out_name):
    g = p.add_argument_group("run options")
    g.add_argument("--config", metavar="PATH", help="INI run configuration (default: profile values)")
    g.add_argument("--seed", type=int, help=f"global seed; every random stream derives from it (default: {DESK.seed})")
    g.add_argument("--out", metavar="DIR",
                   help=f"output directory (default: $PEPIPE_OUT/{out_name}, or runs/{out_name})")
    g.add_argument("--profile", choices=PROFILES, help="hyperparameter preset (default: desk)")
    g.add_argument("--workers", type=int, help="parallel worker processes (default: 1)")


def _data_arg(p):
    p.add_argument("--data", metavar="DIR", help="dataset root from 'phantom gen' (default: <out root>/phantom)")


def _classifier_flags(p):
    g = p.add_argument_group("classifier hyperparameters")
    g.add_argument("--epochs", type=int, help=f"fine-tuning epochs {_dflt('classifier', 'epochs')}")
    g.add_argument("--lr", type=float, help=f"Adam learning rate {_dflt('classifier', 'learning_rate')}")
    g.add_argument("--batch-size", type=int, help=f"mini-batch size {_dflt('classifier', 'batch_size')}")
    g.add_argument("--dropout", type=float, help=f"head dropout ratio {_dflt('classifier', 'dropout')}")
    g.add_argument("--l2", type=float, help=f"L2 coefficient on head weights {_dflt('classifier', 'l2')}")
    g.add_argument("--input-size", type=int, help=f"square input size {_dflt('classifier', 'input_size')}")


def _detector_flags(p):
    g = p.add_argument_group("detector hyperparameters")
    g.add_argument("--iterations", type=int, help=f"training iterations {_dflt('detector', 'iterations')}")
    g.add_argument("--lr", type=float, help=f"SGD learning rate {_dflt('detector', 'learning_rate')}")
    g.add_argument("--momentum", type=float, help=f"SGD momentum {_dflt('detector', 'momentum')}")
    g.add_argument("--batch-size", type=int, help=f"mini-batch size {_dflt('detector', 'batch_size')}")
    g.add_argument("--eval-every", type=int, help=f"iterations between val AP@0.5 checks {_dflt('detector', 'eval_every')}")
    g.add_argument("--input-size", type=int, help=f"square input size {_dflt('detector', 'input_size')}")


def build_parser():
    parser = argparse.ArgumentParser(prog="pepipe", description="PE identification pipeline on synthetic phantoms.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    ph = sub.add_parser("phantom", help="synthetic phantom datasets")
    ph_sub = ph.add_subparsers(dest="action", metavar="ACTION", required=True)
    gen = ph_sub.add_parser("gen", help="generate classification, detection and pretext datasets")
    _common(gen, "phantom")
    g = gen.add_argument_group("dataset sizes")
    g.add_argument("--n-positive", type=int, help=f"classification positives {_dflt('dataset', 'n_positive')}")
    g.add_argument("--n-negative", type=int, help=f"classification negatives {_dflt('dataset', 'n_negative')}")
    g.add_argument("--detection-images", type=int,
                   help=f"detection images, train + val {_dflt('dataset', 'detection_images')}")
    g.add_argument("--image-size", type=int, help=f"phantom size in pixels {_dflt('phantom', 'image_size')}")

    p = sub.add_parser("pretrain", help="pretrain the classifier backbone on the vessel-count pretext task")
    _common(p, "pretrain")
    _data_arg(p)
    g = p.add_argument_group("pretext hyperparameters")
    g.add_argument("--epochs", type=int, help=f"pretext epochs {_dflt('classifier', 'pretext_epochs')}")
    g.add_argument("--lr", type=float, help=f"pretext learning rate {_dflt('classifier', 'pretext_learning_rate')}")

    p = sub.add_parser("train-classifier", help="fine-tune the Yes/No classifier")
    _common(p, "train-classifier")
    _data_arg(p)
    p.add_argument("--backbone", metavar="PATH", help="pretrained backbone (default: <out root>/pretrain/backbone.ckpt)")
    p.add_argument("--scratch", action="store_true", help="train from random initialization instead")
    p.add_argument("--freeze-backbone", action="store_true", help="train only the head")
    p.add_argument("--name", default="classifier", help="model name in the run log (default: classifier)")
    _classifier_flags(p)

    p = sub.add_parser("train-detector", help="train the one-stage RoI detector")
    _common(p, "train-detector")
    _data_arg(p)
    _detector_flags(p)

    p = sub.add_parser("eval-classifier", help="validation accuracy and per-image probabilities")
    _common(p, "eval-classifier")
    _data_arg(p)
    p.add_argument("--checkpoint", metavar="PATH",
                   help="classifier checkpoint (default: <out root>/train-classifier/classifier.ckpt)")

    p = sub.add_parser("eval-detector", help="AP/F1/avg-IoU sweep over IoU thresholds")
    _common(p, "eval-detector")
    _data_arg(p)
    p.add_argument("--checkpoint", metavar="PATH",
                   help="detector checkpoint (default: <out root>/train-detector/detector.ckpt)")
    p.add_argument("--conf-threshold", type=float,
                   help=f"confidence cut for F1 and avg IoU {_dflt('eval', 'conf_threshold')}")

    p = sub.add_parser("rank", help="rank training runs by mean accuracy over the final epochs")
    _common(p, "rank")
    p.add_argument("logs", nargs="+", metavar="LOG", help="train_log.csv files or run directories holding one")
    p.add_argument("--window", type=int, default=20, help="final epochs averaged (default: 20)")

    p = sub.add_parser("predict", help="classify + detect + fuse + render a PNG file or directory")
    _common(p, "predict")
    p.add_argument("target", metavar="PATH", help="PNG image or directory searched recursively")
    p.add_argument("--classifier", metavar="PATH", help="classifier checkpoint (default: shipped desk model)")
    p.add_argument("--detector", metavar="PATH", help="detector checkpoint (default: shipped desk model)")
    p.add_argument("--tau-cls", type=float, help=f"classifier decision threshold {_dflt('fusion', 'tau_cls')}")
    p.add_argument("--tau-det", type=float, help=f"detector strong-evidence threshold {_dflt('fusion', 'tau_det')}")

    p = sub.add_parser("selftest", help="gradient checks, AP reference check and encode/decode round trip")
    _common(p, "selftest")
    p.add_argument("--quick", action="store_true", help="5 instances per check instead of the full counts")
    return parser


# -- overrides -------------------------------------------------------------------

def _override(obj, **pairs):
    vals = {k: v for k, v in pairs.items() if v is not None}
    return replace(obj, **vals) if vals else obj


def _config(args):
    cfg = load_run_config(args.config, args.profile, args.seed, args.workers)
    get = lambda name: getattr(args, name, None)
    cmd = args.command
    if cmd == "phantom":
        cfg.dataset = _override(cfg.dataset, n_positive=get("n_positive"), n_negative=get("n_negative"),
                                detection_images=get("detection_images"))
        cfg.phantom = _override(cfg.phantom, image_size=get("image_size"))
    elif cmd == "pretrain":
        cfg.classifier = _override(cfg.classifier, pretext_epochs=get("epochs"), pretext_learning_rate=get("lr"))
    elif cmd == "train-classifier":
        cfg.classifier = _override(cfg.classifier, epochs=get("epochs"), learning_rate=get("lr"),
                                   batch_size=get("batch_size"), dropout=get("dropout"), l2=get("l2"),
                                   input_size=get("input_size"), freeze_backbone=get("freeze_backbone") or None)
    elif cmd == "train-detector":
        cfg.detector = _override(cfg.detector, iterations=get("iterations"), learning_rate=get("lr"),
                                 momentum=get("momentum"), batch_size=get("batch_size"),
                                 eval_every=get("eval_every"), input_size=get("input_size"))
    elif cmd == "eval-detector":
        cfg.eval = _override(cfg.eval, conf_threshold=get("conf_threshold"))
    elif cmd == "predict":
        cfg.fusion = _override(cfg.fusion, tau_cls=get("tau_cls"), tau_det=get("tau_det"))
    return cfg


def _out(args):
    name = "phantom" if args.command == "phantom" else args.command
    return Path(args.out) if args.out else _root() / name


def _data(args):
    return Path(args.data) if args.data else _root() / "phantom"


def _existing(path, what, hint):
    path = Path(path)
    if not path.is_file():
        raise InputError(f"{what} not found at {path}; {hint}")
    return path


# -- commands ----------------------------------------------------------------------

def cmd_phantom(args, cfg):
    out = pipeline.generate_data(cfg, _out(args), cfg.workers)
    print((out / "checksums.txt").read_text(), end="")
    print(f"datasets written to {out}")


def cmd_pretrain(args, cfg):
    res = pipeline.run_pretrain(cfg, _data(args), _out(args))
    print(f"pretext val accuracy {res.val_accuracy:.4f}")
    print(f"backbone written to {res.checkpoint}")


def cmd_train_classifier(args, cfg):
    backbone = None
    if not args.scratch:
        path = args.backbone or cfg.paths.backbone_checkpoint or _root() / "pretrain" / "backbone.ckpt"
        backbone = _existing(path, "pretrained backbone", "run 'pepipe pretrain' first or pass --scratch")
    res = pipeline.run_train_classifier(cfg, _data(args), _out(args), backbone, args.name)
    print(f"final-epoch val accuracy {res.final_accuracy:.4f} (best epoch {res.best_epoch})")
    print(f"checkpoint written to {res.checkpoint}")


def cmd_train_detector(args, cfg):
    progress = lambda r: print(f"iteration {r.iteration:>6}  loss {r.loss:.4f}  val AP@0.5 {r.val_ap50:.4f}", flush=True)
    res = pipeline.run_train_detector(cfg, _data(args), _out(args), cfg.workers, progress)
    print(f"best val AP@0.5 {res.best_ap50:.4f} at iteration {res.best_iteration}")
    print(f"checkpoint written to {res.checkpoint}")


def cmd_eval_classifier(args, cfg):
    path = args.checkpoint or cfg.paths.classifier_checkpoint or _root() / "train-classifier" / "classifier.ckpt"
    acc = pipeline.run_eval_classifier(cfg, _data(args), _existing(path, "classifier checkpoint", "pass --checkpoint"),
                                       _out(args), cfg.workers)
    print(f"val accuracy {acc:.4f}")


def cmd_eval_detector(args, cfg):
    path = args.checkpoint or cfg.paths.detector_checkpoint or _root() / "train-detector" / "detector.ckpt"
    report = pipeline.run_eval_detector(cfg, _data(args), _existing(path, "detector checkpoint", "pass --checkpoint"),
                                        _out(args), cfg.workers)
    print(f"{'IoU':>5} {'AP':>7} {'F1':>7} {'avgIoU':>7}")
    for r in report.records:
        print(f"{r.iou_threshold:>5.2f} {r.ap:>7.4f} {r.f1:>7.4f} {r.avg_iou:>7.4f}")


def cmd_rank(args, cfg):
    paths = [Path(p) / "train_log.csv" if Path(p).is_dir() else Path(p) for p in args.logs]
    for p in paths:
        _existing(p, "run log", "pass train_log.csv files or run directories")
    print(pipeline.run_rank(cfg, paths, _out(args), args.window), end="")


def cmd_predict(args, cfg):
    cls = args.classifier or cfg.paths.classifier_checkpoint or shipped_checkpoint("classifier_desk.ckpt")
    det = args.detector or cfg.paths.detector_checkpoint or shipped_checkpoint("detector_desk.ckpt")
    records = pipeline.run_predict(cfg, args.target, _existing(cls, "classifier checkpoint", "pass --classifier"),
                                   _existing(det, "detector checkpoint", "pass --detector"), _out(args))
    for r in records:
        rule = r["rule_trace"][-1]["rule"]
        print(f"{r['image']}  p_yes={r['p_yes']:.3f}  max_det_conf={r['max_det_conf']:.3f}  {r['verdict']} ({rule})")


def cmd_selftest(args, cfg):
    from .selftest import run_selftest

    n = 5 if args.quick else None
    kw = {} if n is None else {"grad_instances": n, "ap_instances": 20 * n, "roundtrip_instances": 4 * n}
    suite = run_selftest(cfg.seed, **kw)
    out = pipeline.prepare_out(cfg, _out(args))
    lines = "".join(c.line().rsplit("  (", 1)[0] + "\n" for c in suite.checks)  # no timings on disk
    (out / "selftest.txt").write_text(lines)
    print(suite.text(), end="")
    if not suite.passed:
        raise NumericError("self-test failed")


COMMANDS = {
    "phantom": cmd_phantom,
    "pretrain": cmd_pretrain,
    "train-classifier": cmd_train_classifier,
    "train-detector": cmd_train_detector,
    "eval-classifier": cmd_eval_classifier,
    "eval-detector": cmd_eval_detector,
    "rank": cmd_rank,
    "predict": cmd_predict,
    "selftest": cmd_selftest,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on usage errors
    try:
        cfg = _config(args)
        COMMANDS[args.command](args, cfg)
    except DataError as exc:
        print(f"pepipe: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"pepipe: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"pepipe: error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except PepipeError as exc:
        print(f"pepipe: error: {exc}", file=sys.stderr)
        return EXIT_OTHER
    return 0


if __name__ == "__main__":
    sys.exit(main())
