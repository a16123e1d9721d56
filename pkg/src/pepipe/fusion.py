"""Combine classifier probabilities and detector RoIs into one auditable verdict.

Rules are tried in order and the first that holds decides:

    R1  p_yes >= tau_cls and max_det_conf >= tau_det  -> positive
    R2  p_yes <  tau_cls and max_det_conf <  tau_det  -> negative
    R3  otherwise (exactly one source fired)          -> discordant

Detections below ``tau_det`` stay in the verdict as weak evidence.
"""

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from PIL import Image, ImageDraw, ImageFont

from .boxes import Detection
from .dataset import to_uint8
from .errors import ConfigError

POSITIVE, NEGATIVE, DISCORDANT = "positive", "negative", "discordant"
VERDICT_ORDER = {NEGATIVE: 0, DISCORDANT: 1, POSITIVE: 2}
RULES = ("R1", "R2", "R3")


class RuleCheck(NamedTuple):
    rule: str
    fired: bool
    p_yes: float
    max_det_conf: float


def evaluate_rule(rule, p_yes, max_det_conf, tau_cls=0.5, tau_det=0.5):
    """Whether ``rule`` holds for the given scores (R3 holds when R1 and R2 do not)."""
    cls_on, det_on = p_yes >= tau_cls, max_det_conf >= tau_det
    if rule == "R1":
        return cls_on and det_on
    if rule == "R2":
        return not cls_on and not det_on
    if rule == "R3":
        return cls_on != det_on
    raise ConfigError(f"unknown rule {rule!r}")


RULE_VERDICT = {"R1": POSITIVE, "R2": NEGATIVE, "R3": DISCORDANT}


@dataclass
class FusedVerdict:
    verdict: str
    p_yes: float
    detections: list
    max_det_conf: float
    rule_trace: tuple  # RuleCheck entries in evaluation order; the last one fired
    tau_cls: float = 0.5
    tau_det: float = 0.5

    @property
    def p_no(self):
        return 1.0 - self.p_yes

    @property
    def fired_rule(self):
        return self.rule_trace[-1].rule

    def strong(self):
        return [d for d in self.detections if d.confidence >= self.tau_det]

    def weak(self):
        return [d for d in self.detections if d.confidence < self.tau_det]

    def to_record(self, image=None):
        rec = {
            "verdict": self.verdict,
            "p_yes": round(self.p_yes, 6),
            "p_no": round(self.p_no, 6),
            "max_det_conf": round(self.max_det_conf, 6),
            "detections": [[round(d.confidence, 6), round(d.x_min, 4), round(d.y_min, 4),
                            round(d.x_max, 4), round(d.y_max, 4)] for d in self.detections],
            "rule_trace": [{"rule": c.rule, "fired": c.fired, "p_yes": round(c.p_yes, 6),
                            "max_det_conf": round(c.max_det_conf, 6)} for c in self.rule_trace],
            "tau_cls": self.tau_cls,
            "tau_det": self.tau_det,
        }
        if image is not None:
            rec = {"image": str(image), **rec}
        return rec


def _check_tau(name, value):
    if not 0 < value < 1:
        raise ConfigError(f"{name} must be in (0, 1), got {value}")


def fuse(cls, dets, tau_cls=0.5, tau_det=0.5):
    """``cls`` is a ClassifierOutput (or bare p_yes); ``dets`` a list of Detection."""
    _check_tau("tau_cls", tau_cls)
    _check_tau("tau_det", tau_det)
    p_yes = float(getattr(cls, "p_yes", cls))
    dets = sorted(dets, key=lambda d: -d.confidence)
    max_conf = max((d.confidence for d in dets), default=0.0)
    trace = []
    for rule in RULES:
        fired = evaluate_rule(rule, p_yes, max_conf, tau_cls, tau_det)
        trace.append(RuleCheck(rule, fired, p_yes, max_conf))
        if fired:
            break
    return FusedVerdict(RULE_VERDICT[trace[-1].rule], p_yes, dets, max_conf, tuple(trace), tau_cls, tau_det)


def write_verdicts(records, path):
    """One JSON object per line, keys sorted."""
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_verdicts(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# -- overlay -------------------------------------------------------------------

HEADER = 24
MIN_WIDTH = 256
STRONG_COLOR = (255, 48, 48)
WEAK_COLOR = (255, 200, 0)
VERDICT_COLOR = {POSITIVE: (255, 96, 96), NEGATIVE: (120, 220, 120), DISCORDANT: (255, 200, 0)}


def _font():
    # bitmap font: no FreeType dependency, identical pixels everywhere
    return ImageFont.load_default_imagefont()


def render_overlay(image, verdict, out_path=None):
    """Draw boxes, confidences and a header band; returns the RGB array."""
    gray = to_uint8(image)
    h, w = gray.shape
    scale = max(1, math.ceil(MIN_WIDTH / w))
    big = np.repeat(np.repeat(gray, scale, axis=0), scale, axis=1)
    canvas = Image.new("RGB", (w * scale, h * scale + HEADER), (0, 0, 0))
    canvas.paste(Image.fromarray(big, mode="L").convert("RGB"), (0, HEADER))
    draw = ImageDraw.Draw(canvas)
    font = _font()
    text = f"p_yes={verdict.p_yes:.3f} p_no={verdict.p_no:.3f} {verdict.verdict} ({verdict.fired_rule})"
    draw.text((4, 6), text, fill=VERDICT_COLOR[verdict.verdict], font=font)
    for d in verdict.detections:
        color = STRONG_COLOR if d.confidence >= verdict.tau_det else WEAK_COLOR
        x0, y0 = round(d.x_min * scale), round(d.y_min * scale) + HEADER
        x1, y1 = round(d.x_max * scale) - 1, round(d.y_max * scale) + HEADER - 1
        draw.rectangle((x0, y0, max(x1, x0), max(y1, y0)), outline=color, width=2)
        draw.text((x0, max(HEADER, y0 - 12)), f"{d.confidence:.2f}", fill=color, font=font)
    if out_path is not None:
        canvas.save(Path(out_path), format="PNG")
    return np.asarray(canvas)


def overlay_path(image_path, out_dir):
    return Path(out_dir) / f"{Path(image_path).stem}.overlay.png"


__all__ = [
    "DISCORDANT", "Detection", "FusedVerdict", "NEGATIVE", "POSITIVE", "RULES", "RuleCheck",
    "VERDICT_ORDER", "evaluate_rule", "fuse", "overlay_path", "read_verdicts", "render_overlay",
    "write_verdicts",
]
