"""Build self-checks: gradient agreement per layer kind, AP against an
exhaustive re-matching reference, and the encode/decode round trip.

Used by ``pepipe selftest``; every check is seeded and takes seconds.
"""

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .boxes import Detection
from .detector import decode, detector_loss, encode_targets, make_anchor_set, stack_targets
from .engine import (
    Tensor,
    conv2d,
    cross_entropy_with_l2,
    dense,
    dropout_apply,
    finite_difference_check,
    global_avg_pool,
    maxpool2,
    relu,
    softmax,
)
from .metrics import average_precision, iou

GRAD_TOL = 1e-4
AP_TOL = 1e-9
ROUNDTRIP_TOL = 1e-4


def _t(rng, *shape):
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _distinct(rng, shape, gap=0.01):
    # values separated by >= gap so no probe step crosses a max or a relu kink
    n = int(np.prod(shape))
    vals = (rng.permutation(n) - n / 2 + 0.5) * gap + rng.uniform(-gap / 4, gap / 4, n)
    return Tensor(vals.reshape(shape), requires_grad=True)


def _case_conv2d(rng):
    h, c, f = int(rng.integers(3, 7)), int(rng.integers(1, 3)), int(rng.integers(1, 4))
    k = int(rng.choice([1, 3]))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, k // 2 + 1))
    x, w, b = _t(rng, 2, h, h, c), _t(rng, k, k, c, f), _t(rng, f)
    ho = (h + 2 * pad - k) // stride + 1
    proj = rng.normal(size=(2, ho, ho, f))
    return lambda: (conv2d(x, w, b, stride, pad) * proj).sum(), {"x": x, "kernels": w, "bias": b}


def _case_dense(rng):
    i, o = int(rng.integers(1, 8)), int(rng.integers(1, 6))
    x, w, b = _t(rng, 3, i), _t(rng, o, i), _t(rng, o)
    proj = rng.normal(size=(3, o))
    return lambda: (dense(x, w, b) * proj).sum(), {"x": x, "weights": w, "bias": b}


def _case_relu(rng):
    x = _distinct(rng, (int(rng.integers(2, 20)),), gap=0.1)
    proj = rng.normal(size=x.shape)
    return lambda: (relu(x) * proj).sum(), {"x": x}


def _case_maxpool2(rng):
    h, c = 2 * int(rng.integers(1, 4)), int(rng.integers(1, 3))
    x = _distinct(rng, (h, h, c))
    proj = rng.normal(size=(h // 2, h // 2, c))
    return lambda: (maxpool2(x) * proj).sum(), {"x": x}


def _case_global_avg_pool(rng):
    x = _t(rng, 2, int(rng.integers(1, 5)), int(rng.integers(1, 5)), int(rng.integers(1, 4)))
    proj = rng.normal(size=(2, x.shape[-1]))
    return lambda: (global_avg_pool(x) * proj).sum(), {"x": x}


def _case_dropout(rng):
    x = _t(rng, int(rng.integers(2, 20)))
    ratio, mask_seed = float(rng.uniform(0.1, 0.7)), int(rng.integers(0, 2**31))
    proj = rng.normal(size=x.shape)
    # the mask must be identical on every probe, so the rng is rebuilt per call
    return lambda: (dropout_apply(x, ratio, "train", np.random.default_rng(mask_seed)) * proj).sum(), {"x": x}


def _case_softmax(rng):
    z = _t(rng, 2, int(rng.integers(2, 6)))
    proj = rng.normal(size=z.shape)
    return lambda: (softmax(z) * proj).sum(), {"logits": z}


def _case_cross_entropy(rng):
    c = int(rng.integers(2, 5))
    z, w = _t(rng, 3, c), _t(rng, 2, 3)
    target = rng.integers(0, c, size=3)
    l2 = float(rng.uniform(0, 0.1))
    return lambda: cross_entropy_with_l2(softmax(z), target, [w], l2), {"logits": z, "weights": w}


def _random_boxes(rng, k, size):
    out = []
    for _ in range(k):
        w, h = rng.uniform(1.5, size / 2, 2)
        x0, y0 = rng.uniform(0, size - w), rng.uniform(0, size - h)
        out.append((x0, y0, x0 + w, y0 + h))
    return out


def _case_detector_loss(rng):
    grid, a, n = int(rng.integers(2, 5)), int(rng.integers(1, 4)), int(rng.integers(1, 3))
    size = 8 * grid
    anchors = make_anchor_set([tuple(rng.uniform(2, 10, 2)) for _ in range(a)], size)
    tg = stack_targets([encode_targets(_random_boxes(rng, int(rng.integers(0, 4)), size), anchors, grid, size)
                        for _ in range(n)])
    pred = _t(rng, n, grid, grid, a * 5)
    return lambda: detector_loss(pred, tg), {"pred": pred}


GRAD_CASES = {
    "conv2d": _case_conv2d,
    "dense": _case_dense,
    "relu": _case_relu,
    "maxpool2": _case_maxpool2,
    "global_avg_pool": _case_global_avg_pool,
    "dropout": _case_dropout,
    "softmax": _case_softmax,
    "cross_entropy_l2": _case_cross_entropy,
    "detector_loss": _case_detector_loss,
}


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0

    def line(self):
        return f"{'PASS' if self.passed else 'FAIL'}  {self.name:<22} {self.detail}  ({self.seconds:.1f}s)"


@dataclass
class SuiteResult:
    checks: list = field(default_factory=list)

    @property
    def passed(self):
        return all(c.passed for c in self.checks)

    def text(self):
        return "".join(c.line() + "\n" for c in self.checks)


def gradient_errors(instances=50, seed=0, kinds=None):
    """Worst relative error per layer kind over ``instances`` random cases each."""
    worst = {}
    for k, (kind, make) in enumerate(GRAD_CASES.items()):
        if kinds is not None and kind not in kinds:
            continue
        rng = np.random.default_rng([seed, k])
        errs = []
        for _ in range(instances):
            fn, params = make(rng)
            errs.append(finite_difference_check(fn, params, tolerance=GRAD_TOL).max_error)
        worst[kind] = max(errs)
    return worst


# -- AP reference --------------------------------------------------------------

def _greedy_tp(dets, gts, thr):
    taken, tp = set(), 0
    for d in sorted(dets, key=lambda d: -d[0]):  # stable: input order breaks ties
        best, best_j = -1.0, None
        for j, g in enumerate(gts):
            if j not in taken:
                v = iou(d[1], g)
                if v > best:
                    best, best_j = v, j
        if best_j is not None and best >= thr:
            taken.add(best_j)
            tp += 1
    return tp


def reference_ap(dets_per_image, gts_per_image, thr):
    """Re-match from scratch at every confidence cutoff; exact envelope integral."""
    total = sum(map(len, gts_per_image))
    confs = sorted({d.confidence for ds in dets_per_image for d in ds})
    pr = []
    for c in confs:
        tp = kept = 0
        for ds, gs in zip(dets_per_image, gts_per_image):
            sub = [(d.confidence, d.box) for d in ds if d.confidence >= c]
            kept += len(sub)
            tp += _greedy_tp(sub, gs, thr)
        pr.append((tp / total, tp / kept))
    ap, prev = 0.0, 0.0
    for r in sorted({r for r, _ in pr}):
        ap += (r - prev) * max(p for rr, p in pr if rr >= r)
        prev = r
    return ap


def _random_problem(rng):
    n_img = int(rng.integers(1, 4))
    gts = [[] for _ in range(n_img)]
    for _ in range(int(rng.integers(1, 5))):
        x0, y0 = rng.integers(0, 9, 2)
        w, h = rng.integers(1, 5, 2)
        gts[int(rng.integers(0, n_img))].append((float(x0), float(y0), float(x0 + w), float(y0 + h)))
    dets = [[] for _ in range(n_img)]
    for _ in range(int(rng.integers(0, 9))):
        x0, y0 = rng.integers(0, 9, 2)
        w, h = rng.integers(1, 5, 2)
        conf = int(rng.integers(1, 10)) / 10
        dets[int(rng.integers(0, n_img))].append(Detection(float(x0), float(y0), float(x0 + w), float(y0 + h), conf))
    return dets, gts


def ap_max_difference(instances=1000, seed=0):
    rng = np.random.default_rng([seed, 77])
    worst = 0.0
    for _ in range(instances):
        dets, gts = _random_problem(rng)
        thr = float(rng.choice([0.1, 0.3, 0.5, 0.7]))
        worst = max(worst, abs(average_precision(dets, gts, thr) - reference_ap(dets, gts, thr)))
    return worst


IOU_FIXTURES = (
    ((0, 0, 2, 2), (0, 0, 2, 2), 1.0),
    ((0, 0, 1, 1), (2, 2, 3, 3), 0.0),
    ((0, 0, 2, 2), (1, 1, 3, 3), 1 / 7),
)


# -- round trip ----------------------------------------------------------------

def perfect_prediction(targets):
    """Raw head output that decodes exactly onto the encoded targets."""
    v = targets.values
    s, _, a, _ = v.shape
    p = np.zeros_like(v)
    sxy = np.clip(v[..., :2], 1e-12, 1 - 1e-12)
    p[..., :2] = np.log(sxy) - np.log1p(-sxy)
    p[..., 2:4] = v[..., 2:4]
    p[..., 4] = np.where(targets.positive, 20.0, -20.0)
    return p.reshape(s, s, a * 5)


def roundtrip_max_error(instances=200, seed=0, input_size=64, grid=8):
    rng = np.random.default_rng([seed, 99])
    anchors = make_anchor_set([(3.0, 3.0), (5.0, 7.0), (7.0, 5.0)], input_size)
    worst = 0.0
    for _ in range(instances):
        gt = _random_boxes(rng, 1, input_size)
        dets = decode(perfect_prediction(encode_targets(gt, anchors, grid, input_size)),
                      anchors, input_size / grid, 0.25, input_size)
        if len(dets) != 1:
            return math.inf
        worst = max(worst, float(np.max(np.abs(np.subtract(dets[0].box, gt[0])))))
    return worst


def run_selftest(seed=0, grad_instances=50, ap_instances=1000, roundtrip_instances=200):
    suite = SuiteResult()

    for kind in GRAD_CASES:
        t = time.perf_counter()
        err = gradient_errors(grad_instances, seed, kinds=(kind,))[kind]
        suite.checks.append(CheckResult(f"grad:{kind}", err < GRAD_TOL, f"max_rel_err={err:.2e}",
                                        time.perf_counter() - t))

    t = time.perf_counter()
    diff = ap_max_difference(ap_instances, seed)
    suite.checks.append(CheckResult("ap-reference", diff <= AP_TOL, f"max_abs_diff={diff:.2e}",
                                    time.perf_counter() - t))
    ok = all(iou(a, b) == want for a, b, want in IOU_FIXTURES)
    suite.checks.append(CheckResult("iou-fixtures", ok, "1, 0, 1/7"))

    t = time.perf_counter()
    err = roundtrip_max_error(roundtrip_instances, seed)
    suite.checks.append(CheckResult("roundtrip", err < ROUNDTRIP_TOL, f"max_px_err={err:.2e}",
                                    time.perf_counter() - t))
    return suite
