"""Independent reference implementations used only by the test-suite."""

import itertools

import numpy as np

from pepipe.boxes import Detection


def brute_iou(a, b):
    # pixel-grid free: inclusion-exclusion on the overlap interval
    ox = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    oy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ox * oy
    ua = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / ua


def brute_tp_count(dets, gts, thr):
    """Greedy matching re-derived: walk confidence-descending, index-ascending."""
    used = set()
    tp = 0
    ranked = sorted(enumerate(dets), key=lambda kv: (-kv[1].confidence, kv[0]))
    for _, d in ranked:
        candidates = [(brute_iou(d.box, g), -j, j) for j, g in enumerate(gts) if j not in used]
        if not candidates:
            continue
        v, _, j = max(candidates)
        if v >= thr:
            used.add(j)
            tp += 1
    return tp


def brute_average_precision(dets_per_image, gts_per_image, thr):
    """Enumerate every confidence cutoff, then integrate the precision envelope.

    For each distinct cutoff the detection subset is re-matched from scratch.
    The envelope at recall r is max{P_k : R_k >= r}; it is piecewise constant
    between consecutive distinct recall values, so the integral is exact.
    """
    total = sum(len(g) for g in gts_per_image)
    cutoffs = sorted({d.confidence for dets in dets_per_image for d in dets}, reverse=True)
    points = []
    for c in cutoffs:
        tp = n = 0
        for dets, gts in zip(dets_per_image, gts_per_image):
            kept = [d for d in dets if d.confidence >= c]
            n += len(kept)
            tp += brute_tp_count(kept, gts, thr)
        points.append((tp / n, tp / total))
    recalls = sorted({r for _, r in points})
    ap, prev = 0.0, 0.0
    for r in recalls:
        ap += (r - prev) * max(p for p, rr in points if rr >= r)
        prev = r
    return ap


def random_instance(rng, max_dets=8, max_gt=4, max_images=3, grid=10):
    """Small random detection problem on an integer grid (exact IoU ties possible)."""
    n_img = int(rng.integers(1, max_images + 1))
    total_gt = 0
    while total_gt == 0:
        gts = []
        for _ in range(n_img):
            k = int(rng.integers(0, max_gt + 1))
            gts.append([_rand_box(rng, grid) for _ in range(k)])
        total_gt = sum(len(g) for g in gts)
    n_det = int(rng.integers(0, max_dets + 1))
    dets = [[] for _ in range(n_img)]
    for _ in range(n_det):
        img = int(rng.integers(0, n_img))
        if gts[img] and rng.random() < 0.6:
            g = gts[img][int(rng.integers(0, len(gts[img])))]
            jitter = rng.integers(-2, 3, size=4)
            b = [g[0] + jitter[0], g[1] + jitter[1], g[2] + jitter[2], g[3] + jitter[3]]
            if b[2] <= b[0] or b[3] <= b[1]:
                b = list(g)
        else:
            b = list(_rand_box(rng, grid))
        conf = float(rng.integers(1, 10)) / 10  # coarse: ties happen
        dets[img].append(Detection(float(b[0]), float(b[1]), float(b[2]), float(b[3]), conf))
    return dets, gts


def _rand_box(rng, grid):
    x0, y0 = rng.integers(0, grid - 1, size=2)
    w, h = rng.integers(1, 5, size=2)
    return (float(x0), float(y0), float(x0 + w), float(y0 + h))


def numeric_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    for idx in itertools.product(*[range(s) for s in x.shape]):
        orig = x[idx]
        x[idx] = orig + h
        up = f()
        x[idx] = orig - h
        down = f()
        x[idx] = orig
        g[idx] = (up - down) / (2 * h)
    return g


def ranking_table(path=None):
    """Reference ranking rows: (rank, model, params_million, score_pct)."""
    import csv
    from pathlib import Path

    path = path or Path(__file__).parent / "data" / "ranking_table.tsv"
    with open(path) as fh:
        return [(int(r["rank"]), r["model"], float(r["params_million"]), float(r["val_accuracy_pct"]))
                for r in csv.DictReader(fh, delimiter="\t")]


def curve_with_tail_mean(rng, mean, epochs=40, window=20, spread=0.05):
    """Noisy accuracy curve whose final ``window`` entries average exactly ``mean``."""
    head = rng.uniform(0.4, mean, epochs - window)
    noise = rng.uniform(-spread, spread, window)
    tail = mean + noise - noise.mean()
    return np.concatenate([head, tail])
