"""Pixel-space box types shared by the detector, metrics and fusion stages.

Rectangles are ``(x_min, y_min, x_max, y_max)`` in continuous pixel-edge
coordinates: pixel column ``c`` spans ``[c, c + 1)``.
"""

from typing import NamedTuple

from .errors import InputError


class Detection(NamedTuple):
    x_min: float
    y_min: float
    x_max: float
    y_max: float
    confidence: float

    @property
    def box(self):
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def to_line(self):
        return (f"{self.confidence:.4f} {self.x_min:.4f} {self.y_min:.4f} "
                f"{self.x_max:.4f} {self.y_max:.4f}")

    @classmethod
    def from_line(cls, line):
        conf, x0, y0, x1, y1 = (float(v) for v in line.split())
        return cls(x0, y0, x1, y1, conf)


def check_rect(rect):
    x0, y0, x1, y1 = rect[:4]
    if not (x1 > x0 and y1 > y0):
        raise InputError(f"degenerate rectangle {tuple(rect[:4])}")


def area(rect):
    return (rect[2] - rect[0]) * (rect[3] - rect[1])


def clip_rect(rect, width, height):
    x0, y0, x1, y1 = rect[:4]
    return (min(max(x0, 0.0), width), min(max(y0, 0.0), height),
            min(max(x1, 0.0), width), min(max(y1, 0.0), height))


def inside(rect, width, height, tol=1e-9):
    x0, y0, x1, y1 = rect[:4]
    return x0 >= -tol and y0 >= -tol and x1 <= width + tol and y1 <= height + tol


def write_detections(path, detections):
    with open(path, "w") as fh:
        for d in detections:
            fh.write(d.to_line() + "\n")


def read_detections(path):
    with open(path) as fh:
        return [Detection.from_line(line) for line in fh if line.strip()]
