"""Pulmonary-embolism identification pipeline on synthetic CTPA phantoms.

Classifier + one-stage detector built on a small numpy autograd engine,
with the matching evaluation protocol and classifier/detector fusion.
"""

__version__ = "0.1.0"
