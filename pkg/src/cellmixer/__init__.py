"""Annotated heterogeneous cell-segmentation data from homogeneous populations.

Pipeline: unsupervised foreground extraction, background-normalized mixup of
image pairs, and a compact per-pixel segmentation model trained on the
resulting composites.
"""

__version__ = "0.1.0"

CLASS_NAMES = {0: "background", 1: "Jurkat", 2: "K562", 3: "PBMC"}
FOREGROUND_CLASSES = (1, 2, 3)
IGNORE_INDEX = 255
