"""Mask assembly from refined category maps and segmentation metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .attn import CategoryMaps, ShapeError


@dataclass
class SegMask:
    """Integer label map, 0 = background, k >= 1 = category k."""

    labels: np.ndarray
    palette: dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise ShapeError(f"labels must be 2-D, got {self.labels.shape}")
        if not np.issubdtype(self.labels.dtype, np.integer):
            raise ValueError("labels must be integers")
        if (self.labels < 0).any():
            raise ValueError("labels must be >= 0")
        self.palette = {int(k): str(v) for k, v in self.palette.items()}

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


@dataclass
class MetricReport:
    """Per-class IoU plus the aggregate mean IoU and pixel accuracy.

    ``per_class_iou`` maps class id -> IoU for every class present in
    prediction or ground truth (background always participates when it
    has any pixels); NaN marks a class with an empty union, which is
    excluded from the mean.
    """

    per_class_iou: dict[int, float]
    miou: float
    acc: float
    pixel_count: int
    correct_pixels: int

    def to_dict(self) -> dict:
        return {
            "per_class_iou": {str(k): v for k, v in sorted(self.per_class_iou.items())},
            "miou": self.miou,
            "acc": self.acc,
            "pixel_count": self.pixel_count,
            "correct_pixels": self.correct_pixels,
        }


def binarize_single(channel: np.ndarray, tau: float,
                    shape: tuple[int, int]) -> SegMask:
    """Threshold one normalized channel: label 1 where value >= tau."""
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    channel = np.asarray(channel, dtype=np.float64).reshape(shape)
    return SegMask((channel >= tau).astype(np.int32))


def assemble_multi(maps: CategoryMaps, shape: tuple[int, int], tau: float,
                   background_mode: str = "threshold",
                   bg_channel: int | None = None,
                   palette: dict[int, str] | None = None) -> SegMask:
    """Assign each pixel the argmax category across normalized channels.

    In "threshold" mode a pixel falls back to background when its winning
    value is below tau; in "bg_channel" mode it is background when the
    designated background channel wins. Ties break toward the lowest
    channel index.
    """
    if maps.n_channels < 1:
        raise ValueError("need at least one channel")
    if not 0.0 < tau < 1.0:
        raise ValueError("tau must lie in (0, 1)")
    data = maps.data
    # np.argmax already picks the first (lowest) index on ties
    winner = data.argmax(axis=0)
    winning_value = data[winner, np.arange(data.shape[1])]
    if background_mode == "threshold":
        labels = np.where(winning_value >= tau, winner + 1, 0)
    elif background_mode == "bg_channel":
        if bg_channel is None or not 0 <= bg_channel < maps.n_channels:
            raise ValueError("bg_channel mode requires a valid background channel index")
        # foreground channels keep their 1-based rank with the bg channel skipped
        rank = np.zeros(maps.n_channels, dtype=np.int64)
        fg = [c for c in range(maps.n_channels) if c != bg_channel]
        for pos, c in enumerate(fg, start=1):
            rank[c] = pos
        labels = np.where(winner == bg_channel, 0, rank[winner])
    else:
        raise ValueError(f"unknown background mode {background_mode!r}")
    return SegMask(labels.reshape(shape).astype(np.int32), palette or {})


def miou(pred: SegMask, gt: SegMask) -> MetricReport:
    """IoU per class over the union of classes present in either mask.

    IoU_k = |pred=k and gt=k| / |pred=k or gt=k|; the mean skips classes
    absent from both masks. ACC is the fraction of matching pixels.
    """
    if pred.shape != gt.shape:
        raise ShapeError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    p = pred.labels.ravel()
    g = gt.labels.ravel()
    classes = sorted(set(np.unique(p)) | set(np.unique(g)) | {0})
    per_class: dict[int, float] = {}
    for k in classes:
        pk = p == k
        gk = g == k
        union = int(np.logical_or(pk, gk).sum())
        if union == 0:
            per_class[int(k)] = float("nan")
            continue
        inter = int(np.logical_and(pk, gk).sum())
        per_class[int(k)] = inter / union
    finite = [v for v in per_class.values() if not np.isnan(v)]
    correct = int((p == g).sum())
    return MetricReport(
        per_class_iou=per_class,
        miou=float(np.mean(finite)) if finite else float("nan"),
        acc=correct / p.size,
        pixel_count=int(p.size),
        correct_pixels=correct,
    )


def write_mask_png(mask: SegMask, path: str | Path) -> None:
    """8-bit single-channel PNG plus a JSON palette sidecar."""
    path = Path(path)
    if mask.labels.max(initial=0) > 255:
        raise ValueError("more than 255 categories cannot be stored as 8-bit PNG")
    Image.fromarray(mask.labels.astype(np.uint8), mode="L").save(path, format="PNG")
    sidecar = path.with_suffix(path.suffix + ".palette.json")
    sidecar.write_text(json.dumps(
        {str(k): v for k, v in sorted(mask.palette.items())},
        indent=2, sort_keys=True) + "\n")


def read_mask_png(path: str | Path) -> SegMask:
    path = Path(path)
    labels = np.asarray(Image.open(path).convert("L"), dtype=np.int32)
    palette: dict[int, str] = {}
    sidecar = path.with_suffix(path.suffix + ".palette.json")
    if sidecar.exists():
        palette = {int(k): v for k, v in json.loads(sidecar.read_text()).items()}
    return SegMask(labels, palette)
