"""Confusion-matrix based segmentation metrics and episodic evaluation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from dafss.errors import UndefinedMetricError
from dafss.model import SegModel
from dafss.scenes import Episode


@dataclass
class MetricsReport:
    per_class_iou: dict
    miou: float
    macc: float
    episode_count: int
    config_hash: str = ""
    seed: int = 0

    def to_dict(self) -> dict:
        return {
            "per_class_iou": {str(k): v for k, v in sorted(self.per_class_iou.items())},
            "miou": self.miou,
            "macc": self.macc,
            "episode_count": self.episode_count,
            "config_hash": self.config_hash,
            "seed": self.seed,
        }


def confusion_matrix(preds: np.ndarray, labels: np.ndarray, n_classes: int) -> np.ndarray:
    """counts[i, j] = number of points with label i predicted as j."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ValueError(f"prediction/label lengths differ: {preds.shape} vs {labels.shape}")
    for name, arr in (("prediction", preds), ("label", labels)):
        if np.any(arr < 0) or np.any(arr >= n_classes):
            bad = arr[(arr < 0) | (arr >= n_classes)][0]
            raise IndexError(f"{name} value {int(bad)} outside [0,{n_classes})")
    counts = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(counts, (labels, preds), 1)
    return counts


def miou(conf: np.ndarray, foreground_classes: Sequence[int]) -> tuple[dict, float]:
    """Per-class IoU and its mean over foreground classes.

    A class absent from both predictions and labels is excluded; if every
    foreground class is absent the metric is undefined."""
    if conf.ndim != 2 or conf.shape[0] != conf.shape[1]:
        raise ValueError(f"confusion matrix must be square, got {conf.shape}")
    per_class = {}
    for c in foreground_classes:
        tp = int(conf[c, c])
        fp = int(conf[:, c].sum()) - tp
        fn = int(conf[c, :].sum()) - tp
        denom = tp + fp + fn
        if denom == 0:
            continue
        per_class[int(c)] = tp / denom
    if not per_class:
        raise UndefinedMetricError("no foreground class present in predictions or labels")
    return per_class, float(np.mean(list(per_class.values())))


def macc(conf: np.ndarray, foreground_classes: Sequence[int]) -> float:
    """Mean per-class recall over foreground classes with labelled points."""
    if conf.ndim != 2 or conf.shape[0] != conf.shape[1]:
        raise ValueError(f"confusion matrix must be square, got {conf.shape}")
    recalls = []
    for c in foreground_classes:
        tp = int(conf[c, c])
        fn = int(conf[c, :].sum()) - tp
        if tp + fn == 0:
            continue
        recalls.append(tp / (tp + fn))
    if not recalls:
        raise UndefinedMetricError("no foreground class has labelled points")
    return float(np.mean(recalls))


def evaluate(model: SegModel, episodes: Iterable[Episode], config_hash: str = "",
             seed: int = 0) -> MetricsReport:
    """Accumulate one confusion matrix over all episodes in the shared
    remapped label space {0..n_way}, then reduce to mIoU / mAcc."""
    n_classes = model.config.n_way + 1
    conf = np.zeros((n_classes, n_classes), dtype=np.int64)
    count = 0
    for episode in episodes:
        preds = model.predict(episode)
        conf += confusion_matrix(preds, episode.query_labels, n_classes)
        count += 1
    if count == 0:
        raise UndefinedMetricError("evaluation over an empty episode stream")
    foreground = list(range(1, n_classes))
    per_class, mean_iou = miou(conf, foreground)
    return MetricsReport(per_class_iou=per_class, miou=mean_iou,
                         macc=macc(conf, foreground), episode_count=count,
                         config_hash=config_hash, seed=seed)
