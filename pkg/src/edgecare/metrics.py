"""Frame-level average precision and evaluation reports."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


def average_precision(scores, positives) -> float:
    """All-points interpolated AP for one class.

    Frames are ranked by descending score; tied scores enter the curve together
    as one threshold. Precision is replaced by its envelope (max precision at
    any recall >= r) before integrating over recall.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    n_pos = int(positives.sum())
    if n_pos == 0:
        return float("nan")
    order = np.argsort(-scores, kind="stable")
    s, hit = scores[order], positives[order]
    tp = np.cumsum(hit)
    # last index of every run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    tp = tp[ends].astype(np.float64)
    precision = tp / (ends + 1)
    recall = tp / n_pos
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    recall_steps = np.diff(np.r_[0.0, recall])
    return float(np.sum(recall_steps * envelope))


@dataclass
class EvaluationReport:
    per_class_ap: dict
    mean_ap: float
    frame_accuracy: float
    confusion: list
    undefined_classes: list = field(default_factory=list)
    num_frames: int = 0

    def to_dict(self) -> dict:
        return {"per_class_ap": self.per_class_ap, "mean_ap": self.mean_ap,
                "frame_accuracy": self.frame_accuracy, "confusion": self.confusion,
                "undefined_classes": self.undefined_classes, "num_frames": self.num_frames}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def _score_matrix(frame_scores) -> np.ndarray:
    if isinstance(frame_scores, np.ndarray):
        return np.asarray(frame_scores, dtype=np.float64)
    return np.array([fs.score for fs in frame_scores], dtype=np.float64)


def evaluate(frame_scores, labels, class_names=None) -> EvaluationReport:
    """Per-class AP, mAP over classes present in ``labels``, argmax accuracy and confusion.

    ``frame_scores`` is a list of FrameScore or a ``[T, C]`` array. Classes with no
    ground-truth frame have undefined AP: they are reported as None, listed in
    ``undefined_classes`` and left out of the mean.
    """
    scores = _score_matrix(frame_scores)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.ndim != 2 or len(scores) != len(labels):
        raise ValueError(f"{len(scores)} frame scores for {len(labels)} labels")
    num_classes = scores.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(f"labels must lie in [0, {num_classes})")
    names = list(class_names) if class_names is not None else [str(c) for c in range(num_classes)]
    per_class, undefined = {}, []
    for c in range(num_classes):
        ap = average_precision(scores[:, c], labels == c)
        if np.isnan(ap):
            per_class[names[c]] = None
            undefined.append(names[c])
        else:
            per_class[names[c]] = ap
    defined = [v for v in per_class.values() if v is not None]
    mean_ap = float(np.mean(defined)) if defined else float("nan")
    pred = scores.argmax(axis=1)
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, pred), 1)
    accuracy = float((pred == labels).mean()) if len(labels) else float("nan")
    return EvaluationReport(per_class, mean_ap, accuracy, confusion.tolist(), undefined, len(labels))
