"""Sliding-window activity recognition over frame streams.

Windows of ``window_len`` frames are scored by the classifier, every frame's
score is the mean of the scores of the windows that cover it, and runs of equal
frame predictions become :class:`InferenceEvent` records.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import nn

CATEGORIES = ("ALERT", "SERVICE_REQUEST", "INFO")


@dataclass(frozen=True)
class WindowConfig:
    window_len: int = 8
    stride: int = 4

    def __post_init__(self):
        if self.window_len <= 0 or self.stride <= 0:
            raise ValueError("window_len and stride must be positive")
        if self.stride > self.window_len:
            raise ValueError("stride must not exceed window_len (frames would be dropped)")


@dataclass
class FrameScore:
    frame_index: int
    score: np.ndarray
    num_windows: int

    @property
    def predicted_class(self) -> int:
        return int(np.argmax(self.score))  # first maximum wins ties


@dataclass(frozen=True)
class InferenceEvent:
    """Pixel-free activity record; the only health payload allowed out of the home."""

    stream_id: str
    start: int
    end: int
    activity: str
    confidence: float
    category: str
    tick: int = 0

    def __post_init__(self):
        if self.start > self.end:
            raise ValueError("event start after end")
        if self.category not in CATEGORIES:
            raise ValueError(f"unknown category {self.category!r}")

    @property
    def frame_range(self) -> tuple[int, int]:
        return self.start, self.end

    def to_dict(self) -> dict:
        return {"stream_id": self.stream_id, "start": self.start, "end": self.end,
                "activity": self.activity, "confidence": round(self.confidence, 6),
                "category": self.category, "tick": self.tick}

    def to_json(self) -> str:
        d = self.to_dict()
        d["confidence"] = f"{self.confidence:.6f}"
        # keep confidence numeric on the wire with exactly six decimals
        return json.dumps(d, separators=(",", ":")).replace(
            f'"confidence":"{d["confidence"]}"', f'"confidence":{d["confidence"]}')

    @classmethod
    def from_dict(cls, d: dict) -> "InferenceEvent":
        return cls(d["stream_id"], int(d["start"]), int(d["end"]), d["activity"],
                   float(d["confidence"]), d["category"], int(d.get("tick", 0)))


def window_starts(num_frames: int, cfg: WindowConfig) -> list[int]:
    """0, S, 2S, ... while the window fits, plus a tail window anchored at T - W."""
    W, S = cfg.window_len, cfg.stride
    if num_frames < W:
        raise ValueError(f"stream shorter than window ({num_frames} < {W})")
    starts = list(range(0, num_frames - W + 1, S))
    if starts[-1] != num_frames - W:
        starts.append(num_frames - W)
    return starts


def extract_windows(stream, cfg: WindowConfig):
    """[(t1, frames[t1:t1 + W])] for every window start."""
    return [(t1, stream[t1:t1 + cfg.window_len]) for t1 in window_starts(len(stream), cfg)]


def score_frames(window_scores, cfg: WindowConfig, num_frames: int) -> list[FrameScore]:
    """Average the window probability vectors covering each frame.

    Windows are summed in increasing ``t1`` order, then divided by the frame's
    covering count.
    """
    ordered = sorted(window_scores, key=lambda ws: ws[0])
    if not ordered:
        raise ValueError("no window scores")
    num_classes = len(ordered[0][1])
    acc = np.zeros((num_frames, num_classes))
    count = np.zeros(num_frames, dtype=np.int64)
    W = cfg.window_len
    for t1, probs in ordered:
        acc[t1:t1 + W] += np.asarray(probs, dtype=np.float64)
        count[t1:t1 + W] += 1
    if (count == 0).any():
        raise RuntimeError(f"frame {int(np.argmin(count))} is covered by no window")
    scores = acc / count[:, None]
    return [FrameScore(i, scores[i], int(count[i])) for i in range(num_frames)]


def score_windows(model: nn.Model, frames, cfg: WindowConfig):
    """Window probability = softmax of the mean per-frame logits inside the window."""
    frames = np.asarray(frames, dtype=np.float64)
    logits = np.concatenate([nn.forward(model, frames[i:i + 256]) for i in range(0, len(frames), 256)])
    return [(t1, nn.softmax(logits[t1:t1 + cfg.window_len].mean(axis=0)))
            for t1 in window_starts(len(frames), cfg)]


def default_category(name: str) -> str:
    lowered = name.lower()
    if lowered.startswith("fall"):
        return "ALERT"
    if lowered.startswith(("call", "request")):
        return "SERVICE_REQUEST"
    return "INFO"


def build_category_map(class_names, overrides=None) -> dict[str, str]:
    mapping = {name: default_category(name) for name in class_names}
    for name, cat in (overrides or {}).items():
        if cat not in CATEGORIES:
            raise ValueError(f"unknown category {cat!r} for {name!r}")
        mapping[name] = cat
    return mapping


def segment_events(frame_scores: list[FrameScore], class_names, category_map, stream_id: str = "stream-0",
                   tick: int = 0) -> list[InferenceEvent]:
    """Merge consecutive frames with the same predicted class into one event."""
    events = []
    start = 0
    n = len(frame_scores)
    for i in range(1, n + 1):
        if i < n and frame_scores[i].predicted_class == frame_scores[start].predicted_class:
            continue
        cls = frame_scores[start].predicted_class
        conf = float(np.mean([frame_scores[j].score.max() for j in range(start, i)]))
        name = class_names[cls]
        events.append(InferenceEvent(stream_id, start, i - 1, name, conf, category_map[name], tick))
        start = i
    return events


def run_stream(model: nn.Model, stream, cfg: WindowConfig, category_map=None, class_names=None,
               stream_id: str = "stream-0", tick: int = 0):
    """Score a stream end to end; returns (events, frame_scores)."""
    names = list(class_names or model.label_space or [str(i) for i in range(model.num_classes)])
    if len(names) != model.num_classes:
        raise ValueError(f"{len(names)} class names for a {model.num_classes}-class model")
    cmap = category_map if category_map is not None else build_category_map(names)
    missing = set(names) - set(cmap)
    if missing:
        raise ValueError(f"category map lacks {sorted(missing)}")
    window_scores = score_windows(model, stream, cfg)
    frame_scores = score_frames(window_scores, cfg, len(stream))
    return segment_events(frame_scores, names, cmap, stream_id, tick), frame_scores


def events_to_jsonl(events) -> str:
    return "".join(e.to_json() + "\n" for e in events)
