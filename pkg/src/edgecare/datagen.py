"""Seeded synthetic activity streams.

Each class renders an elliptical intensity blob standing on the floor of a
noisy frame; the motion kind decides how it moves or deforms over a segment.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

MOTION_KINDS = ("static", "linear_drift", "oscillation", "collapse")
STREAM_MAGIC = b"TLDS"
STREAM_VERSION = 1
_STREAM_HEADER = struct.Struct("<4sIIIII")

# per-channel gain for 3-channel (RGB-like) rendering
_RGB_GAIN = (1.0, 0.85, 0.7)
_BACKGROUND = 0.1


class StreamFormatError(Exception):
    pass


@dataclass(frozen=True)
class ActivityClass:
    name: str
    motion_kind: str
    intensity: float
    blob_size: int
    speed: float = 0.5  # px/frame for drift, rad/frame for oscillation
    aspect: float = 2.0  # height / width when upright

    def __post_init__(self):
        if self.motion_kind not in MOTION_KINDS:
            raise ValueError(f"unknown motion kind {self.motion_kind!r}")
        if not 0 < self.intensity <= 1:
            raise ValueError("intensity must lie in (0, 1]")
        if self.blob_size <= 0:
            raise ValueError("blob_size must be positive")


@dataclass(frozen=True)
class GeneratorSpec:
    classes: tuple
    frame_h: int = 16
    frame_w: int = 16
    channels: int = 3
    noise_sigma: float = 0.05
    seed: int = 0
    # per-segment nuisance: intensity scaled by U(1 - j, 1 + j), size offset by U{-k..k}
    intensity_jitter: float = 0.0
    size_jitter: int = 0
    clutter: int = 0  # static distractor rectangles per segment
    clutter_rows: float = 0.5  # distractors live in the top fraction of the frame (wall objects)
    lighting_jitter: float = 0.0  # per-segment background level offset, U(0, lighting_jitter)

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(self.classes))
        if len(self.classes) < 2:
            raise ValueError("need at least two activity classes")
        if len({c.name for c in self.classes}) != len(self.classes):
            raise ValueError("class names must be distinct")
        if self.frame_h < 16 or self.frame_w < 16:
            raise ValueError("frame dimensions must be at least 16")
        if self.channels not in (1, 3):
            raise ValueError("channels must be 1 (depth/thermal-like) or 3 (RGB-like)")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not 0 <= self.intensity_jitter < 1 or self.size_jitter < 0 or self.clutter < 0:
            raise ValueError("jitter must be non-negative (intensity jitter below 1)")
        if not 0 < self.clutter_rows <= 1 or not 0 <= self.lighting_jitter <= 1:
            raise ValueError("clutter_rows must lie in (0, 1] and lighting_jitter in [0, 1]")

    @property
    def class_names(self) -> list[str]:
        return [c.name for c in self.classes]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = [asdict(c) for c in self.classes]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorSpec":
        d = dict(d)
        d["classes"] = tuple(ActivityClass(**c) for c in d["classes"])
        return cls(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class LabeledStream:
    frames: np.ndarray  # [T, C, H, W], values in [0, 1]
    labels: np.ndarray  # [T]
    spec_fingerprint: str = ""
    class_names: list = field(default_factory=list)

    def __len__(self):
        return len(self.labels)


# Scene nuisance shared by both domains: every segment is a new "session" with its own
# subject brightness, wall clutter and lighting, so shape and motion are the only
# reliable cues.
_SCENE = {"intensity_jitter": 0.6, "clutter": 4, "clutter_rows": 0.5, "lighting_jitter": 0.1}


def source_spec(seed: int = 1, frame_size: int = 16, channels: int = 3, noise_sigma: float = 0.1,
                **scene) -> GeneratorSpec:
    """Five-class pre-training domain."""
    classes = (
        ActivityClass("stand", "static", 0.6, 4, aspect=3.2),
        ActivityClass("walk", "linear_drift", 0.6, 4, speed=0.6, aspect=2.0),
        ActivityClass("wave", "oscillation", 0.6, 4, speed=0.5, aspect=1.4),
        ActivityClass("sit", "static", 0.6, 5, aspect=0.8),
        ActivityClass("fall", "collapse", 0.6, 6, aspect=0.45),
    )
    return GeneratorSpec(classes, frame_size, frame_size, channels, noise_sigma, seed, **{**_SCENE, **scene})


def target_spec(seed: int = 100, frame_size: int = 16, channels: int = 3, noise_sigma: float = 0.1,
                **scene) -> GeneratorSpec:
    """Three-class in-home domain; shapes and motion parameters differ from the source domain."""
    classes = (
        ActivityClass("fall", "collapse", 0.5, 6, aspect=0.55),
        ActivityClass("walk", "linear_drift", 0.75, 4, speed=1.1, aspect=2.6),
        ActivityClass("rest", "static", 0.6, 5, aspect=1.0),
    )
    return GeneratorSpec(classes, frame_size, frame_size, channels, noise_sigma, seed, **{**_SCENE, **scene})


def _blob_geometry(cls: ActivityClass, t: int, duration: int, x0: float, phase: float, w_frame: int):
    """Centre x, width and height of the blob at segment-relative frame t."""
    h = cls.blob_size * cls.aspect
    w = float(cls.blob_size)
    half = w / 2
    lo, hi = half, w_frame - half
    if cls.motion_kind == "linear_drift":
        span = max(hi - lo, 1e-9)
        pos = (x0 - lo + cls.speed * t) % (2 * span)
        x = lo + (pos if pos <= span else 2 * span - pos)
    elif cls.motion_kind == "oscillation":
        x = x0 + 0.25 * w_frame * np.sin(phase + cls.speed * t)
        x = min(max(x, lo), hi)
    elif cls.motion_kind == "collapse":
        # height halves and width grows by half over the segment
        frac = t / max(duration - 1, 1)
        h = h * (1 - 0.5 * frac)
        w = w * (1 + 0.5 * frac)
        x = min(max(x0, w / 2), w_frame - w / 2)
    else:
        x = x0
    return x, w, h


def generate(spec: GeneratorSpec, segments) -> LabeledStream:
    """Render ``segments`` = [(class index, duration), ...] into one labelled stream."""
    segments = [(int(c), int(d)) for c, d in segments]
    for c, d in segments:
        if not 0 <= c < len(spec.classes):
            raise ValueError(f"invalid class index {c}")
        if d <= 0:
            raise ValueError("segment durations must be positive")
    total = sum(d for _, d in segments)
    rng = np.random.default_rng(spec.seed)
    H, W = spec.frame_h, spec.frame_w
    frames = np.empty((total, spec.channels, H, W))
    labels = np.empty(total, dtype=np.int64)
    yy, xx = np.mgrid[0:H, 0:W] + 0.5
    gain = np.array(_RGB_GAIN[:spec.channels] if spec.channels == 3 else (1.0,))[:, None, None]
    floor = H - 1.0
    t_global = 0
    for c, duration in segments:
        cls = spec.classes[c]
        j = spec.intensity_jitter
        level = min(1.0, cls.intensity * rng.uniform(1 - j, 1 + j))
        size = max(1, cls.blob_size + int(rng.integers(-spec.size_jitter, spec.size_jitter + 1)))
        cls = replace(cls, intensity=level, blob_size=size)
        x0 = rng.uniform(cls.blob_size / 2, W - cls.blob_size / 2)
        phase = rng.uniform(0, 2 * np.pi)
        scene = np.full((H, W), _BACKGROUND + rng.uniform(0, spec.lighting_jitter))
        for _ in range(spec.clutter):
            rh, rw = rng.integers(2, 6, size=2)
            r0, c0 = rng.integers(0, max(int(H * spec.clutter_rows) - rh + 1, 1)), rng.integers(0, W - rw + 1)
            scene[r0:r0 + rh, c0:c0 + rw] = rng.uniform(0.2, 0.8)
        for t in range(duration):
            cx, bw, bh = _blob_geometry(cls, t, duration, x0, phase, W)
            cy = floor - bh / 2
            inside = ((xx - cx) / (bw / 2)) ** 2 + ((yy - cy) / (bh / 2)) ** 2 <= 1.0
            img = np.where(inside, cls.intensity, scene)[None] * gain
            if spec.noise_sigma > 0:
                img = img + rng.normal(0.0, spec.noise_sigma, size=img.shape)
            frames[t_global] = np.clip(img, 0.0, 1.0)
            labels[t_global] = c
            t_global += 1
    return LabeledStream(frames, labels, spec.fingerprint(), spec.class_names)


def balanced_segments(num_classes: int, frames_per_class: int, segment_len: int, seed: int) -> list[tuple[int, int]]:
    """Shuffled schedule giving each class ``frames_per_class`` frames in segments of ``segment_len``."""
    if frames_per_class % segment_len:
        raise ValueError("frames_per_class must be a multiple of segment_len")
    schedule = [c for c in range(num_classes) for _ in range(frames_per_class // segment_len)]
    order = np.random.default_rng(seed).permutation(len(schedule))
    return [(schedule[i], segment_len) for i in order]


def window_majority(labels: np.ndarray, window_len: int) -> list[tuple[int, int, int]]:
    """Non-overlapping windows (start, end, majority label); the tail forms a short window."""
    out = []
    for start in range(0, len(labels), window_len):
        chunk = labels[start:start + window_len]
        out.append((start, start + len(chunk), int(np.bincount(chunk).argmax())))
    return out


def split(stream: LabeledStream, train_fraction: float, seed: int, window_len: int = 8):
    """Window-level train/holdout split, stratified by each window's majority label.

    Whole windows go to one side, so no window straddles the split.
    """
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    if len(np.unique(stream.labels)) < 2:
        raise ValueError("stream holds a single class; nothing to learn from a split")
    windows = window_majority(stream.labels, window_len)
    rng = np.random.default_rng(seed)
    train_idx, hold_idx = [], []
    for label in sorted({w[2] for w in windows}):
        members = [i for i, w in enumerate(windows) if w[2] == label]
        members = [members[i] for i in rng.permutation(len(members))]
        k = int(round(train_fraction * len(members)))
        train_idx += members[:k]
        hold_idx += members[k:]
    present = set(np.unique(stream.labels).tolist())
    parts = []
    for idx in (sorted(train_idx), sorted(hold_idx)):
        frames = [np.arange(windows[i][0], windows[i][1]) for i in idx]
        sel = np.concatenate(frames) if frames else np.zeros(0, dtype=np.int64)
        missing = present - set(np.unique(stream.labels[sel]).tolist())
        if missing:
            raise ValueError(f"class(es) {sorted(missing)} would be empty in one part of the split; "
                             f"generate a longer stream")
        parts.append(LabeledStream(stream.frames[sel], stream.labels[sel], stream.spec_fingerprint,
                                   list(stream.class_names)))
    return parts[0], parts[1]


def quantize(frames: np.ndarray) -> np.ndarray:
    return np.round(255.0 * np.clip(frames, 0.0, 1.0)).astype(np.uint8)


def save_stream(stream: LabeledStream, path) -> None:
    t, c, h, w = stream.frames.shape
    if stream.labels.size and stream.labels.max() > 0xFFFF:
        raise ValueError("labels must fit in 16 bits")
    with open(path, "wb") as fh:
        fh.write(_STREAM_HEADER.pack(STREAM_MAGIC, STREAM_VERSION, t, c, h, w))
        fh.write(stream.labels.astype("<u2").tobytes())
        fh.write(quantize(stream.frames).tobytes())


def load_stream(path) -> LabeledStream:
    data = Path(path).read_bytes()
    if len(data) < _STREAM_HEADER.size:
        raise StreamFormatError("file shorter than header")
    magic, version, t, c, h, w = _STREAM_HEADER.unpack_from(data)
    if magic != STREAM_MAGIC:
        raise StreamFormatError(f"bad magic {magic!r}")
    if version != STREAM_VERSION:
        raise StreamFormatError(f"unsupported stream version {version}")
    pos = _STREAM_HEADER.size
    need = pos + 2 * t + t * c * h * w
    if len(data) != need:
        raise StreamFormatError(f"expected {need} bytes, found {len(data)}")
    labels = np.frombuffer(data, dtype="<u2", count=t, offset=pos).astype(np.int64)
    pix = np.frombuffer(data, dtype=np.uint8, offset=pos + 2 * t).reshape(t, c, h, w)
    fp = hashlib.sha256(data).hexdigest()
    return LabeledStream(pix.astype(np.float64) / 255.0, labels, f"file:{fp}")
