"""Synthetic event streams, count binning and the EVT1 binary event format.

The generator renders moving rectangles and discs on a dark background and
emits an event whenever a pixel's log intensity has moved by at least one
contrast threshold since that pixel's last event.  All pixels start referenced
to the background level, so the first render reports every shape as it appears.

Timing: frame ``k`` spans ``[k*P, (k+1)*P)`` microseconds with ``P =
frame_us``.  Each frame is rendered at ``substeps`` evenly spaced instants
starting at ``k*P``.  Ground truth for frame ``k`` is taken at the last render
instant inside that frame.  Velocities are in pixels per frame.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

EVT_MAGIC = b"EVT1"
_HEADER = struct.Struct("<4sIIQ")
EVENT_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1"), ("pad", "i1")])

SHAPE_KINDS = ("rect", "disc")


class EventFormatError(ValueError):
    """Malformed EVT1 data; the message names the byte offset of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class EventStream:
    width: int
    height: int
    events: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=EVENT_DTYPE))

    def __post_init__(self):
        self.events = np.asarray(self.events, dtype=EVENT_DTYPE)

    def __len__(self) -> int:
        return len(self.events)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and self.events.tobytes() == other.events.tobytes()
        )

    def validate(self) -> None:
        ev = self.events
        if len(ev) and np.any(np.diff(ev["t"].astype(np.int64)) < 0):
            raise ValueError("timestamps must be nondecreasing")
        if len(ev) and (ev["x"].max() >= self.width or ev["y"].max() >= self.height):
            raise ValueError("event coordinate outside sensor bounds")
        if len(ev) and not np.all(np.isin(ev["p"], (-1, 1))):
            raise ValueError("polarity must be -1 or +1")


@dataclass
class Box:
    class_id: int
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass
class SceneTruth:
    """Per-frame boxes and dense flow fields (``[2, H, W]``, pixels per frame)."""

    boxes: list[list[Box]]
    flow: np.ndarray  # [frames, 2, H, W]

    @property
    def n_frames(self) -> int:
        return len(self.boxes)


@dataclass
class GeneratorConfig:
    width: int = 64
    height: int = 64
    frames: int = 8
    frame_us: int = 10_000
    substeps: int = 4
    n_shapes: int = 1
    shape_kinds: tuple[str, ...] = SHAPE_KINDS
    min_size: float = 10.0
    max_size: float = 20.0
    min_speed: float = 0.5
    max_speed: float = 2.0
    contrast_threshold: float = 0.2
    background: float = 0.2
    foreground: tuple[float, float] = (0.8, 0.6)
    textured: bool = False
    noise_rate_hz: float = 0.0

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError("sensor dims must be positive")
        if self.frames <= 0 or self.frame_us <= 0 or self.substeps <= 0:
            raise ValueError("duration must be positive")
        if self.n_shapes < 0:
            raise ValueError("n_shapes must be >= 0")
        if self.contrast_threshold <= 0:
            raise ValueError("contrast_threshold must be positive")
        for k in self.shape_kinds:
            if k not in SHAPE_KINDS:
                raise ValueError(f"unknown shape kind {k!r}")

    def with_overrides(self, **kw) -> "GeneratorConfig":
        return replace(self, **kw)


def config_keys() -> list[str]:
    return [f.name for f in fields(GeneratorConfig)]


@dataclass
class _Shape:
    kind: str
    class_id: int
    x0: float  # top-left at t=0
    y0: float
    w: float
    h: float
    vx: float
    vy: float
    intensity: float
    phase: float

    def box_at(self, frame_pos: float) -> tuple[float, float, float, float]:
        x = self.x0 + self.vx * frame_pos
        y = self.y0 + self.vy * frame_pos
        return x, y, x + self.w, y + self.h


def _interval_coverage(n: int, lo: float, hi: float) -> np.ndarray:
    """Fraction of each unit pixel cell [i, i+1) covered by [lo, hi)."""
    i = np.arange(n, dtype=np.float64)
    return np.clip(np.minimum(i + 1, hi) - np.maximum(i, lo), 0.0, 1.0)


_SS = 4
_SS_OFF = (np.arange(_SS) + 0.5) / _SS


def _disc_coverage(width: int, height: int, cx: float, cy: float, r: float) -> np.ndarray:
    xs = (np.arange(width)[:, None] + _SS_OFF[None, :]).reshape(-1)
    ys = (np.arange(height)[:, None] + _SS_OFF[None, :]).reshape(-1)
    inside = ((xs[None, :] - cx) ** 2 + (ys[:, None] - cy) ** 2) <= r * r
    return inside.reshape(height, _SS, width, _SS).mean(axis=(1, 3))


def _render(cfg: GeneratorConfig, shapes: list[_Shape], frame_pos: float) -> np.ndarray:
    img = np.full((cfg.height, cfg.width), cfg.background)
    for s in shapes:
        x0, y0, x1, y1 = s.box_at(frame_pos)
        if s.kind == "rect":
            cov = np.outer(_interval_coverage(cfg.height, y0, y1), _interval_coverage(cfg.width, x0, x1))
        else:
            cov = _disc_coverage(cfg.width, cfg.height, (x0 + x1) / 2, (y0 + y1) / 2, s.w / 2)
        level = s.intensity
        if cfg.textured:
            # stripes that travel with the shape
            u = np.arange(cfg.width)[None, :] + 0.5 - x0
            v = np.arange(cfg.height)[:, None] + 0.5 - y0
            level = s.intensity * (1.0 + 0.35 * np.sin(0.9 * u + 0.6 * v + s.phase))
        img = img * (1.0 - cov) + level * cov
    return img


def _sample_shapes(cfg: GeneratorConfig, rng: np.random.Generator) -> list[_Shape]:
    shapes = []
    span = (cfg.frames - 1) + (cfg.substeps - 1) / cfg.substeps
    for _ in range(cfg.n_shapes):
        ki = int(rng.integers(len(cfg.shape_kinds)))
        kind = cfg.shape_kinds[ki]
        class_id = SHAPE_KINDS.index(kind)
        size_w = rng.uniform(cfg.min_size, cfg.max_size)
        size_h = size_w if kind == "disc" else rng.uniform(cfg.min_size, cfg.max_size)
        speed = rng.uniform(cfg.min_speed, cfg.max_speed)
        angle = rng.uniform(0, 2 * np.pi)
        vx, vy = speed * np.cos(angle), speed * np.sin(angle)
        # keep the whole trajectory on the sensor
        lo_x = max(0.0, -vx * span)
        hi_x = min(cfg.width - size_w, cfg.width - size_w - vx * span)
        lo_y = max(0.0, -vy * span)
        hi_y = min(cfg.height - size_h, cfg.height - size_h - vy * span)
        if hi_x < lo_x:
            vx, lo_x, hi_x = 0.0, 0.0, cfg.width - size_w
        if hi_y < lo_y:
            vy, lo_y, hi_y = 0.0, 0.0, cfg.height - size_h
        x0 = rng.uniform(lo_x, hi_x)
        y0 = rng.uniform(lo_y, hi_y)
        intensity = cfg.foreground[class_id % len(cfg.foreground)]
        shapes.append(_Shape(kind, class_id, x0, y0, size_w, size_h, vx, vy, intensity, rng.uniform(0, 2 * np.pi)))
    return shapes


def _truth(cfg: GeneratorConfig, shapes: list[_Shape]) -> SceneTruth:
    boxes: list[list[Box]] = []
    flow = np.zeros((cfg.frames, 2, cfg.height, cfg.width))
    cy = np.arange(cfg.height) + 0.5
    cx = np.arange(cfg.width) + 0.5
    for k in range(cfg.frames):
        pos = k + (cfg.substeps - 1) / cfg.substeps
        frame_boxes = []
        for s in shapes:
            x0, y0, x1, y1 = s.box_at(pos)
            x0, x1 = np.clip([x0, x1], 0, cfg.width)
            y0, y1 = np.clip([y0, y1], 0, cfg.height)
            frame_boxes.append(Box(s.class_id, float(x0), float(y0), float(x1), float(y1)))
            inside = ((cy >= y0) & (cy < y1))[:, None] & ((cx >= x0) & (cx < x1))[None, :]
            flow[k, 0][inside] = s.vx
            flow[k, 1][inside] = s.vy
        boxes.append(frame_boxes)
    return SceneTruth(boxes, flow)


def generate_moving_shapes(cfg: GeneratorConfig, seed: int) -> tuple[EventStream, SceneTruth]:
    """Render, threshold log-intensity changes into events, and derive truth."""
    rng = np.random.default_rng(seed)
    shapes = _sample_shapes(cfg, rng)
    eps = 1e-3
    ref = np.full((cfg.height, cfg.width), np.log(cfg.background + eps))
    chunks = []
    dt = cfg.frame_us / cfg.substeps
    for k in range(cfg.frames):
        for j in range(cfg.substeps):
            t = int(round(k * cfg.frame_us + j * dt))
            log_i = np.log(_render(cfg, shapes, k + j / cfg.substeps) + eps)
            delta = log_i - ref
            n = np.floor(np.abs(delta) / cfg.contrast_threshold).astype(np.int64)
            ys, xs = np.nonzero(n)
            if len(ys):
                counts = n[ys, xs]
                pol = np.sign(delta[ys, xs]).astype(np.int8)
                ref[ys, xs] += pol * counts * cfg.contrast_threshold
                rec = np.zeros(int(counts.sum()), dtype=EVENT_DTYPE)
                rec["t"] = t
                rec["x"] = np.repeat(xs, counts)
                rec["y"] = np.repeat(ys, counts)
                rec["p"] = np.repeat(pol, counts)
                chunks.append(rec)
    if cfg.noise_rate_hz > 0:
        chunks.append(_noise(cfg, rng))
    events = np.concatenate(chunks) if chunks else np.zeros(0, dtype=EVENT_DTYPE)
    order = np.lexsort((events["x"], events["y"], events["t"]))
    return EventStream(cfg.width, cfg.height, events[order]), _truth(cfg, shapes)


def _noise(cfg: GeneratorConfig, rng: np.random.Generator) -> np.ndarray:
    duration_us = cfg.frames * cfg.frame_us
    expected = cfg.noise_rate_hz * cfg.width * cfg.height * duration_us * 1e-6
    n = int(rng.poisson(expected))
    rec = np.zeros(n, dtype=EVENT_DTYPE)
    rec["t"] = rng.integers(0, duration_us, size=n)
    rec["x"] = rng.integers(0, cfg.width, size=n)
    rec["y"] = rng.integers(0, cfg.height, size=n)
    rec["p"] = rng.choice(np.array([-1, 1], dtype=np.int8), size=n)
    return rec


def bin_events(s: EventStream, t0: int, t1: int, bins: int) -> np.ndarray:
    """Two-polarity count histogram ``[bins, 2, H, W]`` over ``[t0, t1)``.

    Channel 0 counts negative events, channel 1 positive ones.
    """
    if not t0 < t1:
        raise ValueError(f"need t0 < t1, got {t0}, {t1}")
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    out = np.zeros((bins, 2, s.height, s.width))
    ev = s.events
    t = ev["t"].astype(np.int64)
    keep = (t >= t0) & (t < t1)
    if not keep.any():
        return out
    ev, t = ev[keep], t[keep]
    b = ((t - t0) * bins) // (t1 - t0)
    ch = (ev["p"] > 0).astype(np.int64)
    np.add.at(out, (b, ch, ev["y"].astype(np.int64), ev["x"].astype(np.int64)), 1.0)
    return out


def bin_frames(s: EventStream, cfg: GeneratorConfig) -> np.ndarray:
    """One count image per generator frame: ``[frames, 2, H, W]``."""
    return bin_events(s, 0, cfg.frames * cfg.frame_us, cfg.frames)


# ---------------------------------------------------------------------------
# EVT1 files


def encode_events(s: EventStream) -> bytes:
    s.validate()
    header = _HEADER.pack(EVT_MAGIC, s.width, s.height, len(s.events))
    return header + s.events.astype(EVENT_DTYPE, copy=False).tobytes()


def decode_events(buf: bytes) -> EventStream:
    if len(buf) < _HEADER.size:
        raise EventFormatError(f"truncated header: {len(buf)} of {_HEADER.size} bytes", len(buf))
    magic, width, height, count = _HEADER.unpack_from(buf, 0)
    if magic != EVT_MAGIC:
        raise EventFormatError(f"bad magic {magic!r}, expected {EVT_MAGIC!r}", 0)
    body = len(buf) - _HEADER.size
    rec = EVENT_DTYPE.itemsize
    if body < count * rec:
        full = body // rec
        raise EventFormatError(f"truncated record {full} of {count}", _HEADER.size + full * rec)
    if body > count * rec:
        raise EventFormatError(f"{body - count * rec} trailing bytes after {count} records", _HEADER.size + count * rec)
    ev = np.frombuffer(buf, dtype=EVENT_DTYPE, count=count, offset=_HEADER.size).copy()
    bad = np.nonzero((ev["x"] >= width) | (ev["y"] >= height))[0]
    if len(bad):
        i = int(bad[0])
        raise EventFormatError(f"record {i} coordinate outside {width}x{height} sensor", _HEADER.size + i * rec)
    bad = np.nonzero(~np.isin(ev["p"], (-1, 1)))[0]
    if len(bad):
        i = int(bad[0])
        raise EventFormatError(f"record {i} has polarity {int(ev['p'][i])}", _HEADER.size + i * rec + 12)
    if count > 1:
        bad = np.nonzero(np.diff(ev["t"].astype(np.int64)) < 0)[0]
        if len(bad):
            i = int(bad[0]) + 1
            raise EventFormatError(f"record {i} timestamp decreases", _HEADER.size + i * rec)
    return EventStream(int(width), int(height), ev)


def write_events(s: EventStream, path: str | os.PathLike) -> None:
    Path(path).write_bytes(encode_events(s))


def read_events(path: str | os.PathLike) -> EventStream:
    return decode_events(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# truth files: a small little-endian container mirroring the event format

TRUTH_MAGIC = b"TRU1"
_TRUTH_HEADER = struct.Struct("<4sIII")
_BOX = struct.Struct("<Iidddd")


def encode_truth(truth: SceneTruth) -> bytes:
    frames, _, h, w = truth.flow.shape
    parts = [_TRUTH_HEADER.pack(TRUTH_MAGIC, frames, w, h)]
    for k, frame_boxes in enumerate(truth.boxes):
        parts.append(struct.pack("<I", len(frame_boxes)))
        for b in frame_boxes:
            parts.append(_BOX.pack(k, b.class_id, b.x_min, b.y_min, b.x_max, b.y_max))
    parts.append(truth.flow.astype("<f8").tobytes())
    return b"".join(parts)


def decode_truth(buf: bytes) -> SceneTruth:
    if len(buf) < _TRUTH_HEADER.size:
        raise EventFormatError("truncated truth header", len(buf))
    magic, frames, w, h = _TRUTH_HEADER.unpack_from(buf, 0)
    if magic != TRUTH_MAGIC:
        raise EventFormatError(f"bad truth magic {magic!r}", 0)
    off = _TRUTH_HEADER.size
    boxes = []
    for _ in range(frames):
        if off + 4 > len(buf):
            raise EventFormatError("truncated box count", off)
        (nb,) = struct.unpack_from("<I", buf, off)
        off += 4
        frame_boxes = []
        for _ in range(nb):
            if off + _BOX.size > len(buf):
                raise EventFormatError("truncated box record", off)
            _, cls, x0, y0, x1, y1 = _BOX.unpack_from(buf, off)
            frame_boxes.append(Box(cls, x0, y0, x1, y1))
            off += _BOX.size
        boxes.append(frame_boxes)
    need = frames * 2 * h * w * 8
    if len(buf) - off != need:
        raise EventFormatError(f"flow block holds {len(buf) - off} bytes, expected {need}", off)
    flow = np.frombuffer(buf, dtype="<f8", offset=off).reshape(frames, 2, h, w).astype(np.float64)
    return SceneTruth(boxes, flow)


def write_truth(truth: SceneTruth, path) -> None:
    Path(path).write_bytes(encode_truth(truth))


def read_truth(path) -> SceneTruth:
    return decode_truth(Path(path).read_bytes())
