"""Desk-scale detection and optical-flow networks built from the thresholded blocks.

The detection backbone follows the layer pattern of the SEED-256 backbone
(one thresholded conv, three residual blocks, three conv-recurrent blocks) at
reduced width.  A single-scale head with one anchor per cell predicts an
objectness logit and four box offsets.  The flow network is a small
encoder / recurrent bottleneck / decoder with one skip connection.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .accounting import SOpLedger
from .autograd import ShapeError, Tensor, conv2d, conv_output_size
from .blocks import (
    RECURRENT_KINDS,
    CAConvParams,
    RecurrentState,
    ResidualParams,
    SparseActivation,
    ca_conv2d_step,
    ca_residual_step,
    init_bias,
    init_kernel,
    recurrent_step,
    reset_state,
)
from .events import Box

LAYER_KINDS = ("ca_conv", "ca_residual", "ca_convrec")

FULL_CHANNELS = (32, 64, 64, 128, 256, 256, 256)
FULL_STRIDES = (2, 2, 1, 1, 2, 2, 2)
DESK_CHANNELS = (8, 16, 16, 32, 64, 64, 64)
DESK_STRIDES = (2, 2, 1, 2, 2, 1, 1)


class ConfigError(ValueError):
    """Invalid model or task configuration."""


class NoPixelsError(ValueError):
    """A flow metric was requested over an empty mask."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    channels: int
    stride: int = 1
    recurrent_kind: str = "mgu"


@dataclass
class BackboneSpec:
    layers: list[LayerSpec]
    in_channels: int = 2
    activation: str = "cssl"  # or "relu" for the baseline
    alpha: float = 1.0

    def __post_init__(self):
        if not self.layers:
            raise ConfigError("backbone needs at least one layer")
        for i, layer in enumerate(self.layers):
            if layer.kind not in LAYER_KINDS:
                raise ConfigError(f"layer {i}: unknown kind {layer.kind!r}")
            if layer.channels <= 0:
                raise ConfigError(f"layer {i}: channels must be positive, got {layer.channels}")
            if layer.stride < 1:
                raise ConfigError(f"layer {i}: stride must be >= 1, got {layer.stride}")
            if layer.kind == "ca_convrec" and layer.recurrent_kind not in RECURRENT_KINDS:
                raise ConfigError(f"layer {i}: unknown recurrent kind {layer.recurrent_kind!r}")
        if self.activation not in ("cssl", "relu"):
            raise ConfigError(f"activation must be 'cssl' or 'relu', got {self.activation!r}")

    @classmethod
    def seed_pattern(
        cls,
        channels: Sequence[int] = DESK_CHANNELS,
        strides: Sequence[int] = DESK_STRIDES,
        recurrent_kind: str = "mgu",
        activation: str = "cssl",
        alpha: float = 1.0,
    ) -> "BackboneSpec":
        """One conv, three residual blocks, three conv-recurrent blocks."""
        if len(channels) != 7 or len(strides) != 7:
            raise ConfigError("the backbone pattern has exactly 7 layers")
        kinds = ["ca_conv"] + ["ca_residual"] * 3 + ["ca_convrec"] * 3
        layers = [LayerSpec(k, c, s, recurrent_kind) for k, c, s in zip(kinds, channels, strides)]
        return cls(layers, 2, activation, alpha)

    @property
    def has_recurrent(self) -> bool:
        return any(layer.kind == "ca_convrec" for layer in self.layers)

    @property
    def total_stride(self) -> int:
        return int(np.prod([layer.stride for layer in self.layers]))

    def to_text(self) -> str:
        lines = [f"in_channels={self.in_channels}", f"activation={self.activation}", f"alpha={self.alpha!r}"]
        for i, layer in enumerate(self.layers):
            lines.append(f"layer{i}={layer.kind},{layer.channels},{layer.stride},{layer.recurrent_kind}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "BackboneSpec":
        kv = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
        layers = []
        i = 0
        while f"layer{i}" in kv:
            kind, ch, st, rk = kv[f"layer{i}"].split(",")
            layers.append(LayerSpec(kind, int(ch), int(st), rk))
            i += 1
        return cls(layers, int(kv.get("in_channels", 2)), kv.get("activation", "cssl"), float(kv.get("alpha", 1.0)))


def layer_names(spec: BackboneSpec) -> list[list[str]]:
    """Ledger layer names produced by each backbone layer, in network order."""
    counts = {k: 0 for k in LAYER_KINDS}
    out = []
    for layer in spec.layers:
        counts[layer.kind] += 1
        n = counts[layer.kind]
        if layer.kind == "ca_conv":
            out.append([f"Conv{n}"])
        elif layer.kind == "ca_residual":
            out.append([f"Res{n}_Conv1", f"Res{n}_Conv2"])
        else:
            out.append([f"Recurrent{n}"])
    return out


def conv_layer_names(spec: BackboneSpec) -> list[str]:
    return [n for layer, names in zip(spec.layers, layer_names(spec)) if layer.kind != "ca_convrec" for n in names]


class Backbone:
    def __init__(self, spec: BackboneSpec, rng: np.random.Generator):
        self.spec = spec
        relu = spec.activation == "relu"
        self.blocks: list[tuple[str, str, object]] = []
        cin = spec.in_channels
        for layer, names in zip(spec.layers, layer_names(spec)):
            if layer.kind == "ca_conv":
                p = CAConvParams.init(cin, layer.channels, rng, stride=layer.stride, alpha=spec.alpha, relu=relu)
                self.blocks.append((names[0], layer.kind, p))
            elif layer.kind == "ca_residual":
                p = ResidualParams.init(cin, layer.channels, rng, stride=layer.stride, alpha=spec.alpha, relu=relu)
                self.blocks.append((names[0].split("_")[0], layer.kind, p))
            else:
                cls = RECURRENT_KINDS[layer.recurrent_kind][0]
                p = cls.init(cin, layer.channels, rng, stride=layer.stride, alpha=spec.alpha, relu=relu)
                self.blocks.append((names[0], layer.kind, p))
            cin = layer.channels

    @property
    def out_channels(self) -> int:
        return self.spec.layers[-1].channels

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        for name, _, p in self.blocks:
            out.update(p.tensors(f"{name}."))
        return out

    def shapes(self, h: int, w: int) -> list[tuple[int, int, int]]:
        dims = []
        for layer in self.spec.layers:
            h, w = conv_output_size(h, 3, layer.stride, 1), conv_output_size(w, 3, layer.stride, 1)
            dims.append((layer.channels, h, w))
        return dims

    def init_state(self, n: int, h: int, w: int) -> list[RecurrentState | None]:
        states = []
        for (c, hh, ww), layer in zip(self.shapes(h, w), self.spec.layers):
            states.append(reset_state(n, c, hh, ww) if layer.kind == "ca_convrec" else None)
        return states

    def step(self, x: Tensor, states, ledger: SOpLedger | None = None):
        """Run one time step; returns (output, new states, every emitted activation)."""
        if x.shape[1] != self.spec.in_channels:
            raise ShapeError(f"backbone expects {self.spec.in_channels} input channels, got {x.shape[1]}")
        acts: list[Tensor] = []
        new_states = []
        h: Tensor | SparseActivation = x
        for (name, kind, p), layer, st in zip(self.blocks, self.spec.layers, states):
            if kind == "ca_conv":
                h = ca_conv2d_step(h, p, ledger, name)
                acts.append(h.values)
                new_states.append(None)
            elif kind == "ca_residual":
                h = ca_residual_step(h, p, ledger, name, collect=acts)
                new_states.append(None)
            else:
                h, st = recurrent_step(layer.recurrent_kind, h, st, p, ledger, name)
                acts.append(h.values)
                new_states.append(st)
        return h, new_states, acts


def build_backbone(spec: BackboneSpec, seed: int = 0) -> Backbone:
    return Backbone(spec, np.random.default_rng(seed))


# ---------------------------------------------------------------------------
# detection


@dataclass
class DetectionOutput:
    """Batched head output: ``objectness [N, A, H', W']``, ``boxes [N, 4A, H', W']``."""

    objectness: Tensor
    boxes: Tensor


@dataclass
class DetectorConfig:
    height: int = 64
    width: int = 64
    anchor: float | None = None  # defaults to the total stride
    pos_weight: float = 4.0
    box_weight: float = 5.0


class Detector:
    def __init__(self, spec: BackboneSpec, cfg: DetectorConfig | None = None, seed: int = 0):
        cfg = cfg or DetectorConfig()
        if cfg.height % spec.total_stride or cfg.width % spec.total_stride:
            raise ConfigError(f"input {cfg.height}x{cfg.width} not divisible by total stride {spec.total_stride}")
        rng = np.random.default_rng(seed)
        self.spec = spec
        self.cfg = cfg
        self.backbone = Backbone(spec, rng)
        c = self.backbone.out_channels
        self.w_head = init_kernel(rng, 5, c, 3, "w_head")
        self.b_head = init_bias(5, "b_head")
        _, gh, gw = self.backbone.shapes(cfg.height, cfg.width)[-1]
        if gh < 1 or gw < 1:
            raise ConfigError(f"input {cfg.height}x{cfg.width} too small for total stride {spec.total_stride}")
        self.grid = (gh, gw)
        self.stride = (cfg.height / gh, cfg.width / gw)
        self.anchor = float(cfg.anchor or max(self.stride))

    task = "detect"

    def tensors(self) -> dict[str, Tensor]:
        out = self.backbone.tensors()
        out["Head.w_head"] = self.w_head
        out["Head.b_head"] = self.b_head
        return out

    def n_params(self) -> int:
        return sum(t.size for t in self.tensors().values())

    def head(self, feat: Tensor, ledger: SOpLedger | None) -> DetectionOutput:
        out = conv2d(feat, self.w_head, self.b_head, 1, 1)
        if ledger is not None:
            ledger.add_conv("Head", feat, self.w_head.shape, 1, 1)
        return DetectionOutput(ag.slice_channels(out, 0, 1), ag.slice_channels(out, 1, 5))

    def forward(self, seq: np.ndarray, ledger: SOpLedger | None = None):
        """Run a batch of binned sequences ``[N, T, 2, H, W]`` (or ``[T, 2, H, W]``)."""
        seq = _batched(seq, self.spec.in_channels, self.cfg.height, self.cfg.width)
        n, t = seq.shape[:2]
        states = self.backbone.init_state(n, self.cfg.height, self.cfg.width)
        outputs, acts = [], []
        for k in range(t):
            feat, states, step_acts = self.backbone.step(Tensor(seq[:, k]), states, ledger)
            outputs.append(self.head(feat.values, ledger))
            acts.extend(step_acts)
        return outputs, acts

    # box coding
    def encode_targets(self, frame_boxes: Sequence[Sequence[Box]]):
        """Targets for one step of a batch: (objectness [N,1,gh,gw], offsets [N,4,gh,gw], mask)."""
        gh, gw = self.grid
        sy, sx = self.stride
        n = len(frame_boxes)
        obj = np.zeros((n, 1, gh, gw))
        off = np.zeros((n, 4, gh, gw))
        for i, boxes in enumerate(frame_boxes):
            for b in boxes:
                cx, cy = (b.x_min + b.x_max) / 2, (b.y_min + b.y_max) / 2
                gx = min(int(cx // sx), gw - 1)
                gy = min(int(cy // sy), gh - 1)
                obj[i, 0, gy, gx] = 1.0
                off[i, :, gy, gx] = (
                    cx / sx - gx - 0.5,
                    cy / sy - gy - 0.5,
                    np.log(max(b.x_max - b.x_min, 1e-3) / self.anchor),
                    np.log(max(b.y_max - b.y_min, 1e-3) / self.anchor),
                )
        return obj, off, np.repeat(obj, 4, axis=1)

    def decode(self, out: DetectionOutput, index: int = 0, top_k: int = 5, nms_iou: float = 0.5):
        """Scored boxes ``[(score, (x0, y0, x1, y1)), ...]`` for one batch element."""
        gh, gw = self.grid
        sy, sx = self.stride
        logits = out.objectness.data[index, 0]
        reg = out.boxes.data[index]
        gy, gx = np.mgrid[0:gh, 0:gw]
        cx = (gx + 0.5 + reg[0]) * sx
        cy = (gy + 0.5 + reg[1]) * sy
        w = self.anchor * np.exp(np.clip(reg[2], -10, 10))
        h = self.anchor * np.exp(np.clip(reg[3], -10, 10))
        x0 = np.clip(cx - w / 2, 0, self.cfg.width)
        x1 = np.clip(cx + w / 2, 0, self.cfg.width)
        y0 = np.clip(cy - h / 2, 0, self.cfg.height)
        y1 = np.clip(cy + h / 2, 0, self.cfg.height)
        scores = ag._sigmoid(logits)
        order = np.argsort(-scores.reshape(-1), kind="stable")
        kept: list[tuple[float, tuple]] = []
        for flat in order:
            i, j = divmod(int(flat), gw)
            box = (float(x0[i, j]), float(y0[i, j]), float(x1[i, j]), float(y1[i, j]))
            if all(iou(box, kb) <= nms_iou for _, kb in kept):
                kept.append((float(scores[i, j]), box))
            if len(kept) >= top_k:
                break
        return kept


def _batched(seq: np.ndarray, c: int, h: int, w: int) -> np.ndarray:
    seq = np.asarray(seq, dtype=np.float64)
    if seq.ndim == 4:
        seq = seq[None]
    if seq.ndim != 5 or seq.shape[2:] != (c, h, w):
        raise ShapeError(f"expected sequence [N, T, {c}, {h}, {w}], got {seq.shape}")
    return seq


def detect_forward(model: Detector, seq: np.ndarray, ledger: SOpLedger | None = None):
    """Per-step detection outputs and the ledger of the pass."""
    ledger = SOpLedger() if ledger is None else ledger
    outputs, _ = model.forward(seq, ledger)
    return outputs, ledger


def detection_loss(model: Detector, outputs: Sequence[DetectionOutput], truths: Sequence[Sequence[Sequence[Box]]]) -> Tensor:
    """Mean over steps and batch of BCE objectness plus smooth-L1 box terms.

    ``truths[t][n]`` is the box list of sample ``n`` at step ``t``.
    """
    total = None
    n = outputs[0].objectness.shape[0]
    for out, frame_boxes in zip(outputs, truths):
        obj, off, mask = model.encode_targets(frame_boxes)
        weights = np.where(obj > 0, model.cfg.pos_weight, 1.0)
        term = ag.bce_with_logits(out.objectness, obj, weights) + ag.smooth_l1(out.boxes, off, mask) * model.cfg.box_weight
        total = term if total is None else total + term
    return total * (1.0 / (n * len(outputs)))


def iou(a, b) -> float:
    ix = max(0.0, min(a[2], b[2]) - max(a[0], b[0]))
    iy = max(0.0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = ix * iy
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def map_lite(preds, truths, iou_thresh: float = 0.5) -> float:
    """Single-threshold average precision with 11-point interpolation.

    ``preds``: iterable of ``(image_id, score, box)``; ``truths``: iterable of
    ``(image_id, box)``.  Boxes are ``(x0, y0, x1, y1)``.  Predictions are
    matched greedily in descending score order to the unmatched truth of
    highest IoU in the same image.
    """
    if not 0 < iou_thresh < 1:
        raise ValueError(f"iou_thresh must lie in (0, 1), got {iou_thresh}")
    gts: dict = {}
    for img, box in truths:
        gts.setdefault(img, []).append(tuple(box))
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        return 0.0
    preds = sorted(preds, key=lambda p: -p[1])
    used = {img: [False] * len(v) for img, v in gts.items()}
    tp = np.zeros(len(preds))
    for k, (img, _, box) in enumerate(preds):
        best, best_j = iou_thresh, -1
        for j, g in enumerate(gts.get(img, [])):
            if used[img][j]:
                continue
            o = iou(box, g)
            if o >= best:
                best, best_j = o, j
        if best_j >= 0:
            used[img][best_j] = True
            tp[k] = 1.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(preds) + 1)
    ap = 0.0
    for r in np.linspace(0, 1, 11):
        hit = precision[recall >= r - 1e-12]
        ap += hit.max() if hit.size else 0.0
    return float(ap / 11)


# ---------------------------------------------------------------------------
# optical flow


@dataclass
class FlowConfig:
    height: int = 64
    width: int = 64
    channels: tuple[int, ...] = (8, 16, 16, 32, 16, 8)
    recurrent_kind: str = "mgu"
    activation: str = "cssl"
    alpha: float = 1.0
    in_channels: int = 2


class FlowNet:
    """Encoder (2 strided convs + residual) -> recurrent bottleneck -> 2x upsampling decoder."""

    task = "flow"

    def __init__(self, cfg: FlowConfig | None = None, seed: int = 0):
        cfg = cfg or FlowConfig()
        if cfg.height % 4 or cfg.width % 4 or cfg.height <= 0 or cfg.width <= 0:
            raise ConfigError(f"flow input dims must be positive multiples of 4, got {cfg.height}x{cfg.width}")
        if len(cfg.channels) != 6:
            raise ConfigError("flow net needs 6 channel counts: enc1, enc2, res, rec, dec1, dec2")
        if cfg.recurrent_kind not in RECURRENT_KINDS:
            raise ConfigError(f"unknown recurrent kind {cfg.recurrent_kind!r}")
        rng = np.random.default_rng(seed)
        relu = cfg.activation == "relu"
        e1, e2, r, rec, d1, d2 = cfg.channels
        self.cfg = cfg
        self.enc1 = CAConvParams.init(cfg.in_channels, e1, rng, stride=2, alpha=cfg.alpha, relu=relu)
        self.enc2 = CAConvParams.init(e1, e2, rng, stride=2, alpha=cfg.alpha, relu=relu)
        self.res = ResidualParams.init(e2, r, rng, stride=1, alpha=cfg.alpha, relu=relu)
        rcls = RECURRENT_KINDS[cfg.recurrent_kind][0]
        self.rec = rcls.init(r, rec, rng, stride=1, alpha=cfg.alpha, relu=relu)
        self.dec1 = CAConvParams.init(rec + e1, d1, rng, alpha=cfg.alpha, relu=relu)
        self.dec2 = CAConvParams.init(d1 + cfg.in_channels, d2, rng, alpha=cfg.alpha, relu=relu)
        self.w_flow = init_kernel(rng, 2, d2, 3, "w_flow")
        self.b_flow = init_bias(2, "b_flow")

    def tensors(self) -> dict[str, Tensor]:
        out = {}
        for name in ("enc1", "enc2", "res", "rec", "dec1", "dec2"):
            out.update(getattr(self, name).tensors(f"{name}."))
        out["flow.w_flow"] = self.w_flow
        out["flow.b_flow"] = self.b_flow
        return out

    def n_params(self) -> int:
        return sum(t.size for t in self.tensors().values())

    def forward(self, seq: np.ndarray, ledger: SOpLedger | None = None):
        """Flow ``[N, 2, H, W]`` per step for a batch ``[N, T, 2, H, W]``."""
        cfg = self.cfg
        seq = _batched(seq, cfg.in_channels, cfg.height, cfg.width)
        n, t = seq.shape[:2]
        st = reset_state(n, cfg.channels[3], cfg.height // 4, cfg.width // 4)
        flows, acts = [], []
        for k in range(t):
            x = Tensor(seq[:, k])
            e1 = ca_conv2d_step(x, self.enc1, ledger, "Enc1")
            e2 = ca_conv2d_step(e1, self.enc2, ledger, "Enc2")
            r = ca_residual_step(e2, self.res, ledger, "Res1", collect=acts)
            y, st = recurrent_step(cfg.recurrent_kind, r, st, self.rec, ledger, "Recurrent1")
            up1 = ag.concat_channels([ag.upsample_nearest(y.values, 2), e1.values])
            d1 = ca_conv2d_step(up1, self.dec1, ledger, "Dec1")
            up2 = ag.concat_channels([ag.upsample_nearest(d1.values, 2), x])
            d2 = ca_conv2d_step(up2, self.dec2, ledger, "Dec2")
            flow = conv2d(d2.values, self.w_flow, self.b_flow, 1, 1)
            if ledger is not None:
                ledger.add_conv("FlowHead", d2.values, self.w_flow.shape, 1, 1)
            flows.append(flow)
            acts.extend([e1.values, e2.values, y.values, d1.values, d2.values])
        return flows, acts


def build_flownet(cfg: FlowConfig | None = None, seed: int = 0) -> FlowNet:
    return FlowNet(cfg, seed)


def truth_mask(boxes: Sequence[Box], height: int, width: int) -> np.ndarray:
    """Pixels whose centres fall inside any truth box (the evaluation region)."""
    cy = np.arange(height) + 0.5
    cx = np.arange(width) + 0.5
    m = np.zeros((height, width), dtype=bool)
    for b in boxes:
        m |= ((cy >= b.y_min) & (cy < b.y_max))[:, None] & ((cx >= b.x_min) & (cx < b.x_max))[None, :]
    return m


def flow_metrics(pred, truth, mask, outlier_px: float = 3.0) -> tuple[float, float]:
    """Average endpoint error and percentage of masked pixels with error > ``outlier_px``."""
    p = pred.data if isinstance(pred, Tensor) else np.asarray(pred, dtype=np.float64)
    t = truth.data if isinstance(truth, Tensor) else np.asarray(truth, dtype=np.float64)
    m = np.asarray(mask, dtype=bool)
    if p.shape != t.shape:
        raise ShapeError(f"flow_metrics: prediction {p.shape} vs truth {t.shape}")
    if m.shape != p.shape[-2:]:
        raise ShapeError(f"flow_metrics: mask {m.shape} vs flow {p.shape[-2:]}")
    if not m.any():
        raise NoPixelsError("flow_metrics: mask selects no pixels")
    epe = np.sqrt(((p - t) ** 2).sum(axis=0))[m]
    return float(epe.mean()), float(100.0 * np.mean(epe > outlier_px))


def flow_loss(flows: Sequence[Tensor], truth_flows: np.ndarray, masks: np.ndarray, eps: float = 1e-6) -> Tensor:
    """Mean endpoint error over masked pixels.

    ``truth_flows``: ``[T, N, 2, H, W]``; ``masks``: ``[T, N, H, W]`` boolean.
    """
    total = None
    count = max(int(masks.sum()), 1)
    for k, f in enumerate(flows):
        d = f - Tensor(truth_flows[k])
        sq = ag.square(d)
        mag = ag.sqrt(ag.add_scalar(ag.select(sq, (slice(None), 0)) + ag.select(sq, (slice(None), 1)), eps))
        term = ag.sum_(mag * Tensor(masks[k].astype(np.float64)))
        total = term if total is None else total + term
    return total * (1.0 / count)


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"CKP1"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict[str, np.ndarray], manifest: str) -> None:
    """Flat container of named little-endian float64 arrays plus a text manifest."""
    parts = [CKPT_MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    path = Path(path)
    path.write_bytes(b"".join(parts))
    manifest_path(path).write_text(manifest)


def manifest_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest")


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], str]:
    path = Path(path)
    buf = path.read_bytes()
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad checkpoint magic")
    (count,) = struct.unpack_from("<I", buf, 4)
    off = 8
    out = {}
    try:
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off : off + ln].decode()
            off += ln
            (nd,) = struct.unpack_from("<B", buf, off)
            off += 1
            shape = struct.unpack_from(f"<{nd}I", buf, off)
            off += 4 * nd
            size = int(np.prod(shape)) if nd else 1
            out[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=off).reshape(shape).astype(np.float64)
            off += 8 * size
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{path}: truncated checkpoint at byte {off}") from exc
    return out, manifest_path(path).read_text()
