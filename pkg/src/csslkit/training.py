"""Deterministic training: Adam/AdamW, OneCycle schedule, full-sequence BPTT and
the two-stage sparsity-loss sweep."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Sequence

import numpy as np

from .accounting import SOpLedger, sparsity_loss
from .autograd import Tensor
from .events import GeneratorConfig, SceneTruth, bin_frames, generate_moving_shapes
from .models import Detector, detection_loss, flow_loss, map_lite, truth_mask

BETA_SWEEP = (1.0, 0.1, 0.04, 0.01, 0.001)


class NumericalAbort(RuntimeError):
    """Raised when the loss stops being finite; carries the last finite parameters."""

    def __init__(self, message: str, params: dict[str, np.ndarray], epoch: int):
        super().__init__(message)
        self.params = params
        self.epoch = epoch


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 4
    seq_len: int = 8
    max_lr: float = 3e-4
    beta_sparse: float = 0.0
    seed: int = 0
    alpha: float = 1.0
    optimizer: str = "adam"
    weight_decay: float = 0.0
    pct_warmup: float = 0.3
    clip_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    eval_batch: int = 16

    def __post_init__(self):
        for name in ("epochs", "batch_size", "seq_len", "eval_batch"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.max_lr < 0:
            raise ValueError(f"max_lr must be >= 0, got {self.max_lr}")
        if self.beta_sparse < 0:
            raise ValueError(f"beta_sparse must be >= 0, got {self.beta_sparse}")
        if self.alpha <= 0:
            raise ValueError(f"alpha must be positive, got {self.alpha}")
        if self.optimizer not in ("adam", "adamw"):
            raise ValueError(f"optimizer must be 'adam' or 'adamw', got {self.optimizer!r}")
        if not 0 <= self.pct_warmup <= 1:
            raise ValueError(f"pct_warmup must lie in [0, 1], got {self.pct_warmup}")

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]


# ---------------------------------------------------------------------------
# optimizer and schedule


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: Sequence[np.ndarray]) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], 0)


def adam_step(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    eps: float = 1e-8,
    weight_decay: float = 0.0,
    decoupled: bool = False,
) -> tuple[Sequence[np.ndarray], AdamState]:
    """One bias-corrected Adam update applied in place.

    With ``decoupled`` the decay shrinks parameters directly (AdamW);
    otherwise it is folded into the gradient.
    """
    b1, b2 = betas
    state.t += 1
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if weight_decay and not decoupled:
            g = g + weight_decay * p
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if weight_decay and decoupled:
            p -= lr * weight_decay * p
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return params, state


def onecycle_lr(step: int, total_steps: int, max_lr: float, pct_warmup: float = 0.3) -> float:
    """Cosine warmup from max_lr/25 to max_lr, then cosine anneal to max_lr/1e4."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    start, end = max_lr / 25.0, max_lr / 1e4
    warm = pct_warmup * total_steps
    if step <= warm:
        frac = step / warm if warm > 0 else 1.0
        return start + (max_lr - start) * (1.0 - math.cos(math.pi * frac)) / 2.0
    frac = (step - warm) / (total_steps - warm)
    return end + (max_lr - end) * (1.0 + math.cos(math.pi * frac)) / 2.0


def clip_global_norm(grads: Sequence[np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads))
    if max_norm > 0 and norm > max_norm:
        k = max_norm / (norm + 1e-12)
        for g in grads:
            g *= k
    return norm


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Sample:
    frames: np.ndarray  # [T, 2, H, W]
    truth: SceneTruth


def make_dataset(cfg: GeneratorConfig, n: int, seed: int) -> list[Sample]:
    out = []
    for i in range(n):
        stream, truth = generate_moving_shapes(cfg, seed + i)
        out.append(Sample(bin_frames(stream, cfg), truth))
    return out


def _batch_arrays(samples: Sequence[Sample], seq_len: int):
    t = min(seq_len, samples[0].frames.shape[0])
    x = np.stack([s.frames[:t] for s in samples])
    return x, t


def _task_loss(model, outputs, samples: Sequence[Sample], t: int) -> Tensor:
    if isinstance(model, Detector):
        truths = [[s.truth.boxes[k] for s in samples] for k in range(t)]
        return detection_loss(model, outputs, truths)
    h, w = model.cfg.height, model.cfg.width
    flows = np.stack([np.stack([s.truth.flow[k] for s in samples]) for k in range(t)])
    masks = np.stack([np.stack([truth_mask(s.truth.boxes[k], h, w) for s in samples]) for k in range(t)])
    return flow_loss(outputs, flows, masks)


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalResult:
    metric: float
    gsop: float  # per frame of one sequence
    mean_density: float
    ledger: SOpLedger
    outlier_pct: float | None = None
    conv_density: float = 0.0  # feed-forward conv layers only, recurrent units excluded


def evaluate(model, samples: Sequence[Sample], seq_len: int = 8, batch: int = 16, mode: str = "sparse") -> EvalResult:
    """AP@0.5 (detection) or AEE (flow) on ``samples`` with a fresh ledger."""
    ledger = SOpLedger(mode)
    preds, truths = [], []
    epes = []
    frames = 0
    for start in range(0, len(samples), batch):
        chunk = samples[start : start + batch]
        x, t = _batch_arrays(chunk, seq_len)
        outputs, _ = model.forward(x, ledger)
        frames += len(chunk) * t
        for i, s in enumerate(chunk):
            for k in range(t):
                img = (start + i, k)
                if isinstance(model, Detector):
                    for score, box in model.decode(outputs[k], i):
                        preds.append((img, score, box))
                    truths.extend((img, b.as_tuple()) for b in s.truth.boxes[k])
                else:
                    mask = truth_mask(s.truth.boxes[k], model.cfg.height, model.cfg.width)
                    if mask.any():
                        pred = outputs[k].data[i]
                        err = np.sqrt(((pred - s.truth.flow[k]) ** 2).sum(axis=0))[mask]
                        epes.append(err)
    if isinstance(model, Detector):
        metric = map_lite(preds, truths, 0.5)
        outlier = None
    else:
        allerr = np.concatenate(epes) if epes else np.zeros(0)
        metric = float(allerr.mean()) if allerr.size else float("nan")
        outlier = float(100.0 * np.mean(allerr > 3.0)) if allerr.size else float("nan")
    gsop = ledger.total_sop / max(frames, 1) / 1e9
    conv = ledger.mean_density([n for n in ledger.layers if not n.startswith("Recurrent")])
    return EvalResult(metric, gsop, ledger.mean_density(), ledger, outlier, conv)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochLog:
    epoch: int
    task_loss: float
    sparse_loss: float
    metric: float
    gsop: float
    mean_density: float
    lr: float
    conv_density: float = 0.0
    total_loss: float = 0.0
    steps: list[tuple[float, float, float]] = field(default_factory=list, repr=False)

    def csv_row(self) -> list:
        vals = (self.task_loss, self.sparse_loss, self.metric, self.gsop, self.mean_density, self.lr)
        return [self.epoch] + [repr(float(v)) for v in vals]


LOG_HEADER = ["epoch", "task_loss", "sparse_loss", "metric", "gsop", "mean_density", "lr"]


def snapshot(model) -> dict[str, np.ndarray]:
    return {k: t.data.copy() for k, t in model.tensors().items()}


def restore(model, params: dict[str, np.ndarray]) -> None:
    tensors = model.tensors()
    missing = set(tensors) - set(params)
    if missing:
        raise KeyError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    for k, t in tensors.items():
        if params[k].shape != t.shape:
            raise ValueError(f"parameter {k}: checkpoint shape {params[k].shape} != model shape {t.shape}")
        t.data[...] = params[k]


def train(
    model,
    dataset: Sequence[Sample],
    cfg: TrainConfig,
    val: Sequence[Sample] | None = None,
    start_epoch: int = 0,
    opt_state: AdamState | None = None,
    on_epoch: Callable[[EpochLog], None] | None = None,
):
    """Train in place; returns ``(model, logs, optimizer state)``.

    ``cfg.epochs`` is the total schedule length.  Resuming with ``start_epoch``
    and the saved optimizer state runs the remaining epochs with the same
    learning-rate schedule and data order as an uninterrupted run.  The
    recurrent state is reset at the start of every sequence and gradients flow
    through the full ``seq_len`` steps.
    """
    if not dataset:
        raise ValueError("training set is empty")
    val = dataset if val is None else val
    tensors = model.tensors()
    names = list(tensors)
    params = [tensors[k] for k in names]
    state = opt_state or AdamState.zeros_like([p.data for p in params])
    n_batches = math.ceil(len(dataset) / cfg.batch_size)
    total_steps = cfg.epochs * n_batches
    if not 0 <= start_epoch <= cfg.epochs:
        raise ValueError(f"start_epoch {start_epoch} outside the {cfg.epochs}-epoch schedule")
    step = start_epoch * n_batches
    last_good = snapshot(model)
    logs: list[EpochLog] = []
    for epoch in range(start_epoch, cfg.epochs):
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(len(dataset))
        tl, sl, records = [], [], []
        lr = 0.0
        for b in range(n_batches):
            batch = [dataset[i] for i in order[b * cfg.batch_size : (b + 1) * cfg.batch_size]]
            x, t = _batch_arrays(batch, cfg.seq_len)
            outputs, acts = model.forward(x)
            task = _task_loss(model, outputs, batch, t)
            sparse = sparsity_loss(acts, cfg.beta_sparse, len(batch), t) if cfg.beta_sparse > 0 else None
            loss = task if sparse is None else task + sparse
            task_v = task.item()
            sparse_v = 0.0 if sparse is None else sparse.item()
            total_v = loss.item()
            if not math.isfinite(total_v):
                restore(model, last_good)
                raise NumericalAbort(f"non-finite loss at epoch {epoch}, batch {b}", last_good, epoch)
            for p in params:
                p.zero_grad()
            loss.backward()
            grads = [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
            clip_global_norm(grads, cfg.clip_norm)
            lr = onecycle_lr(min(step, total_steps), total_steps, cfg.max_lr, cfg.pct_warmup)
            adam_step(
                [p.data for p in params], grads, state, lr, (cfg.beta1, cfg.beta2), cfg.eps,
                cfg.weight_decay, decoupled=cfg.optimizer == "adamw",
            )
            step += 1
            tl.append(task_v)
            sl.append(sparse_v)
            records.append((task_v, sparse_v, total_v))
        last_good = snapshot(model)
        ev = evaluate(model, val, cfg.seq_len, cfg.eval_batch)
        log = EpochLog(
            epoch, float(np.mean(tl)), float(np.mean(sl)), ev.metric, ev.gsop, ev.mean_density, lr, ev.conv_density,
            float(np.mean([r[2] for r in records])), records,
        )
        logs.append(log)
        if on_epoch is not None:
            on_epoch(log)
    for p in params:
        p.zero_grad()
    return model, logs, state


@dataclass
class SweepRow:
    beta: float | None  # None is the stage-1 row without sparsity loss
    metric: float
    gsop: float
    mean_density: float
    conv_density: float = 0.0

    @property
    def label(self) -> str:
        return "W/O" if self.beta is None else repr(self.beta)


def two_stage_sweep(
    model,
    dataset: Sequence[Sample],
    betas: Sequence[float],
    cfg: TrainConfig,
    val: Sequence[Sample] | None = None,
    finetune_frac: float = 0.25,
    lr_frac: float = 0.1,
) -> list[SweepRow]:
    """Fine-tune copies of a stage-1 model with the L1 activation penalty.

    Each beta restarts from the same stage-1 parameters with identical data
    order; the model is left holding its stage-1 parameters afterwards.
    """
    val = dataset if val is None else val
    stage1 = snapshot(model)
    base = evaluate(model, val, cfg.seq_len, cfg.eval_batch)
    ft_epochs = max(1, round(finetune_frac * cfg.epochs))
    rows = []
    for beta in betas:
        restore(model, stage1)
        ft = TrainConfig(**{**asdict(cfg), "epochs": ft_epochs, "max_lr": cfg.max_lr * lr_frac, "beta_sparse": beta})
        _, logs, _ = train(model, dataset, ft, val)
        last = logs[-1]
        rows.append(SweepRow(beta, last.metric, last.gsop, last.mean_density, last.conv_density))
    restore(model, stage1)
    rows.append(SweepRow(None, base.metric, base.gsop, base.mean_density, base.conv_density))
    return rows
