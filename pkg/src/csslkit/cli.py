"""``csslkit gen|train|eval|sweep``: dataset generation, training, evaluation and beta sweeps.

Configuration is flat ``key=value`` text; ``#`` starts a comment.  Every
command first writes ``manifest.txt`` into its output directory holding the
fully resolved configuration, so ``--config <out>/manifest.txt`` reruns the
command exactly.  Exit codes: 0 success, 2 usage error, 3 data or format
error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from dataclasses import fields
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import __version__
from .accounting import density_report, report_csv, threshold_breakdown_csv
from .events import (
    SHAPE_KINDS,
    EventFormatError,
    GeneratorConfig,
    bin_frames,
    generate_moving_shapes,
    read_events,
    read_truth,
    write_events,
    write_truth,
)
from .models import (
    BackboneSpec,
    CheckpointError,
    ConfigError,
    Detector,
    DetectorConfig,
    FlowConfig,
    FlowNet,
    load_checkpoint,
    save_checkpoint,
)
from .plots import bar_chart, line_chart
from .training import (
    BETA_SWEEP,
    LOG_HEADER,
    AdamState,
    NumericalAbort,
    Sample,
    TrainConfig,
    evaluate,
    restore,
    snapshot,
    train,
    two_stage_sweep,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
VAL_SEED_OFFSET = 1_000_000
COMMANDS = ("gen", "train", "eval", "sweep")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(t) for t in text.split(",") if t.strip())


def _words(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _fmt_value(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        return ",".join(_fmt_value(x) for x in v)
    return str(v)


# Run-level keys; generator and training keys are added from their dataclasses.
_RUN_KEYS: dict[str, tuple[Callable[[str], Any], Any]] = {
    "task": (str, "detect"),
    "recurrent": (str, "mgu"),
    "activation": (str, "cssl"),
    "n_train": (int, 200),
    "n_val": (int, 32),
    "data": (str, "data"),
    "checkpoint": (str, ""),
    "resume": (str, ""),
    "baseline_checkpoint": (str, ""),
    "betas": (_floats, BETA_SWEEP),
    "ledger_mode": (str, "sparse"),
    "plots": (_bool, True),
    "pos_weight": (float, 4.0),
    "box_weight": (float, DetectorConfig.box_weight),
    "finetune_frac": (float, 0.25),
    "finetune_lr_frac": (float, 0.1),
}


def _parser_for(default: Any) -> Callable[[str], Any]:
    if isinstance(default, bool):
        return _bool
    if isinstance(default, int):
        return int
    if isinstance(default, float):
        return float
    if isinstance(default, tuple):
        return _floats if default and isinstance(default[0], float) else _words
    return str


def _schema() -> dict[str, tuple[Callable[[str], Any], Any]]:
    schema = dict(_RUN_KEYS)
    for f in fields(GeneratorConfig):
        default = getattr(GeneratorConfig(), f.name)
        schema[f.name] = (_parser_for(default), default)
    # textured defaults to "on for flow"; an explicit value wins
    schema["textured"] = (_bool, None)
    for f in fields(TrainConfig):
        default = getattr(TrainConfig(), f.name)
        schema[f.name] = (_parser_for(default), default)
    return schema


SCHEMA = _schema()


def parse_config(text: str, source: str = "<config>") -> dict[str, Any]:
    """Parse ``key=value`` lines into typed values; unknown keys are usage errors."""
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in SCHEMA:
            raise UsageError(f"{source}:{lineno}: unknown config key {key!r}")
        try:
            out[key] = SCHEMA[key][0](value)
        except ValueError as exc:
            raise UsageError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from exc
    return out


def resolve(values: dict[str, Any]) -> dict[str, Any]:
    """Fill defaults and validate the categorical keys."""
    cfg = {k: values.get(k, default) for k, (_, default) in SCHEMA.items()}
    choices = {
        "task": ("detect", "flow"),
        "recurrent": ("mgu", "gru", "minimalrnn"),
        "activation": ("cssl", "relu"),
        "ledger_mode": ("sparse", "dense"),
    }
    for key, allowed in choices.items():
        if cfg[key] not in allowed:
            raise UsageError(f"config key {key!r} must be one of {', '.join(allowed)}; got {cfg[key]!r}")
    if cfg["textured"] is None:
        cfg["textured"] = cfg["task"] == "flow"
    for k in ("n_train", "n_val"):
        if cfg[k] < 0:
            raise UsageError(f"config key {k!r} must be >= 0")
    for kind in cfg["shape_kinds"]:
        if kind not in SHAPE_KINDS:
            raise UsageError(f"config key 'shape_kinds' has unknown kind {kind!r}")
    if not cfg["betas"]:
        raise UsageError("config key 'betas' is empty")
    return cfg


def manifest_text(command: str, cfg: dict[str, Any]) -> str:
    lines = [
        "# csslkit run manifest",
        f"# command={command}",
        f"# version={__version__}",
    ]
    lines += [f"{k}={_fmt_value(cfg[k])}" for k in sorted(cfg)]
    return "\n".join(lines) + "\n"


def generator_config(cfg: dict[str, Any]) -> GeneratorConfig:
    kw = {f.name: cfg[f.name] for f in fields(GeneratorConfig)}
    kw["foreground"] = tuple(kw["foreground"])
    return GeneratorConfig(**kw)


def train_config(cfg: dict[str, Any]) -> TrainConfig:
    return TrainConfig(**{f.name: cfg[f.name] for f in fields(TrainConfig)})


def build_model(cfg: dict[str, Any], activation: str | None = None):
    act = activation or cfg["activation"]
    if cfg["task"] == "detect":
        spec = BackboneSpec.seed_pattern(recurrent_kind=cfg["recurrent"], activation=act, alpha=cfg["alpha"])
        dcfg = DetectorConfig(cfg["height"], cfg["width"], pos_weight=cfg["pos_weight"], box_weight=cfg["box_weight"])
        return Detector(spec, dcfg, seed=cfg["seed"])
    fcfg = FlowConfig(cfg["height"], cfg["width"], recurrent_kind=cfg["recurrent"], activation=act, alpha=cfg["alpha"])
    return FlowNet(fcfg, seed=cfg["seed"])


# ---------------------------------------------------------------------------
# data on disk


def _seq_name(i: int) -> str:
    return f"seq_{i:05d}"


def write_split(directory: Path, gcfg: GeneratorConfig, n: int, seed: int) -> None:
    directory.mkdir(parents=True, exist_ok=True)
    for i in range(n):
        stream, truth = generate_moving_shapes(gcfg, seed + i)
        write_events(stream, directory / f"{_seq_name(i)}.evt")
        write_truth(truth, directory / f"{_seq_name(i)}.tru")


def load_split(directory: Path, gcfg: GeneratorConfig) -> list[Sample]:
    if not directory.is_dir():
        raise DataError(f"dataset directory not found: {directory}")
    samples = []
    for evt in sorted(directory.glob("seq_*.evt")):
        tru = evt.with_suffix(".tru")
        if not tru.exists():
            raise DataError(f"missing truth file for {evt}: expected {tru}")
        stream = read_events(evt)
        if (stream.width, stream.height) != (gcfg.width, gcfg.height):
            raise DataError(f"{evt}: sensor {stream.width}x{stream.height} does not match config {gcfg.width}x{gcfg.height}")
        samples.append(Sample(bin_frames(stream, gcfg), read_truth(tru)))
    return samples


def load_dataset(cfg: dict[str, Any]) -> tuple[list[Sample], list[Sample]]:
    root = Path(cfg["data"])
    gcfg = generator_config(cfg)
    train_set = load_split(root / "train", gcfg)
    val_set = load_split(root / "val", gcfg)
    if not train_set:
        raise DataError(f"no training sequences under {root / 'train'}")
    return train_set, val_set or train_set


# ---------------------------------------------------------------------------
# checkpoints


def _load_into(model, path: str, what: str = "checkpoint") -> dict[str, np.ndarray]:
    if not path:
        raise UsageError(f"config key {what!r} is required for this command")
    if not Path(path).exists():
        raise DataError(f"{what} not found: {path}")
    params, _ = load_checkpoint(path)
    tensors = model.tensors()
    model_keys = {k for k in tensors}
    missing = sorted(model_keys - {k for k in params if not k.startswith("opt.")})
    if missing:
        raise CheckpointError(f"{path}: checkpoint lacks parameter {missing[0]!r} required by the configured model")
    for k, t in tensors.items():
        if params[k].shape != t.data.shape:
            raise CheckpointError(f"{path}: parameter {k!r} has shape {params[k].shape}, model expects {t.data.shape}")
    extra = sorted(k for k in params if k not in model_keys and not k.startswith("opt."))
    if extra:
        raise CheckpointError(f"{path}: checkpoint parameter {extra[0]!r} does not exist in the configured model")
    restore(model, {k: params[k] for k in model_keys})
    return params


def _save(path: Path, model, manifest: str, state: AdamState | None, epoch: int) -> None:
    arrays = dict(snapshot(model))
    arrays["opt.epoch"] = np.array(float(epoch))
    if state is not None:
        arrays["opt.t"] = np.array(float(state.t))
        for i, (m, v) in enumerate(zip(state.m, state.v)):
            arrays[f"opt.m.{i:04d}"] = m
            arrays[f"opt.v.{i:04d}"] = v
    save_checkpoint(path, arrays, manifest)


def _opt_state(params: dict[str, np.ndarray]) -> tuple[AdamState | None, int]:
    epoch = int(params.get("opt.epoch", np.array(0.0)))
    if "opt.t" not in params:
        return None, epoch
    n = sum(1 for k in params if k.startswith("opt.m."))
    m = [params[f"opt.m.{i:04d}"].copy() for i in range(n)]
    v = [params[f"opt.v.{i:04d}"].copy() for i in range(n)]
    return AdamState(m, v, int(params["opt.t"])), epoch


# ---------------------------------------------------------------------------
# reports


def _csv(rows: list[list[Any]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for r in rows:
        writer.writerow([_fmt_value(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
    return buf.getvalue()


def _density_outputs(out: Path, ledger, plots: bool, prefix: str = "") -> None:
    rows = density_report(ledger)
    (out / f"{prefix}density.csv").write_text(report_csv(rows))
    (out / f"{prefix}sop_breakdown.csv").write_text(threshold_breakdown_csv(rows))
    if plots:
        layer_rows = [r for r in rows if r.layer != "TOTAL"]
        svg = bar_chart([r.layer for r in layer_rows], [r.density for r in layer_rows], "Activation density per layer", "density")
        (out / f"{prefix}density.svg").write_text(svg)


# ---------------------------------------------------------------------------
# commands


def cmd_gen(cfg: dict[str, Any], out: Path) -> int:
    gcfg = generator_config(cfg)
    write_split(out / "train", gcfg, cfg["n_train"], cfg["seed"])
    write_split(out / "val", gcfg, cfg["n_val"], cfg["seed"] + VAL_SEED_OFFSET)
    return EXIT_OK


def _log_csv(logs) -> str:
    return _csv([list(LOG_HEADER)] + [log.csv_row() for log in logs])


def cmd_train(cfg: dict[str, Any], out: Path, manifest: str) -> int:
    train_set, val_set = load_dataset(cfg)
    tcfg = train_config(cfg)
    model = build_model(cfg)
    state, start = None, 0
    prior_logs = ""
    if cfg["resume"]:
        params = _load_into(model, cfg["resume"], "resume")
        state, start = _opt_state(params)
        prev_log = Path(cfg["resume"]).parent / "train_log.csv"
        if prev_log.exists():
            prior_logs = "".join(prev_log.read_text().splitlines(keepends=True)[1:])
    ckpt = out / "checkpoint.ckpt"
    try:
        model, logs, state = train(model, train_set, tcfg, val_set, start_epoch=start, opt_state=state)
    except NumericalAbort as exc:
        restore(model, exc.params)
        _save(out / "last_good.ckpt", model, manifest, None, exc.epoch)
        print(f"csslkit: numerical abort: {exc}; last good parameters in {out / 'last_good.ckpt'}", file=sys.stderr)
        return EXIT_NUMERIC
    _save(ckpt, model, manifest, state, tcfg.epochs)
    text = _log_csv(logs)
    header, body = text.split("\n", 1)
    (out / "train_log.csv").write_text(header + "\n" + prior_logs + body)
    ev = evaluate(model, val_set, tcfg.seq_len, tcfg.eval_batch, cfg["ledger_mode"])
    _density_outputs(out, ev.ledger, plots=False)
    return EXIT_OK


def _metric_rows(task: str, ev) -> list[list[Any]]:
    rows = [["name", "value"]]
    if task == "detect":
        rows.append(["ap50", ev.metric])
    else:
        rows += [["aee", ev.metric], ["outlier_pct", ev.outlier_pct]]
    rows += [["gsop_per_frame", ev.gsop], ["mean_density", ev.mean_density], ["conv_density", ev.conv_density]]
    return rows


def cmd_eval(cfg: dict[str, Any], out: Path) -> int:
    _, val_set = load_dataset(cfg)
    model = build_model(cfg)
    _load_into(model, cfg["checkpoint"])
    ev = evaluate(model, val_set, cfg["seq_len"], cfg["eval_batch"], cfg["ledger_mode"])
    (out / "metrics.csv").write_text(_csv(_metric_rows(cfg["task"], ev)))
    _density_outputs(out, ev.ledger, cfg["plots"])
    return EXIT_OK


def _stage1(cfg, activation, train_set, val_set, path: str):
    model = build_model(cfg, activation)
    if path:
        _load_into(model, path, "baseline_checkpoint" if activation == "relu" else "checkpoint")
    else:
        train(model, train_set, train_config(cfg), val_set)
    return model


def cmd_sweep(cfg: dict[str, Any], out: Path, baseline: bool) -> int:
    train_set, val_set = load_dataset(cfg)
    if not cfg["checkpoint"]:
        raise UsageError("config key 'checkpoint' (stage-1 model) is required for sweep")
    tcfg = train_config(cfg)
    kw = dict(finetune_frac=cfg["finetune_frac"], lr_frac=cfg["finetune_lr_frac"])
    model = _stage1(cfg, None, train_set, val_set, cfg["checkpoint"])
    try:
        rows = two_stage_sweep(model, train_set, cfg["betas"], tcfg, val_set, **kw)
        base_rows = None
        if baseline:
            relu = _stage1(cfg, "relu", train_set, val_set, cfg["baseline_checkpoint"])
            base_rows = two_stage_sweep(relu, train_set, cfg["betas"], tcfg, val_set, **kw)
    except NumericalAbort as exc:
        print(f"csslkit: numerical abort during sweep: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    header = ["beta", "metric", "gsop", "mean_density", "conv_density"]
    if base_rows is not None:
        header += ["relu_metric", "relu_gsop", "relu_mean_density", "relu_conv_density"]
    table = [header]
    for i, r in enumerate(rows):
        line = [r.label, r.metric, r.gsop, r.mean_density, r.conv_density]
        if base_rows is not None:
            b = base_rows[i]
            line += [b.metric, b.gsop, b.mean_density, b.conv_density]
        table.append(line)
    (out / "sweep.csv").write_text(_csv(table))
    if cfg["plots"]:
        swept = [r for r in rows if r.beta is not None]
        order = sorted(range(len(swept)), key=lambda i: swept[i].beta)
        xs = [swept[i].beta for i in order]
        series = {"CSSL": [swept[i].gsop for i in order]}
        if base_rows is not None:
            series["ReLU + L1"] = [base_rows[i].gsop for i in order]
        (out / "sweep_gsop.svg").write_text(line_chart(xs, series, "GSOp per frame vs beta", "beta", "GSOp", log_x=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_arg_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="csslkit", description="Context-aware sparse recurrent networks on synthetic event data.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", required=True, help="flat key=value config file (a run manifest works too)")
    p.add_argument("--out", default="out", help="output directory (default: out)")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--task", choices=("detect", "flow"), help="overrides the config task")
    p.add_argument("--recurrent", choices=("mgu", "gru", "minimalrnn"), help="overrides the recurrent unit")
    p.add_argument("--baseline", action="store_true", help="sweep: add ReLU + L1 baseline columns")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_arg_parser().parse_args(argv)
    out = Path(args.out)
    try:
        try:
            text = Path(args.config).read_text()
        except OSError as exc:
            raise UsageError(f"cannot read config {args.config}: {exc.strerror}") from exc
        values = parse_config(text, args.config)
        for key in ("seed", "task", "recurrent"):
            if getattr(args, key) is not None:
                values[key] = getattr(args, key)
        cfg = resolve(values)
        try:
            gen_cfg, train_cfg = generator_config(cfg), train_config(cfg)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        del gen_cfg, train_cfg
        out.mkdir(parents=True, exist_ok=True)
        manifest = manifest_text(args.command, cfg)
        (out / "manifest.txt").write_text(manifest)
        if args.command == "gen":
            return cmd_gen(cfg, out)
        if args.command == "train":
            return cmd_train(cfg, out, manifest)
        if args.command == "eval":
            return cmd_eval(cfg, out)
        return cmd_sweep(cfg, out, args.baseline)
    except UsageError as exc:
        print(f"csslkit: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, EventFormatError, CheckpointError, ConfigError, FileNotFoundError) as exc:
        print(f"csslkit: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
