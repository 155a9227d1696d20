"""Command-line entry point: ``lantern <command> [--config FILE] [--set key=value ...]``.

Configuration is a flat ``key = value`` file with ``#`` comments.  Keys are
namespaced by the component they configure (``data.``, ``model.``,
``train.``, ``eval.``, ``diff.``) plus a shared ``seed``.  Flags override the
file, and every run writes the resolved config and a reproducibility stamp
into its output directory.

Exit codes: 0 success, 1 usage error, 2 data or validation error, 3 runtime
failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path
from typing import Optional, Sequence

from . import model as M
from .autodiff import ShapeError
from .evaluation import (
    DEFAULT_GRID,
    ablation_suite,
    evaluate,
    gate_histogram,
    segment_eval,
    threshold_sweep,
)
from .synth import (
    DatasetError,
    GeneratorConfig,
    frequency_buckets,
    generate_dataset,
    label_space_diff,
    load_dataset,
    load_manifest,
    manifest_to_dict,
    record_line,
    save_dataset,
    stack,
)
from .training import (
    CheckpointError,
    TrainConfig,
    build_variant,
    load_checkpoint,
    model_config_for,
    save_checkpoint,
    split_users,
    train,
)

log = logging.getLogger("lantern")

COMMANDS = ("generate", "train", "evaluate", "ablate", "sweep", "gate-report", "label-diff")
EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
RESOLVED_NAME = "config.resolved"
STAMP_NAME = "stamp.json"

_SECTIONS = {"data": GeneratorConfig, "model": M.LanternConfig, "train": TrainConfig}
# filled from the shared seed or from the dataset manifest
_DERIVED = {"data": {"seed"}, "model": {"survey_dim", "external_dim", "n_keys"}, "train": {"seed"}}
_EXTRA = {
    "seed": 0,
    "data.path": "",
    "eval.threshold": 0.5,
    "eval.grid": ",".join(str(t) for t in DEFAULT_GRID),
    "eval.averaging": "micro",
    "eval.rare_k": 20,
    "eval.bucket_count": "served",
    "eval.checkpoint": "",
    "eval.n_bins": 50,
    "eval.variants": "survey_only,external_only,fused",
    "diff.before": "",
    "diff.after": "",
}


class UsageError(Exception):
    """Bad command line or config file."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# config


def default_config() -> dict:
    cfg = {"seed": _EXTRA["seed"]}
    for section, cls in _SECTIONS.items():
        for f in fields(cls):
            if f.name not in _DERIVED[section]:
                cfg[f"{section}.{f.name}"] = f.default
    cfg.update(_EXTRA)
    return cfg


def _coerce(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            if raw.lower() not in ("true", "false"):
                raise ValueError(raw)
            return raw.lower() == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise UsageError(f"config key {key!r}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


def parse_assignments(lines: Sequence[str], source: str, base: Optional[dict] = None) -> dict:
    """Apply ``key = value`` lines onto ``base``; unknown keys are errors."""
    cfg = dict(base if base is not None else default_config())
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise UsageError(f"{source} line {lineno}: expected key = value, got {line.strip()!r}")
        key, value = (part.strip() for part in text.split("=", 1))
        if key not in cfg:
            raise UsageError(f"{source} line {lineno}: unknown config key {key!r}")
        cfg[key] = _coerce(key, value, default_config()[key])
    return cfg


def load_config(path: Optional[str], overrides: Sequence[str] = ()) -> dict:
    cfg = default_config()
    if path:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise UsageError(f"cannot read config file {path}: {exc.strerror}") from exc
        cfg = parse_assignments(text.splitlines(), path, cfg)
    return parse_assignments(overrides, "--set", cfg)


def format_config(cfg: dict) -> str:
    return "".join(f"{k} = {cfg[k]}\n" for k in sorted(cfg))


def _section(cfg: dict, name: str) -> dict:
    prefix = name + "."
    return {k[len(prefix):]: v for k, v in cfg.items() if k.startswith(prefix)}


def generator_config(cfg: dict) -> GeneratorConfig:
    data = {k: v for k, v in _section(cfg, "data").items() if k != "path"}
    return GeneratorConfig(**data, seed=cfg["seed"])


def train_config(cfg: dict, **override) -> TrainConfig:
    return TrainConfig(**{**_section(cfg, "train"), "seed": cfg["seed"], **override})


def _grid(cfg: dict) -> list[float]:
    try:
        return [float(t) for t in str(cfg["eval.grid"]).split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"eval.grid must be comma-separated numbers, got {cfg['eval.grid']!r}") from None


# ---------------------------------------------------------------------------
# digests and stamps


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def dataset_digest(manifest, records) -> str:
    """Digest of the dataset content as it would be serialized."""
    h = hashlib.sha256()
    h.update(json.dumps(manifest_to_dict(manifest), sort_keys=True).encode("utf-8"))
    for r in records:
        h.update(record_line(r).encode("utf-8"))
        h.update(b"\n")
    return h.hexdigest()


def write_stamp(out: Path, command: str, cfg: dict, data_digest: Optional[str]) -> dict:
    artifacts = {
        p.relative_to(out).as_posix(): sha256_file(p)
        for p in sorted(out.rglob("*"))
        if p.is_file() and p.name != STAMP_NAME
    }
    resolved = format_config(cfg)
    stamp = {
        "command": command,
        "seed": cfg["seed"],
        "config": {k: cfg[k] for k in sorted(cfg)},
        "config_sha256": hashlib.sha256(resolved.encode("utf-8")).hexdigest(),
        "dataset_digest": data_digest,
        "artifacts": artifacts,
    }
    (out / STAMP_NAME).write_text(json.dumps(stamp, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return stamp


# ---------------------------------------------------------------------------
# shared steps


def _dataset(cfg: dict):
    if cfg["data.path"]:
        return load_dataset(cfg["data.path"])
    return generate_dataset(generator_config(cfg))


def _model_for(cfg: dict, manifest, records, out: Path, variant: Optional[str] = None):
    """(assembly, params, val_idx) from ``eval.checkpoint`` or from a fresh training run."""
    if cfg["eval.checkpoint"]:
        ck = load_checkpoint(cfg["eval.checkpoint"])
        try:
            model_cfg = M.LanternConfig(**ck.configs["model"])
            tcfg = TrainConfig(**ck.configs["train"])
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"checkpoint {cfg['eval.checkpoint']} lacks usable configs ({exc!r})") from exc
        dims = (manifest.survey_dim, manifest.external_dim, manifest.n_keys)
        if dims != (model_cfg.survey_dim, model_cfg.external_dim, model_cfg.n_keys):
            raise DatasetError(
                f"dataset dims (F_s, F_e, d_s)={dims} do not match checkpoint "
                f"({model_cfg.survey_dim}, {model_cfg.external_dim}, {model_cfg.n_keys})"
            )
        assembly = build_variant(tcfg.variant, model_cfg)
        missing = set(assembly.param_names()) - set(ck.params)
        if missing:
            raise CheckpointError(f"checkpoint is missing parameters {sorted(missing)[:5]}")
        _, val_idx = split_users(len(records), tcfg.val_fraction, tcfg.seed)
        return assembly, ck.params, val_idx
    tcfg = train_config(cfg, **({"variant": variant} if variant else {}))
    result = train((manifest, records), tcfg, model_config_for(manifest, **_section(cfg, "model")))
    (out / "train_log.csv").write_text(result.log_csv(), encoding="utf-8")
    return result.assembly, result.params, result.val_idx


# ---------------------------------------------------------------------------
# commands


def cmd_generate(cfg, out):
    manifest, records = generate_dataset(generator_config(cfg))
    save_dataset(manifest, records, out)
    print(f"wrote {len(records)} users x {manifest.n_keys} keys to {out}")
    return dataset_digest(manifest, records)


def cmd_train(cfg, out):
    manifest, records = _dataset(cfg)
    model_cfg = model_config_for(manifest, **_section(cfg, "model"))
    tcfg = train_config(cfg)
    result = train((manifest, records), tcfg, model_cfg)
    save_checkpoint(out / "model.lntn", result.params, result.state,
                    {"model": model_cfg.to_dict(), "train": asdict(tcfg)})
    (out / "train_log.csv").write_text(result.log_csv(), encoding="utf-8")
    last = result.log[-1]
    print(f"{tcfg.variant}: {result.assembly.param_count()} parameters, "
          f"final train loss {last.train_loss:.5f}, val loss {last.val_loss:.5f}")
    return dataset_digest(manifest, records)


def cmd_evaluate(cfg, out):
    manifest, records = _dataset(cfg)
    assembly, params, idx = _model_for(cfg, manifest, records, out)
    x_s, x_e, masks = stack(records)
    y_hat = assembly.predict(x_s[idx], x_e[idx], params)
    t, averaging = cfg["eval.threshold"], cfg["eval.averaging"]
    report = evaluate(y_hat, masks[idx], t, averaging=averaging)
    (out / "metrics.csv").write_text(
        "threshold,precision,recall,f1\n"
        f"{t!r},{report.precision!r},{report.recall!r},{report.f1!r}\n",
        encoding="utf-8",
    )
    rare, frequent = frequency_buckets(masks, cfg["eval.rare_k"], cfg["eval.bucket_count"])
    seg = segment_eval(y_hat, masks[idx], rare, frequent, t, averaging)
    (out / "segments.csv").write_text(seg.to_csv(), encoding="utf-8")
    print(f"P={report.precision:.4f} R={report.recall:.4f} F1={report.f1:.4f} at threshold {t}")
    print(f"rare F1={seg.rare.f1:.4f} frequent F1={seg.frequent.f1:.4f}")
    return dataset_digest(manifest, records)


def cmd_sweep(cfg, out):
    manifest, records = _dataset(cfg)
    assembly, params, idx = _model_for(cfg, manifest, records, out)
    x_s, x_e, masks = stack(records)
    y_hat = assembly.predict(x_s[idx], x_e[idx], params)
    sweep = threshold_sweep(y_hat, masks[idx], _grid(cfg), cfg["eval.averaging"])
    (out / "sweep.csv").write_text(sweep.to_csv(), encoding="utf-8")
    for t, r in sweep.rows:
        print(f"t={t}: P={r.precision:.4f} R={r.recall:.4f} F1={r.f1:.4f}")
    return dataset_digest(manifest, records)


def cmd_ablate(cfg, out):
    manifest, records = _dataset(cfg)
    variants = [v.strip() for v in str(cfg["eval.variants"]).split(",") if v.strip()]
    result = ablation_suite((manifest, records), model_config_for(manifest, **_section(cfg, "model")),
                            train_config(cfg), cfg["eval.threshold"], variants, cfg["eval.averaging"])
    (out / "ablation.csv").write_text(result.to_csv(), encoding="utf-8")
    for name, run in result.runs.items():
        (out / f"train_log_{name}.csv").write_text(run.log_csv(), encoding="utf-8")
    for name, r in result.reports.items():
        print(f"{name:14s} P={r.precision:.4f} R={r.recall:.4f} F1={r.f1:.4f}")
    return dataset_digest(manifest, records)


def cmd_gate_report(cfg, out):
    manifest, records = _dataset(cfg)
    assembly, params, idx = _model_for(cfg, manifest, records, out, variant="fused")
    if assembly.variant != "fused":
        raise DatasetError(f"gate report needs a fused model, checkpoint holds {assembly.variant}")
    x_s, x_e, _ = stack(records)
    gates = M.extract_gate_values(x_s[idx], x_e[idx], params, assembly.cfg)
    hist = gate_histogram(gates, cfg["eval.n_bins"])
    (out / "gates.csv").write_text(hist.to_csv(), encoding="utf-8")
    print(f"{hist.total} gate values: mean {hist.mean:.4f}, "
          f"<0.1 {hist.frac_low:.3f}, >0.9 {hist.frac_high:.3f}")
    return dataset_digest(manifest, records)


def cmd_label_diff(cfg, out):
    if not cfg["diff.before"] or not cfg["diff.after"]:
        raise UsageError("label-diff needs diff.before and diff.after (or --before/--after)")
    paths = [Path(cfg["diff.before"]), Path(cfg["diff.after"])]
    for p in paths:
        if not p.exists():
            raise FileNotFoundError(f"manifest not found: {p}")
    a, b = (load_manifest(p) for p in paths)
    diff = label_space_diff(a, b)
    report = diff.report()
    (out / "label_diff.txt").write_text(report, encoding="utf-8")
    print(report, end="")
    h = hashlib.sha256()
    for m in (a, b):
        h.update(json.dumps(manifest_to_dict(m), sort_keys=True).encode("utf-8"))
    return h.hexdigest()


_HANDLERS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "gate-report": cmd_gate_report,
    "label-diff": cmd_label_diff,
}


# ---------------------------------------------------------------------------
# entry point


def _seed(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError(f"seed must be an unsigned 64-bit integer, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--out", help="output directory (default: runs/<command>)")
    common.add_argument("--seed", type=_seed, help="seed for data generation and training")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key; repeatable")
    common.add_argument("--threshold", type=float, help="decision threshold (eval.threshold)")
    common.add_argument("--grid", help="comma-separated sweep thresholds (eval.grid)")
    common.add_argument("--data", help="existing dataset directory (data.path)")
    common.add_argument("--checkpoint", help="trained checkpoint (eval.checkpoint)")
    common.add_argument("--before", help="earlier manifest or dataset dir (diff.before)")
    common.add_argument("--after", help="later manifest or dataset dir (diff.after)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="lantern", description="Late-fusion survey response prediction.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    helps = {
        "generate": "draw a synthetic survey population",
        "train": "train one model variant and save a checkpoint",
        "evaluate": "metrics and rare/frequent segments at one threshold",
        "ablate": "train and score survey_only, external_only and fused",
        "sweep": "metrics over a threshold grid",
        "gate-report": "histogram of learned fusion gate values",
        "label-diff": "compare the response keys of two manifests",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def _flag_overrides(args) -> list[str]:
    pairs = [("seed", args.seed), ("eval.threshold", args.threshold), ("eval.grid", args.grid),
             ("data.path", args.data), ("eval.checkpoint", args.checkpoint),
             ("diff.before", args.before), ("diff.after", args.after)]
    return [f"{k}={v}" for k, v in pairs if v is not None]


def run(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = load_config(args.config, list(args.overrides) + _flag_overrides(args))
        out = Path(args.out or Path("runs") / args.command)
        out.mkdir(parents=True, exist_ok=True)
        (out / RESOLVED_NAME).write_text(format_config(cfg), encoding="utf-8")
        digest = _HANDLERS[args.command](cfg, out)
        write_stamp(out, args.command, cfg, digest)
        return EXIT_OK
    except UsageError as exc:
        print(f"lantern: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, CheckpointError, ShapeError, ValueError, FileNotFoundError) as exc:
        print(f"lantern: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.debug("runtime failure", exc_info=True)
        print(f"lantern: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
