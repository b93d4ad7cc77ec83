"""Command-line entry point.

Subcommands: synth, simulate, featurize, train, distill, adapt, spot, eval,
ladder.  Each takes a JSON config file plus dotted --set overrides; every run
writes a provenance record (config snapshot, seed, version) into its output
directory so it can be re-run bit-identically.

Exit codes: 0 success, 2 usage error, 3 config error, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, kws, netcore, pipeline, simkit
from .pipeline import (
    FarFieldConfig,
    LadderConfig,
    SynthTaskSpec,
    TrainConfig,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_RUNTIME = 4


class ConfigError(ValueError):
    pass


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})")
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return cfg


def _apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    cfg = json.loads(json.dumps(cfg))  # deep copy
    for ov in overrides:
        if "=" not in ov:
            raise ConfigError(f"override {ov!r} is not key=value")
        key, _, raw = ov.partition("=")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = value
    return cfg


def _build(cls, cfg: dict, section: str | None = None):
    """Instantiate a config dataclass, rejecting unknown keys."""
    data = cfg.get(section, {}) if section else cfg
    if not isinstance(data, dict):
        raise ConfigError(f"config section {section!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys for {cls.__name__}: {sorted(unknown)}")
    coerced = {}
    for f in dataclasses.fields(cls):
        if f.name in data:
            v = data[f.name]
            coerced[f.name] = tuple(v) if isinstance(v, list) else v
    try:
        return cls(**coerced)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad {cls.__name__} config: {e}")


def _prepare_out_dir(path: str, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_provenance(out_dir: Path, args, cfg: dict) -> None:
    record = {
        "toolkit_version": __version__,
        "command": args.command,
        "argv": sys.argv[1:],
        "config": cfg,
        "overrides": args.set,
        "seed": getattr(args, "seed", None),
    }
    (out_dir / "provenance.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def _task_spec(cfg: dict, seed: int | None) -> SynthTaskSpec:
    spec = _build(SynthTaskSpec, cfg, "task")
    if seed is not None:
        spec = dataclasses.replace(spec, seed=seed)
    return spec


def _train_cfg(cfg: dict, seed: int | None) -> TrainConfig:
    tc = _build(TrainConfig, cfg, "train")
    if seed is not None:
        tc = dataclasses.replace(tc, seed=seed)
    return tc


def _model_spec(cfg: dict, section: str = "model") -> netcore.ModelSpec:
    data = cfg.get(section)
    if data is None:
        raise ConfigError(f"config needs a {section!r} section with the model spec")
    return netcore.ModelSpec.from_dict(data)


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args, cfg):
    out = _prepare_out_dir(args.out, args.force)
    spec = _task_spec(cfg, args.seed)
    manifest = pipeline.synth_corpus(spec, args.count, out, workers=args.workers)
    _write_provenance(out, args, cfg)
    print(f"wrote {len(manifest)} utterances to {out}")
    return EXIT_OK


def cmd_simulate(args, cfg):
    out = _prepare_out_dir(args.out, args.force)
    far = _build(FarFieldConfig, cfg, "farfield")
    if args.seed is not None:
        far = dataclasses.replace(far, seed=args.seed)
    manifest = pipeline.read_manifest(args.manifest)
    result = pipeline.simulate_corpus(manifest, far, out, workers=args.workers)
    _write_provenance(out, args, cfg)
    print(f"simulated {len(result)} far-field utterances to {out}")
    return EXIT_OK


def cmd_featurize(args, cfg):
    out = _prepare_out_dir(args.out, args.force)
    spec = _task_spec(cfg, args.seed)
    manifest = pipeline.read_manifest(args.manifest)
    result = pipeline.featurize_corpus(manifest, spec, out, workers=args.workers)
    _write_provenance(out, args, cfg)
    print(f"featurized {len(result)} utterances to {out}")
    return EXIT_OK


def cmd_train(args, cfg):
    out = _prepare_out_dir(args.out, args.force)
    spec = _task_spec(cfg, None)
    tc = _train_cfg(cfg, args.seed)
    model_spec = _model_spec(cfg)
    items = pipeline.items_from_manifest(pipeline.read_manifest(args.manifest), spec)
    net = netcore.init_network(model_spec, np.random.default_rng(tc.seed))
    net, log = pipeline.train(net, items, tc, checkpoint_dir=out / "checkpoints")
    netcore.save_checkpoint(net, out / "final.ckpt")
    (out / "loss_log.json").write_text(json.dumps(log) + "\n")
    _write_provenance(out, args, cfg)
    print(f"trained {tc.epochs} epochs; final loss {log[-1]:.6f}; model at {out / 'final.ckpt'}")
    return EXIT_OK


def cmd_distill(args, cfg):
    out = _prepare_out_dir(args.out, args.force)
    spec = _task_spec(cfg, None)
    tc = _train_cfg(cfg, args.seed)
    student_spec = _model_spec(cfg, "student")
    teacher = netcore.load_checkpoint(args.teacher)
    items = pipeline.items_from_manifest(pipeline.read_manifest(args.manifest), spec)
    student, log = pipeline.distill(
        teacher, student_spec, items, tc,
        cache_dir=out / "teacher_cache", checkpoint_dir=out / "checkpoints",
    )
    netcore.save_checkpoint(student, out / "final.ckpt")
    (out / "loss_log.json").write_text(json.dumps(log) + "\n")
    _write_provenance(out, args, cfg)
    print(f"distilled student; final loss {log[-1]:.6f}; model at {out / 'final.ckpt'}")
    return EXIT_OK


def cmd_adapt(args, cfg):
    out = _prepare_out_dir(args.out, args.force)
    spec = _task_spec(cfg, None)
    tc = _train_cfg(cfg, args.seed)
    teacher = netcore.load_checkpoint(args.teacher)
    items = pipeline.items_from_manifest(pipeline.read_manifest(args.manifest), spec)
    student, log = pipeline.adapt(teacher, items, tc, checkpoint_dir=out / "checkpoints")
    netcore.save_checkpoint(student, out / "final.ckpt")
    (out / "loss_log.json").write_text(json.dumps(log) + "\n")
    _write_provenance(out, args, cfg)
    print(f"adapted student; final loss {log[-1]:.6f}; model at {out / 'final.ckpt'}")
    return EXIT_OK


def cmd_spot(args, cfg):
    spec = _task_spec(cfg, None)
    net = netcore.load_checkpoint(args.model)
    w = simkit.read_wav(args.input)
    feats = pipeline.featurize_waveform(w, spec)
    post = netcore.forward(net, feats.frames)
    det = kws.spot(post, pipeline.KEYWORD_MODEL)
    accept = kws.decide(det, args.threshold)
    print(f"score    {det.score:.6f}")
    print(f"segment  [{det.segment[0]}, {det.segment[1]}]")
    print(f"peaks    frames {det.peak_frames} posteriors "
          + " ".join(f"{p:.4f}" for p in det.peak_posteriors))
    print(f"decision {'accept' if accept else 'reject'} (threshold {args.threshold})")
    return EXIT_OK


def cmd_eval(args, cfg):
    records = kws.read_scores(args.scores)
    scores = [(s, p) for _, s, p, _ in records]
    durations = [(-1.0 if d is None else d / 3600.0) for _, _, _, d in records]
    has_dur = all(d >= 0 for d in durations)
    if args.threshold is not None:
        th = args.threshold
    else:
        th = kws.threshold_at_ca(scores, args.target_ca)
    report = kws.evaluate(
        scores, th,
        durations_hours=durations if has_dur else None,
        with_roc=args.roc is not None,
    )
    print(report.format_text())
    if args.roc is not None:
        with open(args.roc, "w") as fh:
            fh.write("# threshold CA FA\n")
            for row in report.roc:
                fh.write(f"{row[0]:.6f}\t{row[1]:.6f}\t{row[2]:.6f}\n")
    return EXIT_OK


def cmd_ladder(args, cfg):
    out = _prepare_out_dir(args.out, args.force)
    lc = _build(LadderConfig, cfg, "ladder")
    lc = dataclasses.replace(lc, out_dir=str(out), **(
        {"seed": args.seed} if args.seed is not None else {}
    ))
    report = pipeline.ablation_ladder(lc)
    _write_provenance(out, args, cfg)
    print(report.format_text())
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="farspot",
        description="Far-field wake-word toolkit: simulation, distillation, CTC spotting.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_out=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted config override, repeatable")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        if needs_out:
            p.add_argument("--out", required=True, help="output directory")
            p.add_argument("--force", action="store_true",
                           help="allow writing into a non-empty output directory")

    def workers(p):
        p.add_argument("--workers", type=int, default=1,
                       help="utterance-level parallelism (results independent of N)")

    p = sub.add_parser("synth", help="generate a synthetic wake-word corpus")
    common(p)
    workers(p)
    p.add_argument("--count", type=int, required=True)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("simulate", help="render far-field WAVs for a clean manifest")
    common(p)
    workers(p)
    p.add_argument("--manifest", required=True)
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("featurize", help="extract feature archives for a manifest")
    common(p)
    workers(p)
    p.add_argument("--manifest", required=True)
    p.set_defaults(fn=cmd_featurize)

    p = sub.add_parser("train", help="train a model (hard CE or CTC)")
    common(p)
    p.add_argument("--manifest", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("distill", help="teacher-student compression training")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.set_defaults(fn=cmd_distill)

    p = sub.add_parser("adapt", help="teacher-student domain adaptation on parallel pairs")
    common(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--teacher", required=True, help="teacher checkpoint")
    p.set_defaults(fn=cmd_adapt)

    p = sub.add_parser("spot", help="run the keyword spotter on one WAV")
    common(p, needs_out=False)
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--input", required=True, help="input WAV (16 kHz mono PCM)")
    p.add_argument("--threshold", type=float, default=0.5)
    p.set_defaults(fn=cmd_spot)

    p = sub.add_parser("eval", help="CA/FA report from a score file")
    common(p, needs_out=False)
    p.add_argument("--scores", required=True)
    p.add_argument("--target-ca", type=float, default=0.96)
    p.add_argument("--threshold", type=float, default=None,
                   help="evaluate at a fixed threshold instead of the CA target")
    p.add_argument("--roc", default=None, help="write a threshold/CA/FA table here")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ladder", help="run the single-factor-change experiment ladder")
    common(p)
    p.set_defaults(fn=cmd_ladder)

    return parser


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _apply_overrides(_load_config(args.config), args.set)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.fn(args, cfg)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - map any failure to a diagnostic
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
