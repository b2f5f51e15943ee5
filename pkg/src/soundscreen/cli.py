"""Command-line entry point: ``soundscreen <command> ...``.

Exit codes: 0 ok, 1 unexpected failure, 2 input/spec error, 3 training
error, 4 audit failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path


from . import cohort, evaluation, net, plots, progression, synthkit
from .audio_io import read_wav, resample
from .config import RunConfig, parse_assignments
from .errors import ConfigError, EmptySplit, SoundScreenError, SpecError
from .features import SpectrogramConfig, WindowPolicy, encode_lmel, log_mel_spectrogram, windows
from .pipeline import FeatureStore, IndexEntry, featurize_record

log = logging.getLogger("soundscreen")

EXIT_OK, EXIT_UNEXPECTED, EXIT_INPUT, EXIT_TRAIN, EXIT_AUDIT = 0, 1, 2, 3, 4


class CommandError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# helpers


def _spec_config(cfg: RunConfig) -> SpectrogramConfig:
    f = cfg.section("features")
    f.pop("t_frames")
    return SpectrogramConfig(**f)


def _train_config(cfg: RunConfig) -> net.TrainConfig:
    return net.TrainConfig(seed=cfg["seed"], **cfg.section("train"))


def _write_run_config(out_dir: Path, cfg: RunConfig, command: str, args: dict) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"command": command, "arguments": args, "config": cfg.values}
    (out_dir / "run_config.json").write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")


def _read_manifest(path: Path) -> list[cohort.SampleRecord]:
    try:
        return cohort.parse_manifest(path.read_text())
    except OSError as exc:
        raise CommandError(EXIT_INPUT, f"cannot read manifest: {exc}") from None


def _read_split(path: Path) -> cohort.SplitAssignment:
    try:
        return cohort.SplitAssignment.from_json(json.loads(path.read_text()))
    except (OSError, KeyError, ValueError) as exc:
        raise CommandError(EXIT_INPUT, f"cannot read split {path}: {exc}") from None


def _load_model(path: Path, cfg: RunConfig):
    params = net.load_checkpoint(path.read_bytes())
    meta_path = path.with_name("metadata.json")
    t_frames = cfg["features.t_frames"]
    if meta_path.exists():
        t_frames = json.loads(meta_path.read_text()).get("t_frames", t_frames)
    return params, t_frames


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# --------------------------------------------------------------------------
# commands


def cmd_synth(args, cfg: RunConfig) -> int:
    spec = synthkit.load_spec(args.spec)
    if args.seed_given:
        spec = synthkit.CohortSpec.from_dict({**spec.to_dict(), "seed": cfg["seed"]})
    out = Path(args.out_dir)
    records = synthkit.generate(spec, out)
    _write_run_config(out, cfg, "synth", {"spec": str(args.spec), "out_dir": str(out), "cohort": spec.to_dict()})
    print(f"wrote {len(records)} recordings to {out}")
    return EXIT_OK


def cmd_featurize(args, cfg: RunConfig) -> int:
    manifest = Path(args.manifest)
    records = _read_manifest(manifest)
    out = Path(args.out_dir)
    spec_cfg = _spec_config(cfg)
    gate = {k: cfg[f"audio.{k}"] for k in ("min_duration_s", "clip_fraction_max", "silence_rms_floor")}

    def work(rec):
        try:
            return featurize_record(rec, manifest.parent, spec_cfg, cfg["audio.sample_rate_hz"], gate)
        except (OSError, SoundScreenError) as exc:
            return exc, None

    threads = cfg["threads"] or os.cpu_count() or 1
    with ThreadPoolExecutor(max_workers=threads) as pool:
        results = list(pool.map(work, records))

    index, rejected = [], []
    for rec, (verdict, values) in zip(records, results):
        if values is None:
            reason = verdict.reason.value if hasattr(verdict, "reason") else f"error: {verdict}"
            rejected.append({"participant_id": rec.participant_id, "session_id": rec.session_id,
                             "modality": rec.modality, "audio_path": rec.audio_path, "reason": reason})
            continue
        rel = f"features/{rec.participant_id}/{rec.session_id}/{rec.modality}.lmel"
        path = out / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(encode_lmel(values, rec.modality))
        index.append(IndexEntry(rec, rel, len(values)))
    out.mkdir(parents=True, exist_ok=True)
    (out / "index.jsonl").write_text("".join(e.to_json() + "\n" for e in index))
    (out / "rejected.jsonl").write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rejected))
    _write_run_config(out, cfg, "featurize", {"manifest": str(manifest), "out_dir": str(out)})
    for r in rejected:
        log.warning("rejected %s: %s", r["audio_path"], r["reason"])
    print(f"featurized {len(index)} recordings, rejected {len(rejected)}")
    if records and len(rejected) / len(records) > cfg["featurize.max_reject_fraction"]:
        print(f"error: {len(rejected)} of {len(records)} recordings rejected", file=sys.stderr)
        return EXIT_INPUT
    return EXIT_OK


def cmd_split(args, cfg: RunConfig) -> int:
    records = _read_manifest(Path(args.manifest))
    mode = cohort.SplitMode(args.mode)
    if mode.value.endswith("_biased"):
        if not args.bias_spec:
            raise CommandError(EXIT_INPUT, f"--bias-spec is required for mode {mode.value}")
        spec = cohort.BiasSpec.from_json(json.loads(Path(args.bias_spec).read_text()))
        if cohort._BIAS_MODE[spec.axis] is not mode:
            raise CommandError(EXIT_INPUT, f"bias spec axis {spec.axis!r} does not match mode {mode.value}")
        split = cohort.inject_bias(records, spec, cfg["seed"])
    else:
        split = cohort.split_participants(
            records, cfg["split.ratios"], mode, cfg["seed"], cfg["split.match_axes"],
            cfg["split.tolerance_pp"], cfg["split.min_test_size"],
        )
    split.report["confounders"] = cohort.confounder_report(records, split)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(split.to_json(), indent=2, sort_keys=True) + "\n")
    _write_run_config(out.parent, cfg, "split", {"manifest": str(args.manifest), "mode": mode.value,
                                                  "bias_spec": args.bias_spec, "out": str(out)})
    print(f"split {mode.value}: " + ", ".join(f"{s}={len(split.participants_in(s))}" for s in cohort.SETS))
    return EXIT_OK


def cmd_train(args, cfg: RunConfig) -> int:
    store = FeatureStore.from_index(args.index)
    split = _read_split(Path(args.split))
    t_frames = cfg["features.t_frames"]
    train_set = store.dataset(store.sessions(split, "train"), t_frames)
    val_set = store.dataset(store.sessions(split, "validation"), t_frames)
    net_cfg = net.NetConfig(t_frames=t_frames, n_mels=cfg["features.n_mels"], **cfg.section("net"))
    try:
        result = net.train(train_set, val_set, net_cfg, _train_config(cfg))
    except EmptySplit as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_TRAIN
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "model.sndm").write_bytes(net.save_checkpoint(result.params))
    (out / "train_log.csv").write_text(result.log_csv())
    meta = {"best_epoch": result.best_epoch, "best_val_auc": result.best_val_auc, "t_frames": t_frames,
            "n_mels": cfg["features.n_mels"], "n_train_sessions": len(train_set), "n_val_sessions": len(val_set),
            "param_count": net.param_count(net_cfg)}
    (out / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    _write_run_config(out, cfg, "train", {"index": str(args.index), "split": str(args.split), "out_dir": str(out)})
    print(f"best epoch {result.best_epoch}, validation AUC {result.best_val_auc:.4f}")
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    store = FeatureStore.from_index(args.index)
    split = _read_split(Path(args.split))
    params, t_frames = _load_model(Path(args.checkpoint), cfg)
    symptomatic = True if args.symptomatic_only else False if args.asymptomatic_only else None
    modalities = [args.modality] if args.modality else net.MODALITIES
    sessions = store.sessions(split, args.subset, modalities, symptomatic)
    scored = store.score(sessions, params, t_frames, split)
    labels = {s.label for s in scored}
    if labels != {0, 1}:
        raise CommandError(EXIT_INPUT, f"{args.subset} selection needs both classes, found {sorted(labels)}")
    axes = args.axes.split(",") if args.axes else cfg["eval.axes"]
    kw = dict(n_resamples=cfg["eval.n_resamples"], seed=cfg["seed"], cluster=cfg["eval.cluster"])
    report = evaluation.subgroup_report(scored, split, axes, cfg["eval.threshold"], **kw)
    thresholds, fpr, tpr = evaluation.roc_points([s.probability for s in scored], [s.label for s in scored])
    sweep = evaluation.threshold_sweep(scored, **kw)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / "report.txt").write_text(report.to_text())
    (out / "roc.csv").write_text(_csv(([f"{t:.17g}", f"{a:.17g}", f"{b:.17g}"] for t, a, b in zip(thresholds, fpr, tpr)),
                                      ["threshold", "fpr", "tpr"]))
    (out / "roc.svg").write_text(plots.roc_svg(fpr, tpr, report.auc.point))
    keys = ["threshold", "sensitivity", "sensitivity_lo", "sensitivity_hi", "specificity", "specificity_lo", "specificity_hi"]
    (out / "thresholds.csv").write_text(_csv(([f"{r[k]:.6f}" for k in keys] for r in sweep), keys))
    (out / "thresholds.svg").write_text(plots.sweep_svg(sweep))
    (out / "scores.csv").write_text(_csv(
        ([s.participant_id, s.session_id, f"{s.probability:.9f}", s.label, int(s.seen_in_training)] for s in scored),
        ["participant_id", "session_id", "probability", "label", "seen_in_training"]))
    _write_run_config(out, cfg, "evaluate", {"checkpoint": str(args.checkpoint), "index": str(args.index),
                                             "split": str(args.split), "subset": args.subset, "axes": axes,
                                             "modality": args.modality, "symptomatic": symptomatic})
    print(report.to_text(), end="")
    return EXIT_OK


def cmd_track(args, cfg: RunConfig) -> int:
    store = FeatureStore.from_index(args.index)
    records = _read_manifest(Path(args.manifest))
    params, t_frames = _load_model(Path(args.checkpoint), cfg)
    wanted = {r.participant_id for r in records}
    sessions = {k: v for k, v in store.sessions().items() if k[0] in wanted}
    scored = store.score(sessions, params, t_frames)
    by_pid: dict[str, list] = {}
    for s in scored:
        by_pid.setdefault(s.participant_id, []).append(s)
    items = []
    for pid in sorted(by_pid):
        traj = progression.build_trajectory(by_pid[pid])
        items.append((traj, progression.classify_progression(traj, cfg["progression.k_min"], cfg["progression.slope_eps"])))
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "trajectories.csv").write_text(progression.trajectories_csv(items))
    (out / "progression.csv").write_text(progression.progression_csv(items))
    if args.sparklines:
        spark = out / "sparklines"
        spark.mkdir(exist_ok=True)
        for traj, call in items:
            days = [(t - traj.timestamps[0]) / progression.SECONDS_PER_DAY for t in traj.timestamps]
            (spark / f"{traj.participant_id}.svg").write_text(
                plots.sparkline_svg(days, traj.probabilities, traj.smoothed, f"{traj.participant_id}: {call.state.value}"))
    _write_run_config(out, cfg, "track", {"checkpoint": str(args.checkpoint), "index": str(args.index),
                                          "manifest": str(args.manifest), "sparklines": args.sparklines})
    counts = {}
    for _, call in items:
        counts[call.state.value] = counts.get(call.state.value, 0) + 1
    print(", ".join(f"{k}={v}" for k, v in sorted(counts.items())))
    return EXIT_OK


def cmd_audit(args, cfg: RunConfig) -> int:
    records = _read_manifest(Path(args.manifest))
    split = _read_split(Path(args.split))
    report = cohort.confounder_report(records, split)
    text = json.dumps(report, indent=2, sort_keys=True) + "\n"
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
    for set_name in cohort.SETS:
        for axis, entry in report[set_name].items():
            flag = "  CONFOUNDED" if entry["confounded"] else ""
            print(f"{set_name:<11}{axis:<10}V={entry['cramers_v']:.3f}{flag}")
    bad = cohort.confounded_axes(report, "train")
    if bad and not args.allow_confounded:
        print(f"audit failed: training set confounded on {', '.join(bad)}", file=sys.stderr)
        return EXIT_AUDIT
    return EXIT_OK


def cmd_predict(args, cfg: RunConfig) -> int:
    params, t_frames = _load_model(Path(args.checkpoint), cfg)
    spec_cfg = _spec_config(cfg)
    session = {}
    for modality in net.MODALITIES:
        path = getattr(args, modality)
        if path:
            clip = resample(read_wav(path), cfg["audio.sample_rate_hz"])
            spec = log_mel_spectrogram(clip, spec_cfg)
            session[modality] = [w.values for w in windows(spec, t_frames, WindowPolicy.tiled_50pct_overlap)]
    if not session:
        raise CommandError(EXIT_INPUT, "give at least one of --breathing, --cough, --voice")
    print(f"{net.predict(session, params):.6f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--workdir", default=".", help="base directory for relative paths")
    common.add_argument("--config", help="TOML config file")
    common.add_argument("--set", action="append", dest="overrides", metavar="KEY=VALUE", help="override a config key")
    common.add_argument("--seed", type=int, help="global seed (overrides config and SOUNDSCREEN_SEED)")
    common.add_argument("--threads", type=int, help="worker cap (default: all cores)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="soundscreen", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic cohort")
    p.add_argument("spec", help="cohort spec (JSON)")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_synth, paths=["spec", "out_dir"])

    p = sub.add_parser("featurize", parents=[common], help="log-mel features for every manifest recording")
    p.add_argument("manifest")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_featurize, paths=["manifest", "out_dir"])

    p = sub.add_parser("split", parents=[common], help="build a train/validation/test split")
    p.add_argument("manifest")
    p.add_argument("out", help="split JSON path")
    p.add_argument("--mode", default="participant_random", choices=[m.value for m in cohort.SplitMode])
    p.add_argument("--bias-spec", help="BiasSpec JSON for *_biased modes")
    p.set_defaults(func=cmd_split, paths=["manifest", "out", "bias_spec"])

    p = sub.add_parser("train", parents=[common], help="train the network")
    p.add_argument("index", help="feature index.jsonl")
    p.add_argument("split")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_train, paths=["index", "split", "out_dir"])

    p = sub.add_parser("evaluate", parents=[common], help="subgroup report, ROC and threshold sweep")
    p.add_argument("checkpoint")
    p.add_argument("index")
    p.add_argument("split")
    p.add_argument("out_dir")
    p.add_argument("--axes", help="comma-separated subgroup axes")
    p.add_argument("--subset", dest="subset", default="test", choices=cohort.SETS, help="which split set to score")
    p.add_argument("--modality", choices=net.MODALITIES, help="score a single modality")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--symptomatic-only", action="store_true")
    g.add_argument("--asymptomatic-only", action="store_true")
    p.set_defaults(func=cmd_evaluate, paths=["checkpoint", "index", "split", "out_dir"])

    p = sub.add_parser("track", parents=[common], help="per-participant progression calls")
    p.add_argument("checkpoint")
    p.add_argument("index")
    p.add_argument("manifest")
    p.add_argument("out_dir")
    p.add_argument("--sparklines", action="store_true", help="write one SVG sparkline per participant")
    p.set_defaults(func=cmd_track, paths=["checkpoint", "index", "manifest", "out_dir"])

    p = sub.add_parser("audit", parents=[common], help="confounder report for a split")
    p.add_argument("manifest")
    p.add_argument("split")
    p.add_argument("--out", help="write the report JSON here")
    p.add_argument("--allow-confounded", action="store_true")
    p.set_defaults(func=cmd_audit, paths=["manifest", "split", "out"])

    p = sub.add_parser("predict", parents=[common], help="probability for one session")
    p.add_argument("checkpoint")
    for m in net.MODALITIES:
        p.add_argument(f"--{m}", metavar="WAV")
    p.set_defaults(func=cmd_predict, paths=["checkpoint", *net.MODALITIES])
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    workdir = Path(args.workdir)
    for name in args.paths:
        value = getattr(args, name, None)
        if value:
            setattr(args, name, workdir / value)
    try:
        text = (workdir / args.config).read_text() if args.config else None
        overrides = parse_assignments(args.overrides)
        if args.seed is not None:
            overrides["seed"] = args.seed
        if args.threads is not None:
            overrides["threads"] = args.threads
        cfg = RunConfig.load(text, overrides)
        args.seed_given = args.seed is not None or bool(os.environ.get("SOUNDSCREEN_SEED"))
        return args.func(args, cfg)
    except CommandError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except SpecError as exc:
        print(f"error: invalid spec field {exc.field}: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ConfigError, SoundScreenError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001
        log.exception("unexpected failure")
        print(f"error: unexpected {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
