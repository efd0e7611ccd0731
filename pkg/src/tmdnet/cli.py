"""Command-line entry point: ``tmdnet <command> ...``.

Precedence of settings: packaged defaults < ``--config`` file < ``--set
section.key=value`` < dedicated flags. All randomness derives from the root
seed (``--seed`` or ``experiment.seed``) through :func:`tmdnet.config.derive_seed`.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import RunConfig, derive_seed
from .dataset import (ClassRegime, Segment, SplitSpec, SynthSpec, chronological_split, class_scheme,
                      class_weights, cut_segments, map_classes, split_by_tripleg, synth_dataset)
from .errors import ShapeError, TmdError, TooShortError, ValidationError
from .features import degrade_segment, tripleg_features
from .ingest import attach_labels, parse_labels_file, parse_trajectory_file, split_trips, split_triplegs
from .layers import ModelSpec, build_model, default_spec, load_checkpoint, save_checkpoint
from .metrics import (accuracy_vs_length, confusion_matrix, count_flops, count_params,
                      nearest_rank_percentile, weighted_f1)
from .store import read_manifest, read_store, write_manifest, write_store
from .trainer import TrainConfig, evaluate, fit

log = logging.getLogger("tmdnet")

SETS = ("train", "val", "test")
GPS_CHANNELS = ("speed", "accel")


def _stamp(cfg: RunConfig, seed: int) -> str:
    return f"config_digest={cfg.digest()} seed={seed}"


def _write_csv(path: Path, text: str, cfg: RunConfig, seed: int) -> None:
    path.write_text(f"# {_stamp(cfg, seed)}\n{text}")


def _write_json(path: Path, record: dict) -> None:
    path.write_text(json.dumps(record, sort_keys=True, indent=1) + "\n")


# preprocess -----------------------------------------------------------------

def _user_dirs(input_dir: Path, labels: Path | None):
    """Yield (user id, label file, trajectory files) in sorted order."""
    if labels is not None:
        yield input_dir.name, labels, sorted(input_dir.rglob("*.plt"))
        return
    for lab in sorted(input_dir.rglob("labels.txt")):
        user = lab.parent
        traj = user / "Trajectory"
        files = sorted((traj if traj.is_dir() else user).glob("*.plt"))
        yield str(user.relative_to(input_dir)) or user.name, lab, files


def cmd_preprocess(args, cfg: RunConfig, out: Path) -> int:
    input_dir = Path(args.input)
    if not input_dir.is_dir():
        raise ValidationError(f"input directory {input_dir} is unreadable")
    limits = cfg.limits()
    period = cfg.getfloat("data", "period_s")
    gap = cfg.getfloat("data", "trip_gap_s")
    scheme = class_scheme(cfg.get("data", "scheme"))
    max_len, min_len = cfg.getint("data", "max_len"), cfg.getint("data", "min_len")
    segments: list[Segment] = []
    failures = []
    dropped = 0
    for user, lab_path, files in _user_dirs(input_dir, Path(args.labels) if args.labels else None):
        try:
            spans = parse_labels_file(lab_path.read_text())
        except (OSError, TmdError) as exc:
            failures.append((str(lab_path), str(exc)))
            continue
        points = []
        for f in files:
            try:
                points.extend(parse_trajectory_file(f.read_text()))
            except (OSError, TmdError) as exc:
                failures.append((str(f), str(exc)))
        points.sort(key=lambda p: p.timestamp)
        unique = [p for i, p in enumerate(points) if i == 0 or p.timestamp != points[i - 1].timestamp]
        try:
            labeled = attach_labels(unique, spans)
        except TmdError as exc:
            failures.append((str(lab_path), str(exc)))
            continue
        n = 0
        for trip in split_trips(labeled, gap):
            for leg in split_triplegs(trip):
                leg_id = f"{user}_{n}"
                n += 1
                try:
                    cid = map_classes(leg.mode, scheme)
                    if cid is None:
                        continue
                    series = tripleg_features(leg, limits, period)
                except TooShortError:
                    dropped += 1
                    continue
                except TmdError as exc:
                    failures.append((f"{user}:{leg.mode}", str(exc)))
                    continue
                segments.extend(cut_segments(series, max_len, min_len, cid, leg_id, GPS_CHANNELS))
    if not segments:
        log.warning("no segments produced from %s", input_dir)
    store = out / "store"
    write_store(store, segments, GPS_CHANNELS, scheme.class_names, cfg.digest(), cfg.seed)
    summary = _store_summary(segments, scheme.class_names)
    summary.update(config_digest=cfg.digest(), seed=cfg.seed, dropped_short=dropped,
                   failures=[{"path": p, "error": e} for p, e in failures])
    _write_json(out / "preprocess_summary.json", summary)
    print(json.dumps({k: summary[k] for k in ("segments", "triplegs", "per_class", "length_percentiles")},
                     sort_keys=True))
    for p, e in failures:
        print(f"FAILED {p}: {e}", file=sys.stderr)
    return 0


def _store_summary(segments, class_names) -> dict:
    counts = np.bincount([s.class_id for s in segments], minlength=len(class_names))
    lengths = np.array([s.true_length for s in segments])
    pct = {str(q): nearest_rank_percentile(lengths, q) for q in (10, 50, 90)} if lengths.size else {}
    return {"segments": len(segments), "triplegs": len({s.tripleg_id for s in segments}),
            "per_class": {name: int(c) for name, c in zip(class_names, counts)},
            "length_percentiles": pct}


# split ----------------------------------------------------------------------

def cmd_split(args, cfg: RunConfig, out: Path) -> int:
    header, segments = read_store(args.store)
    if not segments:
        raise ValidationError("store is empty")
    ids = list(segments)
    chrono = args.chronological if args.chronological is not None else cfg.getfloat("split", "chronological")
    if chrono and chrono > 0:
        val, train = chronological_split(ids, chrono)
        sets = (train, val, [])
    else:
        triplegs = list(dict.fromkeys(s.tripleg_id for s in segments.values()))
        fractions = tuple(cfg.getfloat("split", k) for k in SETS)
        parts = split_by_tripleg(triplegs, SplitSpec(fractions, derive_seed(cfg.seed, "split")))
        owner = {t: i for i, part in enumerate(parts) for t in part}
        sets = tuple([sid for sid in ids if owner[segments[sid].tripleg_id] == i] for i in range(3))
    names = header["classes"]
    table = io.StringIO()
    w = csv.writer(table, lineterminator="\n")
    w.writerow(["set", *names, "total"])
    for name, members in zip(SETS, sets):
        write_manifest(out / f"{name}.txt", members, cfg.digest(), cfg.seed, name)
        counts = np.bincount([segments[i].class_id for i in members], minlength=len(names))
        if members and (counts == 0).any():
            log.warning("%s set lacks classes %s", name, [names[i] for i in np.flatnonzero(counts == 0)])
        w.writerow([name, *counts.tolist(), int(counts.sum())])
    _write_csv(out / "split_distribution.csv", table.getvalue(), cfg, cfg.seed)
    print(table.getvalue(), end="")
    return 0


# synth ----------------------------------------------------------------------

def synth_spec_from_config(cfg: RunConfig) -> SynthSpec:
    regimes = []
    for token in cfg.get("synth", "regimes").split():
        mode, mean, std, stop = token.split(":")
        regimes.append(ClassRegime(mode, float(mean), float(std), float(stop)))
    return SynthSpec(tuple(regimes), cfg.getint("synth", "n_per_class"),
                     (cfg.getint("synth", "length_min"), cfg.getint("synth", "length_max")),
                     cfg.getfloat("synth", "noise"), period=cfg.getfloat("data", "period_s"))


def cmd_synth(args, cfg: RunConfig, out: Path) -> int:
    spec = synth_spec_from_config(cfg)
    max_len, min_len = cfg.getint("data", "max_len"), cfg.getint("data", "min_len")
    segments = []
    for s in synth_dataset(spec, derive_seed(cfg.seed, "synth")):
        segments.extend(cut_segments(s.data, max_len, min_len, s.class_id, s.tripleg_id))
    names = tuple(r.mode for r in spec.regimes)
    write_store(out / "store", segments, GPS_CHANNELS, names, cfg.digest(), cfg.seed)
    print(json.dumps(_store_summary(segments, names), sort_keys=True))
    return 0


# train / eval ---------------------------------------------------------------

def model_spec_from_config(cfg: RunConfig, n_classes: int) -> ModelSpec:
    arch = cfg.get("model", "architecture")
    pooling = cfg.get("model", "pooling")
    if arch.endswith(".json"):
        return ModelSpec.from_dict(json.loads(Path(arch).read_text()))
    kw = {"n_classes": n_classes}
    if pooling == "flatten":
        kw["fixed_length"] = cfg.getint("model", "fixed_length")
    return default_spec(arch, pooling, **kw)


def train_config_from(cfg: RunConfig, spec: ModelSpec, seed: int) -> TrainConfig:
    patience = cfg.optional_int("train", "patience")
    return TrainConfig(
        learning_rate=cfg.getfloat("train", "learning_rate"),
        weight_decay=cfg.getfloat("train", "weight_decay"),
        batch_size=cfg.getint("train", "batch_size"),
        optimizer=cfg.get("train", "optimizer"),
        max_epochs=cfg.getint("train", "max_epochs"),
        patience=patience,
        seed=seed,
        pad_mode=cfg.get("train", "pad_mode"),
        fixed_length=spec.fixed_length if spec.head.kind == "flatten" else None,
        dtype=cfg.get("train", "dtype"),
    )


def load_sets(cfg: RunConfig, store_path, manifest_dir, seed: int, fixed_length=None):
    """(class names, {set name: segments}) for the manifests found in ``manifest_dir``."""
    header, segments = read_store(store_path)
    sets = {}
    for name in SETS:
        path = Path(manifest_dir) / f"{name}.txt"
        sets[name] = _select(segments, read_manifest(path), path) if path.exists() else []
    if fixed_length is not None:
        longest = max((s.true_length for v in sets.values() for s in v), default=0)
        if longest > fixed_length:
            raise ShapeError(f"segments up to {longest} steps exceed the fixed length {fixed_length}")
    if cfg.getint("data", "degrade", "0"):
        sets = {name: _degrade(segs, seed, i) for i, (name, segs) in enumerate(sets.items())}
    return tuple(header["classes"]), sets


def _select(segments: dict, ids, path) -> list[Segment]:
    missing = [i for i in ids if i not in segments]
    if missing:
        raise ValidationError(f"{path}: unknown segment ids, first is {missing[0]}")
    return [segments[i] for i in ids]


def _degrade(segments, seed: int, set_index: int):
    rng = np.random.default_rng(derive_seed(seed, "degrade", set_index))
    fractions = rng.uniform(0.1, 1.0, size=len(segments))
    return [degrade_segment(s, float(f), rng) for s, f in zip(segments, fractions)]


def run_training(cfg: RunConfig, store, manifests, seed: int, quiet: bool = False):
    header, _ = read_store(store)
    names = tuple(header["classes"])
    spec = model_spec_from_config(cfg, len(names))
    tcfg = train_config_from(cfg, spec, seed)
    names, sets = load_sets(cfg, store, manifests, seed, tcfg.fixed_length)
    if not sets["train"]:
        raise ValidationError("training manifest selects no segments")
    model = build_model(spec, derive_seed(seed, "init"), np.dtype(tcfg.dtype))
    start = time.time()

    def report(epoch, tl, vl, vf):
        if not quiet:
            vl_s = "-" if vl is None else f"{vl:.4f}"
            vf_s = "-" if vf is None else f"{vf:.3f}"
            print(f"epoch {epoch} train_loss {tl:.4f} val_loss {vl_s} val_f1 {vf_s} "
                  f"({time.time() - start:.0f}s)", file=sys.stderr)

    model, history = fit(model, sets["train"], sets["val"], tcfg, on_epoch=report)
    return model, history, tcfg, names, sets


def cmd_train(args, cfg: RunConfig, out: Path) -> int:
    seed = cfg.seed
    model, history, tcfg, names, sets = run_training(cfg, args.store, args.manifests, seed)
    weights = class_weights(sets["train"], len(names))
    val_f1 = evaluate(model, sets["val"], weights, tcfg)[1] if sets["val"] else None
    save_checkpoint(out / "checkpoint.bin", model,
                    {"config_digest": cfg.digest(), "seed": seed, "train_config": _tcfg_dict(tcfg),
                     "class_names": list(names), "class_weights": weights.tolist()})
    _write_csv(out / "history.csv", history.to_csv(), cfg, seed)
    summary = {"config_digest": cfg.digest(), "seed": seed, "epochs_run": len(history),
               "best_epoch": history.best_epoch, "best_val_loss": history.best_val_loss,
               "final_val_macro_f1": val_f1, "n_params": model.n_scalars()}
    _write_json(out / "train_summary.json", summary)
    print(json.dumps(summary, sort_keys=True))
    return 0


def _tcfg_dict(t: TrainConfig) -> dict:
    d = asdict(t)
    d["betas"] = list(d["betas"])
    return d


def cmd_eval(args, cfg: RunConfig, out: Path) -> int:
    model, manifest = load_checkpoint(args.checkpoint)
    tcfg = TrainConfig(**{**manifest["train_config"], "betas": tuple(manifest["train_config"]["betas"])})
    header, store = read_store(args.store)
    ids = read_manifest(args.manifest)
    if not ids:
        raise ValidationError(f"{args.manifest}: manifest is empty")
    segments = _select(store, ids, args.manifest)
    if len(header["channels"]) != model.spec.input_channels:
        raise ValidationError(f"store has {len(header['channels'])} channels, model expects "
                              f"{model.spec.input_channels}")
    if tcfg.fixed_length is not None and max(s.true_length for s in segments) > tcfg.fixed_length:
        raise ShapeError(f"segments exceed the model's fixed length {tcfg.fixed_length}")
    for p in model.parameters():
        p.data = p.data.astype(np.dtype(tcfg.dtype))
    weights = np.asarray(manifest["class_weights"])
    loss, f1, pred, lab = evaluate(model, segments, weights, tcfg)
    cm = confusion_matrix(pred, lab, model.spec.n_classes, manifest["class_names"])
    curve = accuracy_vs_length(pred, lab, np.array([s.true_length for s in segments]))
    stamp = {"config_digest": manifest.get("config_digest"), "seed": manifest.get("seed")}
    report = {**stamp, "n_segments": len(segments), "loss": loss, "macro_f1": f1,
              "weighted_f1": weighted_f1(cm), "accuracy": cm.accuracy()}
    _write_json(out / "eval_report.json", report)
    head = f"# config_digest={stamp['config_digest']} seed={stamp['seed']}\n"
    (out / "confusion.csv").write_text(head + cm.to_csv())
    (out / "accuracy_vs_length.csv").write_text(head + curve.to_csv())
    print(json.dumps(report, sort_keys=True))
    return 0


# count ----------------------------------------------------------------------

def cmd_count(args, cfg: RunConfig, out: Path) -> int:
    scheme = class_scheme(cfg.get("data", "scheme"))
    spec = model_spec_from_config(cfg, scheme.n_classes)
    length = args.input_length
    if spec.head.kind == "flatten" and length != spec.fixed_length:
        raise ShapeError(f"flatten head built for length {spec.fixed_length}, got {length}")
    flops = count_flops(spec, length, 2 if args.flops_x2 else 1)
    params = count_params(spec)
    assert flops.total_params == params.total_params
    _write_csv(out / "complexity.csv", flops.to_csv(), cfg, cfg.seed)
    line = flops.summary(model=spec.name, config_digest=cfg.digest(), seed=cfg.seed)
    (out / "complexity_summary.json").write_text(line + "\n")
    print(flops.to_csv(), end="")
    print(line)
    return 0


# compare --------------------------------------------------------------------

AXES = {"pooling": ("flatten", "global_avg", "global_max", "gem"),
        "padding": ("zero", "reflection", "wrapping")}


def cmd_compare(args, cfg: RunConfig, out: Path) -> int:
    variants = AXES[args.axis]
    n_seeds = args.n_seeds or cfg.getint("experiment", "n_seeds")
    n_classes = len(read_store(args.store)[0]["classes"])
    rows = []
    for variant in variants:
        key = "model.pooling" if args.axis == "pooling" else "train.pad_mode"
        vcfg = RunConfig({s: dict(v) for s, v in cfg.sections.items()})
        section, _, k = key.partition(".")
        vcfg.sections[section][k] = variant
        scores, errors = [], []
        for i in range(n_seeds):
            seed = cfg.seed + i
            try:
                model, _, tcfg, names, sets = run_training(vcfg, args.store, args.manifests, seed, quiet=True)
                eval_set = sets["val"] or sets["train"]
                f1 = evaluate(model, eval_set, class_weights(sets["train"], len(names)), tcfg)[1]
                scores.append(f1)
            except (TmdError, FloatingPointError) as exc:
                errors.append(f"seed {seed}: {exc}")
        spec = model_spec_from_config(vcfg, n_classes)
        length = spec.fixed_length or args.input_length
        params = count_params(spec).total_params
        flops = count_flops(spec, length).total_flops
        if scores:
            mean, std = float(np.mean(scores)), float(np.std(scores))
        else:
            mean = std = math.nan
        status = "ok" if not errors else ("FAILED" if not scores else f"partial ({len(errors)} failed)")
        rows.append([variant, _cell(mean, scores), _cell(std, scores), len(scores), params, flops, status])
        for e in errors:
            print(f"{variant}: {e}", file=sys.stderr)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([args.axis, "val_f1_mean", "val_f1_std", "n_runs", "params", "flops", "status"])
    w.writerows(rows)
    _write_csv(out / f"compare_{args.axis}.csv", buf.getvalue(), cfg, cfg.seed)
    print(buf.getvalue(), end="")
    return 0


def _cell(value, scores):
    return "FAILED" if not scores else repr(round(value, 6))


# entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tmdnet", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="INI file overriding the packaged defaults")
    p.add_argument("--seed", type=int, help="root seed (overrides experiment.seed)")
    p.add_argument("--out-dir", default=".", help="directory for every output artifact")
    p.add_argument("--threads", type=int, default=1, help="BLAS threads (1 = reproducible)")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any config key; repeatable")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("preprocess", help="raw PLT + label files -> segment store")
    s.add_argument("input", help="directory of user folders (labels.txt + Trajectory/*.plt)")
    s.add_argument("--labels", help="single label file applying to every PLT under input")

    s = sub.add_parser("split", help="store -> train/val/test manifests")
    s.add_argument("store")
    s.add_argument("--chronological", type=float, metavar="VAL_FRACTION",
                   help="first VAL_FRACTION of triplegs to validation, the rest to training")

    sub.add_parser("synth", help="write a synthetic segment store")

    s = sub.add_parser("train", help="fit a model and write checkpoint + history")
    s.add_argument("store")
    s.add_argument("manifests", help="directory holding train.txt / val.txt")
    _model_flags(s)

    s = sub.add_parser("eval", help="metrics of a checkpoint on one manifest")
    s.add_argument("checkpoint")
    s.add_argument("store")
    s.add_argument("manifest")

    s = sub.add_parser("count", help="parameter and FLOP counts of a model spec")
    s.add_argument("--architecture", help="geolife, shl or a spec .json file")
    s.add_argument("--pooling", choices=AXES["pooling"])
    s.add_argument("--fixed-length", type=int)
    s.add_argument("--input-length", type=int, default=500)
    s.add_argument("--flops-x2", action="store_true", help="report 2 FLOPs per MAC")

    s = sub.add_parser("compare", help="pooling or padding comparison over several seeds")
    s.add_argument("axis", choices=sorted(AXES))
    s.add_argument("store")
    s.add_argument("manifests")
    s.add_argument("--n-seeds", type=int)
    s.add_argument("--input-length", type=int, default=500, help="length for FLOP columns")
    _model_flags(s)
    return p


def _model_flags(s):
    s.add_argument("--pooling", choices=AXES["pooling"])
    s.add_argument("--pad-mode", choices=AXES["padding"])
    s.add_argument("--fixed-length", type=int)
    s.add_argument("--max-epochs", type=int)
    s.add_argument("--patience", help="epochs, or 'none' to disable early stopping")
    s.add_argument("--optimizer", choices=("adadelta", "adam"))
    s.add_argument("--learning-rate", type=float)


def _overrides(args) -> dict:
    ov = {}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValidationError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        ov[key.strip()] = value.strip()
    flag_map = {"seed": "experiment.seed", "pooling": "model.pooling", "pad_mode": "train.pad_mode",
                "fixed_length": "model.fixed_length", "max_epochs": "train.max_epochs",
                "patience": "train.patience", "optimizer": "train.optimizer",
                "learning_rate": "train.learning_rate", "architecture": "model.architecture"}
    for attr, key in flag_map.items():
        if getattr(args, attr, None) is not None:
            ov[key] = getattr(args, attr)
    return ov


COMMANDS = {"preprocess": cmd_preprocess, "split": cmd_split, "synth": cmd_synth,
            "train": cmd_train, "eval": cmd_eval, "count": cmd_count, "compare": cmd_compare}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        from threadpoolctl import threadpool_limits
        threadpool_limits(args.threads)
    except ImportError:
        pass
    try:
        cfg = RunConfig.load(args.config, _overrides(args))
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, cfg, out)
    except (TmdError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
