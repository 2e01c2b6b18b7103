"""Command-line harness: generate, train, eval, ablate, gradcheck, report.

Every command is a pure function of (config file, --set overrides, --seed,
input files): outputs are written atomically, JSON is emitted with sorted
keys and no timestamps, and reruns are byte-identical. Config files are
flat `key = value` documents; unknown keys abort before any computation.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import tempfile
from dataclasses import replace

import numpy as np

from .data import (AccuracyCells, DatasetError, GenConfig, LabelVocabulary,
                   PhotoRecord, SplitPair, concat_regions, evaluate,
                   generate_synthetic, load_dataset, protocol_report,
                   region_names, sole_region, split_stats, write_dataset)
from .gradcheck import gradcheck_suite
from .inference import (FusionMode, appearance_only_train_eval, fuse_regions,
                        predict_instance, predict_split)
from .layers import EmbedMode, ValidationError
from .numcore import derive_seed
from .seqmodel import load_checkpoint, save_checkpoint
from .training import TrainConfig, train

METHOD_APPEARANCE = "appearance"
METHOD_RELATION = "relation"
METHOD_FULL = "full"
METHODS = (METHOD_APPEARANCE, METHOD_RELATION, METHOD_FULL)


class ConfigError(ValueError):
    """Bad config file, override, or flag combination."""


# ---------------------------------------------------------------------------
# config files
# ---------------------------------------------------------------------------

def parse_kv_file(path) -> dict[str, str]:
    """Flat `key = value` lines; `#` starts a comment; blanks ignored."""
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
            key, value = line.split("=", 1)
            key = key.strip()
            if not key:
                raise ConfigError(f"{path}:{lineno}: empty key")
            if key in out:
                raise ConfigError(f"{path}:{lineno}: duplicate key {key!r}")
            out[key] = value.strip()
    return out


def _parse_bool(s: str) -> bool:
    low = s.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected boolean, got {s!r}")


def _parse_regions(s: str) -> tuple[str, ...]:
    parts = tuple(p.strip() for p in s.split(",") if p.strip())
    if not parts:
        raise ConfigError(f"expected comma-separated region names, got {s!r}")
    return parts


def _parse_opt_str(s: str) -> str | None:
    return None if s.lower() == "none" else s


def _parse_opt_float(s: str) -> float | None:
    return None if s.lower() == "none" else float(s)


_GEN_FIELDS = {
    "num_identities": int, "num_groups": int, "num_scenes": int,
    "feature_dim": int, "scene_feature_dim": int,
    "prototype_scale": float, "cluster_size": int, "cluster_separation": float,
    "noise_scale": float,
    "co_occurrence_strength": float, "scene_affinity_strength": float,
    "photos_per_split": int, "instances_min": int, "instances_max": int,
    "regions": _parse_regions, "seed": int,
}

_TRAIN_FIELDS = {
    "embed_dim": int, "hidden_dim": int, "unroll": int,
    "learning_rate": float, "decay_factor": float,
    "decay_epoch": int, "total_epochs": int, "batch_size": int,
    "mode": EmbedMode, "use_scene": _parse_bool, "seed": int,
    "region": _parse_opt_str, "grad_clip": _parse_opt_float,
    "feed_predicted": _parse_bool,
}

_GRADCHECK_FIELDS = {"dim": int, "num_seeds": int, "tolerance": float}


def _apply_fields(kv: dict[str, str], schema: dict, what: str) -> dict:
    unknown = sorted(set(kv) - set(schema))
    if unknown:
        raise ConfigError(f"unknown {what} keys: {', '.join(unknown)}")
    out = {}
    for key, raw in kv.items():
        try:
            out[key] = schema[key](raw)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc
    return out


def _gather_kv(args) -> dict[str, str]:
    kv: dict[str, str] = {}
    if args.config:
        kv.update(parse_kv_file(args.config))
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set needs KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        kv[key.strip()] = value.strip()
    return kv


def build_gen_config(args) -> GenConfig:
    cfg = GenConfig(**_apply_fields(_gather_kv(args), _GEN_FIELDS, "generator"))
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    return cfg


def build_train_config(args) -> TrainConfig:
    cfg = TrainConfig(**_apply_fields(_gather_kv(args), _TRAIN_FIELDS, "training"))
    if args.seed is not None:
        cfg.seed = args.seed
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# atomic output
# ---------------------------------------------------------------------------

def _write_atomic(path: str, write_fn) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            write_fn(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_text_atomic(path: str, text: str) -> None:
    _write_atomic(path, lambda fh: fh.write(text))


def write_json_atomic(path: str, obj) -> None:
    write_text_atomic(path, json.dumps(obj, sort_keys=True, indent=2) + "\n")


# ---------------------------------------------------------------------------
# dataset plumbing
# ---------------------------------------------------------------------------

def load_split_pair(data_dir: str) -> tuple[SplitPair, LabelVocabulary]:
    vocab_path = os.path.join(data_dir, "vocabulary.txt")
    set_0, vocab = load_dataset(os.path.join(data_dir, "set_0.jsonl"), vocab_path)
    set_1, _ = load_dataset(os.path.join(data_dir, "set_1.jsonl"), vocab_path)
    return SplitPair(set_0, set_1), vocab


def resolve_region(photos: list[PhotoRecord], region: str | None
                   ) -> tuple[list[PhotoRecord], str]:
    """Pick the feature region to run on. `concat` joins all regions (in
    sorted name order) into one vector per instance; None requires a
    single-region dataset."""
    if region == "concat":
        order = region_names(photos)
        if len(order) < 2:
            raise ConfigError("concat region needs a multi-region dataset")
        return [concat_regions(p, order) for p in photos], "concat"
    if region is None:
        return photos, sole_region(photos)
    if region not in region_names(photos):
        raise ConfigError(f"region {region!r} not in dataset regions {region_names(photos)}")
    return photos, region


def _check_dims(params, photos: list[PhotoRecord], region: str) -> None:
    feat_dim = photos[0].instances[0].region_feats[region].shape[0]
    if params.config.feature_dim != feat_dim:
        raise ConfigError(f"checkpoint expects feature dim {params.config.feature_dim}, "
                          f"dataset region {region!r} has {feat_dim}")
    scene_dim = photos[0].scene_feat.shape[0]
    if params.config.scene_feature_dim != scene_dim:
        raise ConfigError(f"checkpoint expects scene dim {params.config.scene_feature_dim}, "
                          f"dataset has {scene_dim}")


# ---------------------------------------------------------------------------
# protocol runners
# ---------------------------------------------------------------------------

def run_method_direction(method: str, pair: SplitPair, direction: int,
                         num_identities: int, cfg: TrainConfig, budget: int
                         ) -> AccuracyCells:
    """Train on one split, evaluate on the other.

    direction 0 trains on set_0 and evaluates on set_1; direction 1 the
    reverse. The appearance method ignores sequence structure entirely;
    relation is the recurrent model without the scene step; full uses it.
    """
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {METHODS}")
    if direction not in (0, 1):
        raise ConfigError("direction must be 0 or 1")
    train_photos = pair.set_0 if direction == 0 else pair.set_1
    eval_photos = pair.set_1 if direction == 0 else pair.set_0
    region = cfg.region if cfg.region is not None else sole_region(train_photos)

    if method == METHOD_APPEARANCE:
        cells, _ = appearance_only_train_eval(
            train_photos, eval_photos, num_identities, region,
            learning_rate=cfg.learning_rate, decay_factor=cfg.decay_factor,
            decay_epoch=cfg.decay_epoch, total_epochs=cfg.total_epochs,
            batch_size=cfg.batch_size, seed=cfg.seed)
        return cells

    method_cfg = replace(cfg, use_scene=(method == METHOD_FULL), region=region)
    params, _ = train(train_photos, method_cfg, num_identities)
    results = predict_split(params, eval_photos, region, budget, cfg.seed)
    return evaluate(eval_photos, [r.labels for r in results])


def run_ablation(pair: SplitPair, num_identities: int, cfg: TrainConfig,
                 budget: int, seed: int) -> dict:
    """The three-method, two-direction comparison table. Each
    (method, direction) run gets its own derived seed so methods never
    share randomness."""
    rows = []
    for method in METHODS:
        cells = []
        for direction in (0, 1):
            run_cfg = replace(cfg, seed=derive_seed(seed, method, direction))
            cells.append(run_method_direction(method, pair, direction,
                                              num_identities, run_cfg, budget))
        report = protocol_report(cells[0], cells[1])
        rows.append({"method": method, "metrics": report.to_dict()})
    return {"seed": seed, "budget": budget, "num_identities": num_identities,
            "train_config": cfg.to_dict(), "rows": rows}


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _require_out(args) -> str:
    if not args.out:
        raise ConfigError("--out DIR is required for this command")
    os.makedirs(args.out, exist_ok=True)
    return args.out


def cmd_gen(args) -> int:
    cfg = build_gen_config(args)
    out = _require_out(args)
    pair, vocab, meta = generate_synthetic(cfg)

    for name, photos in (("set_0", pair.set_0), ("set_1", pair.set_1)):
        _write_atomic(os.path.join(out, f"{name}.jsonl"),
                      lambda fh, ph=photos: write_dataset(fh, ph))
    _write_atomic(os.path.join(out, "vocabulary.txt"),
                  lambda fh: fh.writelines(n + "\n" for n in vocab.names))
    write_json_atomic(os.path.join(out, "meta.json"), meta)

    for name, photos in (("set_0", pair.set_0), ("set_1", pair.set_1)):
        stats = split_stats(photos)
        print(f"{name}: {stats['photos']} photos, {stats['instances']} instances "
              f"({stats['multi_instances']} in multi-instance photos), "
              f"{stats['identities']} identities")
    return 0


def cmd_train(args) -> int:
    cfg = build_train_config(args)
    out = _require_out(args)
    pair, vocab = load_split_pair(args.data)
    photos = pair.set_0 if args.split == 0 else pair.set_1
    photos, region = resolve_region(photos, cfg.region)
    cfg.region = region

    params, report = train(photos, cfg, vocab.num_identities)
    for epoch, loss in enumerate(report.epoch_losses):
        print(f"epoch {epoch} mean-loss {loss:.6f}")
    save_checkpoint(os.path.join(out, "checkpoint.bin"), params)
    write_json_atomic(os.path.join(out, "train_report.json"), report.to_dict())
    print(f"wrote {os.path.join(out, 'checkpoint.bin')}")
    return 0


def _top_k(probs, k: int = 5) -> list[list]:
    idx = np.argsort(-probs, kind="stable")[:k]
    return [[int(i) + 1, float(probs[i])] for i in idx]


def cmd_eval(args) -> int:
    out = _require_out(args)
    seed = args.seed if args.seed is not None else 0
    pair, vocab = load_split_pair(args.data)
    photos = pair.set_0 if args.split == 0 else pair.set_1

    checkpoints = args.checkpoint or []
    if not checkpoints:
        raise ConfigError("--checkpoint PATH is required (repeat for fusion)")
    regions = args.region or []
    models = [load_checkpoint(path) for path in checkpoints]

    records = []
    if len(models) == 1:
        params = models[0]
        photos_r, region = resolve_region(photos, regions[0] if regions else None)
        _check_dims(params, photos_r, region)
        results = predict_split(params, photos_r, region, args.budget, seed)
        predictions = [r.labels for r in results]
        for photo, res in zip(photos_r, results):
            for inst, fused, label, used in zip(photo.instances, res.fused,
                                                res.labels, res.orderings_used):
                records.append({"photo_id": photo.photo_id,
                                "instance_id": inst.instance_id,
                                "true_label": inst.label,
                                "predicted_label": label,
                                "top": _top_k(fused),
                                "orderings": used})
        method = METHOD_FULL if params.config.use_scene else METHOD_RELATION
        fusion = None
        used_regions = [region]
    else:
        if len(regions) != len(models):
            raise ConfigError("fusion needs one --region per --checkpoint")
        mode = FusionMode(args.fusion)
        arms = []                      # (region, params, photos_r); duplicates allowed
        for params, region in zip(models, regions):
            photos_r, resolved = resolve_region(photos, region)
            _check_dims(params, photos_r, resolved)
            arms.append((resolved, params, photos_r))
        arms.sort(key=lambda a: a[0])
        predictions = []
        base = photos
        for pi, photo in enumerate(base):
            row = []
            for idx in range(photo.size):
                inst_seed = derive_seed(seed, "orderings", photo.photo_id, idx)
                dists = []
                used = 0
                for region, params, photos_r in arms:
                    fused, _, used = predict_instance(params, photos_r[pi], region,
                                                      idx, args.budget, inst_seed)
                    dists.append(fused)
                fused_all, label = fuse_regions(dists, mode)
                row.append(label)
                inst = photo.instances[idx]
                records.append({"photo_id": photo.photo_id,
                                "instance_id": inst.instance_id,
                                "true_label": inst.label,
                                "predicted_label": label,
                                "top": _top_k(fused_all),
                                "orderings": used})
            predictions.append(row)
        method = METHOD_FULL if models[0].config.use_scene else METHOD_RELATION
        fusion = mode.value
        used_regions = [a[0] for a in arms]

    cells = evaluate(photos, predictions)
    write_text_atomic(os.path.join(out, "predictions.jsonl"),
                      "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))
    write_json_atomic(os.path.join(out, "metrics.json"),
                      {"method": method, "regions": used_regions, "fusion": fusion,
                       "budget": args.budget, "seed": seed, "split": args.split,
                       "num_identities": vocab.num_identities,
                       "cells": cells.to_dict()})
    print(f"acc_overall {cells.acc_overall:.4f}  "
          f"acc_multi {_fmt(cells.acc_multi)}  acc_single {_fmt(cells.acc_single)}")
    return 0


def _fmt(x: float | None) -> str:
    return "-" if x is None else f"{x:.4f}"


def cmd_ablate(args) -> int:
    cfg = build_train_config(args)
    out = _require_out(args)
    seed = args.seed if args.seed is not None else cfg.seed
    pair, vocab = load_split_pair(args.data)
    result = run_ablation(pair, vocab.num_identities, cfg, args.budget, seed)
    write_json_atomic(os.path.join(out, "ablation.json"), result)

    print(f"{'method':<12} {'overall':>8} {'multi':>8} {'single':>8}")
    for row in result["rows"]:
        mean = row["metrics"]["mean"]
        print(f"{row['method']:<12} {mean['acc_overall']:>8.4f} "
              f"{_fmt(mean['acc_multi']):>8} {_fmt(mean['acc_single']):>8}")
    return 0


def cmd_gradcheck(args) -> int:
    kv = _apply_fields(_gather_kv(args), _GRADCHECK_FIELDS, "gradcheck")
    dim = kv.get("dim", 6)
    num_seeds = kv.get("num_seeds", 3)
    tolerance = kv.get("tolerance", 1e-5)
    results = gradcheck_suite(dim=dim, seeds=range(num_seeds), tolerance=tolerance)
    worst: dict[str, float] = {}
    for r in results:
        worst[r.name] = max(worst.get(r.name, 0.0), r.max_rel_error)
    failed = {r.name for r in results if not r.passed}
    for name in sorted(worst):
        status = "FAIL" if name in failed else "ok"
        print(f"{status:>4}  {name:<28} max-rel-error {worst[name]:.3e}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_json_atomic(os.path.join(args.out, "gradcheck.json"),
                          {"dim": dim, "num_seeds": num_seeds, "tolerance": tolerance,
                           "blocks": {n: worst[n] for n in sorted(worst)},
                           "failed": sorted(failed)})
    return 1 if failed else 0


def _report_entries(path: str, payload: dict) -> tuple[list[tuple], list[tuple[str, list]]]:
    """Extract (key, cells, num_identities) rows and loss series from one
    metrics/ablation/training file."""
    rows, series = [], []
    if "epoch_losses" in payload:
        series.append((os.path.splitext(os.path.basename(path))[0],
                       payload["epoch_losses"]))
    elif "rows" in payload:
        for row in payload["rows"]:
            key = (row["method"], "-", "-")
            rows.append((key, row["metrics"]["mean"], payload["num_identities"]))
    elif "cells" in payload:
        key = (payload["method"], ",".join(payload["regions"]),
               payload["fusion"] or "-")
        rows.append((key, payload["cells"], payload["num_identities"]))
    else:
        raise ConfigError(f"{path}: not a metrics, ablation, or training report")
    return rows, series


def cmd_report(args) -> int:
    out = _require_out(args)
    if not args.inputs:
        raise ConfigError("report needs at least one metrics file")
    collected: dict[tuple, list[dict]] = {}
    vocab_sizes: dict[tuple, int] = {}
    all_series: list[tuple[str, list]] = []
    for path in args.inputs:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        rows, series = _report_entries(path, payload)
        all_series.extend(series)
        for key, cells, num_ids in rows:
            if key in vocab_sizes and vocab_sizes[key] != num_ids:
                raise ConfigError(f"{path}: vocabulary size {num_ids} conflicts with "
                                  f"{vocab_sizes[key]} for {key}")
            vocab_sizes[key] = num_ids
            collected.setdefault(key, []).append(cells)

    table = []
    for key in sorted(collected):
        runs = collected[key]
        distinct = []
        for cells in runs:
            if cells not in distinct:
                distinct.append(cells)
        entry = {"method": key[0], "regions": key[1], "fusion": key[2],
                 "runs": len(runs), "distinct_runs": len(distinct)}
        for cell in ("acc_overall", "acc_multi", "acc_single"):
            values = [c[cell] for c in distinct if c[cell] is not None]
            if values:
                entry[f"{cell}_mean"] = sum(values) / len(values)
                entry[f"{cell}_spread"] = max(values) - min(values)
            else:
                entry[f"{cell}_mean"] = None
                entry[f"{cell}_spread"] = None
        table.append(entry)

    write_json_atomic(os.path.join(out, "report.json"), {"rows": table})
    write_text_atomic(os.path.join(out, "method_accuracy.tsv"),
                      "".join(f"{e['method']}\t{e['regions']}\t{e['fusion']}\t"
                              f"{e['acc_overall_mean']}\n" for e in table))
    for stem, losses in all_series:
        write_text_atomic(os.path.join(out, f"loss_{stem}.tsv"),
                          "".join(f"{i}\t{v}\n" for i, v in enumerate(losses)))

    print(f"{'method':<12} {'regions':<12} {'fusion':<7} {'runs':>4} {'overall':>8}")
    for e in table:
        print(f"{e['method']:<12} {e['regions']:<12} {e['fusion']:<7} "
              f"{e['runs']:>4} {e['acc_overall_mean']:>8.4f}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def _add_common(sub) -> None:
    sub.add_argument("--config", help="flat key = value config file")
    sub.add_argument("--seed", type=int, default=None, help="root seed override")
    sub.add_argument("--out", help="output directory")
    sub.add_argument("--set", action="append", metavar="KEY=VALUE",
                     help="config override (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="albumseq",
        description="sequence-prediction person recognition on photo albums")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("gen", help="generate a synthetic two-split dataset")
    _add_common(p)

    p = subs.add_parser("train", help="train a model on one split")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset directory from gen")
    p.add_argument("--split", type=int, choices=(0, 1), default=0)

    p = subs.add_parser("eval", help="evaluate checkpoints on one split")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--split", type=int, choices=(0, 1), default=1)
    p.add_argument("--checkpoint", action="append", help="model file (repeatable)")
    p.add_argument("--budget", type=int, default=24,
                   help="max query orderings per instance")
    p.add_argument("--fusion", choices=[m.value for m in FusionMode], default="avg")
    p.add_argument("--region", action="append",
                   help="feature region per checkpoint (repeatable; 'concat' joins all)")

    p = subs.add_parser("ablate", help="three-method two-direction comparison")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--budget", type=int, default=24)

    p = subs.add_parser("gradcheck", help="finite-difference gradient audit")
    _add_common(p)

    p = subs.add_parser("report", help="merge metrics files into one table")
    _add_common(p)
    p.add_argument("inputs", nargs="*", help="metrics/ablation/training JSON files")
    return parser


_COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval,
             "ablate": cmd_ablate, "gradcheck": cmd_gradcheck,
             "report": cmd_report}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, DatasetError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
