"""Command-line pipeline: synth, filter, stats, train, rig, eval, deform.

Exit codes: 0 success, 1 hard error (bad paths, unreadable checkpoint,
invalid config), 2 partial failure (some inputs processed, some not).
Every subcommand is deterministic for a fixed --seed; --workers is accepted
for interface stability but only single-threaded execution is implemented,
which is also the determinism guarantee.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import fields as dataclass_fields
from pathlib import Path

import numpy as np

from .dataset import (
    RigParseError,
    dataset_stats,
    filter_assets,
    load_rig,
    save_rig,
    synth_generate,
)
from .generator import GenerateConfig, rig_batch, rig_to_asset
from .geometry import (
    Pose,
    TriMesh,
    forward_kinematics,
    lbs_deform,
    load_obj,
    normalize_shape,
    save_obj,
)
from .metrics import MetricConfig, PROTOCOL_NOTE, connectivity_accuracy, match_joints, skeleton_report, skinning_metrics
from .model import Model, ModelConfig
from .skeleton import Skeleton
from .trainer import TrainConfig, fit


class CliError(ValueError):
    """Usage or input error that should terminate with exit code 1."""


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 1


def _require_dir(path: str, label: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise CliError(f"{label} directory not found: {path}")
    return p


def _require_file(path: str, label: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"{label} file not found: {path}")
    return p


def _check_workers(args) -> None:
    workers = getattr(args, "workers", 1)
    if workers < 1:
        raise CliError("--workers must be at least 1")
    if workers > 1:
        print("note: worker parallelism is not implemented; running single-threaded")


def _load_rig_dir(path: Path):
    """(name, asset) pairs in sorted order plus (name, error) pairs."""
    assets, errors = [], []
    for f in sorted(path.glob("*.rig")):
        try:
            assets.append((f.name, load_rig(f)))
        except (RigParseError, OSError) as exc:
            errors.append((f.name, str(exc)))
    return assets, errors


# ---- data commands -------------------------------------------------------------

def cmd_synth(args) -> int:
    _check_workers(args)
    if args.n < 1:
        raise CliError("--n must be at least 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    assets = synth_generate(args.n, np.random.default_rng(args.seed))
    for i, asset in enumerate(assets):
        save_rig(asset, out / f"synth_{i:04d}.rig")
    print(f"wrote {len(assets)} assets to {out}")
    return 0


def cmd_filter(args) -> int:
    src = _require_dir(args.input, "input")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    named, errors = _load_rig_dir(src)
    for name, msg in errors:
        print(f"unreadable {name}: {msg}", file=sys.stderr)
    assets = [a for _, a in named]
    kept, report = filter_assets(assets)
    with open(out / "rejects.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["file", "rules"])
        for rec in report.records:
            if not rec.passed:
                labels = ";".join(f"{rule}={value:.6g}" for rule, value in rec.failures)
                writer.writerow([named[rec.index][0], labels])
    for rec in report.records:
        if rec.passed:
            save_rig(assets[rec.index], out / named[rec.index][0])
    print(f"kept {len(kept)} of {len(assets)} assets; "
          f"{report.num_rejected} rejections listed in rejects.csv")
    return 2 if errors else 0


def cmd_stats(args) -> int:
    src = _require_dir(args.input, "input")
    named, errors = _load_rig_dir(src)
    for name, msg in errors:
        print(f"unreadable {name}: {msg}", file=sys.stderr)
    stats = dataset_stats([a for _, a in named])
    print(f"assets: {stats.num_assets}")
    for label in sorted(stats.category_counts):
        print(f"category {label}: {stats.category_counts[label]}")
    edges = stats.bin_edges
    for i, count in enumerate(stats.joint_histogram):
        print(f"joints [{edges[i]},{edges[i + 1]}): {count}")
    return 2 if errors else 0


# ---- training ---------------------------------------------------------------------

def _config_section(raw: dict, section: str, config_cls):
    data = dict(raw.get(section, {}))
    known = {f.name for f in dataclass_fields(config_cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise CliError(f"unknown {section} config fields: {', '.join(unknown)}")
    return data


def cmd_train(args) -> int:
    _check_workers(args)
    data_dir = _require_dir(args.data, "data")
    raw = {}
    if args.config is not None:
        cfg_path = _require_file(args.config, "config")
        try:
            raw = json.loads(cfg_path.read_text())
        except json.JSONDecodeError as exc:
            raise CliError(f"config is not valid JSON: {exc}") from exc
    model_kwargs = _config_section(raw, "model", ModelConfig)
    train_kwargs = _config_section(raw, "train", TrainConfig)
    for key in ("shape_tokenizer_hidden", "fusing_hidden"):
        if key in model_kwargs:
            model_kwargs[key] = tuple(model_kwargs[key])
    if args.seed is not None:
        train_kwargs["seed"] = args.seed
    try:
        model_cfg = ModelConfig(**model_kwargs)
        train_cfg = TrainConfig(**train_kwargs)
    except (TypeError, ValueError) as exc:
        raise CliError(f"invalid config: {exc}") from exc

    named, errors = _load_rig_dir(data_dir)
    if errors:
        name, msg = errors[0]
        raise CliError(f"unreadable training asset {name}: {msg}")
    assets = [a for _, a in named]
    if not assets:
        raise CliError(f"no .rig files in {data_dir}")
    kept, report = filter_assets(assets)
    if report.num_rejected:
        print(f"excluding {report.num_rejected} assets that fail the filter rules")
    if not kept:
        raise CliError("every asset was rejected by the filter rules")

    model = Model.create(model_cfg, np.random.default_rng([train_cfg.seed, 0]))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    csv_path = out.with_name(out.name + ".losses.csv")
    history = fit(model, kept, train_cfg, checkpoint_path=out, csv_path=csv_path)
    step, last = history[-1]
    print(f"finished step {step}: joint={last.joint:.4f} connect={last.connect:.4f} "
          f"skinning={last.skinning:.4f} total={last.total:.4f}")
    print(f"checkpoint: {out}")
    print(f"loss curves: {csv_path}")
    return 0


# ---- generation ----------------------------------------------------------------------

def _load_mesh(path: Path) -> TriMesh:
    if path.suffix == ".obj":
        return load_obj(path)
    if path.suffix == ".rig":
        return load_rig(path).mesh
    raise CliError(f"unsupported mesh format: {path} (use .obj or .rig)")


def cmd_rig(args) -> int:
    _check_workers(args)
    try:
        model = Model.load(args.ckpt)
    except FileNotFoundError:
        raise CliError(f"checkpoint file not found: {args.ckpt}") from None
    except Exception as exc:  # zip/manifest/shape diagnostics
        raise CliError(f"cannot load checkpoint {args.ckpt}: {exc}") from exc

    if args.max_joints is not None and not 1 <= args.max_joints <= model.config.max_joints:
        raise CliError(f"--max-joints must lie in 1..{model.config.max_joints}")
    if args.steps is not None and not 1 <= args.steps <= model.schedule.num_train_steps:
        raise CliError(f"--steps must lie in 1..{model.schedule.num_train_steps}")
    try:
        cfg = GenerateConfig(max_joints=args.max_joints, diffusion_steps=args.steps,
                             parent_mode=args.mode, temperature=args.temperature)
    except ValueError as exc:
        raise CliError(str(exc)) from None

    mesh_paths = []
    meshes = []
    load_failures = []
    for raw in args.meshes:
        path = _require_file(raw, "mesh")
        try:
            mesh = _load_mesh(path)
        except CliError:
            raise
        except Exception as exc:  # malformed file contents, not a usage error
            load_failures.append((path.name, f"{type(exc).__name__}: {exc}"))
            continue
        mesh_paths.append(path)
        meshes.append(mesh)
    for name, msg in load_failures:
        print(f"unreadable {name}: {msg}", file=sys.stderr)
    batch = rig_batch(model, meshes, args.seed, cfg)

    out = Path(args.out)
    multi = len(args.meshes) > 1
    if multi:
        out.mkdir(parents=True, exist_ok=True)
    else:
        out.parent.mkdir(parents=True, exist_ok=True)

    trace_rows = []
    for path, mesh, result, secs in zip(mesh_paths, meshes, batch.results, batch.seconds):
        if result is None:
            continue
        target = out / (path.stem + ".rig") if multi else out
        save_rig(rig_to_asset(result, mesh, category="generated"), target)
        flag = " (truncated)" if result.truncated else ""
        print(f"{path.name}: {len(result.skeleton)} joints in {secs:.3f}s{flag} -> {target}")
        for t in result.trace:
            verdict = "stop" if not t.accepted else f"parent={t.choice}"
            print(f"  step {t.step}: {t.seconds:.3f}s "
                  f"(diffusion {t.diffusion_seconds:.3f}s) {verdict}")
            trace_rows.append([path.name, t.step, f"{t.seconds:.6f}",
                               f"{t.diffusion_seconds:.6f}", t.choice, int(t.accepted),
                               ";".join(f"{p:.6g}" for p in t.parent_probs)])
    for idx, message in batch.failures:
        print(f"failed {mesh_paths[idx].name}: {message}", file=sys.stderr)

    if args.trace is not None:
        with open(args.trace, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["shape", "step", "seconds", "diffusion_seconds",
                             "choice", "accepted", "parent_probs"])
            writer.writerows(trace_rows)
    print(f"total wall-clock: {batch.total_seconds:.3f}s for {len(meshes)} shapes")
    return 2 if batch.failures or load_failures else 0


# ---- evaluation ----------------------------------------------------------------------

EVAL_COLUMNS = ["name", "iou", "precision", "recall", "cd_j2j", "cd_j2b", "cd_b2b",
                "edit_distance", "connect_acc", "skin_precision", "skin_recall",
                "skin_avg_l1"]


def _normalized_skeleton(asset) -> Skeleton:
    _, transform = normalize_shape(asset.mesh)
    return Skeleton(transform.apply(asset.skeleton.joints), asset.skeleton.parents)


def _eval_pair(pred, gt, config: MetricConfig) -> dict:
    pred_sk = _normalized_skeleton(pred)
    gt_sk = _normalized_skeleton(gt)
    report = skeleton_report(pred_sk, gt_sk, config)
    row = {
        "iou": report.iou, "precision": report.precision, "recall": report.recall,
        "cd_j2j": report.cd_j2j, "cd_j2b": report.cd_j2b, "cd_b2b": report.cd_b2b,
        "edit_distance": report.edit_distance,
        "connect_acc": "", "skin_precision": "", "skin_recall": "", "skin_avg_l1": "",
    }
    matching, _, _, _ = match_joints(pred_sk.joints, gt_sk.joints, config.tau)
    bijection = (len(matching) == len(pred_sk) == len(gt_sk))
    if bijection:
        relabeled = np.empty(len(gt_sk), dtype=np.int64)
        for i, g in matching.items():
            relabeled[g] = matching[int(pred_sk.parents[i])]
        row["connect_acc"] = connectivity_accuracy(relabeled, gt_sk.parents)
        if len(pred.mesh.vertices) == len(gt.mesh.vertices):
            pred_dense = pred.dense_weights()
            aligned = np.zeros_like(pred_dense)
            for i, g in matching.items():
                aligned[:, g] = pred_dense[:, i]
            sp, sr, l1 = skinning_metrics(aligned, gt.dense_weights(), config.tau_w)
            row["skin_precision"], row["skin_recall"], row["skin_avg_l1"] = sp, sr, l1
    return row


def cmd_eval(args) -> int:
    pred_dir = _require_dir(args.pred, "pred")
    gt_dir = _require_dir(args.gt, "gt")
    pred_names = {p.name for p in pred_dir.glob("*.rig")}
    gt_names = {p.name for p in gt_dir.glob("*.rig")}
    shared = sorted(pred_names & gt_names)
    if not shared:
        raise CliError("no matching .rig filenames between the two directories")
    for name in sorted(pred_names ^ gt_names):
        print(f"unpaired file skipped: {name}", file=sys.stderr)

    config = MetricConfig()
    rows, errors = [], []
    for name in shared:
        try:
            pred = load_rig(pred_dir / name)
            gt = load_rig(gt_dir / name)
            row = _eval_pair(pred, gt, config)
        except (RigParseError, ValueError) as exc:
            errors.append((name, str(exc)))
            print(f"failed {name}: {exc}", file=sys.stderr)
            continue
        row["name"] = name
        rows.append(row)
    if not rows:
        raise CliError("every pair failed to evaluate")

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="", encoding="utf-8") as fh:
        fh.write(f"# protocol: {PROTOCOL_NOTE}\n")
        writer = csv.DictWriter(fh, fieldnames=EVAL_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)

    aggregate = {}
    for col in EVAL_COLUMNS[1:]:
        values = [r[col] for r in rows if r[col] != ""]
        if values:
            aggregate[col] = float(np.mean(values))
    json_path = out.with_suffix(out.suffix + ".json")
    json_path.write_text(json.dumps(
        {"protocol": PROTOCOL_NOTE, "pairs": len(rows), "aggregate": aggregate},
        indent=2, sort_keys=True) + "\n")
    print(f"evaluated {len(rows)} pairs -> {out} and {json_path}")
    for col in ("cd_j2j", "iou", "edit_distance"):
        if col in aggregate:
            print(f"mean {col}: {aggregate[col]:.4f}")
    return 2 if errors else 0


# ---- deformation ------------------------------------------------------------------------

def _parse_pose(raw: dict, k: int) -> Pose:
    if "quaternions" in raw:
        q = np.asarray(raw["quaternions"], dtype=np.float64)
        if q.shape != (k, 4):
            raise CliError(f"pose quaternions must be ({k}, 4), got {q.shape}")
        return Pose.from_quaternions(q)
    if "axes" in raw and "angles_deg" in raw:
        axes = np.asarray(raw["axes"], dtype=np.float64)
        angles = np.deg2rad(np.asarray(raw["angles_deg"], dtype=np.float64))
        if axes.shape != (k, 3) or angles.shape != (k,):
            raise CliError(f"pose needs axes ({k}, 3) and angles_deg ({k},)")
        return Pose.from_axis_angle(axes, angles)
    raise CliError("pose file needs either 'quaternions' or 'axes' plus 'angles_deg'")


def cmd_deform(args) -> int:
    rig_path = _require_file(args.rig, "rig")
    pose_path = _require_file(args.pose, "pose")
    asset = load_rig(rig_path)
    try:
        raw = json.loads(pose_path.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"pose is not valid JSON: {exc}") from exc
    pose = _parse_pose(raw, len(asset.skeleton))
    rot, trans = forward_kinematics(asset.skeleton, pose)
    verts = lbs_deform(asset.mesh.vertices, asset.dense_weights(), rot, trans)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_obj(TriMesh(verts, asset.mesh.faces.copy()), out)
    print(f"deformed mesh -> {out}")
    return 0


# ---- wiring -----------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage errors are hard errors, not exit code 2
        raise CliError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="autorig", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("synth", help="generate synthetic rig assets")
    sp.add_argument("--n", type=int, required=True, help="number of assets")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--workers", type=int, default=1)
    sp.set_defaults(func=cmd_synth)

    fp = sub.add_parser("filter", help="apply dataset filter rules to a directory")
    fp.add_argument("input", help="directory of .rig files")
    fp.add_argument("--out", required=True, help="directory for kept assets and rejects.csv")
    fp.set_defaults(func=cmd_filter)

    st = sub.add_parser("stats", help="category and joint-count statistics")
    st.add_argument("input", help="directory of .rig files")
    st.set_defaults(func=cmd_stats)

    tr = sub.add_parser("train", help="train a model on a directory of rigs")
    tr.add_argument("data", help="directory of .rig files")
    tr.add_argument("--config", help="JSON file with 'model' and 'train' sections")
    tr.add_argument("--out", required=True, help="checkpoint path")
    tr.add_argument("--seed", type=int, help="overrides the config seed")
    tr.add_argument("--workers", type=int, default=1)
    tr.set_defaults(func=cmd_train)

    rg = sub.add_parser("rig", help="generate skeleton and skinning for meshes")
    rg.add_argument("meshes", nargs="+", help=".obj or .rig inputs")
    rg.add_argument("--ckpt", required=True, help="model checkpoint")
    rg.add_argument("--out", required=True,
                    help="output .rig file (single input) or directory")
    rg.add_argument("--seed", type=int, default=0)
    rg.add_argument("--mode", choices=["argmax", "sample"], default="argmax")
    rg.add_argument("--temperature", type=float, default=1.0)
    rg.add_argument("--max-joints", type=int, default=None, dest="max_joints")
    rg.add_argument("--steps", type=int, default=None, help="diffusion sampling steps")
    rg.add_argument("--trace", help="optional per-step trace CSV path")
    rg.add_argument("--workers", type=int, default=1)
    rg.set_defaults(func=cmd_rig)

    ev = sub.add_parser("eval", help="score predicted rigs against ground truth")
    ev.add_argument("--pred", required=True, help="directory of predicted .rig files")
    ev.add_argument("--gt", required=True, help="directory of ground-truth .rig files")
    ev.add_argument("--out", required=True, help="per-pair CSV path (JSON written alongside)")
    ev.set_defaults(func=cmd_eval)

    df = sub.add_parser("deform", help="pose a rigged asset and export the mesh")
    df.add_argument("--rig", required=True, help=".rig asset")
    df.add_argument("--pose", required=True, help="JSON pose file")
    df.add_argument("--out", required=True, help="output .obj path")
    df.set_defaults(func=cmd_deform)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except CliError as exc:
        return _fail(str(exc))
    except (RigParseError, OSError) as exc:
        return _fail(str(exc))


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
