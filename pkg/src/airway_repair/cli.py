"""Command-line entry point: ``airway-repair <subcommand> ...``.

Exit codes: 0 success, 2 invalid input, 3 I/O failure, 4 training diverged.
Every run writes one JSON manifest next to its main output.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from datetime import datetime, timezone

from . import __version__
from .classifier import ProfileClassifier, TrainingConfig, classify, load_model, save_model, train
from .errors import AirwayRepairError, DivergenceError
from .metrics import SCHEMA_VERSION, evaluate, format_table
from .nifti import read_nifti, write_nifti
from .phantom import PhantomSpec, generate, inject_breaks, load_config
from .profiles import load_profiles, save_profiles, synthesize_training_set
from .repair import GATE_OFF, GATE_ON, RepairConfig, repair_mask
from .skeleton import build_graph, skeletonize
from .volume import check_same_geometry

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_DIVERGED = 0, 2, 3, 4


class _Run:
    """Collects per-stage timings and writes the manifest."""

    def __init__(self, args):
        self.args = args
        self.timings = {}
        self.inputs = {}
        self.outputs = {}
        self.config = {}

    def stage(self, name):
        run = self

        class _Timer:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                run.timings[name] = round(time.perf_counter() - self.t0, 6)

        return _Timer()

    def write(self, path):
        manifest = {
            "schema_version": SCHEMA_VERSION,
            "subcommand": self.args.command,
            "tool_version": __version__,
            "seed": self.args.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "config": self.config,
            "timings_s": self.timings,
            "created_utc": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        }
        _write_json(path, manifest)


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _manifest_path(args, main_output):
    if args.manifest:
        return args.manifest
    stem = main_output[:-4] if main_output.endswith(".nii") else os.path.splitext(main_output)[0]
    return stem + ".manifest.json"


def _fail(code, reason):
    print(f"error: {reason}", file=sys.stderr)
    return code


# ---- subcommands ---------------------------------------------------------


def cmd_repair(args, run):
    cfg = {}
    if args.config:
        with open(args.config) as fh:
            cfg = json.load(fh)
    for key in ("search_radius_mm", "max_bend_deg", "tangent_window_voxels", "min_gap_voxels", "context_voxels", "min_spur_mm"):
        value = getattr(args, key)
        if value is not None:
            cfg[key] = value
    if args.accept_all:
        cfg["classifier_gate"] = GATE_OFF
    config = RepairConfig.from_dict(cfg)
    model = None
    if config.classifier_gate == GATE_ON:
        if not args.model:
            raise AirwayRepairError("model required")
        model = load_model(args.model)
    run.inputs = {"mask": args.mask, "ct": args.ct, "model": args.model, "config": args.config}
    run.config = asdict(config)
    with run.stage("read"):
        mask = read_nifti(args.mask, as_mask=True)
        volume = read_nifti(args.ct) if args.ct else None
        if volume is not None:
            check_same_geometry(mask, volume, "mask/ct")
    with run.stage("repair"):
        repaired, report = repair_mask(mask, volume, config, model, jobs=args.jobs)
    with run.stage("write"):
        write_nifti(repaired, args.out)
        _write_json(args.report, report.to_json())
    run.outputs = {"mask": args.out, "report": args.report}
    return args.out


def _eval_one(job):
    pred_path, gt_path, largest_cc, with_hd95, td_mode = job
    pred = read_nifti(pred_path, as_mask=True)
    gt = read_nifti(gt_path, as_mask=True)
    return evaluate(pred, gt, largest_cc=largest_cc, with_hd95=with_hd95, td_mode=td_mode)


def cmd_eval(args, run):
    if len(args.pred) != len(args.gt):
        raise AirwayRepairError(f"{len(args.pred)} --pred files but {len(args.gt)} --gt files")
    jobs = [(p, g, not args.no_largest_cc, args.hd95, args.td_mode) for p, g in zip(args.pred, args.gt)]
    run.inputs = {"pred": args.pred, "gt": args.gt}
    run.config = {"largest_component": not args.no_largest_cc, "hd95": args.hd95, "td_mode": args.td_mode}
    with run.stage("evaluate"):
        if args.jobs > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(args.jobs) as pool:
                reports = list(pool.map(_eval_one, jobs))
        else:
            reports = [_eval_one(j) for j in jobs]
    if len(reports) == 1:
        payload = reports[0].to_json()
    else:
        payload = {
            "schema_version": SCHEMA_VERSION,
            "cases": [dict(r.to_json(), pred=p, gt=g) for r, p, g in zip(reports, args.pred, args.gt)],
        }
    main = args.json or args.table
    if args.json:
        _write_json(args.json, payload)
    table = format_table(reports, [os.path.basename(p) for p in args.pred])
    if args.table:
        with open(args.table, "w") as fh:
            fh.write(table)
    if not args.json and not args.table:
        sys.stdout.write(table)
        main = os.path.join(os.getcwd(), "eval")
    run.outputs = {"json": args.json, "table": args.table}
    return main


def cmd_skeleton(args, run):
    run.inputs = {"mask": args.mask}
    run.config = {"min_spur_mm": args.min_spur_mm}
    mask = read_nifti(args.mask, as_mask=True)
    with run.stage("skeletonize"):
        skel = skeletonize(mask, args.min_spur_mm)
    write_nifti(skel, args.out)
    if args.graph:
        with run.stage("graph"):
            graph = build_graph(skel)
        _write_json(args.graph, dict(graph.to_json(), schema_version=SCHEMA_VERSION))
    run.outputs = {"skeleton": args.out, "graph": args.graph}
    return args.out


def cmd_phantom(args, run):
    if args.config:
        spec, breaks = load_config(args.config)
    else:
        spec, breaks = PhantomSpec(), []
    if args.generations is not None:
        spec.generations = args.generations
    spec.seed = args.seed
    spec = PhantomSpec.from_dict(asdict(spec))
    run.inputs = {"config": args.config}
    run.config = dict(asdict(spec), breaks=[asdict(b) for b in breaks])
    os.makedirs(args.out_dir, exist_ok=True)
    with run.stage("generate"):
        ph = generate(spec)
    out = {
        "volume": os.path.join(args.out_dir, "volume.nii"),
        "gt_mask": os.path.join(args.out_dir, "gt_mask.nii"),
        "branches": os.path.join(args.out_dir, "branches.json"),
    }
    write_nifti(ph.volume, out["volume"])
    write_nifti(ph.gt_mask, out["gt_mask"])
    _write_json(out["branches"], {"schema_version": SCHEMA_VERSION, "branches": ph.branch_table()})
    if breaks:
        with run.stage("inject_breaks"):
            broken, modified = inject_breaks(ph.gt_mask, ph.volume, breaks, ph.branches, seed=args.seed)
        out["broken_mask"] = os.path.join(args.out_dir, "broken_mask.nii")
        out["broken_volume"] = os.path.join(args.out_dir, "broken_volume.nii")
        write_nifti(broken, out["broken_mask"])
        write_nifti(modified, out["broken_volume"])
    run.outputs = out
    return os.path.join(args.out_dir, "phantom")


def cmd_train(args, run):
    hyper = TrainingConfig(
        lr=args.lr,
        momentum=args.momentum,
        batch_size=args.batch_size,
        epochs=args.epochs,
        seed=args.seed,
        validation_fraction=args.validation_fraction,
    )
    run.config = dict(asdict(hyper), per_class=args.per_class)
    if args.profiles:
        run.inputs = {"profiles": args.profiles}
        X, y = load_profiles(args.profiles)
    else:
        if args.gt and args.ct:
            run.inputs = {"gt": args.gt, "ct": args.ct}
            gt = read_nifti(args.gt, as_mask=True)
            ct = read_nifti(args.ct)
        elif args.gt or args.ct:
            raise AirwayRepairError("--gt and --ct must be given together")
        else:
            spec = load_config(args.phantom_config)[0] if args.phantom_config else PhantomSpec()
            spec.seed = args.seed
            spec = PhantomSpec.from_dict(asdict(spec))
            run.inputs = {"phantom": asdict(spec)}
            ph = generate(spec)
            gt, ct = ph.gt_mask, ph.volume
        with run.stage("synthesize"):
            X, y = synthesize_training_set(gt, ct, args.per_class, seed=args.seed)
        if args.profiles_out:
            save_profiles(args.profiles_out, X, y)
    with run.stage("train"):
        model = train(X, y, hyper)
    save_model(model, args.out)
    run.outputs = {"model": args.out, "profiles": args.profiles_out}
    run.config["final_loss"] = model.loss_curve[-1] if model.loss_curve else None
    run.config["final_validation_loss"] = model.validation_loss_curve[-1] if model.validation_loss_curve else None
    return args.out


def cmd_classify(args, run):
    model = load_model(args.model)
    X, y = load_profiles(args.profiles, length=model.hyper.length)
    run.inputs = {"model": args.model, "profiles": args.profiles}
    with run.stage("classify"):
        results = [classify(model, x) for x in X]
    payload = {
        "schema_version": SCHEMA_VERSION,
        "profiles": [
            {"index": i, "label": r["label"], "probabilities": [float(p) for p in r["probabilities"]], "stored_label": int(t)}
            for i, (r, t) in enumerate(zip(results, y))
        ],
    }
    est = ProfileClassifier.from_model(model, label_names=False)
    payload["accuracy_vs_stored"] = float(est.score(X, y)) if len(y) else None
    _write_json(args.out, payload)
    run.outputs = {"labels": args.out}
    return args.out


# ---- parser --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="single source of randomness")
    common.add_argument("--jobs", type=int, default=1, help="worker count; results do not depend on it")
    common.add_argument("--manifest", help="manifest path (default: next to the main output)")

    p = argparse.ArgumentParser(prog="airway-repair", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("repair", parents=[common], help="reconnect a broken airway mask")
    r.add_argument("--mask", required=True)
    r.add_argument("--ct")
    r.add_argument("--model")
    r.add_argument("--config", help="JSON file with repair settings")
    r.add_argument("--accept-all", action="store_true", help="skip the classifier gate")
    r.add_argument("--out", required=True)
    r.add_argument("--report", required=True)
    r.add_argument("--search-radius-mm", type=float)
    r.add_argument("--max-bend-deg", type=float)
    r.add_argument("--tangent-window-voxels", type=int)
    r.add_argument("--min-gap-voxels", type=int)
    r.add_argument("--context-voxels", type=int)
    r.add_argument("--min-spur-mm", type=float)
    r.set_defaults(func=cmd_repair)

    e = sub.add_parser("eval", parents=[common], help="score predictions against ground truth")
    e.add_argument("--pred", required=True, nargs="+")
    e.add_argument("--gt", required=True, nargs="+")
    e.add_argument("--json")
    e.add_argument("--table")
    e.add_argument("--no-largest-cc", action="store_true")
    e.add_argument("--hd95", action="store_true", help="also report the 95th-percentile distance")
    e.add_argument("--td-mode", choices=("gt_restricted", "paper_raw"), default="gt_restricted")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("skeleton", parents=[common], help="thin a mask and export its graph")
    s.add_argument("--mask", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--graph")
    s.add_argument("--min-spur-mm", type=float, default=0.0)
    s.set_defaults(func=cmd_skeleton)

    ph = sub.add_parser("phantom", parents=[common], help="generate a synthetic airway phantom")
    ph.add_argument("--config", help="JSON PhantomSpec fields plus optional breaks")
    ph.add_argument("--generations", type=int)
    ph.add_argument("--out-dir", required=True)
    ph.set_defaults(func=cmd_phantom)

    t = sub.add_parser("train", parents=[common], help="train the profile classifier")
    t.add_argument("--gt")
    t.add_argument("--ct")
    t.add_argument("--phantom-config")
    t.add_argument("--profiles", help="train from a flat profile file instead")
    t.add_argument("--profiles-out")
    t.add_argument("--per-class", type=int, default=2000)
    t.add_argument("--epochs", type=int, default=50)
    t.add_argument("--lr", type=float, default=0.01)
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--batch-size", type=int, default=32)
    t.add_argument("--validation-fraction", type=float, default=0.1)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("classify", parents=[common], help="label stored profiles with a model")
    c.add_argument("--model", required=True)
    c.add_argument("--profiles", required=True)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_classify)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.jobs < 1:
        return _fail(EXIT_INVALID, "--jobs must be >= 1")
    run = _Run(args)
    try:
        main_output = args.func(args, run)
        if main_output:
            run.write(_manifest_path(args, main_output))
    except DivergenceError as exc:
        return _fail(EXIT_DIVERGED, f"{exc}")
    except (AirwayRepairError, ValueError) as exc:
        return _fail(EXIT_INVALID, " ".join(str(exc).split()))
    except OSError as exc:
        return _fail(EXIT_IO, f"{exc.strerror or exc}: {exc.filename}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
