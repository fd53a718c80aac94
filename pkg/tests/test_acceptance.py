"""Acceptance criteria 1-9.  Each test prints one PASS/FAIL line via record_acceptance."""

import json
import time

import numpy as np
from _fixtures import PlantedModel, tube
from _oracles import brute_hausdorff, exhaustive_confusion, formulas
from conftest import record_acceptance

from airway_repair.classifier import (
    ClassifierModel,
    TrainingConfig,
    gradient_check,
    init_params,
    load_model,
    save_model,
    train,
    train_steps,
)
from airway_repair.cli import main
from airway_repair.metrics import TD_GT_RESTRICTED, confusion, dice, fpr, hausdorff, ji, tpr, tree_detected_rate
from airway_repair.morphology import component_count, connected_components, largest_component
from airway_repair.nifti import read_nifti, write_nifti
from airway_repair.phantom import Break, PhantomSpec, generate, inject_breaks
from airway_repair.profiles import PROFILE_LENGTH, normalize_hu, synthesize_training_set
from airway_repair.repair import GATE_OFF, RepairConfig, repair_mask
from airway_repair.skeleton import ENDPOINT, build_graph, cycle_rank, skeletonize
from airway_repair.volume import BinaryMask, Volume3D

OFF = RepairConfig(classifier_gate=GATE_OFF)

# pinned tolerances and limits
SCORE_TOL = 1e-12
HD_TOL_MM = 1e-9
GRAD_TOL = 1e-4
TD_REPAIRED_MIN = 0.95
TD_BROKEN_MAX = 0.80
HELD_OUT_MIN = 0.90
OVERFIT_MAX = 0.01


def _voxel(point_mm, spacing):
    return tuple(int(v) for v in np.round(np.asarray(point_mm) / np.asarray(spacing)))


# ---- 1 -------------------------------------------------------------------


def test_criterion_1_metric_oracles():
    rng = np.random.default_rng(101)
    t0 = time.perf_counter()
    worst_score = worst_hd = 0.0
    for _ in range(200):
        spacing = tuple(np.round(rng.uniform(0.5, 2.0, 3), 3))
        p, g = rng.random((2, 10, 10, 10)) < rng.uniform(0.02, 0.6, 2)[:, None, None, None]
        for a in (p, g):
            a[tuple(rng.integers(0, 10, 3))] = True  # both sets non-empty
        c = confusion(BinaryMask(p, spacing), BinaryMask(g, spacing))
        assert (c.tp, c.fp, c.fn, c.tn) == exhaustive_confusion(p, g)
        got = np.array([dice(c), tpr(c), fpr(c), ji(c)])
        worst_score = max(worst_score, float(np.abs(got - formulas(*exhaustive_confusion(p, g))).max()))
        hd = hausdorff(BinaryMask(p, spacing), BinaryMask(g, spacing))
        worst_hd = max(worst_hd, abs(hd - brute_hausdorff(p, g, spacing)))
    elapsed = time.perf_counter() - t0
    ok = worst_score <= SCORE_TOL and worst_hd <= HD_TOL_MM and elapsed < 60
    record_acceptance(
        1,
        ok,
        f"200 pairs, max score err {worst_score:.1e} (<= {SCORE_TOL}), max HD err {worst_hd:.1e} mm (<= {HD_TOL_MM}), {elapsed:.1f} s (< 60)",
    )
    assert ok


# ---- 2 -------------------------------------------------------------------


def test_criterion_2_skeleton_soundness():
    t0 = time.perf_counter()
    failures = []
    for i in range(50):
        gen = 1 + i % 4
        ph = generate(PhantomSpec(generations=gen, seed=i))
        mask = ph.gt_mask
        if gen >= 2 and i % 2:
            mask, _ = inject_breaks(mask, ph.volume, [Break(len(ph.branches) - 1, 0.5, 3)], ph.branches)
        skel = skeletonize(mask)
        checks = {
            "components": component_count(skel) == component_count(mask),
            "idempotent": skeletonize(skel) == skel,
            "subset": not np.any(skel.data & ~mask.data),
        }
        padded = np.pad(skel.data, 1)
        ends = [n.xyz for n in build_graph(skel).nodes if n.kind == ENDPOINT]
        checks["endpoints"] = all(padded[x : x + 3, y : y + 3, z : z + 3].sum() == 2 for x, y, z in ends)
        bad = [k for k, v in checks.items() if not v]
        if bad:
            failures.append((gen, i, bad))
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 120
    record_acceptance(2, ok, f"50 phantoms (gen 1-4), failures {failures}, {elapsed:.1f} s (< 120)")
    assert ok


# ---- 3 -------------------------------------------------------------------

GAPS = [Break(1, 0.5, 2), Break(4, 0.5, 3), Break(9, 0.5, 4)]


def test_criterion_3_repair_efficacy():
    rows, ok = [], True
    for seed in range(5):
        ph = generate(PhantomSpec(generations=4, seed=seed))
        broken, _ = inject_breaks(ph.gt_mask, ph.volume, GAPS, ph.branches)
        t0 = time.perf_counter()
        repaired, _ = repair_mask(broken, config=OFF)
        elapsed = time.perf_counter() - t0
        td_rep = tree_detected_rate(largest_component(repaired), ph.gt_mask, TD_GT_RESTRICTED)
        td_brk = tree_detected_rate(largest_component(broken), ph.gt_mask, TD_GT_RESTRICTED)
        forest = cycle_rank(broken) == 0 and cycle_rank(repaired) == 0
        n = component_count(repaired)
        good = n == 1 and td_rep >= TD_REPAIRED_MIN and td_brk <= TD_BROKEN_MAX and forest and elapsed < 60
        ok &= good
        rows.append(f"seed {seed}: comps {n}, TD {td_brk:.3f}->{td_rep:.3f}, forest {forest}, {elapsed:.1f} s")
    record_acceptance(3, ok, f"TD repaired >= {TD_REPAIRED_MIN}, broken <= {TD_BROKEN_MAX}; " + "; ".join(rows))
    assert ok


# ---- 4 -------------------------------------------------------------------


def test_criterion_4_monotone_and_safe():
    fixtures = [("tube gap", tube(radius=r, gap=(12, g))) for r in (1.5, 3.0) for g in (1, 2, 4)]
    for seed in range(3):
        for gen in (2, 3, 4):
            ph = generate(PhantomSpec(generations=gen, seed=seed))
            fixtures.append((f"gen{gen} s{seed} unbroken", ph.gt_mask))
            picks = [b for b in (1, 2, 4, 9) if b < len(ph.branches)][: gen - 1]
            broken, _ = inject_breaks(ph.gt_mask, ph.volume, [Break(b, 0.5, 3) for b in picks], ph.branches)
            fixtures.append((f"gen{gen} s{seed} broken", broken))
    failures = []
    for name, mask in fixtures:
        repaired, _ = repair_mask(mask, config=OFF)
        again, _ = repair_mask(repaired, config=OFF)
        if np.any(mask.data & ~repaired.data):
            failures.append((name, "not a superset"))
        if "unbroken" in name and repaired != mask:
            failures.append((name, "unbroken mask changed"))
        if again != repaired:
            failures.append((name, "not idempotent"))
    ok = not failures
    record_acceptance(
        4,
        ok,
        f"{len(fixtures)} fixtures: input subset of output, unbroken unchanged, double repair idempotent; failures {failures}",
    )
    assert ok


# ---- 5 -------------------------------------------------------------------


def test_criterion_5_gradient_check():
    rng = np.random.default_rng(505)
    t0 = time.perf_counter()
    worst, checked = 0.0, 0
    for _ in range(20):
        params = init_params(rng)
        X = rng.random((4, PROFILE_LENGTH))
        y = rng.integers(0, 3, 4)
        res = gradient_check(params, X, y, per_param=6, rng=rng)
        worst = max(worst, res.max_rel_error)
        checked += res.checked
    elapsed = time.perf_counter() - t0
    ok = worst < GRAD_TOL and elapsed < 30
    record_acceptance(5, ok, f"20 draws, {checked} entries, max rel err {worst:.2e} (< {GRAD_TOL}), {elapsed:.1f} s (< 30)")
    assert ok


# ---- 6 -------------------------------------------------------------------


def test_criterion_6_learnability():
    t0 = time.perf_counter()
    ph = generate(PhantomSpec(generations=4, seed=0))
    X, y = synthesize_training_set(ph.gt_mask, ph.volume, 2000, seed=0)
    held = generate(PhantomSpec(generations=4, seed=1))
    Xt, yt = synthesize_training_set(held.gt_mask, held.volume, 300, seed=1)
    model = train(X, y, TrainingConfig(epochs=50, seed=0))
    acc = float((model.predict_proba(Xt).argmax(axis=1) == yt).mean())
    batch = np.random.default_rng(6).choice(len(X), 8, replace=False)
    _, losses = train_steps(X[batch], y[batch], 500)
    elapsed = time.perf_counter() - t0
    ok = acc >= HELD_OUT_MIN and losses[-1] < OVERFIT_MAX and elapsed < 300
    record_acceptance(
        6,
        ok,
        f"held-out acc {acc:.3f} (>= {HELD_OUT_MIN}) after 50 epochs, overfit loss {losses[-1]:.2e} (< {OVERFIT_MAX}) in 500 steps, {elapsed:.1f} s (< 300)",
    )
    assert ok


# ---- 7 -------------------------------------------------------------------

MARK_HU = 350.0  # denser than any tissue in the phantom palette


def test_criterion_7_gating():
    rows, ok = [], True
    marker = normalize_hu([200.0])[0]
    for seed in range(3):
        ph = generate(PhantomSpec(generations=4, seed=seed))
        designated = Break(9, 0.5, 3)
        broken, vol = inject_breaks(ph.gt_mask, ph.volume, [Break(1, 0.5, 3), Break(4, 0.5, 3), designated], ph.branches)
        only, _ = inject_breaks(ph.gt_mask, ph.volume, [designated], ph.branches)
        hu = vol.data.copy()
        hu[ph.gt_mask.data & ~only.data] = MARK_HU
        model = PlantedModel(rule=lambda x: "parenchyma" if x.max() > marker else "true_airway")
        repaired, report = repair_mask(broken, Volume3D(hu, vol.spacing), RepairConfig(), model)
        labels = connected_components(repaired).labels
        joined = {}
        for b in (1, 4, 9):
            br = ph.branches[b]
            joined[b] = bool(labels[_voxel(br.start_mm, ph.gt_mask.spacing)] == labels[_voxel(br.end_mm, ph.gt_mask.spacing)])
        good = joined[1] and joined[4] and not joined[9] and component_count(repaired) == 2
        ok &= good
        rows.append(f"seed {seed}: bridged {len(report.bridged)}/{len(report.accepted)}, joined {joined}")
    record_acceptance(7, ok, "designated gap stays open, true_airway gaps bridged; " + "; ".join(rows))
    assert ok


# ---- 8 -------------------------------------------------------------------


def test_criterion_8_round_trips(tmp_path):
    rng = np.random.default_rng(808)
    nifti_bad = model_bad = 0
    for i in range(100):
        dims = tuple(int(v) for v in rng.integers(1, 12, 3))
        spacing = tuple(float(np.float32(v)) for v in rng.uniform(0.2, 3.0, 3))
        origin = tuple(float(np.float32(v)) for v in rng.uniform(-100, 100, 3))
        kind = i % 3
        if kind == 0:
            obj = BinaryMask(rng.random(dims) < 0.4, spacing, origin)
        elif kind == 1:
            obj = Volume3D(rng.normal(-500, 300, dims).astype(np.float32), spacing, origin)
        else:
            obj = Volume3D(rng.integers(-1024, 3000, dims).astype(np.int16), spacing, origin)
        a, b = tmp_path / f"a{i}.nii", tmp_path / f"b{i}.nii"
        write_nifti(obj, a)
        back = read_nifti(a, as_mask=kind == 0)
        write_nifti(back, b)
        same = back.data.tobytes() == obj.data.tobytes() and back.spacing == obj.spacing and back.origin == obj.origin
        nifti_bad += not (same and a.read_bytes() == b.read_bytes())

        params = {k: (v * rng.uniform(0.1, 10)).astype(np.float32) for k, v in init_params(rng).items()}
        hyper = TrainingConfig(lr=float(rng.uniform(1e-4, 1)), epochs=int(rng.integers(1, 100)), seed=int(rng.integers(0, 2**31)))
        m = ClassifierModel(params, hyper)
        f, g = tmp_path / f"m{i}.rpar", tmp_path / f"n{i}.rpar"
        save_model(m, f)
        loaded = load_model(f)
        save_model(loaded, g)
        model_bad += not (loaded == m and f.read_bytes() == g.read_bytes())
    ok = nifti_bad == 0 and model_bad == 0
    record_acceptance(
        8, ok, f"100 NIfTI (mask/float32/int16) and 100 model files bit-exact; mismatches {nifti_bad} + {model_bad}"
    )
    assert ok


# ---- 9 -------------------------------------------------------------------

PHANTOM_CFG = {
    "generations": 3,
    "breaks": [
        {"branch_id": 1, "center_fraction": 0.5, "gap_voxels": 3},
        {"branch_id": 6, "center_fraction": 0.5, "gap_voxels": 2},
    ],
}
RUN_FILES = [
    "ph/volume.nii",
    "ph/gt_mask.nii",
    "ph/broken_mask.nii",
    "ph/broken_volume.nii",
    "ph/branches.json",
    "m.rpar",
    "prof.bin",
    "rep.nii",
    "rep.json",
    "gated.nii",
    "gated.json",
    "skel.nii",
    "graph.json",
    "eval.json",
    "cls.json",
]
MANIFESTS = [
    "ph/phantom.manifest.json",
    "m.manifest.json",
    "rep.manifest.json",
    "gated.manifest.json",
    "skel.manifest.json",
    "eval.manifest.json",
    "cls.manifest.json",
]


def _cli_run(root, jobs):
    (root / "ph.json").write_text(json.dumps(PHANTOM_CFG))
    common = ["--seed", "7", "--jobs", str(jobs)]
    steps = [
        ["phantom", "--config", "ph.json", "--out-dir", "ph"],
        [
            "train",
            "--phantom-config",
            "ph.json",
            "--per-class",
            "40",
            "--epochs",
            "4",
            "--profiles-out",
            "prof.bin",
            "--out",
            "m.rpar",
        ],
        ["repair", "--mask", "ph/broken_mask.nii", "--accept-all", "--out", "rep.nii", "--report", "rep.json"],
        [
            "repair",
            "--mask",
            "ph/broken_mask.nii",
            "--ct",
            "ph/broken_volume.nii",
            "--model",
            "m.rpar",
            "--out",
            "gated.nii",
            "--report",
            "gated.json",
        ],
        ["skeleton", "--mask", "rep.nii", "--out", "skel.nii", "--graph", "graph.json"],
        [
            "eval",
            "--pred",
            "rep.nii",
            "ph/broken_mask.nii",
            "--gt",
            "ph/gt_mask.nii",
            "ph/gt_mask.nii",
            "--hd95",
            "--json",
            "eval.json",
        ],
        ["classify", "--model", "m.rpar", "--profiles", "prof.bin", "--out", "cls.json"],
    ]
    codes = [main(s + common) for s in steps]
    files = {f: (root / f).read_bytes() for f in RUN_FILES}
    manifests = {}
    for f in MANIFESTS:
        doc = json.loads((root / f).read_text())
        manifests[f] = {k: v for k, v in doc.items() if k not in ("timings_s", "created_utc")}
    return codes, files, manifests


def test_criterion_9_determinism(tmp_path, monkeypatch):
    runs = []
    for name, jobs in (("a", 1), ("b", 1), ("c", 3)):
        root = tmp_path / name
        root.mkdir()
        monkeypatch.chdir(root)  # relative paths keep the manifests comparable
        runs.append(_cli_run(root, jobs))
    codes_ok = all(c == 0 for codes, _, _ in runs for c in codes)
    diff_files = sorted({f for _, files, _ in runs[1:] for f in RUN_FILES if files[f] != runs[0][1][f]})
    diff_manifests = sorted({f for _, _, man in runs[1:] for f in MANIFESTS if man[f] != runs[0][2][f]})
    ok = codes_ok and not diff_files and not diff_manifests
    record_acceptance(
        9,
        ok,
        f"3 CLI runs (jobs 1, 1, 3), {len(RUN_FILES)} outputs and {len(MANIFESTS)} manifests; differing outputs {diff_files}, manifests {diff_manifests}",
    )
    assert ok
