"""Dice evaluation, per-region statistics, and LOOCV orchestration.

Pinned statistical conventions (disclosed in every report):

* Dice of two empty masks is 1.0 with a ``both_empty`` flag; such entries
  are excluded from aggregates so post-swallow empty-bolus frames do not
  inflate the bolus statistics.
* Standard deviation is population (divide by n).
* Median of an even-length sample is the mean of the two central values;
  quartiles are Tukey hinges (the median is included in both halves when
  n is odd). Outliers follow the 1.5 IQR rule.
* Dice values are pooled per frame, not per case.
* The practical guideline for acceptable overlap is 0.7.
"""

from __future__ import annotations

import json
import shlex
import subprocess
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from . import __version__
from .errors import DataError, GeometryMismatchError, PredictorError
from .segkit.grow import GrowParams, region_grow
from .segkit.rigid import track_rigid
from .volcore import (Frame, LabelMap, REGION_NAMES, Sequence4D, binary_labelmap,
                      load_case, load_labels, require_same_geometry, save_labels)

GUIDELINE = 0.7
BONE_HU_THRESHOLD = 420.0      # midpoint of the soft-tissue/bone palette
BOLUS_HU_RANGE = (1000.0, 2000.0)

CONVENTIONS = {
    "std": "population (divide by n)",
    "median": "mean of central pair for even n",
    "quartiles": "tukey hinges, outliers by 1.5*IQR",
    "both_empty": "dice=1.0, flagged, excluded from aggregates",
    "pooling": "per frame across all cases",
    "guideline": GUIDELINE,
}


class DiceValue(NamedTuple):
    value: float
    intersection: int
    a_voxels: int
    b_voxels: int
    both_empty: bool


def _as_mask(x) -> np.ndarray:
    if isinstance(x, LabelMap):
        return x.as_bool()
    return np.asarray(x).astype(bool)


def dice(a, b) -> DiceValue:
    """Dice coefficient 2|A^B| / (|A|+|B|) with exact integer counting.

    Two empty masks agree perfectly: value 1.0 with the both_empty flag set.
    """
    if isinstance(a, LabelMap) and isinstance(b, LabelMap):
        require_same_geometry(a, b, "dice operands")
    am, bm = _as_mask(a), _as_mask(b)
    if am.shape != bm.shape:
        raise GeometryMismatchError(f"mask shapes differ: {am.shape} vs {bm.shape}")
    na = int(am.sum())
    nb = int(bm.sum())
    inter = int((am & bm).sum())
    if na + nb == 0:
        return DiceValue(1.0, 0, 0, 0, True)
    return DiceValue(2.0 * inter / (na + nb), inter, na, nb, False)


@dataclass(frozen=True)
class DiceEntry:
    case_id: str
    frame: int
    region: int
    dice: float
    gt_voxels: int
    pred_voxels: int
    both_empty: bool

    def to_dict(self) -> dict:
        return {"case_id": self.case_id, "frame": self.frame,
                "region": self.region,
                "region_name": REGION_NAMES.get(self.region, str(self.region)),
                "dice": self.dice, "gt_voxels": self.gt_voxels,
                "pred_voxels": self.pred_voxels, "both_empty": self.both_empty}


@dataclass(frozen=True)
class RegionAggregate:
    region: int
    n: int
    median: float | None
    std: float | None
    below_guideline: tuple = ()  # (case_id, frame, dice) with dice < guideline

    def to_dict(self) -> dict:
        return {"region": self.region,
                "region_name": REGION_NAMES.get(self.region, str(self.region)),
                "n": self.n, "median": self.median, "std": self.std,
                "below_guideline": [list(b) for b in self.below_guideline]}


def _median(sorted_vals: np.ndarray) -> float:
    n = len(sorted_vals)
    mid = n // 2
    if n % 2 == 1:
        return float(sorted_vals[mid])
    return float((sorted_vals[mid - 1] + sorted_vals[mid]) / 2.0)


def _tukey_hinges(sorted_vals: np.ndarray) -> tuple[float, float, float]:
    n = len(sorted_vals)
    mid = n // 2
    if n % 2 == 1:
        lower, upper = sorted_vals[:mid + 1], sorted_vals[mid:]
    else:
        lower, upper = sorted_vals[:mid], sorted_vals[mid:]
    return _median(lower), _median(sorted_vals), _median(upper)


def compute_aggregates(entries, guideline: float = GUIDELINE) -> dict[int, RegionAggregate]:
    by_region: dict[int, list[DiceEntry]] = {}
    for e in entries:
        by_region.setdefault(e.region, []).append(e)
    out = {}
    for region, es in sorted(by_region.items()):
        scored = [e for e in es if not e.both_empty]
        below = tuple((e.case_id, e.frame, e.dice) for e in scored
                      if e.dice < guideline)
        if not scored:
            out[region] = RegionAggregate(region, 0, None, None, below)
            continue
        vals = np.sort(np.array([e.dice for e in scored]))
        out[region] = RegionAggregate(region, len(vals), _median(vals),
                                      float(np.std(vals, ddof=0)), below)
    return out


@dataclass
class DiceReport:
    entries: list[DiceEntry]
    aggregates: dict[int, RegionAggregate]
    guideline: float = GUIDELINE
    folds: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "toolkit_version": __version__,
            "guideline": self.guideline,
            "conventions": CONVENTIONS,
            "regions": {str(k): v for k, v in sorted(REGION_NAMES.items())},
            "entries": [e.to_dict() for e in self.entries],
            "aggregates": {str(r): a.to_dict()
                           for r, a in sorted(self.aggregates.items())},
            "folds": self.folds,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DiceReport":
        entries = [DiceEntry(e["case_id"], int(e["frame"]), int(e["region"]),
                             float(e["dice"]), int(e["gt_voxels"]),
                             int(e["pred_voxels"]), bool(e["both_empty"]))
                   for e in d.get("entries", [])]
        guideline = float(d.get("guideline", GUIDELINE))
        return cls(entries, compute_aggregates(entries, guideline), guideline,
                   list(d.get("folds", [])))


def save_report(report: DiceReport, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(report.to_dict(), indent=2) + "\n")


def load_report(path) -> DiceReport:
    try:
        return DiceReport.from_dict(json.loads(Path(path).read_text()))
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: invalid JSON: {e}") from e


def dice_report(gt: Sequence4D, pred: Sequence4D, regions=None,
                guideline: float = GUIDELINE) -> DiceReport:
    """One Dice entry per (frame, region) comparing pred labels to gt labels."""
    if len(gt) != len(pred):
        raise DataError(f"frame counts differ: gt {len(gt)} vs pred {len(pred)}")
    for i, (g, p) in enumerate(zip(gt.frames, pred.frames)):
        if g.labels is None or p.labels is None:
            raise DataError(f"frame {i} is missing labels")
        require_same_geometry(g.labels, p.labels, f"frame {i} labels")
    if regions is None:
        present: set[int] = set()
        for fr in list(gt.frames) + list(pred.frames):
            present.update(int(c) for c in np.unique(fr.labels.codes) if c != 0)
        regions = sorted(present)
    else:
        regions = sorted(int(r) for r in regions)

    entries = []
    for i, (g, p) in enumerate(zip(gt.frames, pred.frames)):
        for r in regions:
            d = dice(g.labels.codes == r, p.labels.codes == r)
            entries.append(DiceEntry(gt.case_id, i, r, d.value,
                                     d.a_voxels, d.b_voxels, d.both_empty))
    return DiceReport(entries, compute_aggregates(entries, guideline), guideline)


def pool_reports(reports, guideline: float = GUIDELINE) -> DiceReport:
    entries = [e for r in reports for e in r.entries]
    folds = [f for r in reports for f in r.folds]
    return DiceReport(entries, compute_aggregates(entries, guideline),
                      guideline, folds)


def format_aggregate_table(aggregates) -> str:
    """Plain-text per-region summary; medians and deviations at 2 decimals
    (the precision Dice results are conventionally reported at)."""
    if isinstance(aggregates, dict):
        aggregates = [aggregates[k] for k in sorted(aggregates)]
    lines = [f"{'region':<20} {'n':>6} {'median':>7} {'std':>6} {'below_0.7':>10}"]
    for a in aggregates:
        name = REGION_NAMES.get(a.region, str(a.region))
        med = f"{a.median:.2f}" if a.median is not None else "-"
        std = f"{a.std:.2f}" if a.std is not None else "-"
        lines.append(f"{name:<20} {a.n:>6} {med:>7} {std:>6} "
                     f"{len(a.below_guideline):>10}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Box-plot export


@dataclass(frozen=True)
class BoxStats:
    region: int
    n: int
    vmin: float
    q1: float
    median: float
    q3: float
    vmax: float
    outliers: tuple = ()
    guideline: float = GUIDELINE


def box_stats(region: int, values, guideline: float = GUIDELINE) -> BoxStats:
    vals = np.sort(np.asarray(list(values), dtype=float))
    if len(vals) == 0:
        raise DataError(f"no values for region {region}")
    q1, med, q3 = _tukey_hinges(vals)
    iqr = q3 - q1
    lo, hi = q1 - 1.5 * iqr, q3 + 1.5 * iqr
    outliers = tuple(float(v) for v in vals[(vals < lo) | (vals > hi)])
    return BoxStats(region, len(vals), float(vals[0]), q1, med, q3,
                    float(vals[-1]), outliers, guideline)


def boxplot_rows(report: DiceReport) -> list[BoxStats]:
    if not report.entries:
        raise DataError("cannot export a box plot from an empty report")
    by_region: dict[int, list[float]] = {}
    for e in report.entries:
        if not e.both_empty:
            by_region.setdefault(e.region, []).append(e.dice)
    return [box_stats(r, vals, report.guideline)
            for r, vals in sorted(by_region.items())]


def boxplot_export(rows, path) -> Path:
    """Write box-plot data as CSV: region,n,min,q1,median,q3,max,outliers,guideline."""
    if isinstance(rows, DiceReport):
        rows = boxplot_rows(rows)
    lines = ["region,n,min,q1,median,q3,max,outliers,guideline"]
    for s in rows:
        name = REGION_NAMES.get(s.region, str(s.region))
        outliers = ";".join(f"{v:.2f}" for v in s.outliers)
        lines.append(f"{name},{s.n},{s.vmin:.2f},{s.q1:.2f},{s.median:.2f},"
                     f"{s.q3:.2f},{s.vmax:.2f},{outliers},{s.guideline:g}")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path


# ---------------------------------------------------------------------------
# Leave-one-out cross-validation


@dataclass(frozen=True)
class LoocvPlan:
    folds: tuple  # ((train_ids...), test_id) per fold


def loocv_plan(case_ids) -> LoocvPlan:
    """N folds for N cases (deterministic sorted order); each case is the
    test case exactly once, all others train."""
    ids = sorted(str(c) for c in case_ids)
    if len(ids) < 2:
        raise DataError("LOOCV needs at least 2 cases")
    if len(set(ids)) != len(ids):
        raise DataError("duplicate case ids")
    folds = tuple((tuple(i for i in ids if i != test), test) for test in ids)
    return LoocvPlan(folds)


@dataclass(frozen=True)
class PredictorSpec:
    """External command template over manifests, or the builtin baseline.

    Command templates must contain the {train}, {test} and {out}
    placeholders; they are invoked once per fold.
    """
    kind: str = "builtin"
    command: str = ""
    workdir: str | None = None
    timeout_s: float = 600.0

    def __post_init__(self):
        if self.kind not in ("builtin", "command"):
            raise DataError(f"unknown predictor kind '{self.kind}'")
        if self.kind == "command":
            for ph in ("{train}", "{test}", "{out}"):
                if ph not in self.command:
                    raise DataError(f"predictor command template missing {ph}")


def _write_fold_manifests(fold_dir: Path, train_dirs, test_dir) -> tuple[Path, Path]:
    fold_dir.mkdir(parents=True, exist_ok=True)
    train_path = fold_dir / "train.json"
    train_path.write_text(json.dumps(
        {"cases": [str(Path(d).resolve() / "case.json") for d in train_dirs]},
        indent=2) + "\n")

    src = Path(test_dir).resolve() / "case.json"
    manifest = json.loads(src.read_text())
    frames = []
    for i, entry in enumerate(manifest["frames"]):
        vol = str((src.parent / entry["volume"]).resolve())
        # frame-0 labels stay visible: the documented initialization contract
        # for semi-automatic predictors (template/seed source)
        lab = None
        if i == 0 and entry.get("labels"):
            lab = str((src.parent / entry["labels"]).resolve())
        frames.append({"volume": vol, "labels": lab})
    test_manifest = {"case_id": manifest["case_id"],
                     "frame_interval_s": manifest["frame_interval_s"],
                     "frames": frames,
                     "source_manifest": str(src)}
    test_path = fold_dir / "test.json"
    test_path.write_text(json.dumps(test_manifest, indent=2) + "\n")
    return train_path, test_path


def _run_fold(fold_idx, train_ids, test_id, cases_by_id, predictor, work_dir):
    fold_dir = Path(work_dir) / f"fold_{fold_idx:02d}_{test_id}"
    pred_dir = fold_dir / "pred"
    pred_dir.mkdir(parents=True, exist_ok=True)
    train_path, test_path = _write_fold_manifests(
        fold_dir, [cases_by_id[i] for i in train_ids], cases_by_id[test_id])

    if predictor.kind == "command":
        cmd = predictor.command.format(train=train_path, test=test_path,
                                       out=pred_dir)
        try:
            proc = subprocess.run(shlex.split(cmd), cwd=predictor.workdir,
                                  capture_output=True, text=True,
                                  timeout=predictor.timeout_s)
        except subprocess.TimeoutExpired as e:
            raise PredictorError(f"predictor timed out after {predictor.timeout_s}s") from e
        if proc.returncode != 0:
            tail = (proc.stderr or proc.stdout or "").strip()[-500:]
            raise PredictorError(f"predictor exited {proc.returncode}: {tail}")
    else:
        baseline_predict(train_path, test_path, pred_dir)

    gt = load_case(cases_by_id[test_id])
    pred_frames = []
    for i, frame in enumerate(gt.frames):
        lab_path = pred_dir / f"f{i:03d}_labels.nrrd"
        if not lab_path.exists():
            raise PredictorError(f"predictor wrote no labels for frame {i} "
                                 f"({lab_path.name} missing)")
        labels = load_labels(lab_path)
        require_same_geometry(labels, frame.volume, f"predicted frame {i}")
        pred_frames.append(Frame(frame.volume, labels))
    pred_seq = Sequence4D(pred_frames, gt.frame_interval_s, gt.case_id)
    return dice_report(gt, pred_seq)


def run_loocv(plan: LoocvPlan, predictor: PredictorSpec, cases_by_id: dict,
              work_dir, jobs: int = 1) -> DiceReport:
    """Run every fold; a failing fold is recorded and isolated, the other
    folds still complete. Returns the pooled per-frame report."""
    for _, test_id in plan.folds:
        if test_id not in cases_by_id:
            raise DataError(f"no case directory for id '{test_id}'")

    def task(args):
        idx, (train_ids, test_id) = args
        try:
            rep = _run_fold(idx, train_ids, test_id, cases_by_id, predictor,
                            work_dir)
            rep.folds = [{"test_case": test_id, "status": "ok"}]
            return rep
        except Exception as e:  # fold isolation: any failure is recorded
            return DiceReport([], {}, folds=[{
                "test_case": test_id, "status": "failed", "error": str(e)}])

    jobs = max(1, int(jobs))
    if jobs == 1:
        reports = [task(a) for a in enumerate(plan.folds)]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            reports = list(pool.map(task, enumerate(plan.folds)))
    return pool_reports(reports)


# ---------------------------------------------------------------------------
# Predictors: builtin classical baseline and the copy-ground-truth oracle


def _load_manifest_case(manifest_path) -> Sequence4D:
    return load_case(Path(manifest_path))


def baseline_predict(train_manifest, test_manifest, out_dir,
                     bone_threshold: float = BONE_HU_THRESHOLD) -> Path:
    """Classical baseline standing in for a learned model so the harness is
    testable end to end: HU threshold masked by the frame-0 shape for static
    bones, rigid tracking from the frame-0 template for hyoid/cartilage,
    chained region growing for the bolus, frame-0 copy for soft tissue.
    Requires frame-0 labels in the test manifest (see the LOOCV contract).
    """
    del train_manifest  # the baseline learns nothing from the training cases
    test = _load_manifest_case(test_manifest)
    labels0 = test.frames[0].labels
    if labels0 is None:
        raise PredictorError("baseline needs frame-0 labels in the test manifest")
    n = len(test)
    out = [np.zeros(test.frames[0].volume.dims, dtype=np.uint8) for _ in range(n)]
    present = [int(c) for c in np.unique(labels0.codes) if c != 0]

    def paint(i, mask, code):
        out[i][mask] = code

    for code in (1, 2):  # soft tissue: static frame-0 prior
        if code in present:
            mask0 = labels0.codes == code
            for i in range(n):
                paint(i, mask0, code)
    for code in (3, 4, 5):  # static bones: threshold inside the frame-0 shape
        if code in present:
            region0 = ndimage.binary_dilation(labels0.codes == code)
            for i in range(n):
                thr = test.frames[i].volume.voxels >= bone_threshold
                paint(i, thr & region0, code)
    for code in (6, 7, 8):  # moving bone/cartilage: rigid tracking
        if code in present:
            template = binary_labelmap(labels0, labels0.codes == code)
            for step in track_rigid(test, template):
                paint(step.pose.frame_index, step.mask.as_bool(), code)
    if 9 in present:  # bolus: region growing with chained seeds
        prev = labels0.codes == 9
        for i in range(n):
            vol = test.frames[i].volume
            seed = _chained_seed(vol, prev, BOLUS_HU_RANGE)
            if seed is None:
                continue
            try:
                grown = region_grow(vol, GrowParams((seed,), BOLUS_HU_RANGE))
            except Exception:
                continue
            paint(i, grown.as_bool(), 9)
            prev = grown.as_bool()

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ref = test.frames[0].volume
    for i in range(n):
        save_labels(LabelMap(ref.spacing, ref.origin, out[i]),
                    out_dir / f"f{i:03d}_labels.nrrd")
    return out_dir


def _chained_seed(vol, prev_mask, hu_range):
    """Voxel nearest the previous mask's centroid whose HU is in range."""
    idx = np.argwhere(prev_mask)
    if len(idx) == 0:
        return None
    centroid = idx.mean(axis=0)
    lo, hi = hu_range
    hu = vol.voxels[idx[:, 0], idx[:, 1], idx[:, 2]]
    ok = (hu >= lo) & (hu <= hi)
    if not ok.any():
        return None
    cand = idx[ok]
    best = cand[np.argmin(((cand - centroid) ** 2).sum(axis=1))]
    return tuple(int(c) for c in best)


def copy_gt_predict(test_manifest, out_dir) -> Path:
    """Test oracle: emit the ground-truth labels via the manifest's
    source_manifest pointer (harness metadata, not predictor input)."""
    manifest = json.loads(Path(test_manifest).read_text())
    src = manifest.get("source_manifest")
    if not src:
        raise PredictorError("test manifest has no source_manifest pointer")
    gt = load_case(Path(src))
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(gt.frames):
        if frame.labels is None:
            raise PredictorError(f"source case frame {i} has no labels")
        save_labels(frame.labels, out_dir / f"f{i:03d}_labels.nrrd")
    return out_dir
