"""Volumetry and agreement statistics: frustum volumes, RAVE, Dice,
Bland-Altman limits and the Wilcoxon-Mann-Whitney rank test."""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import stats

from .data import PHASES, STRUCTURES

EXACT_MAX_POOLED = 14
LOA_Z = 1.96


def frustum_volume(areas_mm2, slice_spacing_mm) -> float:
    """Slice-stack volume in mL from per-slice areas (mm^2).

    Adjacent slices bound a conical frustum, ``h/3 * (A_i + A_j + sqrt(A_i A_j))``;
    no caps are added beyond the outermost slices. A single slice is treated
    as a slab of thickness ``h``.
    """
    a = np.asarray(areas_mm2, dtype=np.float64)
    if a.ndim != 1 or a.size < 1:
        raise ValueError("need at least one slice area")
    if np.any(a < 0):
        raise ValueError("areas must be non-negative")
    h = float(slice_spacing_mm)
    if h < 0:
        raise ValueError(f"negative slice spacing {h}")
    if a.size == 1:
        return float(a[0] * h / 1000.0)
    lo, hi = a[:-1], a[1:]
    return float(np.sum(h / 3.0 * (lo + hi + np.sqrt(lo * hi))) / 1000.0)


def mask_volume(masks, pixel_spacing_mm, slice_spacing_mm) -> float:
    """Frustum volume (mL) of a ``(n_slices, H, W)`` binary mask stack."""
    ps = np.broadcast_to(np.asarray(pixel_spacing_mm, dtype=np.float64), (2,))
    areas = np.asarray(masks).reshape(len(masks), -1).sum(axis=1) * ps[0] * ps[1]
    return frustum_volume(areas, slice_spacing_mm)


def rave(v_pred, v_truth) -> float:
    """Relative absolute volume error ``|v_pred - v_truth| / v_truth``."""
    if not v_truth > 0:
        raise ValueError(f"truth volume must be positive, got {v_truth}")
    return abs(v_pred - v_truth) / v_truth


def dice(mask_a, mask_b) -> float:
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"dice: shape mismatch {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total


# --------------------------------------------------------------------------
# agreement


@dataclass(frozen=True)
class AgreementStats:
    bias_mL: float
    sd_mL: float
    loa_low_mL: float
    loa_high_mL: float
    n: int


def bland_altman(pairs) -> AgreementStats:
    """Bias and 95% limits of agreement of ``pred - truth`` over (truth, pred) pairs."""
    arr = np.asarray(pairs, dtype=np.float64).reshape(-1, 2)
    n = len(arr)
    if n < 2:
        raise ValueError(f"Bland-Altman needs at least 2 pairs, got {n}")
    d = arr[:, 1] - arr[:, 0]
    bias = float(d.mean())
    sd = float(d.std(ddof=1))
    return AgreementStats(bias, sd, bias - LOA_Z * sd, bias + LOA_Z * sd, n)


@dataclass(frozen=True)
class WmwResult:
    u_statistic: float
    p_value: float
    n1: int
    n2: int
    method: str


def _u_from_ranks(rank_sum, n1):
    return rank_sum - n1 * (n1 + 1) / 2.0


def mann_whitney_u(sample_a, sample_b, exact_max=EXACT_MAX_POOLED) -> WmwResult:
    """Two-sided Wilcoxon-Mann-Whitney test.

    ``U_a`` counts pairs with ``a > b`` plus half the ties. For a pooled size
    up to ``exact_max`` the p-value comes from enumerating every labelling of
    the pooled (mid-ranked) data; above it a normal approximation with tie
    correction and continuity correction is used.
    """
    a = np.asarray(sample_a, dtype=np.float64).ravel()
    b = np.asarray(sample_b, dtype=np.float64).ravel()
    n1, n2 = a.size, b.size
    if n1 == 0 or n2 == 0:
        raise ValueError("both samples must be non-empty")
    pooled = np.concatenate([a, b])
    ranks = stats.rankdata(pooled)
    u = _u_from_ranks(ranks[:n1].sum(), n1)
    mu = n1 * n2 / 2.0
    dev = abs(u - mu)
    if n1 + n2 <= exact_max:
        # doubled ranks are integers, so the comparison below is exact
        r2 = np.rint(2 * ranks).astype(np.int64)
        target = np.rint(2 * dev).astype(np.int64)
        hits = total = 0
        base = n1 * (n1 + 1)
        for combo in itertools.combinations(range(n1 + n2), n1):
            u2 = int(r2[list(combo)].sum()) - base      # 2 * U for this labelling
            if abs(u2 - n1 * n2) >= target:
                hits += 1
            total += 1
        return WmwResult(float(u), hits / total, n1, n2, "exact")
    _, counts = np.unique(pooled, return_counts=True)
    n = n1 + n2
    tie = float(np.sum(counts ** 3 - counts))
    var = n1 * n2 / 12.0 * ((n + 1) - tie / (n * (n - 1)))
    if var <= 0:
        return WmwResult(float(u), 1.0, n1, n2, "normal_approx")
    z = max(dev - 0.5, 0.0) / math.sqrt(var)
    p = min(1.0, 2.0 * stats.norm.sf(z))
    return WmwResult(float(u), max(p, np.finfo(float).tiny), n1, n2, "normal_approx")


# --------------------------------------------------------------------------
# per-study reports


@dataclass
class VolumeRow:
    study_id: str
    structure: str
    phase: str
    v_truth: float
    v_pred: float
    rave: float
    dice: float


def volume_report(study, predicted, structures=None):
    """Rows of truth/predicted volume, RAVE and Dice for one study.

    ``predicted`` maps phase -> ``(n_slices, 3, H, W)`` binary masks. Truth
    volumes come from the study's ground-truth masks with the same frustum
    rule, so RAVE isolates segmentation error. Only annotated structures are
    reported unless ``structures`` overrides the selection.
    """
    if structures is None:
        structures = [s for s, p in zip(STRUCTURES, study.presence) if p]
    rows = []
    ps = study.pixel_spacing_mm
    h = study.slice_spacing_mm
    for phase in PHASES:
        truth = study.truth_masks[phase]
        pred = predicted[phase]
        for s in structures:
            k = STRUCTURES.index(s)
            vt = mask_volume(truth[:, k], ps, h)
            vp = mask_volume(pred[:, k], ps, h)
            rows.append(VolumeRow(study.study_id, s, phase, vt, vp, rave(vp, vt),
                                  dice(truth[:, k], pred[:, k])))
    return rows


METRIC_COLUMNS = ("study_id", "structure", "phase", "v_truth", "v_pred", "rave", "dice")


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for r in rows:
        w.writerow([r.study_id, r.structure, r.phase, repr(r.v_truth), repr(r.v_pred),
                    repr(r.rave), repr(r.dice)])
    return buf.getvalue()


def rows_from_csv(text):
    reader = csv.DictReader(io.StringIO(text))
    missing = set(METRIC_COLUMNS) - set(reader.fieldnames or ())
    if missing:
        raise ValueError(f"metrics CSV lacks columns {sorted(missing)}")
    return [VolumeRow(r["study_id"], r["structure"], r["phase"], float(r["v_truth"]),
                      float(r["v_pred"]), float(r["rave"]), float(r["dice"])) for r in reader]


def summarize(rows):
    """Per (structure, phase) medians and Bland-Altman statistics."""
    out = {}
    for s in STRUCTURES:
        for phase in PHASES:
            sel = [r for r in rows if r.structure == s and r.phase == phase]
            if not sel:
                continue
            entry = {"n": len(sel),
                     "median_rave": float(np.median([r.rave for r in sel])),
                     "mean_rave": float(np.mean([r.rave for r in sel])),
                     "median_dice": float(np.median([r.dice for r in sel]))}
            if len(sel) >= 2:
                entry["bland_altman"] = asdict(bland_altman([(r.v_truth, r.v_pred) for r in sel]))
            out[f"{s}/{phase}"] = entry
    return out


def compare(rows_a, rows_b):
    """WMW comparison of the RAVE distributions of two methods per (structure, phase)."""
    out = {}
    for s in STRUCTURES:
        for phase in PHASES:
            ra = [r.rave for r in rows_a if r.structure == s and r.phase == phase]
            rb = [r.rave for r in rows_b if r.structure == s and r.phase == phase]
            if not ra or not rb:
                continue
            res = mann_whitney_u(ra, rb)
            out[f"{s}/{phase}"] = {"median_rave_a": float(np.median(ra)),
                                   "median_rave_b": float(np.median(rb)),
                                   "u_statistic": res.u_statistic, "p_value": res.p_value,
                                   "n1": res.n1, "n2": res.n2, "method": res.method,
                                   "alternative": "two-sided"}
    return out


def to_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"
