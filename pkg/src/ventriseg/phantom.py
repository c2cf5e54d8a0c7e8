"""Synthetic short-axis cardiac studies with closed-form ground-truth volumes.

Geometry (long axis ``z`` runs from the base, ``z = 0``, towards the apex;
slice ``k`` sits at ``z = (n_slices - 1 - k) * slice_spacing`` so slice 0 is
apical and the last slice basal):

- LV endocardium: half-ellipsoid, radius ``R * sqrt(1 - z^2 / c^2)``
- LV epicardium: half-ellipsoid with radius ``R + t`` and axis ``c + t``
- RV endocardium: crescent, the disk of radius ``a * s`` centred ``b * s``
  from the LV centre minus the LV epicardial disk, where ``s`` is the ED
  epicardial radius of that slice (scaled by ``1 - es_contraction`` at ES)

At end systole the endocardial radii shrink by ``1 - es_contraction`` while
the myocardial cross-section area of every slice is conserved.

All volumes are taken over the slab between the first and last slice
planes, the region a slice stack can observe.

On-disk dataset layout::

    manifest.txt                      one line per study (see write_dataset)
    <study_id>/<phase>_<k>_image.pgm  P5, maxval 65535 (16-bit big-endian)
    <study_id>/<phase>_<k>_mask.pgm   P5, maxval 255; bit0 LV endo,
                                      bit1 LV epi, bit2 RV endo
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace

import numpy as np

from .data import PHASES, STRUCTURES, LabeledSlice, crop_resize
from .tensor import Rng

DEFAULT_RATES = (0.96, 0.22, 0.85)

BLOOD = 0.8
RV_BLOOD = 0.75
MYOCARDIUM = 0.2
BACKGROUND = 0.4
PAPILLARY = 0.3
_LEGENDRE = np.polynomial.legendre.leggauss(96)


@dataclass
class PhantomSpec:
    n_slices: int = 8
    image_size: int = 64
    pixel_spacing_mm: float = 2.5
    slice_spacing_mm: float = 8.0
    lv_base_radius_mm: float = 22.0
    wall_thickness_mm: float = 8.0
    rv_crescent_params: tuple[float, float] = (1.0, 1.15)   # (radius ratio, offset ratio)
    es_contraction: float = 0.3
    noise_sd: float = 0.05
    papillary: bool = True
    jitter: float = 0.15
    trusted_fraction: float = 0.7

    def __post_init__(self):
        from .config import ConfigError
        if self.n_slices < 2:
            raise ConfigError("n_slices", "need at least two slices")
        if self.image_size < 8:
            raise ConfigError("image_size", "must be >= 8")
        for key in ("pixel_spacing_mm", "slice_spacing_mm", "lv_base_radius_mm", "wall_thickness_mm"):
            if getattr(self, key) <= 0:
                raise ConfigError(key, "must be positive")
        if not 0.0 <= self.es_contraction < 1.0:
            raise ConfigError("es_contraction", "must lie in [0, 1)")
        if len(self.rv_crescent_params) != 2 or min(self.rv_crescent_params) <= 0:
            raise ConfigError("rv_crescent_params", "expected two positive ratios")
        if self.noise_sd < 0:
            raise ConfigError("noise_sd", "must be non-negative")
        if not 0.0 <= self.jitter < 0.5:
            raise ConfigError("jitter", "must lie in [0, 0.5)")
        if not 0.0 <= self.trusted_fraction <= 1.0:
            raise ConfigError("trusted_fraction", "must lie in [0, 1]")


@dataclass
class PhantomStudy:
    study_id: str
    phases: dict                      # phase -> list[LabeledSlice] (annotated masks)
    truth_masks: dict                 # phase -> (n_slices, 3, H, W) uint8, full ground truth
    analytic_volumes: dict            # (structure, phase) -> mL
    annotator_tier: str = "trusted"
    pixel_spacing_mm: float = 1.0
    slice_spacing_mm: float = 1.0

    @property
    def presence(self):
        return self.phases[PHASES[0]][0].presence.copy()

    @property
    def n_slices(self):
        return len(self.phases[PHASES[0]])


# --------------------------------------------------------------------------
# geometry


@dataclass
class _Geometry:
    R: float            # endo base radius, mm
    t: float            # wall thickness, mm
    c: float            # endo semi-axis along z, mm
    a: float            # RV radius ratio
    b: float            # RV offset ratio
    theta: float        # direction of the RV from the LV centre
    center: tuple       # LV centre (row, col) in pixels
    e: float            # ES contraction
    Z: float            # slab depth, mm
    papillary: tuple = field(default=())   # (angle, radial fraction) per muscle

    def endo(self, z, phase):
        r = self.R * np.sqrt(np.clip(1.0 - (z / self.c) ** 2, 0.0, None))
        return r * (1.0 - self.e) if phase == "ES" else r

    def epi(self, z, phase):
        Re, ce = self.R + self.t, self.c + self.t
        r = Re * np.sqrt(np.clip(1.0 - (z / ce) ** 2, 0.0, None))
        if phase == "ES":
            endo = self.endo(z, "ED")
            r = np.sqrt(r ** 2 - (1.0 - (1.0 - self.e) ** 2) * endo ** 2)
        return r

    def rv(self, z, phase):
        """(radius, centre offset) of the RV disk in mm."""
        s = self.epi(z, "ED")
        if phase == "ES":
            s = s * (1.0 - self.e)
        return self.a * s, self.b * s


def _half_ellipsoid_volume(R, c, Z):
    return np.pi * R ** 2 * (Z - Z ** 3 / (3.0 * c ** 2))


def _lens_area(r1, r2, d):
    """Area of intersection of two disks with radii r1, r2 and centre distance d."""
    r1, r2, d = np.broadcast_arrays(*(np.asarray(v, dtype=np.float64) for v in (r1, r2, d)))
    out = np.zeros(r1.shape)
    apart = d >= r1 + r2
    inside = d <= np.abs(r1 - r2)
    out[inside] = np.pi * np.minimum(r1, r2)[inside] ** 2
    m = ~(apart | inside)
    a, b, dd = r1[m], r2[m], d[m]
    alpha = np.arccos(np.clip((dd ** 2 + a ** 2 - b ** 2) / (2 * dd * a), -1, 1))
    beta = np.arccos(np.clip((dd ** 2 + b ** 2 - a ** 2) / (2 * dd * b), -1, 1))
    out[m] = (a ** 2 * (alpha - np.sin(2 * alpha) / 2) + b ** 2 * (beta - np.sin(2 * beta) / 2))
    return out


def _analytic_volumes(geo: _Geometry):
    vols = {}
    Z = geo.Z
    v_endo = _half_ellipsoid_volume(geo.R, geo.c, Z)
    v_epi = _half_ellipsoid_volume(geo.R + geo.t, geo.c + geo.t, Z)
    shrink = 1.0 - (1.0 - geo.e) ** 2
    vols[("lv_endo", "ED")] = v_endo
    vols[("lv_endo", "ES")] = (1.0 - geo.e) ** 2 * v_endo
    vols[("lv_epi", "ED")] = v_epi
    vols[("lv_epi", "ES")] = v_epi - shrink * v_endo
    # crescent area has no elementary antiderivative in z: Gauss-Legendre on the exact lens formula
    nodes, weights = _LEGENDRE
    z = 0.5 * Z * (nodes + 1.0)
    for phase in PHASES:
        r_rv, d = geo.rv(z, phase)
        area = np.pi * r_rv ** 2 - _lens_area(r_rv, geo.epi(z, phase), d)
        vols[("rv_endo", phase)] = 0.5 * Z * float(np.dot(weights, area))
    return {k: float(v) / 1000.0 for k, v in vols.items()}


def _sample_geometry(spec: PhantomSpec, rng: Rng) -> _Geometry:
    j = spec.jitter
    u = rng.uniform(-1.0, 1.0, 8)
    R = spec.lv_base_radius_mm * (1.0 + j * u[0])
    t = spec.wall_thickness_mm * (1.0 + j * u[1])
    h = spec.slice_spacing_mm
    Z = (spec.n_slices - 1) * h
    c = spec.n_slices * h * (1.1 + 0.5 * j * u[2])
    a, b = spec.rv_crescent_params
    a *= 1.0 + 0.5 * j * u[3]
    theta = np.pi + 2.0 * j * u[4]
    e = spec.es_contraction * (1.0 + 0.5 * j * u[5]) if spec.es_contraction > 0 else 0.0
    # centre the LV+RV complex, then jitter
    ps = spec.pixel_spacing_mm
    epi_px = (R + t) / ps
    span = (a + b - 1.0) / 2.0 * epi_px
    half = (spec.image_size - 1) / 2.0
    row = half - span * np.sin(theta) + j * 10 * u[6]
    col = half - span * np.cos(theta) + j * 10 * u[7]
    papillary = ()
    if spec.papillary:
        angles = rng.uniform(0.0, 2 * np.pi, 2)
        papillary = tuple((float(ang), 0.55) for ang in angles)
    return _Geometry(R=R, t=t, c=c, a=a, b=b, theta=theta, center=(row, col), e=e, Z=Z,
                     papillary=papillary)


def _check_frame(spec, geo):
    ps = spec.pixel_spacing_mm
    row, col = geo.center
    r_epi = geo.epi(0.0, "ED") / ps
    r_rv, d = (v / ps for v in geo.rv(0.0, "ED"))
    rv_row = row + d * np.sin(geo.theta)
    rv_col = col + d * np.cos(geo.theta)
    lo = min(row - r_epi, col - r_epi, rv_row - r_rv, rv_col - r_rv)
    hi = max(row + r_epi, col + r_epi, rv_row + r_rv, rv_col + r_rv)
    if lo < 0.5 or hi > spec.image_size - 1.5:
        raise ValueError("phantom out of frame")


def _rasterize(spec, geo, z, phase):
    """Return (image without noise, masks) for one slice."""
    n = spec.image_size
    ps = spec.pixel_spacing_mm
    rows, cols = np.meshgrid(np.arange(n, dtype=np.float64), np.arange(n, dtype=np.float64),
                             indexing="ij")
    row, col = geo.center
    dist_lv = np.hypot(rows - row, cols - col) * ps
    endo = dist_lv <= geo.endo(z, phase)
    epi = dist_lv <= geo.epi(z, phase)
    r_rv, d = geo.rv(z, phase)
    rv_row = row + d / ps * np.sin(geo.theta)
    rv_col = col + d / ps * np.cos(geo.theta)
    rv = (np.hypot(rows - rv_row, cols - rv_col) * ps <= r_rv) & ~epi

    image = np.full((n, n), BACKGROUND)
    image[epi] = MYOCARDIUM
    image[endo] = BLOOD
    image[rv] = RV_BLOOD
    r_endo = geo.endo(z, phase)
    for ang, frac in geo.papillary:
        pr = row + frac * r_endo / ps * np.sin(ang)
        pc = col + frac * r_endo / ps * np.cos(ang)
        dot = np.hypot(rows - pr, cols - pc) * ps <= 0.18 * r_endo
        image[dot & endo] = PAPILLARY
    masks = np.stack([endo, epi, rv]).astype(np.uint8)
    return image, masks


def _quantize(image):
    return np.round(np.clip(image, 0.0, 1.0) * 65535.0) / 65535.0


def generate_study(seed, spec: PhantomSpec, study_id=None) -> PhantomStudy:
    """Deterministically synthesize one two-phase study from ``(seed, spec)``."""
    rng = Rng(seed, ("phantom",))
    geo = _sample_geometry(spec, rng.child("geometry"))
    _check_frame(spec, geo)
    h = spec.slice_spacing_mm
    tier = "trusted" if rng.child("tier").random() < spec.trusted_fraction else "other"
    phases, truth = {}, {}
    presence = np.ones(3, dtype=bool)
    for phase in PHASES:
        slices, stack = [], []
        for k in range(spec.n_slices):
            z = (spec.n_slices - 1 - k) * h
            clean, masks = _rasterize(spec, geo, z, phase)
            noise = rng.child(f"noise{k}").normal(0.0, spec.noise_sd, clean.shape)
            image = _quantize(clean + noise)
            stack.append(masks)
            slices.append(LabeledSlice(image[None, None], masks[None].copy(), presence.copy(),
                                       (spec.pixel_spacing_mm, spec.pixel_spacing_mm)))
        phases[phase] = slices
        truth[phase] = np.stack(stack)
    return PhantomStudy(study_id=study_id or f"S{seed:06d}", phases=phases, truth_masks=truth,
                        analytic_volumes=_analytic_volumes(geo), annotator_tier=tier,
                        pixel_spacing_mm=spec.pixel_spacing_mm, slice_spacing_mm=h)


def generate_dataset(n_studies, seed, spec: PhantomSpec):
    """``n_studies`` studies with ids ``S000000...`` in generation order."""
    base = Rng(seed, ("dataset",))
    seeds = base.integers(0, 2**62, n_studies)
    return [generate_study(int(s), spec, study_id=f"S{i:06d}") for i, s in enumerate(seeds)]


def with_presence(study: PhantomStudy, presence) -> PhantomStudy:
    """Copy of ``study`` with annotations restricted to ``presence``; truth masks kept."""
    presence = np.asarray(presence, dtype=bool)
    phases = {}
    for phase in PHASES:
        out = []
        for k, sl in enumerate(study.phases[phase]):
            masks = study.truth_masks[phase][k][None].copy()
            masks[:, ~presence] = 0
            out.append(replace(sl, masks=masks, presence=presence.copy()))
        phases[phase] = out
    return replace(study, phases=phases)


def resample_study(study: PhantomStudy, crop_fraction, image_size) -> PhantomStudy:
    """Centre-crop and resize every slice (and the truth masks) of ``study``."""
    phases, truth = {}, {}
    spacing = study.pixel_spacing_mm
    for phase in PHASES:
        out, stack = [], []
        for k, sl in enumerate(study.phases[phase]):
            full = replace(sl, masks=study.truth_masks[phase][k][None])
            full = crop_resize(full, crop_fraction, image_size)
            annotated = full.masks.copy()
            annotated[:, ~sl.presence] = 0
            out.append(replace(full, masks=annotated))
            stack.append(full.masks[0])
            spacing = full.pixel_spacing_mm[0]
        phases[phase] = out
        truth[phase] = np.stack(stack)
    return replace(study, phases=phases, truth_masks=truth, pixel_spacing_mm=spacing)


def sparsify_annotations(studies, rng: Rng, rates=DEFAULT_RATES):
    """Drop each structure's annotation per study with probability ``1 - rate``."""
    rates = np.asarray(rates, dtype=np.float64)
    if rates.shape != (3,) or np.any(rates < 0) or np.any(rates > 1):
        raise ValueError(f"rates must be three fractions in [0, 1], got {rates}")
    out = []
    for study in studies:
        keep = rng.child(study.study_id).random(3) < rates
        out.append(with_presence(study, keep))
    return out


def split_chronological(studies, fractions=(0.8, 0.1, 0.1)):
    """Split by ascending study id into train/val/holdout; holdout keeps trusted annotators only."""
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9 or min(fractions) < 0:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    ordered = sorted(studies, key=lambda s: s.study_id)
    n = len(ordered)
    n_train = int(round(fractions[0] * n))
    n_val = int(round(fractions[1] * n))
    train = ordered[:n_train]
    val = ordered[n_train:n_train + n_val]
    holdout = [s for s in ordered[n_train + n_val:] if s.annotator_tier == "trusted"]
    for name, part in (("train", train), ("val", val), ("holdout", holdout)):
        if not part:
            raise ValueError(f"{name} split is empty")
    return train, val, holdout


# --------------------------------------------------------------------------
# dataset files


def write_pgm(path, array, maxval):
    array = np.asarray(array)
    h, w = array.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    dtype = ">u2" if maxval > 255 else "u1"
    with open(path, "wb") as fh:
        fh.write(header + array.astype(dtype).tobytes())


def read_pgm(path):
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while not blob[pos:pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos].decode("ascii"))
    pos += 1
    if tokens[0] != "P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    dtype = ">u2" if maxval > 255 else "u1"
    data = np.frombuffer(blob, dtype=dtype, count=w * h, offset=pos)
    return data.reshape(h, w).astype(np.int64), maxval


def _floats(values):
    return ",".join(repr(float(v)) for v in values)


def write_dataset(studies, root):
    """Write studies under ``root``; manifest lines are ``key=value`` tokens."""
    os.makedirs(root, exist_ok=True)
    lines = ["# ventriseg phantom dataset v1\n"]
    for study in sorted(studies, key=lambda s: s.study_id):
        sdir = os.path.join(root, study.study_id)
        os.makedirs(sdir, exist_ok=True)
        image_size = study.phases[PHASES[0]][0].image.shape[-1]
        fields = [f"id={study.study_id}", f"tier={study.annotator_tier}",
                  f"pixel_spacing_mm={study.pixel_spacing_mm!r}",
                  f"slice_spacing_mm={study.slice_spacing_mm!r}",
                  f"n_slices={study.n_slices}", f"image_size={image_size}",
                  f"phases={','.join(PHASES)}",
                  "presence=" + ",".join(str(int(p)) for p in study.presence)]
        for phase in PHASES:
            fields.append(f"volumes_{phase}=" + _floats(study.analytic_volumes[(s, phase)]
                                                        for s in STRUCTURES))
            for k, sl in enumerate(study.phases[phase]):
                raw = np.round(sl.image[0, 0] * 65535.0).astype(np.int64)
                write_pgm(os.path.join(sdir, f"{phase}_{k:02d}_image.pgm"), raw, 65535)
                bits = study.truth_masks[phase][k]
                packed = bits[0] | (bits[1] << 1) | (bits[2] << 2)
                write_pgm(os.path.join(sdir, f"{phase}_{k:02d}_mask.pgm"), packed, 255)
        lines.append(" ".join(fields) + "\n")
    with open(os.path.join(root, "manifest.txt"), "w", encoding="ascii") as fh:
        fh.writelines(lines)


def read_dataset(root):
    studies = []
    with open(os.path.join(root, "manifest.txt"), encoding="ascii") as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            rec = dict(tok.split("=", 1) for tok in line.split())
            studies.append(_read_study(root, rec))
    return studies


def _read_study(root, rec):
    sid = rec["id"]
    ps = float(rec["pixel_spacing_mm"])
    n = int(rec["n_slices"])
    presence = np.array([bool(int(v)) for v in rec["presence"].split(",")])
    vols = {}
    phases, truth = {}, {}
    for phase in rec["phases"].split(","):
        for s, v in zip(STRUCTURES, rec[f"volumes_{phase}"].split(",")):
            vols[(s, phase)] = float(v)
        slices, stack = [], []
        for k in range(n):
            raw, _ = read_pgm(os.path.join(root, sid, f"{phase}_{k:02d}_image.pgm"))
            packed, _ = read_pgm(os.path.join(root, sid, f"{phase}_{k:02d}_mask.pgm"))
            bits = np.stack([(packed >> i) & 1 for i in range(3)]).astype(np.uint8)
            stack.append(bits)
            masks = bits[None].copy()
            masks[:, ~presence] = 0
            slices.append(LabeledSlice((raw / 65535.0)[None, None], masks, presence.copy(), (ps, ps)))
        phases[phase] = slices
        truth[phase] = np.stack(stack)
    return PhantomStudy(study_id=sid, phases=phases, truth_masks=truth, analytic_volumes=vols,
                        annotator_tier=rec["tier"], pixel_spacing_mm=ps,
                        slice_spacing_mm=float(rec["slice_spacing_mm"]))
