import dataclasses

import numpy as np
import pytest
from scipy import integrate

from conftest import SMALL_SPEC
from ventriseg.config import ConfigError
from ventriseg.data import PHASES, STRUCTURES
from ventriseg.metrics import mask_volume
from ventriseg.phantom import (PhantomSpec, _sample_geometry, generate_dataset, generate_study,
                               read_dataset, read_pgm, resample_study, sparsify_annotations,
                               split_chronological, with_presence, write_dataset, write_pgm)
from ventriseg.tensor import Rng


def _same_study(a, b):
    assert a.study_id == b.study_id and a.annotator_tier == b.annotator_tier
    assert a.analytic_volumes == b.analytic_volumes
    for ph in PHASES:
        assert np.array_equal(a.truth_masks[ph], b.truth_masks[ph])
        for sa, sb in zip(a.phases[ph], b.phases[ph]):
            assert sa.image.tobytes() == sb.image.tobytes()
            assert np.array_equal(sa.masks, sb.masks)
            assert np.array_equal(sa.presence, sb.presence)


def test_generation_is_deterministic():
    _same_study(generate_study(17, SMALL_SPEC), generate_study(17, SMALL_SPEC))
    a, b = generate_study(17, SMALL_SPEC), generate_study(18, SMALL_SPEC)
    assert a.phases["ED"][0].image.tobytes() != b.phases["ED"][0].image.tobytes()


def test_zero_contraction_gives_identical_phases():
    spec = dataclasses.replace(SMALL_SPEC, es_contraction=0.0, noise_sd=0.0)
    s = generate_study(3, spec)
    assert np.array_equal(s.truth_masks["ED"], s.truth_masks["ES"])
    for a, b in zip(s.phases["ED"], s.phases["ES"]):
        assert np.array_equal(a.image, b.image)


def test_volume_invariants(small_studies):
    for s in small_studies:
        for k, name in enumerate(STRUCTURES):
            assert s.analytic_volumes[(name, "ED")] > s.analytic_volumes[(name, "ES")] > 0
        for ph in PHASES:
            endo, epi = s.truth_masks[ph][:, 0], s.truth_masks[ph][:, 1]
            assert np.all(endo <= epi)
            assert not np.any(s.truth_masks[ph][:, 2] & epi)


def test_intensity_model():
    spec = dataclasses.replace(SMALL_SPEC, noise_sd=0.0, papillary=False)
    s = generate_study(5, spec)
    img = s.phases["ED"][0].image[0, 0]
    masks = s.truth_masks["ED"][0]
    assert np.allclose(img[masks[0] == 1], 0.8, atol=1e-4)
    assert np.allclose(img[(masks[1] == 1) & (masks[0] == 0)], 0.2, atol=1e-4)
    assert np.allclose(img[(masks[1] == 0) & (masks[2] == 0)], 0.4, atol=1e-4)


def test_analytic_volumes_match_numeric_integration():
    spec = PhantomSpec()
    geo = _sample_geometry(spec, Rng(11, ("phantom",)).child("geometry"))
    study = generate_study(11, spec)
    for ph in PHASES:
        lv = integrate.quad(lambda z: np.pi * geo.endo(z, ph) ** 2, 0, geo.Z)[0] / 1000
        assert study.analytic_volumes[("lv_endo", ph)] == pytest.approx(lv, rel=1e-8)
        epi = integrate.quad(lambda z: np.pi * geo.epi(z, ph) ** 2, 0, geo.Z)[0] / 1000
        assert study.analytic_volumes[("lv_epi", ph)] == pytest.approx(epi, rel=1e-8)
        # RV crescent by counting points of a 0.1 mm grid, then Simpson in z
        zs = np.linspace(0, geo.Z, 21)
        g = np.arange(-80, 80, 0.1) + 0.05
        yy, xx = np.meshgrid(g, g, indexing="ij")
        areas = []
        for z in zs:
            r, d = geo.rv(z, ph)
            inside = (np.hypot(yy, xx - d) <= r) & (np.hypot(yy, xx) > geo.epi(z, ph))
            areas.append(inside.sum() * 0.01)
        rv = integrate.simpson(areas, x=zs) / 1000
        assert study.analytic_volumes[("rv_endo", ph)] == pytest.approx(rv, rel=5e-3)


def test_rasterized_volume_close_to_analytic():
    spec = PhantomSpec(n_slices=12, image_size=128, pixel_spacing_mm=1.25, slice_spacing_mm=8.0)
    for seed in range(3):
        s = generate_study(seed, spec)
        for ph in PHASES:
            for k, name in enumerate(STRUCTURES):
                v = mask_volume(s.truth_masks[ph][:, k], s.pixel_spacing_mm, s.slice_spacing_mm)
                assert v == pytest.approx(s.analytic_volumes[(name, ph)], rel=0.03), (name, ph)


def test_out_of_frame_and_spec_errors():
    with pytest.raises(ValueError, match="phantom out of frame"):
        generate_study(0, PhantomSpec(image_size=32, pixel_spacing_mm=1.0))
    for key, value in [("es_contraction", 1.0), ("n_slices", 1), ("pixel_spacing_mm", 0.0),
                       ("noise_sd", -1.0)]:
        with pytest.raises(ConfigError) as err:
            PhantomSpec(**{key: value})
        assert err.value.key == key


def test_sparsify_extremes(small_studies):
    kept = sparsify_annotations(small_studies, Rng(0), rates=(1, 1, 1))
    for a, b in zip(kept, small_studies):
        _same_study(a, b)
    dropped = sparsify_annotations(small_studies, Rng(0), rates=(0, 0, 0))
    for s in dropped:
        assert not s.presence.any()
        assert all(not sl.masks.any() for ph in PHASES for sl in s.phases[ph])
        assert s.truth_masks["ED"].any()          # ground truth survives


def test_sparsify_binomial_rate():
    studies = [generate_study(i, SMALL_SPEC, study_id=f"S{i:06d}") for i in range(1000)]
    out = sparsify_annotations(studies, Rng(42), rates=(0.96, 0.22, 0.85))
    counts = np.sum([s.presence for s in out], axis=0)
    assert 187 <= counts[1] <= 253
    assert 941 <= counts[0] <= 979 and 816 <= counts[2] <= 884
    with pytest.raises(ValueError):
        sparsify_annotations(studies[:1], Rng(0), rates=(1.2, 0, 0))


def test_with_presence_zeroes_masks(small_studies):
    s = with_presence(small_studies[0], [True, False, True])
    for sl in s.phases["ES"]:
        assert not sl.masks[0, 1].any()
        assert list(sl.presence) == [True, False, True]


class _Stub:
    def __init__(self, sid, tier):
        self.study_id, self.annotator_tier = sid, tier


def test_split_chronological():
    studies = [_Stub(f"S{i:06d}", "trusted") for i in reversed(range(10))]
    tr, va, ho = split_chronological(studies)
    assert [s.study_id for s in tr] == [f"S{i:06d}" for i in range(8)]
    assert [s.study_id for s in va] == ["S000008"] and [s.study_id for s in ho] == ["S000009"]
    with pytest.raises(ValueError):
        split_chronological(studies[:2])
    with pytest.raises(ValueError):
        split_chronological(studies, (0.5, 0.5, 0.5))


def test_split_set_algebra_and_trust_filter():
    rng = np.random.default_rng(0)
    for _ in range(20):
        ids = rng.choice(10_000, size=int(rng.integers(20, 60)), replace=False)
        studies = [_Stub(f"S{i:06d}", "trusted" if rng.random() < 0.7 else "other") for i in ids]
        tr, va, ho = split_chronological(studies)
        n_hold = len(studies) - len(tr) - len(va)
        tail = sorted(studies, key=lambda s: s.study_id)[len(tr) + len(va):]
        assert len(tail) == n_hold
        got = {s.study_id for s in tr} | {s.study_id for s in va} | {s.study_id for s in tail}
        assert got == {s.study_id for s in studies}
        assert not ({s.study_id for s in tr} & {s.study_id for s in va})
        assert all(s.annotator_tier == "trusted" for s in ho)
        assert [s.study_id for s in ho] == [s.study_id for s in tail if s.annotator_tier == "trusted"]
        assert max(s.study_id for s in tr) < min(s.study_id for s in va)


def test_dataset_round_trip(tmp_path, small_studies):
    studies = sparsify_annotations(small_studies[:3], Rng(1))
    write_dataset(studies, tmp_path / "a")
    back = read_dataset(tmp_path / "a")
    for a, b in zip(studies, back):
        _same_study(a, b)
    write_dataset(back, tmp_path / "b")
    for name in ("manifest.txt", f"{studies[0].study_id}/ES_01_mask.pgm",
                 f"{studies[0].study_id}/ED_00_image.pgm"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_pgm_format(tmp_path):
    arr = np.array([[0, 1, 65535], [256, 2, 3]])
    write_pgm(tmp_path / "x.pgm", arr, 65535)
    blob = (tmp_path / "x.pgm").read_bytes()
    assert blob.startswith(b"P5\n3 2\n65535\n")
    assert blob[-2:] == b"\x00\x03"                # big-endian 16-bit payload
    back, maxval = read_pgm(tmp_path / "x.pgm")
    assert maxval == 65535 and np.array_equal(back, arr)
    (tmp_path / "c.pgm").write_bytes(b"P5\n# comment\n2 1\n255\n\x07\x09")
    assert read_pgm(tmp_path / "c.pgm")[0].tolist() == [[7, 9]]


def test_mask_bit_packing(tmp_path, small_studies):
    write_dataset(small_studies[:1], tmp_path)
    s = small_studies[0]
    packed, _ = read_pgm(tmp_path / s.study_id / "ED_01_mask.pgm")
    t = s.truth_masks["ED"][1]
    assert np.array_equal(packed, t[0] + 2 * t[1] + 4 * t[2])


def test_resample_study(small_studies):
    s = resample_study(small_studies[0], 0.75, 16)
    assert s.truth_masks["ED"].shape == (4, 3, 16, 16)
    assert s.phases["ES"][0].image.shape == (1, 1, 16, 16)
    assert s.pixel_spacing_mm == pytest.approx(5.0 * 24 / 16)
    assert s.analytic_volumes == small_studies[0].analytic_volumes


def test_generate_dataset_ids():
    ds = generate_dataset(3, 9, SMALL_SPEC)
    assert [s.study_id for s in ds] == ["S000000", "S000001", "S000002"]
