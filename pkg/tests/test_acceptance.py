"""Acceptance criteria 1-10, each at its stated tolerance and time budget.

Run ``pytest tests/test_acceptance.py -v``; the terminal summary prints one
PASS/FAIL line per criterion. Criterion 3 trains both reference models
(roughly 5 + 18 minutes on one CPU core).
"""

import time

import numpy as np
import pytest

import test_graph_models as tgm
import test_layers as tl
from conftest import numeric_grad, rel_err
from test_metrics import brute_force_p, u_by_pairs
from test_search import brute_force_winner, rec
from test_train import tiny_net
from ventriseg.cli import main as cli_main
from ventriseg.graph import count_parameters, peak_activation_bytes
from ventriseg.metrics import bland_altman, frustum_volume, mann_whitney_u, mask_volume, volume_report
from ventriseg.models import DV_REF, FV_REF, FastVentricleConfig, build
from ventriseg.phantom import PhantomSpec, generate_dataset, generate_study
from ventriseg.search import benchmark_inference, optimize_input, select_winner
from ventriseg.tensor import Rng
from ventriseg.train import TrainConfig, infer_masks, masked_bce_loss, train

# Regression goldens frozen from the reference run (float32, seed 0).
FV_FINAL_TRAIN_LOSS = 0.01502   # checked to 20%
DREAM_FINAL_LOSS = 0.01390      # checked to a factor of 2

TRAIN_BUDGET_S = 20 * 60
FV_SETTINGS = dict(batch_size=8, epochs=20, learning_rate=3e-3, dropout_p=0.1,
                   slices_per_phase=1, bn_calibration_phases=4, dtype="float32", seed=0)
DV_SETTINGS = dict(FV_SETTINGS, learning_rate=3e-4)


def within(seconds, budget):
    assert seconds < budget, f"took {seconds:.1f} s, budget {budget} s"


# -- shared phantom-scale training runs ---------------------------------------------------


@pytest.fixture(scope="session")
def phantom_split():
    studies = generate_dataset(230, 0, PhantomSpec())
    # a small validation set keeps the per-epoch evaluation cheap; 206-209 are unused
    return studies[:200], studies[200:206], studies[210:230]


def _train_reference(config, settings, split):
    tr, va, ho = split
    graph = build(config, seed=0)
    t0 = time.perf_counter()
    graph, history = train(graph, tr, TrainConfig(**settings), va)
    seconds = time.perf_counter() - t0
    rows = []
    for s in ho:
        rows += volume_report(s, infer_masks(graph, s))
    lv = {ph: [r for r in rows if r.structure == "lv_endo" and r.phase == ph] for ph in ("ED", "ES")}
    report = {
        "seconds": seconds,
        "initial_loss": history.initial_loss,
        "final_loss": history.train_loss[-1],
        "dice": float(np.mean([r.dice for ph in lv for r in lv[ph]])),
        "median_rave": float(np.median([r.rave for ph in lv for r in lv[ph]])),
        "mean_rave_ed": float(np.mean([r.rave for r in lv["ED"]])),
        "mean_rave_es": float(np.mean([r.rave for r in lv["ES"]])),
    }
    print(f"\n{type(config).__name__}: " + ", ".join(f"{k}={v:.4g}" for k, v in report.items()))
    return graph, report


@pytest.fixture(scope="session")
def trained_fv(phantom_split):
    return _train_reference(FV_REF, FV_SETTINGS, phantom_split)


@pytest.fixture(scope="session")
def trained_dv(phantom_split):
    return _train_reference(DV_REF, DV_SETTINGS, phantom_split)


# -- 1 ---------------------------------------------------------------------------------------


@pytest.mark.criterion(1, "gradient integrity (per layer < 1e-6, end-to-end < 1e-5, 3 seeds)")
def test_c01_gradient_integrity():
    t0 = time.perf_counter()
    for seed in tl.SEEDS:
        for spec in tl.CONV_CASES:
            tl.test_conv_gradients(spec, seed)
        for mode in (True, False):
            tl.test_batchnorm_gradients(seed, mode)
        tl.test_activation_gradients(seed)
        tl.test_plumbing_gradients(seed)
        tl.test_pool_unpool_gradients(seed)
        tgm.test_graph_end_to_end_gradient(seed)
        # masked loss through a two-layer network on 8x8 inputs
        g = tiny_net(seed)
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(2, 1, 8, 8))
        t = (rng.random((2, 3, 8, 8)) > 0.5).astype(np.uint8)
        pres = np.array([[1, 0, 1], [1, 1, 0]], dtype=bool)
        loss = lambda: masked_bce_loss(g.forward(x), t, pres)[0]
        _, grad = masked_bce_loss(g.forward(x), t, pres)
        gx = g.backward(grad)
        grads = {k: v.copy() for k, v in g.gradients().items()}
        assert rel_err(gx, numeric_grad(loss, x)) < 1e-5
        for k, p in g.parameters().items():
            assert rel_err(grads[k], numeric_grad(loss, p)) < 1e-5, k
    within(time.perf_counter() - t0, 60)


# -- 2 ---------------------------------------------------------------------------------------


@pytest.mark.criterion(2, "masking exactness (bit-identical to deleting the channel)")
def test_c02_masking_exactness():
    t0 = time.perf_counter()
    cfg = FastVentricleConfig(initial_filters=8, projection_ratio=2, initial_bottlenecks=1,
                              section2_repeats=1, input_size=16)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 1, 16, 16))
    target = (rng.random((3, 3, 16, 16)) > 0.5).astype(np.uint8)
    for k in range(3):
        keep = [c for c in range(3) if c != k]

        def grads(masked):
            g = build(cfg, seed=1)
            logits = g.forward(x, train=True, rng=Rng(5, ("drop",)))
            if masked:
                pres = np.ones((3, 3), dtype=bool)
                pres[:, k] = False
                loss, gl = masked_bce_loss(logits, target, pres)
            else:
                sub = np.ascontiguousarray(logits[:, keep])
                loss, gsub = masked_bce_loss(sub, target[:, keep], np.ones((3, 2), dtype=bool))
                gl = np.zeros_like(logits)
                gl[:, keep] = gsub
            gx = g.backward(gl)
            return loss, gx, {n: v.copy() for n, v in g.gradients().items()}

        l1, gx1, g1 = grads(True)
        l2, gx2, g2 = grads(False)
        assert l1 == l2
        assert np.array_equal(gx1, gx2)
        assert g1.keys() == g2.keys()
        assert all(np.array_equal(g1[n], g2[n]) for n in g1)
    within(time.perf_counter() - t0, 10)


# -- 3 ---------------------------------------------------------------------------------------


def _check_phantom_training(report):
    assert report["seconds"] <= TRAIN_BUDGET_S
    assert report["dice"] >= 0.85
    assert report["median_rave"] <= 0.15
    assert report["mean_rave_ed"] <= report["mean_rave_es"]


@pytest.mark.criterion(3, "phantom training: LV-endo Dice >= 0.85, median RAVE <= 0.15, ED <= ES, <= 20 min")
def test_c03_fastventricle(trained_fv):
    _, report = trained_fv
    _check_phantom_training(report)
    assert report["final_loss"] < 0.1 * report["initial_loss"]
    assert report["final_loss"] == pytest.approx(FV_FINAL_TRAIN_LOSS, rel=0.2)


@pytest.mark.criterion(3, "phantom training: LV-endo Dice >= 0.85, median RAVE <= 0.15, ED <= ES, <= 20 min")
def test_c03_deepventricle(trained_dv):
    _check_phantom_training(trained_dv[1])


# -- 4 ---------------------------------------------------------------------------------------


@pytest.mark.criterion(4, "complexity ratios DV/FV: params >= 10, peak activation >= 3, wall time >= 2")
def test_c04_complexity_ratios():
    t0 = time.perf_counter()
    dv, fv = build(DV_REF, seed=0), build(FV_REF, seed=0)
    shape = (16, 1, 64, 64)
    assert count_parameters(dv) / count_parameters(fv) >= 10
    assert peak_activation_bytes(dv, shape) / peak_activation_bytes(fv, shape) >= 3
    b_dv = benchmark_inference(dv, (1, 64, 64), batch=16, repetitions=5)
    b_fv = benchmark_inference(fv, (1, 64, 64), batch=16, repetitions=5)
    ratio = b_dv.median_ms_per_sample / b_fv.median_ms_per_sample
    print(f"\nDV {b_dv.median_ms_per_sample:.2f} ms, FV {b_fv.median_ms_per_sample:.2f} ms, "
          f"ratio {ratio:.2f}")
    assert ratio >= 2
    within(time.perf_counter() - t0, 300)


# -- 5 ---------------------------------------------------------------------------------------


@pytest.mark.criterion(5, "frustum volumetry (exact cases 1e-12, taper 0.1%, phantom 3%)")
def test_c05_frustum_volumetry():
    t0 = time.perf_counter()
    assert abs(frustum_volume([100.0] * 3, 10.0) - 2.0) <= 1e-12 * 2.0
    cone = frustum_volume([250.0, 0.0], 6.0)
    assert abs(cone - 0.5) <= 1e-12 * 0.5
    r = np.linspace(30.0, 5.0, 50)
    exact = np.pi * 98.0 / 3.0 * (30.0 ** 2 + 150.0 + 25.0) / 1000.0
    assert abs(frustum_volume(np.pi * r ** 2, 2.0) - exact) <= 1e-3 * exact
    spec = PhantomSpec(n_slices=12, image_size=128, pixel_spacing_mm=1.25, slice_spacing_mm=8.0)
    for seed in range(3):
        s = generate_study(seed, spec)
        for ph in ("ED", "ES"):
            v = mask_volume(s.truth_masks[ph][:, 0], s.pixel_spacing_mm, s.slice_spacing_mm)
            truth = s.analytic_volumes[("lv_endo", ph)]
            assert abs(v - truth) <= 0.03 * truth
    within(time.perf_counter() - t0, 10)


# -- 6 ---------------------------------------------------------------------------------------


@pytest.mark.criterion(6, "WMW exact method equals brute force (100 instances, ties)")
def test_c06_wmw_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2026)
    for _ in range(100):
        n1 = int(rng.integers(1, 10))
        n2 = int(rng.integers(1, 11 - n1))
        a = rng.integers(0, 4, n1).astype(float)
        b = rng.integers(0, 4, n2).astype(float)
        r, rb = mann_whitney_u(a, b), mann_whitney_u(b, a)
        assert r.method == "exact"
        assert r.u_statistic == u_by_pairs(a, b)
        assert r.u_statistic + rb.u_statistic == n1 * n2
        assert abs(r.p_value - brute_force_p(a, b)) < 1e-12
    for n1, n2 in [(20, 30), (96, 96)]:
        a, b = rng.normal(size=n1), rng.normal(size=n2)
        assert mann_whitney_u(a, b).u_statistic + mann_whitney_u(b, a).u_statistic == n1 * n2
    within(time.perf_counter() - t0, 60)


# -- 7 ---------------------------------------------------------------------------------------


@pytest.mark.criterion(7, "Bland-Altman hand examples and 93-97% coverage")
def test_c07_bland_altman():
    t0 = time.perf_counter()
    same = bland_altman([(10.0, 10.0), (20.0, 20.0)])
    assert (same.bias_mL, same.sd_mL, same.loa_low_mL, same.loa_high_mL) == (0.0, 0.0, 0.0, 0.0)
    ex = bland_altman([(5.0, 4.0), (5.0, 6.0)])
    assert ex.bias_mL == 0.0 and ex.sd_mL == np.sqrt(2.0)
    assert ex.loa_high_mL == 1.96 * np.sqrt(2.0) and ex.loa_low_mL == -1.96 * np.sqrt(2.0)
    d = np.random.default_rng(7).standard_normal(10_000)
    ba = bland_altman(np.column_stack([np.zeros_like(d), d]))
    coverage = np.mean((d >= ba.loa_low_mL) & (d <= ba.loa_high_mL))
    assert 0.93 <= coverage <= 0.97
    within(time.perf_counter() - t0, 10)


# -- 8 ---------------------------------------------------------------------------------------


@pytest.mark.criterion(8, "search protocol: top-3 by accuracy then lowest RAVE, 50 scenarios")
def test_c08_search_protocol():
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    checked = 0
    while checked < 50:
        n = int(rng.integers(3, 10))
        trials = []
        for i in range(n):
            acc = float(rng.choice([0.8, 0.85, 0.9]))
            rv = float(rng.choice([0.05, 0.1, 0.15]))
            trials.append(rec(i, acc, rv, diverged=bool(rng.random() < 0.1)))
        if sum(t.valid for t in trials) < 3:
            with pytest.raises(ValueError):
                select_winner(trials)
            continue
        want_top, want = brute_force_winner(trials)
        top, winner = select_winner([trials[i] for i in rng.permutation(n)])
        assert {t.trial_id for t in top} == want_top and winner.trial_id == want
        checked += 1
    top, winner = select_winner([rec(i + 1, a, r) for i, (a, r) in
                                 enumerate(zip([.9, .8, .7, .6], [.3, .1, .2, .05]))])
    assert winner.trial_id == 2
    within(time.perf_counter() - t0, 10)


# -- 9 ---------------------------------------------------------------------------------------


@pytest.mark.criterion(9, "input optimisation: monotone loss, final <= 0.1 x initial, params frozen")
def test_c09_input_optimisation(trained_fv, phantom_split):
    graph, _ = trained_fv
    t0 = time.perf_counter()
    study = phantom_split[2][0]
    target = study.truth_masks["ED"][3:4].astype(np.float64)
    before = {k: v.copy() for k, v in graph.state().items()}
    image, losses = optimize_input(graph, target, steps=500, step_size=1.0, seed=0)
    after = graph.state()
    assert all(np.array_equal(before[k], after[k]) for k in before)
    assert np.all(np.diff(losses) <= 0)
    ratio = losses[-1] / losses[0]
    print(f"\ninput optimisation: initial {losses[0]:.4f} final {losses[-1]:.5f} ratio {ratio:.4f}")
    assert ratio <= 0.1
    assert DREAM_FINAL_LOSS / 2 <= losses[-1] <= 2 * DREAM_FINAL_LOSS
    within(time.perf_counter() - t0, 300)


# -- 10 --------------------------------------------------------------------------------------


CFG_10 = {
    "phantom.cfg": "n_studies = 40\n",
    "train.cfg": "epochs = 2\nslices_per_phase = 2\n",
    "eval.cfg": "subset = all\n",
}


def _tree(root):
    # the top-level run manifest records wall time, so it alone is excluded
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*"))
            if p.is_file() and p.relative_to(root).as_posix() != "manifest.txt"}


@pytest.mark.criterion(10, "determinism: gen-data, train, eval reruns are byte-identical")
def test_c10_determinism(tmp_path):
    t0 = time.perf_counter()
    for name, text in CFG_10.items():
        (tmp_path / name).write_text(text)
    runs = []
    for run in ("a", "b"):
        out = tmp_path / run
        assert cli_main(["gen-data", "--config", str(tmp_path / "phantom.cfg"), "--seed", "3",
                         "--out", str(out / "gen")]) == 0
        assert cli_main(["train", "--config", str(tmp_path / "train.cfg"), "--seed", "4",
                         "--out", str(out / "train"), "--dataset", str(out / "gen"),
                         "--arch", "fastventricle"]) == 0
        assert cli_main(["eval", "--config", str(tmp_path / "eval.cfg"), "--seed", "0",
                         "--out", str(out / "eval"), "--dataset", str(out / "gen"),
                         "--checkpoint", str(out / "train")]) == 0
        runs.append({part: _tree(out / part) for part in ("gen", "train", "eval")})
    a, b = runs
    assert "data/manifest.txt" in a["gen"] and "history.csv" in a["train"]
    assert "checkpoint/manifest.txt" in a["train"] and "metrics.csv" in a["eval"]
    for part in a:
        assert a[part].keys() == b[part].keys()
        for name in a[part]:
            assert a[part][name] == b[part][name], f"{part}/{name} differs"
    within(time.perf_counter() - t0, 600)


if __name__ == "__main__":
    import sys
    sys.exit(pytest.main([__file__, "-v", "-s"]))
