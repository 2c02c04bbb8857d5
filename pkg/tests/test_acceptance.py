"""Acceptance suite. The benchmark criteria (6 and 7) train the kidney preset
on the synthetic benchmark and take hours on one CPU core."""

import math
import time

import numpy as np
import pytest

from crossover import cli
from crossover.config import load_config
from crossover.experiments import (
    VariantResult, load_dataset, network_spec, predict_all, run_ablation, sample_dataset, training_set, fit,
)
from crossover.inference import OUTSIDE, SAMPLED, grid_pixels, predict_image
from crossover.losses import prediction_loss, constraint_loss
from crossover.metrics import dsc, hausdorff
from crossover.network import FeatureSlices, init_xavier, preset_spec
from crossover.autodiff import Tensor
from crossover.receptive import RowRange, cross_check, receptive_rows

from test_metrics import brute_dsc, brute_hd, random_pair

BENCHMARK = "configs/benchmark.ini"


@pytest.fixture(scope="module")
def bench_cfg(request):
    return load_config(request.config.rootpath / BENCHMARK)


@pytest.fixture(scope="module")
def bench_full(bench_cfg):
    """Full-loss seed-0 benchmark run, shared by criteria 6 and 7."""
    start = time.perf_counter()
    ds = load_dataset(bench_cfg)
    net = network_spec(bench_cfg, [e.image for e in ds.train])
    data = training_set(ds.train, sample_dataset(bench_cfg, ds.train))
    params, _ = fit(bench_cfg, net, data, seed=0, loss_kind="full")
    preds = predict_all(bench_cfg, params, net, ds.test)
    scores = [dsc(p.mask, e.mask) for p, e in zip(preds, ds.test)]
    return ds, VariantResult("full", 0, scores), time.perf_counter() - start


def test_criterion_1_receptive_oracle(criterion):
    start = time.perf_counter()
    cases, mismatches = cross_check(100, seed=0)
    elapsed = time.perf_counter() - start
    ok = mismatches == 0 and elapsed < 60
    criterion(1, ok, f"100 stacks, {cases} cases, {mismatches} mismatches, {elapsed:.1f}s")
    assert ok


def test_criterion_2_kidney_shapes(criterion):
    net = preset_spec("kidney")
    sv, sh = net.slice_specs()
    shapes = ((64,) + sv.center_shape, (64,) + sv.end_shape, (64,) + sh.center_shape, (64,) + sh.end_shape)
    v = net.branch("vertical")
    rows = receptive_rows(v.stack, v.crossover_position, sv.center_rows)
    ok = shapes == ((64, 4, 6), (64, 8, 6), (64, 6, 4), (64, 6, 8)) and rows == RowRange(41, 60)
    criterion(2, ok, f"slices {shapes}, overlap receptive rows [{rows.start},{rows.end}]")
    assert ok


def test_criterion_3_gradient_check(criterion):
    cfg = load_config(None)
    start = time.perf_counter()
    rep = cli.gradcheck_report(cfg, per_param=20)
    elapsed = time.perf_counter() - start
    net = preset_spec("kidney")
    sizes = {k: t.size for k, t in init_xavier(net, np.random.default_rng(0)).items()}
    layers = {k.rsplit(".", 1)[0] for k in sizes}
    per_layer = min(sum(min(20, n) for k, n in sizes.items() if k.rsplit(".", 1)[0] == l) for l in layers)
    ok = rep.max_rel_err < 1e-4 and per_layer >= 20 and elapsed < 300 and not rep.failures
    criterion(3, ok, f"{rep.checked} entries, >= {per_layer} per layer, max rel err {rep.max_rel_err:.2e}, {elapsed:.1f}s")
    assert ok


def test_criterion_4_loss_hand_values(criterion):
    one = lambda v: Tensor(np.array([[[v]]]))
    cs = float(constraint_loss(FeatureSlices(one(2.0), one(3.0), one(1.0), one(0.0))).data)
    pre = float(prediction_loss([0.5, 0.5], [1, 0]).data)
    ok = abs(cs + 8.0) <= 1e-12 and abs(pre - math.log(2)) <= 1e-12
    criterion(4, ok, f"constraint {cs!r}, prediction {pre!r}")
    assert ok


def test_criterion_5_metric_oracles(criterion):
    rng = np.random.default_rng(5)
    worst_hd, dsc_bad = 0.0, 0
    for _ in range(50):
        p, g = random_pair(rng)
        dsc_bad += dsc(p, g) != brute_dsc(p, g)
        worst_hd = max(worst_hd, abs(hausdorff(p, g) - brute_hd(p, g)))
    ok = dsc_bad == 0 and worst_hd <= 1e-9
    criterion(5, ok, f"50 pairs, {dsc_bad} DSC mismatches, max HD diff {worst_hd:.1e}")
    assert ok


def test_criterion_6_benchmark(criterion, bench_cfg, bench_full):
    ds, result, elapsed = bench_full
    n_train, n_test = len(ds.train), len(ds.test)
    shape = ds.train[0].image.shape
    ok = (result.mean_dsc >= 0.85 and elapsed <= 1800 and bench_cfg.train.epochs <= 15 and (n_train, n_test) == (40, 10)
          and shape == (128, 128) and bench_cfg.loss.kind == "full")
    criterion(6, ok, f"mean test DSC {result.mean_dsc:.4f} over {n_test} images, {bench_cfg.train.epochs} epochs, "
                     f"{elapsed:.0f}s")
    assert ok


def test_criterion_7_ablation_trend(criterion, bench_cfg, bench_full):
    ds, full0, _ = bench_full
    results, _ = run_ablation(bench_cfg, ds, variants=("full", "entropy_only", "vertical", "horizontal"),
                              seeds=(0, 1, 2), layer_sweep=False, prior=[full0])
    mean = {v: float(np.mean([r.mean_dsc for r in results if r.variant == v]))
            for v in ("full", "entropy_only", "vertical", "horizontal")}
    gap1 = mean["full"] - mean["entropy_only"]
    gap2 = mean["entropy_only"] - max(mean["vertical"], mean["horizontal"])
    ok = gap1 >= 0 and gap2 >= 0.01
    criterion(7, ok, "mean DSC " + ", ".join(f"{k} {v:.4f}" for k, v in mean.items())
              + f"; full - entropy {gap1:+.4f}, entropy - max(V,H) {gap2:+.4f}"
              + "".join(f"; {r.variant} {r.note}" for r in results if r.note))
    assert ok


def test_criterion_8_inference_consistency(criterion):
    net = preset_spec("kidney")
    params = init_xavier(net, np.random.default_rng(8))
    img = np.random.default_rng(9).random((40, 46))
    roi = np.zeros(img.shape, dtype=bool)
    roi[3:37, 5:44] = True
    full = predict_image(params, net, img, roi=roi, stride=1)
    coarse = predict_image(params, net, img, roi=roi, stride=3)
    g = grid_pixels(roi, 3)
    equal = bool(np.array_equal(coarse.probability[g[:, 0], g[:, 1]], full.probability[g[:, 0], g[:, 1]]))
    covered = bool(((coarse.flags != OUTSIDE) == roi).all() and (full.flags[roi] == SAMPLED).all())
    ok = equal and covered
    criterion(8, ok, f"{len(g)} grid pixels equal: {equal}; all {int(roi.sum())} ROI pixels labelled: {covered}")
    assert ok


def test_criterion_9_determinism(criterion, tmp_path, capsys):
    tiny = ["data.count=4", "data.train_count=3", "data.height=40", "data.width=40", "data.radius=6,10",
            "train.epochs=2", "train.learning_rate=0.05", "train.dtype=float32", "loss.lambda_cs=1e-6",
            "network.input_norm=auto"]
    args = [a for s in tiny for a in ("--set", s)]
    outs = []
    for name in ("a", "b"):
        out = tmp_path / name
        for cmd in ("generate", "train", "predict", "eval"):
            assert cli.main([cmd, "--out", str(out), "--seed", "11", *args]) == 0, capsys.readouterr().err
        outs.append(out)
    same = {f: (outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in ("history.csv", "metrics.csv")}
    ok = all(same.values())
    criterion(9, ok, "byte-identical " + ", ".join(f"{k}: {v}" for k, v in same.items()))
    assert ok
