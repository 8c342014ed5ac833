"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Criteria 5-7 train CNN-2-mini on a 5,000/1,000 CIFAR-10 subset. Point
``EXDROP_CIFAR10_DIR`` at the binary batches (default ``./data``). Set
``EXDROP_ACCEPT_CACHE`` to a directory to keep the nine trained checkpoints
between runs. Without the dataset those criteria fail with a message saying so.
"""

import functools
import os
import time

import numpy as np
import pytest

from exdrop import harness as H
from exdrop import network as N
from exdrop.dropout import (DropoutPlan, Strategy, make_masks, make_plan, retain_prob_excitation)
from exdrop.excitation import excitation_backprop, excitation_backprop_batch, priors_from_labels
from exdrop.excitation import OutputPrior
from exdrop.metrics import conservative_filters, filter_deltas
from exdrop.tensor import Rng

from criteria import report
from oracles import eb_paths_ref, gradient_check, tiny_cnn

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
CIFAR_DIR = os.environ.get("EXDROP_CIFAR10_DIR", os.path.join(ROOT, "data"))
CACHE_DIR = os.environ.get("EXDROP_ACCEPT_CACHE")
SEEDS = (0, 1, 2)
STRATEGIES = ("standard", "curriculum", "excitation")
P_C_GRID = [round(0.05 * i, 2) for i in range(20)]


# -- 1 ----------------------------------------------------------------------

def test_criterion_1_retaining_probability_exact():
    start = time.perf_counter()
    worst = 0.0
    for n in (2, 10, 2048):
        for p in (0.1, 0.5, 0.9):
            worst = max(worst,
                        abs(retain_prob_excitation(0.0, n, p) - 1.0),
                        abs(retain_prob_excitation(1.0, n, p) - 0.0),
                        abs(retain_prob_excitation(1.0 / n, n, p) - p))
    uniform10 = retain_prob_excitation(0.1, 10, 0.5)
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-9 and abs(uniform10 - 0.5) <= 1e-9 and elapsed < 1.0
    report(1, ok, f"max boundary error {worst:.1e}, f(0.1; 10, 0.5)={uniform10:.12f}, "
                  f"{elapsed * 1e3:.1f} ms")
    assert ok


# -- 2 ----------------------------------------------------------------------

def _dense_chain(seed, sizes):
    g = np.random.default_rng(seed)
    layers = []
    for i, (a, b) in enumerate(zip(sizes[:-1], sizes[1:])):
        layers.append(N.Dense(g.standard_normal((a, b)), g.standard_normal(b) * 0.1))
        if i < len(sizes) - 2:
            layers.append(N.ReLU())
    return N.Network(layers, (sizes[0],))


def test_criterion_2_excitation_conservation():
    start = time.perf_counter()
    worst_sum = 0.0
    negative = False
    for seed in range(50):
        net = N.build_cnn2_mini(10, (3, 32, 32), Rng(seed))
        x = np.random.default_rng(1000 + seed).standard_normal((1, 3, 32, 32))
        trace = N.forward(net, x)
        label = seed % 10
        per_layer = excitation_backprop_batch(net, trace, priors_from_labels([label], 10), 0,
                                              all_layers=True)
        assert len(per_layer) == len(net.layers)
        for p in per_layer.values():
            worst_sum = max(worst_sum, float(np.abs(p.sum(axis=1) - 1).max()))
            negative |= bool((p < 0).any())
    worst_brute = 0.0
    for seed, sizes in enumerate([[4, 5, 4, 3], [3, 6, 6, 2], [5, 5, 5, 5], [6, 8, 4], [2, 3, 3, 3, 2]]):
        assert sum(sizes) <= 20
        net = _dense_chain(seed, sizes)
        g = np.random.default_rng(50 + seed)
        x = np.abs(g.standard_normal((1, sizes[0])))
        trace = N.forward(net, x)
        prior = g.dirichlet(np.ones(sizes[-1]))
        got = excitation_backprop(net, trace, OutputPrior(probs=prior), -1).probs
        weights = [l.weights.astype(np.float64) for l in net.param_layers()]
        acts = [trace.inputs[i][0].astype(np.float64)
                for i, l in enumerate(net.layers) if l.has_params]
        worst_brute = max(worst_brute, float(np.abs(got - eb_paths_ref(weights, acts, prior)).max()))
    elapsed = time.perf_counter() - start
    ok = worst_sum <= 1e-5 and not negative and worst_brute <= 1e-6 and elapsed < 30
    report(2, ok, f"max |sum-1| {worst_sum:.1e} over 50 nets, brute-force diff "
                  f"{worst_brute:.1e}, {elapsed:.1f} s")
    assert ok


# -- 3 ----------------------------------------------------------------------

def test_criterion_3_gradient_oracle():
    start = time.perf_counter()
    results = []
    net = tiny_cnn(0)
    x = np.random.default_rng(10).standard_normal((2, 1, 4, 4)).astype(np.float32)
    results.append(gradient_check(net, x, np.array([0, 2])))
    net = tiny_cnn(2, with_pad=False)
    x = np.random.default_rng(12).standard_normal((2, 1, 4, 4)).astype(np.float32)
    results.append(gradient_check(net, x, np.array([1, 2])))
    net = tiny_cnn(1)
    x = np.random.default_rng(11).standard_normal((3, 1, 4, 4)).astype(np.float32)
    L = net.dropout_layer()
    masks, rescale = make_masks(np.linspace(0.3, 0.9, 5), 3, Rng(5), True)
    plan = DropoutPlan(Strategy.EXCITATION, L, masks, rescale)
    assert 0 < plan.masks.sum() < plan.masks.size
    results.append(gradient_check(net, x, np.array([1, 0, 2]), plan))
    elapsed = time.perf_counter() - start
    worst = max(r[0] for r in results)
    checked = sum(r[1] for r in results)
    skipped = sum(r[2] for r in results)
    ok = worst <= 1e-3 and checked > 0.9 * (checked + skipped) and elapsed < 60
    report(3, ok, f"max rel err {worst:.1e} over {checked} parameters "
                  f"({skipped} at kinks skipped), conv/pool/relu/flatten/dense + mask, {elapsed:.1f} s")
    assert ok


# -- 4 ----------------------------------------------------------------------

def test_criterion_4_mask_statistics():
    start = time.perf_counter()
    draws, width = 10_000, 32
    rate_err = 0.0
    for i, p in enumerate((0.1, 0.3, 0.5, 0.7, 0.9)):
        m, _ = make_masks(p, draws, Rng(i), True, width=width)
        rate_err = max(rate_err, float(np.abs(m.mean(axis=0) - p).max()))
    unbiased_err = 0.0
    for i, p in enumerate((0.5, 0.75, 0.9, 1.0)):
        m, r = make_masks(p, draws, Rng(10 + i), True, width=width)
        unbiased_err = max(unbiased_err, float(np.abs((m * r).mean(axis=0) - 1).max()))
    per_image, _ = make_masks(0.5, draws, Rng(20), True, width=width)
    plan = make_plan("excitation", 0, width, draws, Rng(21), base_p=0.5,
                     saliency=np.full((draws, width), 1 / width))
    match_err = float(np.abs(per_image.mean(axis=0) - plan.masks.mean(axis=0)).max())
    elapsed = time.perf_counter() - start
    ok = rate_err <= 0.02 and unbiased_err <= 0.03 and match_err <= 0.02 and elapsed < 30
    report(4, ok, f"retain-rate err {rate_err:.4f}, E[mask*rescale] err {unbiased_err:.4f} "
                  f"(p >= 0.5), per-image vs uniform-excitation {match_err:.4f}, {elapsed:.1f} s")
    assert ok


# -- 5, 6, 7: desk-scale CIFAR-10 runs -----------------------------------------

def _have_cifar():
    d = os.path.join(CIFAR_DIR, "cifar-10-batches-bin")
    d = d if os.path.isdir(d) else CIFAR_DIR
    return all(os.path.exists(os.path.join(d, f))
               for f in H.CIFAR_TRAIN_FILES + [H.CIFAR_TEST_FILE])


@functools.lru_cache(maxsize=None)
def _runs():
    """Nine trained CNN-2-mini models keyed by (strategy, seed), plus the test split."""
    train, test = H.load_cifar10(CIFAR_DIR, n_train=5000, n_test=1000, seed=0)
    nets = {}
    for strategy in STRATEGIES:
        for seed in SEEDS:
            path = os.path.join(CACHE_DIR, f"{strategy}-{seed}.edck") if CACHE_DIR else None
            if path and os.path.exists(path):
                nets[strategy, seed] = N.load_checkpoint(path)
                continue
            rng = Rng(seed)
            net = N.build_cnn2_mini(10, train.input_shape, rng.spawn(0))
            cfg = H.TrainConfig(strategy=strategy, base_p=0.5, gamma=5e-4, lr=1e-3,
                                lr_drop_iter=2500, batch_size=100, iters=5000, seed=seed,
                                eval_every=0)
            H.train(net, train, cfg, rng)
            if path:
                os.makedirs(CACHE_DIR, exist_ok=True)
                N.save_checkpoint(net, path)
            nets[strategy, seed] = net
    return nets, test


def _require_cifar(number):
    if not _have_cifar():
        report(number, False, f"CIFAR-10 binary batches not found in {CIFAR_DIR} "
                              "(set EXDROP_CIFAR10_DIR)")
        pytest.fail(f"criterion {number} needs the CIFAR-10 dataset at {CIFAR_DIR}")
    return _runs()


@functools.lru_cache(maxsize=None)
def _utilization_comparison():
    nets, test = _runs()
    rows = []
    for seed in SEEDS:
        std, ed = nets["standard", seed], nets["excitation", seed]
        L = std.dropout_layer()
        wl = H.weight_layer_for(std, L)
        delta = float(np.median(filter_deltas(std, wl)))
        rs = H.utilization(std, test, L, delta)
        re = H.utilization(ed, test, L, delta)
        rows.append({
            "neurons_on": re.neurons_on > rs.neurons_on,
            "entropy_peb": re.entropy_peb > rs.entropy_peb,
            "peak_peb": re.peak_peb < rs.peak_peb,
            "conservative": conservative_filters(ed, wl, delta) <= conservative_filters(std, wl, delta),
            "reports": (rs, re),
        })
    wins = {k: sum(r[k] for r in rows) for k in ("neurons_on", "entropy_peb", "peak_peb",
                                                 "conservative")}
    return wins, rows


@pytest.mark.slow
def test_criterion_5_generalization():
    nets, test = _require_cifar(5)
    acc = {s: [H.evaluate(nets[s, seed], test)[0] for seed in SEEDS] for s in STRATEGIES}
    mean = {s: float(np.mean(v)) for s, v in acc.items()}
    wins, _ = _utilization_comparison()
    util_ok = all(w >= 2 for w in wins.values())
    ok = mean["excitation"] >= mean["standard"] - 0.005 and util_ok
    report(5, ok, "mean test acc " + ", ".join(f"{s}={m:.4f}" for s, m in mean.items())
           + f"; utilization direction {'holds' if util_ok else 'fails'}")
    assert ok


@pytest.mark.slow
def test_criterion_6_utilization_direction():
    _require_cifar(6)
    wins, rows = _utilization_comparison()
    ok = all(w >= 2 for w in wins.values())
    report(6, ok, "seeds won by excitation: " + ", ".join(f"{k} {w}/3" for k, w in wins.items()))
    assert ok


@pytest.mark.slow
def test_criterion_7_resilience_direction():
    nets, test = _require_cifar(7)
    wins = 0
    anchor_err = 0.0
    areas = []
    for seed in SEEDS:
        a = {}
        for s in ("standard", "excitation"):
            curve = H.ablate_cumulative(nets[s, seed], test, p_c_grid=P_C_GRID)
            anchor_err = max(anchor_err, abs(curve.ys[0] - H.evaluate(nets[s, seed], test)[1]))
            a[s] = curve.area()
        areas.append(a)
        wins += a["excitation"] > a["standard"]
    ok = wins >= 2 and anchor_err <= 1e-6
    report(7, ok, f"excitation area larger in {wins}/3 seeds, anchor err {anchor_err:.1e}, areas "
           + "; ".join(f"{a['excitation']:.4f} vs {a['standard']:.4f}" for a in areas))
    assert ok


# -- 8 ----------------------------------------------------------------------

def test_criterion_8_format_fidelity(tmp_path):
    checks = {}
    g = np.random.default_rng(0)
    pixels = g.integers(0, 256, (2, 3072), dtype=np.uint8)
    rec = np.concatenate([np.array([[6], [1]], np.uint8), pixels], axis=1)
    f = tmp_path / "two.bin"
    f.write_bytes(rec.tobytes())
    images, labels = H.read_cifar10_batch(f)
    checks["cifar"] = (labels.tolist() == [6, 1]
                       and np.array_equal(images.reshape(2, -1), pixels)
                       and images[1, 0, 0, 1] == pixels[1, 1]
                       and images[0, 2, 31, 31] == pixels[0, 3071])

    net = N.build_cnn2_mini(10, (3, 32, 32), Rng(3))
    net.layers[0].weights += np.float32(0.5)  # current weights now differ from the initial ones
    ck = tmp_path / "m.edck"
    N.save_checkpoint(net, ck)
    back = N.load_checkpoint(ck)
    checks["checkpoint"] = (N.checkpoint_bytes(back) == ck.read_bytes()
                            and all(np.array_equal(a.weights, b.weights) and np.array_equal(a.bias, b.bias)
                                    for a, b in zip(net.param_layers(), back.param_layers()))
                            and all(np.array_equal(a[0], b[0])
                                    for a, b in zip(net.initial_weights, back.initial_weights)))

    pgm = tmp_path / "s.pgm"
    H.export_saliency_pgm([[0, 1], [0.5, 0.25]], pgm)
    raw = pgm.read_bytes()
    checks["pgm"] = raw.startswith(b"P5") and raw.endswith(bytes([0, 255, 127, 63]))

    ok = all(checks.values())
    report(8, ok, ", ".join(f"{k} {'ok' if v else 'mismatch'}" for k, v in checks.items()))
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
