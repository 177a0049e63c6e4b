"""Acceptance criteria 1-11, each at its stated tolerance.

Every test records one PASS/FAIL line (see ``acceptance_log``); the lines are
repeated in the pytest terminal summary.
"""
import math
import time

import numpy as np
import pytest
from scipy.stats import norm

from privtrain.accountant import calibrate_sigma, epsilon_spent, step_log_moment
from privtrain.dp import PrivacyParams, clip_grad, dp_sgd_step, gaussian_sigma_for, make_rng
from privtrain.oblivious import (
    ScrubConfig,
    oargmax,
    omax,
    omaxpool2d,
    oonehot,
    oselect,
    scrub_subnormals,
    subnormal_mask,
    with_trace,
)
from privtrain.protocol.wire import MsgType
from privtrain.tensor import (
    Conv2d,
    Dense,
    Flatten,
    MaxPool2d,
    ModelSpec,
    ReLU,
    SoftmaxXentHead,
    backward,
    backward_per_example,
    init_params,
    mlp,
    model_forward,
    numeric_gradient,
)
from privtrain.train import train_loop

from acceptance_log import record
from oracles import mc_log_moments, naive_argmax_onehot, naive_maxpool
from workloads import benchmark_config, same_shape_other_values, wire_leaks

# sqrt(2 ln(1.25e5)) / 4 at 50 digits (mpmath)
SIGMA_EQ2 = 1.2112013156513474


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)))


def small_cnn():
    return ModelSpec(
        (2, 6, 6),
        (Conv2d(2, 3, 3, stride=1, pad=1), ReLU(), MaxPool2d(2), Conv2d(3, 2, 2), Flatten(), Dense(8, 3), SoftmaxXentHead(3)),
    )


# -- 1 ----------------------------------------------------------------------


def test_c01_gradient_correctness():
    t0 = time.perf_counter()
    worst = 0.0
    models = []
    r = np.random.default_rng(2024)
    for _ in range(20):
        hidden = [int(h) for h in r.integers(2, 7, int(r.integers(1, 3)))]
        models.append(mlp(int(r.integers(2, 7)), hidden, int(r.integers(2, 5))))
    models.append(small_cnn())
    for i, spec in enumerate(models):
        rng = np.random.default_rng(i)
        p = init_params(spec, rng, "double")
        m = 4
        x = rng.standard_normal((m,) + spec.input_shape)
        y = rng.integers(0, spec.head.classes, m)
        agg = backward(spec, p, model_forward(spec, p, x, y), y)
        num = numeric_gradient(spec, p, x, y, 1e-5)
        worst = max(worst, max(rel_err(agg[n] / m, num[n]) for n in p))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-4 and elapsed <= 60
    record(1, ok, f"max rel err {worst:.2e} (<= 1e-4) over 20 MLPs + 1 CNN, {elapsed:.1f} s (<= 60 s)")
    assert ok


# -- 2 ----------------------------------------------------------------------


def test_c02_per_example_oracle():
    worst = 0.0
    for spec in (mlp(6, [5, 4], 3), small_cnn()):
        for m in (1, 8, 32):
            rng = np.random.default_rng(m)
            p = init_params(spec, rng, "double")
            x = rng.standard_normal((m,) + spec.input_shape)
            y = rng.integers(0, 3, m)
            peg = backward_per_example(spec, p, model_forward(spec, p, x, y), y)
            for i in range(m):
                xi, yi = x[i : i + 1], y[i : i + 1]
                single = backward(spec, p, model_forward(spec, p, xi, yi), yi)
                worst = max(worst, max(float(np.max(np.abs(peg[n][i] - single[n]))) for n in p))
    ok = worst <= 1e-10
    record(2, ok, f"max abs diff {worst:.2e} (<= 1e-10) for m in 1, 8, 32 (MLP and CNN)")
    assert ok


# -- 3 ----------------------------------------------------------------------


def test_c03_clipping():
    rng = np.random.default_rng(3)
    worst_excess = -math.inf
    identity_ok = True
    for _ in range(10_000):
        g = rng.standard_normal(int(rng.integers(1, 100))) * 10 ** rng.uniform(-4, 4)
        b = 10 ** rng.uniform(-2, 2)
        out = clip_grad(g, b)
        worst_excess = max(worst_excess, float(np.linalg.norm(out)) - b)
        if np.linalg.norm(g) <= b:
            identity_ok &= np.array_equal(out, g)
    exact = np.array_equal(clip_grad(np.array([3.0, 4.0]), 1.0), np.array([0.6, 0.8]))
    ok = worst_excess <= 1e-12 and identity_ok and exact
    record(3, ok, f"max(norm - B) {worst_excess:.2e} (<= 1e-12) over 1e4 vectors; identity under bound {identity_ok}; (3,4)->(0.6,0.8) {exact}")
    assert ok


# -- 4 ----------------------------------------------------------------------


def test_c04_gaussian_calibration():
    s = gaussian_sigma_for(4, 1e-5, 1)
    grid = [gaussian_sigma_for(e, 1e-5, 1) for e in np.geomspace(0.05, 1000, 60)]
    mono = all(a > b for a, b in zip(grid, grid[1:]))
    ok = abs(s - SIGMA_EQ2) <= 1e-3 and mono
    record(4, ok, f"sigma(4, 1e-5, 1) = {s:.6f} vs {SIGMA_EQ2:.6f} (+-1e-3); decreasing in eps {mono}")
    assert ok


# -- 5 ----------------------------------------------------------------------


def c05_run():
    """sigma=0 fused step vs naive oracle, and fused noisy steps under several partitions."""
    spec = mlp(8, [6], 3)
    rng = np.random.default_rng(5)
    p = init_params(spec, rng, "double")
    x = 3 * rng.standard_normal((24, 8))
    y = rng.integers(0, 3, 24)
    peg = backward_per_example(spec, p, model_forward(spec, p, x, y), y)
    pp0 = PrivacyParams(4.0, 1e-5, 0.7, 24, 1000, 0.0, 10, 1.0)
    fused = dp_sgd_step(p, peg, pp0, make_rng(0))
    # naive: clip each example's concatenated gradient, then average
    ref = {n: np.zeros(p[n].shape) for n in p}
    for i in range(24):
        flat = np.concatenate([peg[n][i].ravel() for n in p])
        s = min(1.0, 0.7 / np.linalg.norm(flat))
        for n in p:
            ref[n] += s * peg[n][i] / 24
    diff = max(float(np.max(np.abs((p[n] - fused[n]) - ref[n]))) for n in p)
    ppn = PrivacyParams(4.0, 1e-5, 0.7, 24, 1000, 1.3, 10, 0.1)
    outs = []
    for cuts in ([24], [1] * 24, [5, 19], [8, 8, 8]):
        parts, s0 = [], 0
        for c in cuts:
            xs, ys = x[s0 : s0 + c], y[s0 : s0 + c]
            parts.append(backward_per_example(spec, p, model_forward(spec, p, xs, ys), ys))
            s0 += c
        outs.append(dp_sgd_step(p, parts, ppn, make_rng(7)))
    return diff, outs, fused


def test_c05_fused_step():
    diff, outs, _ = c05_run()
    same = all(o.equal(outs[0]) for o in outs[1:])
    ok = diff <= 1e-10 and same
    record(5, ok, f"sigma=0 vs naive oracle {diff:.2e} (<= 1e-10); 4 micro-batch partitions bit-identical {same}")
    assert ok


# -- 6 ----------------------------------------------------------------------


def test_c06_accountant():
    t0 = time.perf_counter()
    lams = np.arange(1, 17)
    worst = 0.0
    where = None
    for q in (0.001, 0.01, 0.1):
        for sigma in (1.0, 2.0, 4.0):
            mc = mc_log_moments(q, sigma, lams, n=10_000_000, seed=int(1000 * q + sigma))
            for lam, m in zip(lams, mc):
                # relative error of the moment E = exp(alpha)
                e = abs(math.expm1(step_log_moment(q, sigma, int(lam)) - m))
                if e > worst:
                    worst, where = e, (q, sigma, int(lam))
    below = True
    for q in (0.001, 0.01, 0.1):
        for sigma in (1.0, 2.0, 4.0):
            for steps in (100, 1000, 10_000):
                lin = steps * math.sqrt(2 * math.log(1.25 / (1e-5 / (2 * steps)))) / sigma
                below &= epsilon_spent(q, sigma, steps, 1e-5) < lin
    elapsed = time.perf_counter() - t0
    ok = worst <= 0.02 and below and elapsed <= 600
    record(
        6, ok,
        f"max moment rel err vs 1e7-sample MC {worst:.2e} (<= 0.02) at (q, sigma, lambda)={where}; "
        f"MA eps < linear eps on 27-point grid {below}; {elapsed:.0f} s (<= 600 s)",
    )
    assert ok


# -- 7 ----------------------------------------------------------------------


def test_c07_oblivious_kernels():
    rng = np.random.default_rng(7)
    counts = dict.fromkeys(("oselect", "omax", "oargmax", "omaxpool2d", "oonehot", "scrub"), 0)
    equal = True
    for _ in range(1000):
        n = int(rng.integers(1, 10))
        a = rng.integers(-3, 4, n).astype(float)
        b = rng.standard_normal(n)
        pr = rng.integers(0, 2, n)
        equal &= np.array_equal(oselect(pr, a, b), np.where(pr == 1, a, b))
        equal &= np.array_equal(omax(a, b), np.maximum(a, b))
        equal &= np.array_equal(oargmax(a), naive_argmax_onehot(a))
        x = rng.integers(-2, 3, (2, 4, 4)).astype(float)
        equal &= np.array_equal(omaxpool2d(x, 2)[0], naive_maxpool(x, 2, 2))
        k = int(rng.integers(1, 8))
        c = int(rng.integers(0, k))
        equal &= np.array_equal(oonehot(c, k), np.eye(k)[c])
        t = rng.standard_normal(n) * np.exp(rng.uniform(-750, 0, n))
        out = scrub_subnormals(t, ScrubConfig(), rng)
        equal &= (not subnormal_mask(out).any()) and bool(np.all(np.abs(out - t) <= 2e-10 + 1e-300 + np.spacing(np.abs(t))))
        for key in counts:
            counts[key] += 1

    traces_equal = True
    shapes = {"oselect": (16,), "omax": (16,), "oargmax": (16,), "omaxpool2d": (3, 8, 8), "oonehot": (), "scrub": (16,)}
    for kernel, args_for in (
        ("oselect", lambda v, r: (r.integers(0, 2, 16), v, -v)),
        ("omax", lambda v, r: (v, r.standard_normal(16))),
        ("oargmax", lambda v, r: (v,)),
        ("omaxpool2d", lambda v, r: (v, 2)),
        ("oonehot", lambda v, r: (int(r.integers(0, 10)), 10)),
        ("scrub", lambda v, r: (v,)),
    ):
        fn = {"oselect": oselect, "omax": omax, "oargmax": oargmax, "omaxpool2d": omaxpool2d, "oonehot": oonehot, "scrub": scrub_subnormals}[kernel]
        ref = None
        for i in range(50):
            r = np.random.default_rng(100 + i)
            v = [r.standard_normal(shapes[kernel]), np.zeros(shapes[kernel]), np.full(shapes[kernel], 5e-324)][i % 3]
            _, tr = with_trace(fn, *args_for(v, r))
            ref = tr if ref is None else ref
            traces_equal &= tr == ref

    fi = np.finfo(np.float64)
    adversarial = np.array([0.0, -0.0, fi.smallest_subnormal, -fi.smallest_subnormal, fi.tiny / 3, 1e-310, -1e-315, 1.0])
    scrubbed = scrub_subnormals(adversarial)
    adv32 = np.array([0.0, np.finfo(np.float32).smallest_subnormal, 1e-40], np.float32)
    no_sub = not subnormal_mask(scrubbed).any() and not subnormal_mask(scrub_subnormals(adv32)).any()

    ok = equal and min(counts.values()) >= 1000 and traces_equal and no_sub
    record(
        7, ok,
        f"exact equivalence over {min(counts.values())} cases per kernel {bool(equal)}; "
        f"traces equal across 50 value-randomised inputs per kernel {bool(traces_equal)}; scrub leaves no subnormals {no_sub}",
    )
    assert ok


# -- 8-11: end-to-end runs, computed once per session -----------------------


@pytest.fixture(scope="module")
def runs():
    out = {}
    t0 = time.perf_counter()
    out["plain"] = train_loop(benchmark_config(dp=False, oblivious=False))
    out["plain_s"] = time.perf_counter() - t0
    # the one-off noise calibration is timed on its own (cold cache), then the run
    step_log_moment.cache_clear()
    cfg = benchmark_config()
    t0 = time.perf_counter()
    calibrate_sigma(cfg.epsilon, cfg.delta, cfg.lot_size / cfg.dataset_size, cfg.total_steps)
    out["calib_s"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    out["dp"] = train_loop(cfg)
    out["dp_s"] = time.perf_counter() - t0
    out["dp_again"] = train_loop(benchmark_config())
    out["other"] = train_loop(same_shape_other_values(benchmark_config()))
    return out


def test_c08_network_obliviousness(runs):
    a, b = runs["dp"], runs["other"]
    per_iter = lambda log: [(r.iteration, r.peer, r.direction, r.msg_type, r.length) for r in log]
    same = per_iter(a.wire_log) == per_iter(b.wire_log)
    resp = {r.length for r in a.wire_log + b.wire_log if r.msg_type == MsgType.CHUNK_RESP}
    leaks = wire_leaks(benchmark_config(), a.wire_log) + wire_leaks(same_shape_other_values(benchmark_config()), b.wire_log)
    ok = same and len(resp) == 1 and leaks == 0
    record(
        8, ok,
        f"wire logs (iteration, peer, direction, type, length) identical across datasets {same} "
        f"({len(a.wire_log)} messages, CHUNK_RESP length {sorted(resp)}); 16-byte plaintext matches {leaks}",
    )
    assert ok


def test_c09_end_to_end(runs):
    a0 = runs["plain"].metrics[-1]["test_accuracy"]
    dp = runs["dp"]
    acc = dp.metrics[-1]["test_accuracy"]
    eps = dp.epsilon_spent
    bayes = norm.cdf(2.5 / 2)
    elapsed = runs["plain_s"] + runs["calib_s"] + runs["dp_s"]
    ok = acc >= a0 - 0.10 and eps <= 4.0 and dp.status == "completed" and elapsed <= 600
    record(
        9, ok,
        f"baseline A0 {100 * a0:.1f}% (Bayes {100 * bayes:.1f}%), DP {100 * acc:.1f}% (>= A0 - 10 points), "
        f"eps {eps:.5f} (<= 4.0) at sigma {dp.sigma:.6f}, {elapsed:.1f} s (<= 600 s)",
    )
    assert ok


def test_c10_overhead_reported(runs):
    loop = runs["dp_s"] / runs["plain_s"]
    total = (runs["dp_s"] + runs["calib_s"]) / runs["plain_s"]
    # non-gating: the verdict is printed, never asserted
    record(
        10, loop <= 2.0,
        f"non-gating: oblivious+DP training {runs['dp_s']:.2f} s vs plain {runs['plain_s']:.2f} s, ratio {loop:.2f} (<= 2); "
        f"with the one-off sigma calibration ({runs['calib_s']:.2f} s) ratio {total:.2f}",
    )


def test_c11_determinism(runs):
    _, outs_a, fused_a = c05_run()
    _, outs_b, fused_b = c05_run()
    c5 = fused_a.equal(fused_b) and all(x.equal(y) for x, y in zip(outs_a, outs_b))
    a, b = runs["dp"], runs["dp_again"]
    strip = lambda ms: [{k: v for k, v in m.items() if k != "wall_seconds"} for m in ms]
    c9 = a.params.equal(b.params) and strip(a.metrics) == strip(b.metrics) and a.sigma == b.sigma
    ok = c5 and c9
    record(11, ok, f"criterion-5 outputs bit-identical on rerun {c5}; criterion-9 parameters, metrics and sigma bit-identical on rerun {c9}")
    assert ok
