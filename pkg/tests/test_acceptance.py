"""Acceptance gate: every criterion at its stated tolerance.

Each test prints one PASS/FAIL line (written straight to the terminal, so
they appear regardless of capture settings).  The end-to-end criteria share
one desk-scale run of the two-round procedure through a session fixture.
"""

import json
import time

import numpy as np

import conftest
from helpers import central_difference, max_relative_error
from rflab.cli import main as cli_main
from rflab.diagnostics import intersection_probe, reconstruction_error
from rflab.fields import (DiffusionConversion, GmmSpec, GmmVelocityField,
                          NeuralVelocityField, convert_time_scale,
                          converted_posterior_mean, gmm_posterior_mean,
                          gmm_ve_denoiser, gmm_vp_denoiser, vp_snr)
from rflab.losses import (LinearFeatureDistance, LossSpec, TimestepDistribution,
                          objective_estimate, premetric_terms)
from rflab.nn import TIME_FEATURE_DIM, init_mlp
from rflab.pipeline import invert_real_data
from rflab.rng import substream
from rflab.samplers import SolverConfig, TimeSchedule, heun_step, integrate
from rflab.tensor import Tape, Tensor, backward, tmean


def _report(number: int, name: str, passed: bool, detail: str) -> None:
    verdict = "PASS" if passed else "FAIL"
    line = f"ACCEPTANCE {number:>2} [{verdict}] {name}: {detail}"
    conftest.ACCEPTANCE_LINES.append(line)
    print(line)  # also visible live under -s


# ---------------------------------------------------------------------------
# 1. conversion equality on a (t, z) grid
# ---------------------------------------------------------------------------

def test_criterion_01_conversion_equality(gmm3):
    start = time.time()
    rng = substream(1, "grid")
    ts = np.linspace(0.02, 0.98, 20)
    zs = rng.standard_normal((50, 2)) * 1.5
    worst = {"ve": 0.0, "vp": 0.0}
    for kind, builder in (("ve", gmm_ve_denoiser), ("vp", gmm_vp_denoiser)):
        conv = DiffusionConversion(kind, builder(gmm3))
        for t in ts:
            dev = np.abs(converted_posterior_mean(conv, zs, t)
                         - gmm_posterior_mean(gmm3, zs, t)).max()
            worst[kind] = max(worst[kind], float(dev))
    elapsed = time.time() - start
    ok = worst["ve"] < 1e-10 and worst["vp"] < 1e-8 and elapsed < 5.0
    _report(1, "converted posterior equality", ok,
            f"VE dev {worst['ve']:.2e} (<1e-10), VP dev {worst['vp']:.2e} (<1e-8), "
            f"{elapsed:.2f}s (<5s)")
    assert worst["ve"] < 1e-10
    assert worst["vp"] < 1e-8
    assert elapsed < 5.0


# ---------------------------------------------------------------------------
# 2. time/scale conversion table
# ---------------------------------------------------------------------------

def test_criterion_02_snr_match():
    grid = np.arange(1, 100) / 100.0
    t_vp, _ = convert_time_scale("vp", grid)
    rel = np.abs(vp_snr(t_vp) - (1 - grid) / grid) / ((1 - grid) / grid)
    t_ve, s_ve = convert_time_scale("ve", 0.5)
    ok = rel.max() < 1e-9 and t_ve == 1.0 and s_ve == 2.0
    _report(2, "signal-to-noise match", ok,
            f"worst relative dev {rel.max():.2e} (<1e-9), "
            f"t_ve(0.5)={t_ve}, s_ve(0.5)={s_ve} (exact)")
    assert rel.max() < 1e-9
    assert t_ve == 1.0 and s_ve == 2.0


# ---------------------------------------------------------------------------
# 3. objective-form equivalence
# ---------------------------------------------------------------------------

def test_criterion_03_objective_equivalence():
    rng = substream(3, "draws")
    params = init_mlp([2 + TIME_FEATURE_DIM, 16, 2], "tanh", seed=3)
    fld = NeuralVelocityField(params, parameterization="x")
    n = 1000
    xs = rng.standard_normal((n, 2))
    zs = rng.standard_normal((n, 2))
    ts = TimestepDistribution(kind="uniform").draw(rng, n)
    loss_x = float(objective_estimate(
        fld, LossSpec(parameterization="x", weighting="inverse_t_squared"),
        xs, zs, None, None, ts=ts).data)
    loss_v = float(objective_estimate(
        fld, LossSpec(parameterization="v"), xs, zs, None, None, ts=ts).data)
    dev = abs(loss_x - loss_v) / max(1.0, abs(loss_x), abs(loss_v))
    ok = dev <= 1e-9
    _report(3, "x-form with 1/t^2 equals v-form", ok,
            f"relative dev {dev:.2e} (<=1e-9) on {n} shared draws")
    assert ok


# ---------------------------------------------------------------------------
# 4. gradient correctness across premetrics and the full objective
# ---------------------------------------------------------------------------

def test_criterion_04_gradients_match_finite_differences():
    start = time.time()
    d = 2
    worst_pre = 0.0
    worst_obj = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        hook = LinearFeatureDistance(d, 4, substream(seed, "hook"))
        specs = [LossSpec(premetric="squared_l2"),
                 LossSpec(premetric="pseudo_huber"),
                 LossSpec(premetric="perceptual_huber", hook=hook),
                 LossSpec(premetric="perceptual_huber_inv_t", hook=hook)]
        xs = rng.standard_normal((2, d))
        zs = rng.standard_normal((2, d))
        ts = rng.uniform(0.2, 0.8, 2)
        x_t = (1 - ts[:, None]) * xs + ts[:, None] * zs
        pred = rng.standard_normal((2, d)) * 0.5
        # premetric gradients with respect to the predicted velocity
        for spec in specs:
            def value():
                p = Tensor(pred, requires_grad=True)
                with Tape() as tape:
                    loss = tmean(premetric_terms(spec, Tensor(zs - xs), p,
                                                 Tensor(xs), Tensor(x_t), ts))
                return tape, loss, p

            tape, loss, p = value()
            grads = backward(tape, loss)
            fd = central_difference(lambda: value()[1].item(), [pred])
            worst_pre = max(worst_pre,
                            max_relative_error(grads[id(p)], fd[0], floor=1e-4))
        # full objective gradient with respect to the parameters
        params = init_mlp([d + TIME_FEATURE_DIM, 6, d], "tanh", seed=seed)
        fld = NeuralVelocityField(params, parameterization="v")
        spec = specs[seed % len(specs)]

        def obj():
            with Tape() as tape:
                loss = objective_estimate(fld, spec, xs, zs, None, None, ts=ts)
            return tape, loss

        tape, loss = obj()
        grads = backward(tape, loss)
        fd = central_difference(lambda: obj()[1].item(),
                                [t.data for t in params.tensors()])
        for tensor, expect in zip(params.tensors(), fd):
            worst_obj = max(worst_obj,
                            max_relative_error(grads[id(tensor)], expect, floor=1e-4))
    elapsed = time.time() - start
    ok = worst_pre < 1e-4 and worst_obj < 1e-4 and elapsed < 30.0
    _report(4, "reverse-mode vs central differences", ok,
            f"premetrics {worst_pre:.2e}, objective {worst_obj:.2e} (<1e-4), "
            f"100 seeds, {elapsed:.1f}s (<30s)")
    assert worst_pre < 1e-4
    assert worst_obj < 1e-4
    assert elapsed < 30.0


# ---------------------------------------------------------------------------
# 5. timestep sampler
# ---------------------------------------------------------------------------

def test_criterion_05_u_shaped_sampler():
    dist = TimestepDistribution(kind="u_shaped", a=4.0)
    draws = dist.draw(substream(5, "tdist"), 100_000)
    grid = np.linspace(0.001, 0.999, 999)
    ecdf = np.searchsorted(np.sort(draws), grid) / len(draws)
    sup = float(np.abs(ecdf - np.sinh(4.0 * grid) / np.sinh(4.0)).max())
    # quadrature oracle for the CDF at one half: 0.1329011144170398
    f_half = float(dist.cdf(0.5))
    dev = abs(f_half - 0.1329011144170398)
    ok = sup < 0.01 and dev < 1e-3
    _report(5, "inverse-CDF timestep sampler", ok,
            f"ECDF sup dev {sup:.4f} (<0.01), F(0.5) dev {dev:.2e} (<1e-3)")
    assert sup < 0.01
    assert dev < 1e-3


# ---------------------------------------------------------------------------
# 6. solver orders
# ---------------------------------------------------------------------------

def test_criterion_06_solver_orders():
    start = time.time()
    fld = GmmVelocityField(GmmSpec([1.0], [[1.5, -0.8]], [0.25]))
    z = substream(6, "orders").standard_normal((64, 2))
    ref = integrate(fld, z, TimeSchedule.uniform(4096).points,
                    SolverConfig(solver="heun")).endpoint
    slopes = {}
    for solver in ("euler", "heun"):
        ns = [4, 8, 16, 32, 64]
        errs = [np.sqrt(np.mean(
            (integrate(fld, z, TimeSchedule.uniform(n).points,
                       SolverConfig(solver=solver)).endpoint - ref) ** 2))
            for n in ns]
        slopes[solver] = float(-np.polyfit(np.log(ns), np.log(errs), 1)[0])
    elapsed = time.time() - start
    ok = (abs(slopes["euler"] - 1.0) < 0.2 and abs(slopes["heun"] - 2.0) < 0.2
          and elapsed < 10.0)
    _report(6, "solver convergence orders", ok,
            f"euler slope {slopes['euler']:.3f} (1.0±0.2), "
            f"heun slope {slopes['heun']:.3f} (2.0±0.2), {elapsed:.1f}s (<10s)")
    assert abs(slopes["euler"] - 1.0) < 0.2
    assert abs(slopes["heun"] - 2.0) < 0.2
    assert elapsed < 10.0


# ---------------------------------------------------------------------------
# 7. update-rule identity at exact endpoints
# ---------------------------------------------------------------------------

def test_criterion_07_update_rule_identity(gmm3):
    fld = GmmVelocityField(gmm3)
    z = substream(7, "rule").standard_normal((32, 2))
    worst = 0.0
    for pts in [(1.0, 0.0), (1.0, 0.5, 0.0)]:
        a = integrate(fld, z, pts, SolverConfig(update_rule="default")).endpoint
        b = integrate(fld, z, pts, SolverConfig(update_rule="new")).endpoint
        worst = max(worst, float(np.abs(a - b).max()))
    ok = worst < 1e-12
    _report(7, "history rule equals Euler at exact endpoints", ok,
            f"max dev {worst:.2e} (<1e-12) for one- and two-step schedules")
    assert ok


# ---------------------------------------------------------------------------
# 8. transport maps
# ---------------------------------------------------------------------------

def test_criterion_08_identity_and_scaling_transport():
    z = substream(8, "transport").standard_normal((256, 2))
    identity = GmmVelocityField(GmmSpec([1.0], [[0.0, 0.0]], [1.0]))
    out = z.copy()
    pts = TimeSchedule.uniform(64).points
    for a, b in zip(pts[:-1], pts[1:]):
        out = heun_step(identity, out, a, b)
    dev_id = float(np.abs(out - z).max())

    scaled = GmmVelocityField(GmmSpec([1.0], [[0.0, 0.0]], [4.0]))
    out2 = z.copy()
    pts = TimeSchedule.uniform(128).points
    for a, b in zip(pts[:-1], pts[1:]):
        out2 = heun_step(scaled, out2, a, b)
    dev_sc = float(np.abs(out2 - 2.0 * z).max())
    ok = dev_id < 1e-4 and dev_sc < 1e-3
    _report(8, "analytic transport accuracy", ok,
            f"identity dev {dev_id:.2e} (<1e-4 at 64 Heun steps), "
            f"scaling dev {dev_sc:.2e} (<1e-3 at 128 steps)")
    assert dev_id < 1e-4
    assert dev_sc < 1e-3


# ---------------------------------------------------------------------------
# criteria 9-11 share the tuned two-round run from the desk_run fixture
# ---------------------------------------------------------------------------

def test_criterion_09_reflow_gains(desk_run):
    start = time.time()
    s1 = desk_run.straightness_of(desk_run.stage1)
    s2 = desk_run.straightness_of(desk_run.stage2)
    swd1 = desk_run.one_step_swd(desk_run.stage1)
    swd2 = desk_run.one_step_swd(desk_run.stage2)
    swd2_uni = desk_run.one_step_swd(desk_run.stage2_uniform)
    total = desk_run.train_seconds + (time.time() - start)
    ok = (s2 < s1) and (swd2 <= 0.5 * swd1) and (swd2 <= swd2_uni) and total < 1800
    _report(9, "two-round gains", ok,
            f"straightness {s2:.5f} < {s1:.5f}; one-step distance "
            f"{swd2:.4f} <= 0.5*{swd1:.4f}; u-shaped {swd2:.4f} <= uniform "
            f"{swd2_uni:.4f}; total {total:.0f}s (<1800s)")
    assert s2 < s1
    assert swd2 <= 0.5 * swd1
    assert swd2 <= swd2_uni
    assert total < 1800


def test_criterion_10_inversion(desk_run):
    fld = desk_run.stage2.field()
    xs = desk_run.target.sample(10_000, substream(55, "real"))
    mses = {n: reconstruction_error(fld, xs[:512], n) for n in (1, 2, 4, 8)}
    monotone = all(mses[a] >= mses[b] for a, b in ((1, 2), (2, 4), (4, 8)))
    _, metrics = invert_real_data(fld, xs, 8, "euler")
    d = 2
    dev = abs(metrics["mean_sq_norm"] - d)
    three_se = 3.0 * np.sqrt(2.0 * d / metrics["count"])
    ok = monotone and dev < three_se
    _report(10, "inversion quality", ok,
            f"reconstruction MSE {[round(mses[n], 5) for n in (1, 2, 4, 8)]} "
            f"monotone={monotone}; mean ||z||^2 dev {dev:.4f} (<3SE={three_se:.4f})")
    assert monotone
    assert dev < three_se


def test_criterion_11_intersection_probe(desk_run):
    pairs = desk_run.pairs
    rng = substream(77, "probe")
    i = rng.permutation(pairs.count)[:10_000]
    j = rng.permutation(pairs.count)[:10_000]
    sep = np.sqrt(np.sum((pairs.xs[i] - pairs.xs[j]) ** 2, axis=1))
    probe = intersection_probe(pairs.xs[i], pairs.zs[i], pairs.xs[j], t=0.5)
    d = 2
    norm_excess = probe.mean_sq_norm - d
    threshold = 3.0 * np.sqrt(2.0 * d)
    r1 = abs(float(probe.mean_autocorr[0]))
    band = float(probe.gaussian_autocorr_band99[0])
    ok = norm_excess > threshold and r1 > band and np.median(sep) > 1.0
    _report(11, "constructed-noise probe", ok,
            f"mean ||z''||^2 - d = {norm_excess:.2f} (> {threshold:.2f}); "
            f"|R(1)| = {r1:.3f} (> band {band:.4f}); "
            f"median pair separation {np.median(sep):.2f}")
    assert np.median(sep) > 1.0  # the non-negligible-separation premise
    assert norm_excess > threshold
    assert r1 > band


# ---------------------------------------------------------------------------
# 12. byte-level reproducibility of the full procedure
# ---------------------------------------------------------------------------

def test_criterion_12_reproducibility(tmp_path):
    config = {
        "seed": 808,
        "out_dir": str(tmp_path / "a"),
        "threads": 1,
        "target": {"weights": [0.5, 0.5], "means": [[2.0, 2.0], [-2.0, -2.0]],
                   "variances": [0.25, 0.25]},
        "model": {"hidden": [32, 32], "activation": "tanh",
                  "parameterization": "v"},
        "reflow": {
            "rounds": 2, "pair_count": 2000, "pair_nfe": 15,
            "pair_solver": "heun",
            "stages": [
                {"iterations": 400, "batch_size": 64,
                 "timesteps": {"kind": "uniform"}},
                {"iterations": 400, "batch_size": 64,
                 "timesteps": {"kind": "u_shaped", "a": 4.0}},
            ],
        },
    }
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(config, indent=1))
    assert cli_main(["reflow", "--config", str(cfg_path)]) == 0
    assert cli_main(["reflow", "--config", str(cfg_path),
                     "--out", str(tmp_path / "b")]) == 0
    names = ["stage1.rfpp", "stage2.rfpp", "pairs1.rfpr", "manifest.json",
             "loss_history_stage1.csv", "loss_history_stage2.csv",
             "loss_history_stage1.png", "loss_history_stage2.png"]
    identical = []
    for name in names:
        same = (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
        identical.append(same)
    ok = all(identical)
    _report(12, "byte-identical reruns", ok,
            f"{sum(identical)}/{len(names)} artifacts identical "
            f"(checkpoints, pair file, reports)")
    assert ok
