"""End-to-end acceptance checks, one test per criterion.

Each test records a ``PASS``/``FAIL criterion N`` line that the terminal
summary prints. Runtime limits are part of each criterion.
"""
import os
import time

import mpmath
import numpy as np
import pytest
from scipy import stats

from neuralosc import bounds, cli, excitation, experiments as ex, io, metrics, mlp, oscillator as osc
from neuralosc import structsim as ss
from measure import fitted_order, random_input, random_model, rk2_step_halving_order, seismic
from oracles import central_difference, modal_linear_response, mp_delta, mp_estimation, mp_thm2_approx

# Desk-scale model and optimiser shared by the training criteria.
DESK = {"model": {"r": 6, "gamma_hidden": 24, "pi_hidden": [12]},
        "train": {"schedule": {"kind": "warmup_exp"}}}


# -- 1. gradient exactness ----------------------------------------------------------

def test_criterion_1_gradient_exactness(verdict):
    start = time.perf_counter()
    worst = {}
    for r in (2, 4):
        for steps in (2, 16, 64):
            for seed in range(5):
                model = random_model(seed, r=r)
                u = random_input(seed, 1, steps)
                y_bar = np.random.default_rng(seed).normal(size=(1, steps))
                _, rec = osc.rollout(model, u)
                gg, pg = osc.rollout_vjp(model, u, rec, y_bar)
                analytic = np.concatenate([gg.to_vector(), pg.to_vector()])

                def loss(theta):
                    y, _ = osc.rollout(model.with_vector(theta), u)
                    return float(np.sum(y_bar * y.values))

                fd = central_difference(loss, model.to_vector())
                err = np.max(np.abs(analytic - fd)) / np.max(np.abs(fd))
                worst[steps] = max(worst.get(steps, 0.0), err)
    elapsed = time.perf_counter() - start
    ok = worst[2] < 1e-5 and worst[16] < 1e-5 and worst[64] < 1e-4 and elapsed < 60
    verdict(1, ok, "max rel err " + ", ".join(f"steps={k}: {v:.1e}" for k, v in worst.items())
            + f"; {elapsed:.1f}s")


# -- 2. integrator orders ------------------------------------------------------------

def test_criterion_2_integrator_orders(verdict):
    start = time.perf_counter()
    rk4 = fitted_order(seismic(1, 201)[0], levels=5)
    rk2 = rk2_step_halving_order(random_model(2, r=4, activation=mlp.PRELU))
    elapsed = time.perf_counter() - start
    verdict(2, rk4 >= 3.5 and rk2 >= 1.8 and elapsed < 60,
            f"RK4 Bouc-Wen order {rk4:.2f} (>= 3.5), RK2 rollout order {rk2:.2f} (>= 1.8); {elapsed:.1f}s")


# -- 3. linear-limit oracle ------------------------------------------------------------

def test_criterion_3_linear_limit(verdict):
    start = time.perf_counter()
    cfg = ss.BoucWenConfig(lam=1.0)
    dt, steps = 0.001, 10_001
    u = seismic(2, steps, dt, seed=5)
    x = ss.simulate_batch(cfg, u, dt)
    worst = 0.0
    for k in range(len(u)):
        ref = modal_linear_response(5, cfg.m, cfg.k, cfg.zeta, u[k], dt)
        worst = max(worst, np.linalg.norm(x[k] - ref) / np.linalg.norm(ref))
    elapsed = time.perf_counter() - start
    verdict(3, worst < 1e-6 and elapsed < 30, f"relative error {worst:.2e} over 10 s at dt=0.001; {elapsed:.1f}s")


# -- 4. excitation statistics -----------------------------------------------------------

def test_criterion_4_excitation_statistics(verdict):
    start = time.perf_counter()
    spec = excitation.WvSpectrum()
    dt = 0.01
    u = excitation.sample_batch(spec, 2024, dt, 501, range(10_000))
    parts, ok = [], abs(excitation.variance_oracle(spec, 2.0) - 5232.5) < 0.05
    for t in (1.0, 2.0, 5.0):
        col = u[:, int(round(t / dt))]
        ratio = np.mean(col ** 2) / excitation.variance_oracle(spec, t)
        z = (col - col.mean()) / col.std()
        skew, kurt = np.mean(z ** 3), np.mean(z ** 4)
        ok &= abs(ratio - 1) < 0.05 and abs(skew) < 0.1 and abs(kurt - 3) < 0.2
        parts.append(f"t={t:g}: var/oracle {ratio:.3f}, skew {skew:+.3f}, kurt {kurt:.2f}")
    elapsed = time.perf_counter() - start
    verdict(4, bool(ok) and elapsed < 120, "; ".join(parts) + f"; {elapsed:.1f}s")


# -- 5. lemma bounds hold empirically --------------------------------------------------

def test_criterion_5_lemma_bounds(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    lip_ok = 0
    for net in range(20):
        layout = [int(rng.integers(1, 8))] + [int(w) for w in rng.integers(2, 30, rng.integers(1, 4))] \
            + [int(rng.integers(1, 6))]
        act = (mlp.RELU, mlp.PRELU)[net % 2]
        p = mlp.init_mlp(net, layout, act)
        p = mlp.MlpParams(p.weights, tuple(rng.normal(0, 0.3, b.shape) for b in p.biases), act,
                          float(rng.uniform(0, 2)) if act == mlp.PRELU else 0.0)
        x1, x2 = rng.normal(size=(2, 10_000, layout[0])) * rng.uniform(0.1, 5)
        y1, _ = mlp.mlp_forward(p, x1)
        y2, _ = mlp.mlp_forward(p, x2)
        ratio = np.abs(y1 - y2).sum(1) / np.abs(x1 - x2).sum(1)
        lip_ok += bool(ratio.max() <= mlp.lipschitz_const(p))

    state_ok = 0
    for trial in range(100):
        model = random_model(trial, r=int(rng.integers(1, 5)), activation=(mlp.RELU, mlp.PRELU)[trial % 2])
        u = random_input(1000 + trial, 1, int(rng.integers(2, 42)))
        state_ok += osc.verify_state_bound(model, [u], float(np.max(np.abs(u.values)))).satisfied

    pert_ok = 0
    for trial in range(100):
        base = random_model(trial, r=int(rng.integers(1, 4)))
        v = base.to_vector()
        a = base.with_vector(v)
        b = base.with_vector(v + rng.uniform(-1, 1, v.size) * rng.uniform(1e-6, 1e-3))
        u = random_input(2000 + trial, 1, 41)
        pert_ok += bounds.verify_perturbation_bound(a, b, [u], float(np.max(np.abs(u.values)))).satisfied
    elapsed = time.perf_counter() - start
    verdict(5, lip_ok == 20 and state_ok == 100 and pert_ok == 100 and elapsed < 300,
            f"Lipschitz {lip_ok}/20 nets, state bound {state_ok}/100, perturbation bound {pert_ok}/100; "
            f"{elapsed:.1f}s")


# -- 6. bound-formula fidelity ---------------------------------------------------------

def random_bound_inputs(rng):
    return dict(w_max=int(rng.integers(1, 200)), B_max=float(rng.uniform(0.05, 3)), h_pi=int(rng.integers(1, 5)),
                T=float(rng.uniform(0.01, 3)), N=int(rng.integers(1, 10 ** 6)), delta=float(rng.uniform(0.001, 0.999)),
                B_K=float(rng.uniform(0.1, 10)), B_pi=float(rng.uniform(0.1, 10)),
                B_loss=float(rng.uniform(0.1, 10)), q=int(rng.integers(1, 4)), r=int(rng.integers(1, 5)))


def test_criterion_6_formula_fidelity(verdict):
    start = time.perf_counter()
    rng = np.random.default_rng(6)
    worst, mono_fail = 0.0, 0
    consts = bounds.Thm2Constants(L_h=1.5, B_beta_g=2.0, C_gamma=3.0, C_pi=0.5, w_gamma=400, w_pi=300)
    for _ in range(50):
        kw = random_bound_inputs(rng)
        inp = bounds.BoundInputs(**kw)
        args = (kw["w_max"], kw["B_max"], kw["T"], kw["N"], kw["delta"], kw["B_K"], kw["B_pi"], kw["B_loss"], kw["q"])
        eps_y = float(rng.uniform(0, 1))
        pairs = [
            (bounds.delta_pi_phi(inp).log,
             mpmath.log(mp_delta(kw["w_max"], kw["B_max"], kw["h_pi"], kw["T"], kw["B_K"], kw["B_pi"]))),
            (bounds.generalization_bound_thm1(inp, eps_y),
             kw["T"] * eps_y ** 2 + mp_estimation(86, kw["h_pi"], kw["h_pi"], *args)),
            (bounds.generalization_bound_thm2(inp, consts),
             mp_thm2_approx(kw["T"], 1.5, 2.0, kw["r"], 3.0, 400, kw["q"], 0.5, 300)
             + mp_estimation(172, 1, 2, *args)),
        ]
        for got, want in pairs:
            worst = max(worst, abs(got - float(want)) / max(abs(float(want)), 1e-300))

        def both(i):
            return bounds.generalization_bound_thm1(i, eps_y), bounds.generalization_bound_thm2(i, consts)

        base = both(inp)
        for field, new, direction in (("N", kw["N"] + 1, -1), ("T", kw["T"] * 1.5, 0),
                                      ("B_max", kw["B_max"] * 1.5, 0), ("delta", kw["delta"] / 2, 1)):
            moved = both(bounds.BoundInputs(**dict(kw, **{field: new})))
            for a, b in zip(base, moved):
                good = b < a if direction < 0 else (b > a if direction > 0 else b >= a)
                mono_fail += not good
    elapsed = time.perf_counter() - start
    verdict(6, worst < 1e-10 and mono_fail == 0 and elapsed < 10,
            f"max rel deviation from high-precision {worst:.1e}; monotonicity failures {mono_fail}/400; "
            f"{elapsed:.1f}s")


# -- 7. error versus N ------------------------------------------------------------------

def trend_ok(errors, max_inversions=1, slack=0.10):
    steps = [(b - a) / a for a, b in zip(errors, errors[1:])]
    ups = [s for s in steps if s > 0]
    return len(ups) <= max_inversions and all(s <= slack for s in ups)


def test_criterion_7_error_versus_N(verdict):
    start = time.perf_counter()
    cfg = ex.build_config([DESK, {"train": {"epochs": 300}, "splits": {"n_train": 400, "n_val": 0, "n_eval": 2000}}])
    rows, fit = ex.sweep_N(cfg, [50, 100, 200, 400])
    errors = [r[1] for r in rows]
    elapsed = time.perf_counter() - start
    ok = trend_ok(errors) and -2.5 <= fit.exponent <= -0.1 and elapsed <= 1800
    verdict(7, ok, "errors " + ", ".join(f"N={r[0]}: {r[1]:.4f}" for r in rows)
            + f"; exponent {fit.exponent:.2f}; {elapsed / 60:.1f} min")


# -- 8. regularisation at small N --------------------------------------------------------

C8_EPOCHS = 300


def test_criterion_8_regularization(verdict):
    start = time.perf_counter()
    cfg = ex.build_config([DESK, {"train": {"epochs": C8_EPOCHS},
                                  "splits": {"n_train": 50, "n_val": 0, "n_eval": 2000}}])
    master = ex.generate(cfg, 0, ex.master_size(cfg))
    train_ds, _, eval_ds = ex.split(master, cfg)
    errors = {}
    for lam in (0.0, 0.003):
        for seed in range(5):
            run = ex.merge(cfg, {"model": {"init_seed": seed}, "train": {"seed": seed, "lambda_L": lam}})
            model, _, sc = ex.fit(run, train_ds)
            errors.setdefault(lam, []).append(ex.evaluate(model, sc, eval_ds)[0].relative_error)
    med0, med3 = float(np.median(errors[0.0])), float(np.median(errors[0.003]))
    elapsed = time.perf_counter() - start
    verdict(8, med3 <= 1.10 * med0 and elapsed <= 1200,
            f"median error lambda=0: {med0:.4f}, lambda=0.003: {med3:.4f} (ratio {med3 / med0:.2f}, need <= 1.10); "
            f"{elapsed / 60:.1f} min")


# -- 9. extreme-value error versus T ------------------------------------------------------

def test_criterion_9_extreme_error_versus_T(verdict):
    start = time.perf_counter()
    cfg = ex.build_config([DESK, {"target_kind": io.EXTREME, "T": 10.0, "train": {"epochs": 300},
                                  "splits": {"n_train": 400, "n_val": 0, "n_eval": 2000}}])
    rows, fit = ex.sweep_T(cfg, [2.5, 5.0, 10.0])
    errors = [r[1] for r in rows]
    elapsed = time.perf_counter() - start
    ok = all(b > a for a, b in zip(errors, errors[1:])) and 0.5 <= fit.exponent <= 3.0 and elapsed <= 1800
    verdict(9, ok, "errors " + ", ".join(f"T={r[0]:g}: {r[1]:.4g}" for r in rows)
            + f"; exponent {fit.exponent:.2f}; {elapsed / 60:.1f} min")


# -- 10. distribution recovery ------------------------------------------------------------

def teacher_student_data(n, dt, steps, seed=7, input_scale=70.0):
    u = excitation.sample_batch(excitation.WvSpectrum(), seed, dt, steps, range(n))
    y = osc.predict(ex.teacher_model(0), u[:, None] / input_scale, dt)
    header = {"dt": dt, "T": dt * (steps - 1), "N": n, "q": 1, "p": 1, "seed": seed,
              "target_kind": io.RESPONSE, "channel": 0}
    return io.Dataset(header, u, y)


C10 = {"dt": 0.02, "T": 5.0, "model": {"r": 2, "gamma_hidden": 16, "pi_hidden": [8]},
       "train": {"epochs": 300, "schedule": {"kind": "step_decay", "lr0": 0.01, "period_epochs": 100, "factor": 0.965}},
       "splits": {"n_train": 200, "n_val": 0, "n_eval": 2000}}


def test_criterion_10_distribution_recovery(verdict):
    start = time.perf_counter()
    cfg = ex.build_config([C10])
    data = teacher_student_data(2200, cfg["dt"], ex.steps_for(cfg["T"], cfg["dt"]))
    train_ds, _, eval_ds = ex.split(data, cfg)
    model, _, sc = ex.fit(cfg, train_ds)
    pred = ex.predict(model, sc, eval_ds.inputs, cfg["dt"])[:, 0]
    true_peak = ss.extreme_process(eval_ds.targets[:, 0])[:, -1]
    pred_peak = ss.extreme_process(pred)[:, -1]
    ks = metrics.ks_distance(true_peak, pred_peak)
    assert ks == pytest.approx(stats.ks_2samp(true_peak, pred_peak).statistic, abs=1e-12)
    elapsed = time.perf_counter() - start
    verdict(10, ks <= 0.05 and elapsed <= 900,
            f"KS distance of terminal peaks {ks:.4f} over {len(true_peak)} samples; {elapsed / 60:.1f} min")


# -- 11. reproducibility --------------------------------------------------------------------

PIPELINE_SET = ["--set", "T=1.0", "--set", 'splits={"n_train": 120, "n_val": 10, "n_eval": 110}',
                "--set", "train.epochs=4", "--set", "train.batch_size=20",
                "--set", 'model={"r": 3, "gamma_hidden": 8, "pi_hidden": [6], "activation": "relu", '
                         '"gamma_inputs": "full", "init_seed": 0}']


def run_pipeline(workdir, workers):
    """Every CLI command on a small configuration; returns ``{file: bytes}``."""
    os.chdir(workdir)
    par = PIPELINE_SET + ["--set", f"workers={workers}"]
    assert cli.main(["gen-data", "--data", "d.nods", "--out", "gen.csv", *par]) == 0
    assert cli.main(["gen-data", "--data", "e.nods", "--out", "gen_e.csv", *par,
                     "--set", 'target_kind="extreme"']) == 0
    assert cli.main(["train", "--data", "d.nods", "--model-out", "m.nosc", "--out", "hist.csv", *PIPELINE_SET]) == 0
    assert cli.main(["eval", "--model", "m.nosc", "--data", "d.nods", "--split", "eval", "--out", "eval.csv",
                     *PIPELINE_SET]) == 0
    assert cli.main(["sweep", "--axis", "N", "--values", "40,120", "--out", "sweep.csv", *par]) == 0
    assert cli.main(["sweep", "--axis", "T", "--values", "0.5,1.0", "--dry-run", "--out", "dry.csv", *par]) == 0
    with open("bounds_in.csv", "w") as fh:
        fh.write("w_max,B_max,h_pi,T,N,delta,B_K,B_pi,B_loss\n40,1.0,2,10.0,1600,0.05,1.0,1.0,2.0\n")
    assert cli.main(["bounds", "--inputs", "bounds_in.csv", "--out", "bounds.csv"]) == 0
    assert cli.main(["dist", "--data", "e.nods", "--model", "m.nosc", "--out", "dist.csv", *PIPELINE_SET]) == 0
    return {name: open(name, "rb").read() for name in sorted(os.listdir("."))}


def test_criterion_11_reproducibility(verdict, tmp_path):
    start = time.perf_counter()
    cwd = os.getcwd()
    try:
        runs = {}
        for name, workers in (("serial", 1), ("again", 1), ("parallel", 3)):
            (tmp_path / name).mkdir()
            runs[name] = run_pipeline(tmp_path / name, workers)
    finally:
        os.chdir(cwd)
    same = runs["serial"] == runs["again"]
    # the parallel run differs only in the recorded worker count
    diff = sorted(k for k in runs["serial"] if runs["serial"][k] != runs["parallel"][k])
    payload_same = all(runs["serial"][k] == runs["parallel"][k] for k in runs["serial"] if not k.endswith(".json"))
    elapsed = time.perf_counter() - start
    verdict(11, same and payload_same and all(k.endswith(".manifest.json") for k in diff),
            f"{len(runs['serial'])} artifacts byte-identical on re-run: {same}; parallel generation "
            f"identical apart from worker count in {len(diff)} manifests: {payload_same}; {elapsed:.1f}s")
