"""Acceptance criteria, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line with the observed numbers
and its wall time, then asserts the criterion at its stated tolerance.
Criterion 3 runs the desk-scale pipeline three times and is marked slow.
"""

import time

import numpy as np
import pytest

import soundness_cases as sc
from conftest import duffing_pipeline
from kklcert.certificate import CertifiedQuantities, epsilon_grid_check, x_ultimate, \
    x_ultimate_noisy
from kklcert.certify import (BabConfig, Region, bound_jacobian, certify_reconstruction,
                             certify_residual_sup, reconstruction_enclosure, residual_enclosure)
from kklcert.dynamics import Box, SystemModel, integrate_forward, linear_system, reverse_duffing
from kklcert.kkl import (LearnedObserver, NoiseSpec, error_dynamics_defect,
                         exact_linear_observer, residual, simulate_observer)
from kklcert.linalg import ObserverDesign, lyapunov_residual, solve_lyapunov
from kklcert.net import Mlp, loss_gradient
from kklcert.training import backward_init


def _line(capsys, number, ok, detail, elapsed):
    with capsys.disabled():
        print(f"\n{'PASS' if ok else 'FAIL'} criterion {number}: {detail} [{elapsed:.2f} s]")


def test_criterion_1_certificate_arithmetic(capsys):
    t0 = time.perf_counter()
    duffing = x_ultimate(ObserverDesign.diagonal([1.0, 2.0, 3.0, 4.0, 5.0]),
                         CertifiedQuantities(5.13e-4, 235.7, 5.98e-2), gamma=1.0)
    vdp_design = ObserverDesign.diagonal([2.0, 4.0, 6.0, 8.0, 10.0])
    vdp = x_ultimate(vdp_design, CertifiedQuantities(7.7e-3, 23.0, 2.3e-2))
    elapsed = time.perf_counter() - t0
    ok = abs(duffing - 0.181) <= 0.001 and abs(vdp - 0.112) <= 0.001 and elapsed < 1.0
    _line(capsys, 1, ok, f"duffing {duffing:.5f} (0.181), van der pol {vdp:.5f} (0.112)",
          elapsed)
    assert ok


def test_criterion_2_noisy_certificate(capsys):
    t0 = time.perf_counter()
    design = ObserverDesign.diagonal([2.0, 4.0, 6.0, 8.0, 10.0])
    q = CertifiedQuantities(7.7e-3, 23.0, 2.3e-2, noise_bound=0.033)
    bound, er, ev = x_ultimate_noisy(design, q)
    grid = epsilon_grid_check(design, q)
    rel = abs(grid - bound) / bound
    elapsed = time.perf_counter() - t0
    ok = abs(bound - 0.685) <= 0.002 and rel <= 1e-6 and elapsed < 5.0
    _line(capsys, 2, ok, f"noisy bound {bound:.5f} (0.685), eps ({er:.4f}, {ev:.4f}), "
          f"grid relative difference {rel:.2e}", elapsed)
    assert ok


@pytest.mark.slow
def test_criterion_3_end_to_end_soundness(capsys):
    t0 = time.perf_counter()
    rows, ok = [], True
    for seed in (0, 1, 2):
        run = duffing_pipeline(seed)
        env = run["envelope"] or {"cases": {}}
        cases = env["cases"]
        seed_ok = (all(c == 0 for c in run["codes"].values())
                   and len(run["codes"]) == 7
                   and set(cases) == {"noiseless", "noisy"}
                   and all(c["envelope"] <= c["bound"] for c in cases.values())
                   and run["wall_time"] <= 1800)
        ok &= seed_ok
        desc = ", ".join(f"{k} {c['envelope']:.4g} <= {c['bound']:.4g}" for k, c in cases.items())
        rows.append(f"seed {seed}: {desc or run['codes']} in {run['wall_time']:.0f} s")
    _line(capsys, 3, ok, "; ".join(rows), time.perf_counter() - t0)
    assert ok


def test_criterion_4_verifier_soundness(capsys):
    t0 = time.perf_counter()
    failures = {
        "output": sc.check_output_bounds(1000),
        "jacobian": sc.check_jacobian(1000),
        "residual": sc.check_residual(1000),
        "reconstruction": sc.check_reconstruction(1000),
        "lipschitz": sc.check_lipschitz(1000),
    }
    # refinement never loosens the certified bound
    rng = np.random.default_rng(0)
    big = Region([Box([-2.0, -2.0], [2.0, 2.0])])
    monotone = True
    for seed in range(3):
        fwd = sc.random_net([2, 16, 16, 5], rng)
        inv = sc.random_net([5, 16, 16, 2], rng)
        obs = LearnedObserver(sc.DESIGN5, fwd, inv)
        ups = [certify_residual_sup(obs, reverse_duffing(), big,
                                    BabConfig(max_subboxes=b, target_gap=0)).upper
               for b in (1, 64, 256, 1024)]
        monotone &= all(b <= a for a, b in zip(ups, ups[1:]))
    # degenerate boxes reproduce direct evaluation
    worst = 0.0
    for _ in range(200):
        fwd = sc.random_net([2, 16, 16, 5], rng)
        inv = sc.random_net([5, 16, 16, 2], rng)
        x = rng.uniform(-2, 2, size=(1, 2))
        R = residual_enclosure(fwd, sc.DESIGN5, reverse_duffing(), x, x)
        r = residual(fwd, sc.DESIGN5, reverse_duffing(), x)
        E = reconstruction_enclosure(fwd, inv, x, x)
        e = inv(fwd(x)) - x
        J = bound_jacobian(fwd, (x, x))
        j = fwd.input_jacobian(x[0])
        worst = max(worst, np.max(np.abs(R.lo - r)), np.max(np.abs(R.hi - r)),
                    np.max(np.abs(E.lo - e)), np.max(np.abs(E.hi - e)),
                    np.max(np.abs(J.lo[0] - j)), np.max(np.abs(J.hi[0] - j)))
    elapsed = time.perf_counter() - t0
    ok = sum(failures.values()) == 0 and monotone and worst <= 1e-10 and elapsed <= 600
    _line(capsys, 4, ok, f"misses per quantity {failures}, refinement monotone {monotone}, "
          f"point-box deviation {worst:.2e}", elapsed)
    assert ok


def test_criterion_5_exact_linear_regression(capsys):
    t0 = time.perf_counter()
    F, H = [[0.0, 1.0], [-1.0, 0.0]], [[1.0, 0.0]]
    design = ObserverDesign.diagonal([1.0, 2.0, 3.0])
    obs = exact_linear_observer(F, H, design)
    system = linear_system(F, H)
    region = Region([Box([-1.0, -1.0], [1.0, 1.0])])
    cfg = BabConfig(max_subboxes=256)
    R = certify_residual_sup(obs, system, region, cfg).upper
    E = certify_reconstruction(obs, region, cfg).upper
    run = simulate_observer(obs, system, [1.0, -0.5], 1e-3, 12.0)
    t, e = run.times, run.error[:, 0]
    keep = (t >= 1.0) & (e > 1e-12)
    slope = -np.polyfit(t[keep], np.log(e[keep]), 1)[0]
    elapsed = time.perf_counter() - t0
    ok = R <= 1e-9 and E <= 1e-9 and slope >= 0.9 * design.lambda_min and elapsed < 60
    _line(capsys, 5, ok, f"residual {R:.2e}, reconstruction {E:.2e}, decay rate {slope:.4f} "
          f"(>= {0.9 * design.lambda_min:.2f})", elapsed)
    assert ok


def _fd_param_grad(net, fn, h=1e-6):
    theta = net.get_flat()
    g = np.zeros_like(theta)
    for i in range(theta.size):
        for sign in (1, -1):
            t = theta.copy()
            t[i] += sign * h
            net.set_flat(t)
            g[i] += sign * fn(net) / (2 * h)
    net.set_flat(theta)
    return g


def test_criterion_6_numerics(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    rel = lambda a, b: np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)
    jac_err = grad_err = 0.0
    for seed in range(10):
        net = Mlp.init([2, 16, 16, 5], seed=seed)
        x = rng.normal(size=2)
        h = 1e-5
        fd = np.stack([(net(x + h * d) - net(x - h * d)) / (2 * h) for d in np.eye(2)], axis=1)
        jac_err = max(jac_err, rel(net.input_jacobian(x), fd))
        X, V, Z = rng.normal(size=(4, 2)), rng.normal(size=(4, 2)), rng.normal(size=(4, 5))
        M = rng.normal(size=(5, 5))

        def loss(out, dout):
            r1, r2 = out - Z, dout - out @ M.T
            return np.sum(r1 ** 2) + np.sum(r2 ** 2), 2 * r1 - 2 * r2 @ M, 2 * r2

        _, g = loss_gradient(net, X, loss, V)
        grad_err = max(grad_err, rel(g, _fd_param_grad(
            net, lambda n: loss(*n.forward_tangent(X, V)[:2])[0])))
    lyap = 0.0
    for _ in range(100):
        n = int(rng.integers(1, 8))
        A = -np.diag(rng.uniform(0.5, 10, n)) + 0.3 * rng.normal(size=(n, n))
        A -= (max(0.0, np.max(np.linalg.eigvals(A).real)) + 0.5) * np.eye(n)
        M = rng.normal(size=(n, n))
        Q = M @ M.T + np.eye(n)
        lyap = max(lyap, lyapunov_residual(A, solve_lyapunov(A, Q), Q))
    duffing = reverse_duffing()
    states = integrate_forward(duffing, [1.0, 1.0], 1e-3, 50_000).states
    energy = duffing.energy(states)
    drift = np.max(np.abs(energy - energy[0])) / energy[0]
    constant = SystemModel("constant", 1, 1, drift_fn=lambda x: [0.0 * x],
                           output_fn=lambda x: [0.0 * x + 1.0])
    z0 = backward_init(constant, ObserverDesign.diagonal([1.0]), [0.0], 20.0, 1e-3)
    quad = abs(z0[0] - (1 - np.exp(-20.0)))
    elapsed = time.perf_counter() - t0
    ok = (jac_err <= 1e-5 and grad_err <= 1e-5 and lyap <= 1e-10 and drift <= 1e-5
          and quad <= 1e-6 and elapsed <= 120)
    _line(capsys, 6, ok, f"jacobian {jac_err:.1e}, gradient {grad_err:.1e}, lyapunov {lyap:.1e}, "
          f"energy drift {drift:.1e}, quadrature {quad:.1e}", elapsed)
    assert ok


def test_criterion_7_error_dynamics(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    design = ObserverDesign.diagonal([1.0, 2.0, 3.0, 4.0, 5.0])
    obs = LearnedObserver(design, sc.random_net([2, 16, 16, 5], rng),
                          sc.random_net([5, 16, 16, 2], rng))
    rows, ok = [], True
    for name, noise in (("noiseless", None), ("noisy", NoiseSpec(0.05, 3))):
        d1, c1 = error_dynamics_defect(obs, reverse_duffing(), [0.7, -0.3], 2e-3, 2.0, noise)
        d2, c2 = error_dynamics_defect(obs, reverse_duffing(), [0.7, -0.3], 1e-3, 2.0, noise)
        order = np.log2(d1 / d2)
        ok &= order >= 1.8 and c2 <= 2.0 * c1
        rows.append(f"{name}: defect {d2:.2e} at dt=1e-3, constant {c2:.3g}, "
                    f"observed order {order:.2f}")
    _line(capsys, 7, ok, "; ".join(rows), time.perf_counter() - t0)
    assert ok
