"""Acceptance criteria, each at its stated tolerance and runtime budget.

Every test logs one PASS/FAIL line (also repeated in the terminal summary)
before asserting. Criteria known to be out of reach of the model are still
checked as stated and are expected to fail.
"""

import os
import time

import numpy as np
import pytest
import scipy.constants as sc
from scipy import integrate

from noon_faraday import atomic, cli, metrology as met, polarimetry as pol, tomography as tm
from noon_faraday.config import RunConfig

pytestmark = pytest.mark.slow

MHZ = 1e6
MU_B = sc.physical_constants["Bohr magneton in Hz/T"][0]


def _breit_rabi(iso, B):
    I = iso.nuclear_spin
    hfs = iso.A_ground * (I + 0.5)
    x = (iso.g_J_ground - iso.g_I) * MU_B * B / hfs
    out = []
    for m in np.arange(-I - 0.5, I + 0.51, 1.0):
        lin = -hfs / (2 * (2 * I + 1)) + iso.g_I * MU_B * m * B
        if abs(m) == I + 0.5:
            out.append(lin + hfs / 2 * (1 + np.sign(m) * x))
        else:
            r = np.sqrt(1 + 4 * m * x / (2 * I + 1) + x * x)
            out += [lin + hfs / 2 * r, lin - hfs / 2 * r]
    return np.sort(out)


def test_c1_breit_rabi(acceptance_log):
    t0 = time.perf_counter()
    worst = 0.0
    for iso in atomic.load_isotopes().values():
        for B in np.linspace(0.0, 0.1, 50):
            got = atomic.diagonalize_levels(iso, atomic.GROUND, B).energies
            want = _breit_rabi(iso, B)
            worst = max(worst, float(np.max(np.abs(got - want) / np.maximum(np.abs(want), 1.0))))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-9 and dt < 1.0
    assert acceptance_log(1, ok, f"Breit-Rabi max rel err {worst:.2e} (<=1e-9), {dt:.2f} s (<1 s)")


def test_c2_voigt(acceptance_log):
    def conv(delta, sigma, gamma):
        def g(x):
            return np.exp(-0.5 * (x / sigma) ** 2) / (sigma * np.sqrt(2 * np.pi))

        lo, hi = -12 * sigma, 12 * sigma
        pts = [p for p in (delta, 0.0) if lo < p < hi]
        kw = dict(points=pts or None, limit=4000, epsabs=0.0, epsrel=1e-12)
        re = integrate.quad(lambda x: g(x) * (delta - x) / ((delta - x) ** 2 + gamma**2 / 4), lo, hi, **kw)[0]
        im = integrate.quad(lambda x: g(x) * (gamma / 2) / ((delta - x) ** 2 + gamma**2 / 4), lo, hi, **kw)[0]
        return re + 1j * im

    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        sigma = 10 ** rng.uniform(7.5, 8.7)  # Doppler widths of warm Rb, Hz
        gamma = 10 ** rng.uniform(6.5, 7.5)
        delta = rng.uniform(-5, 5) * sigma
        want = conv(delta, sigma, gamma)
        got = complex(atomic.voigt_profile(delta, sigma, gamma))
        worst = max(worst, abs(got - want) / abs(want))
    dt = time.perf_counter() - t0
    ok = worst <= 1e-7 and dt < 10.0
    assert acceptance_log(2, ok, f"Voigt vs convolution max rel err {worst:.2e} (<=1e-7), {dt:.1f} s (<10 s)")


def _predicted_85_lines():
    iso = atomic.load_isotopes()[85]
    I, J = iso.nuclear_spin, 0.5

    def shift(A, F):
        return 0.5 * A * (F * (F + 1) - I * (I + 1) - J * (J + 1))

    nu0 = atomic.noon_frequency()
    return np.sort([
        (iso.d1_frequency + shift(iso.A_excited, Fp) - shift(iso.A_ground, F) - nu0) / MHZ
        for F in (I - J, I + J) for Fp in (I - J, I + J)
    ])


def test_c3_spectra(acceptance_log):
    t0 = time.perf_counter()
    cfg = RunConfig()
    sp = cfg.spectra
    det = np.linspace(sp.detuning_min_MHz, sp.detuning_max_MHz, sp.detuning_points)
    nu = atomic.noon_frequency() + det * MHZ

    hot = atomic.CellConfig(temperature=83.0)
    trans0, _, _ = atomic.transmission_spectrum(hot, nu, 0.0)
    od = -np.log(np.maximum(trans0, 1e-300))
    inner = (od[1:-1] > od[:-2]) & (od[1:-1] >= od[2:])
    minima = det[1:-1][inner]
    lines = _predicted_85_lines()
    miss = [float(np.min(np.abs(minima - f))) if minima.size else np.inf for f in lines]
    four_ok = minima.size >= 4 and max(miss) <= 30.0

    widths = {}
    for T in sp.temperatures_C:
        cell = atomic.CellConfig(temperature=T)
        w = []
        for b in sp.fields_mT:
            if T == 83.0 and b == 0.0:
                tr = trans0
            else:
                tr, _, _ = atomic.transmission_spectrum(cell, nu, b * 1e-3)
            w.append(float(np.trapezoid(1.0 - tr, det)))
        widths[T] = w
    broad_ok = all(np.all(np.diff(w) > 0) for w in widths.values())
    dt = time.perf_counter() - t0
    ok = four_ok and broad_ok and dt < 30.0
    assert acceptance_log(
        3, ok,
        f"83C/0mT minima at {np.round(minima, 0).tolist()} MHz vs 85Rb lines {np.round(lines, 0).tolist()} "
        f"(offsets {np.round(miss, 0).tolist()}, need 4 within 30): {'ok' if four_ok else 'no'}; "
        f"equivalent width rises with B at {sorted(widths)} C: {'ok' if broad_ok else 'no'}; {dt:.1f} s (<30 s)",
    )


def test_c4_super_resolution(acceptance_log, channel70):
    t0 = time.perf_counter()
    B = np.linspace(0.0, 0.05, 201)
    cfg = RunConfig()
    state = cli.noon_state(cfg)
    table = pol.fringe_scan(state, channel70, B, singles_state=pol.SinglePhotonState.linear(0.0))
    pc = pol.fit_fringe_period(B, table.column("HH"))
    ps = pol.fit_fringe_period(B, table.column("H"))
    ratio_err = abs(2 * pc / ps - 1.0)

    ideal = pol.make_noon_state(cfg.state.phi)
    full = pol.fringe_scan(ideal, channel70, B)
    vis = [pol.visibility(full.column(k)) for k in ("HH", "VV")]
    # the lossless fringe is sampled finely so the grid reaches the extrema
    fine = np.linspace(0.0, 0.05, 2001)
    lossless = pol.fringe_scan(ideal, pol.LosslessChannel(channel70), fine)
    vis_ll = [pol.visibility(lossless.column(k)) for k in ("HH", "VV")]
    dt = time.perf_counter() - t0
    ok = ratio_err <= 0.02 and min(vis) > 0.33 and max(abs(v - 1.0) for v in vis_ll) <= 1e-6 and dt < 30.0
    assert acceptance_log(
        4, ok,
        f"period ratio 2*Pc/Ps = {2 * pc / ps:.4f} (1 +- 0.02); V_HH,V_VV = {vis[0]:.4f},{vis[1]:.4f} (>0.33); "
        f"lossless {vis_ll[0]:.8f},{vis_ll[1]:.8f} (1 +- 1e-6); {dt:.1f} s (<30 s)",
    )


def test_c5_lossless_heisenberg(acceptance_log):
    t0 = time.perf_counter()

    def theta(b):
        return 31.0 * b + 420.0 * b * b

    def dtheta(b):
        return 31.0 + 840.0 * b

    ch = pol.RotationChannel(theta)
    worst = 0.0
    for B in np.linspace(0.002, 0.05, 5):
        noon = met.pair_fisher(pol.make_noon_state(0.0), ch, B).total
        sql = met.sql_optimize(B, ch, n_starts=8, seed=0).fi
        worst = max(worst, abs(noon / (16 * dtheta(B) ** 2) - 1), abs(sql / (4 * dtheta(B) ** 2) - 1),
                    abs(noon / (2 * sql) - 2.0) / 2.0)
    dt = time.perf_counter() - t0
    ok = worst <= 1e-6 and dt < 10.0
    assert acceptance_log(5, ok, f"lossless NOON/SQL per photon = 2, closed forms: max rel dev {worst:.1e} "
                                 f"(<=1e-6), {dt:.1f} s (<10 s)")


def test_c6_advantage_bands(acceptance_log):
    t0 = time.perf_counter()
    cfg = RunConfig()
    assert cfg.cell.temperature_C == 70.0 and cfg.state.fidelity == 0.90
    rep = cli.advantage_data(cfg, 37.0)
    vals = {
        "per_photon": (rep.per_photon, 1.15, 1.45),
        "per_scatter": (rep.per_scatter, 1.10, 1.35),
        "per_scatter_pure85": (rep.per_scatter_pure85, 1.25, 1.55),
        "eta_per_photon": (rep.adjusted["per_photon"], 1.06, 1.36),
    }
    dt = time.perf_counter() - t0
    inside = {k: lo <= v <= hi for k, (v, lo, hi) in vals.items()}
    above = all(v > 1.0 for v, _, _ in vals.values())
    ok = all(inside.values()) and above and dt < 300
    text = ", ".join(f"{k} {v:.4f} in [{lo}, {hi}] {'ok' if inside[k] else 'no'}" for k, (v, lo, hi) in vals.items())
    assert acceptance_log(6, ok, f"{text}; all > 1: {above}; {dt:.0f} s (<300 s)")


def test_c7_sql_dominance(acceptance_log, channel70):
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    violations, worst = 0, -np.inf
    for B in np.linspace(0.0, 0.05, 10):
        sql = met.sql_optimize(B, channel70, n_starts=16, seed=0).fi
        angles = np.column_stack([rng.uniform(0, np.pi, 100), rng.uniform(0, 2 * np.pi, 100),
                                  rng.uniform(0, np.pi, 100), rng.uniform(0, 2 * np.pi, 100)])
        fi, _ = met.SingleConfigurationFI(channel70, B)(angles)
        violations += int(np.sum(fi > sql))
        worst = max(worst, float(np.max(fi / sql)))
    dt = time.perf_counter() - t0
    ok = violations == 0 and dt < 120
    assert acceptance_log(7, ok, f"{violations} violations in 1000 random configurations "
                                 f"(max FI/FI_SQL {worst:.4f}), {dt:.0f} s (<120 s)")


def test_c8_tomography_round_trip(acceptance_log, channel70):
    t0 = time.perf_counter()
    cfg = RunConfig()
    truth = cli.tomo_truth(cfg)
    grid = cfg.tomo_grid()
    R0 = cfg.tomography.R0
    # integration time chosen so the median expected count per outcome per point is 1e5
    unit = tm.expected_counts(truth, channel70, grid, R0, np.ones(grid.size))
    t_int = 1e5 / float(np.median(unit))
    lam = unit * t_int
    fi_true = met.pair_fisher(truth, channel70, cfg.tomography.band_B_mT * 1e-3).total
    fids, covered = [], []
    for seed in range(20):
        ds = tm.simulate_counts(truth, channel70, grid, R0, t_int, seed=seed)
        res = tm.reconstruct(ds, channel70, seed=seed)
        fids.append(tm.fidelity_to(res, truth))
        band = tm.fi_error_band(res, ds, channel70, cfg.tomography.band_B_mT * 1e-3, delta=1.0)
        covered.append(band["fi_min"] <= fi_true <= band["fi_max"])
    noiseless = tm.simulate_counts(truth, channel70, grid, R0, t_int, noiseless=True)
    f0 = tm.fidelity_to(tm.reconstruct(noiseless, channel70), truth)
    dt = time.perf_counter() - t0
    pass_rate = float(np.mean(np.array(fids) >= 0.99))
    coverage = float(np.mean(covered))
    ok = pass_rate >= 0.95 and f0 >= 0.9999 and coverage >= 0.90 and dt < 600
    assert acceptance_log(
        8, ok,
        f"median counts/outcome/point {np.median(lam):.2e}; F>=0.99 in {pass_rate:.0%} of 20 seeds (>=95%), "
        f"min F {min(fids):.4f}; noiseless F {f0:.6f} (>=0.9999); delta=1 band covers true FI in "
        f"{coverage:.0%} (>=90%); {dt:.0f} s (<600 s)",
    )


def test_c9_fi_hygiene(acceptance_log, channel70):
    t0 = time.perf_counter()
    state = cli.noon_state(RunConfig())
    prob = met.pair_probability_function(state, channel70)

    def richardson(B, h=4e-5):
        def d(s):
            return (prob(B + s) - prob(B - s)) / (2 * s)

        dd = (4 * d(h / 2) - d(h)) / 3
        return float(np.sum(dd * dd / prob(B)))

    fields = np.linspace(0.004, 0.049, 10)
    rel = [abs(met.pair_fisher(state, channel70, B).total / richardson(B) - 1) for B in fields]
    curve = met.fisher_curve(state, channel70, np.linspace(0.0, 0.05, 201))
    sum_err = float(np.max(np.abs(curve.terms.sum(axis=1) - curve.fi) / np.maximum(curve.fi, 1e-300)))
    nonneg = bool(np.all(curve.fi >= 0) and np.all(curve.terms >= 0))
    dt = time.perf_counter() - t0
    ok = max(rel) <= 1e-6 and sum_err <= 1e-10 and nonneg and dt < 60
    assert acceptance_log(9, ok, f"FD vs Richardson max rel {max(rel):.1e} at 10 fields (<=1e-6); "
                                 f"terms sum rel err {sum_err:.1e} (<=1e-10); FI>=0: {nonneg}; {dt:.1f} s (<60 s)")


C10_CONFIG = """
[grid]
points = 11

[metrology]
sql_starts = 8
"""


def test_c10_determinism(acceptance_log, tmp_path):
    t0 = time.perf_counter()
    cfg = tmp_path / "run.toml"
    cfg.write_text(C10_CONFIG)
    commands = [["spectra"], ["fringes"], ["fisher"], ["sql"], ["advantage"], ["tomo", "--simulate"]]
    bad = []
    nfiles = 0
    for cmd in commands:
        outs = []
        for i, threads in enumerate(("1", "1", "4")):
            out = tmp_path / f"{cmd[0]}_{i}"
            rc = cli.main(cmd + ["--config", str(cfg), "--seed", "11", "--threads", threads, "--out", str(out)])
            assert rc == 0
            files = {}
            for root, _, names in os.walk(out):
                for n in names:
                    if n.endswith((".csv", ".json")):
                        p = os.path.join(root, n)
                        files[os.path.relpath(p, out)] = open(p, "rb").read()
            outs.append(files)
        nfiles += len(outs[0])
        if not (outs[0] and outs[0] == outs[1] == outs[2]):
            bad.append(cmd[0])
    dt = time.perf_counter() - t0
    ok = not bad and dt < 300
    assert acceptance_log(10, ok, f"{len(commands)} commands, {nfiles} CSV/JSON files byte-identical over 2 runs "
                                  f"and threads 1/4; mismatches: {bad or 'none'}; {dt:.0f} s (<300 s)")
