"""
Acceptance suite: twelve criteria, each reported as one PASS/FAIL line.

Run under pytest (lines are printed even with output capture on) or
directly with ``python tests/test_acceptance.py``.
"""
import json
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest
from scipy.special import ndtr

from segkit.cli import main as cli_main
from segkit.counterfactual import ks_test
from segkit.estimators import lasso_bic, ols, probit, probit_ame, probit_loglik, probit_score
from segkit.frame import DesignMatrix
from segkit.kbo import kbo_threefold
from segkit.matching import PScoreModel, balance, fit_pscore, ipw_ate, match_att
from segkit.pipeline import shipped_config
from segkit.segregation import UK_SIC_DOMINANCE, SectorPanel, classify_dominance, duncan_index, ssi
from segkit.shiftshare import shift_share
from segkit.synthgen import calibrate_to_paper, generate


def _rng(tag, i=0):
    return np.random.default_rng([20240501, i, sum(map(ord, tag))])


# --------------------------------------------------------------------------
# 1. KBO additivity
# --------------------------------------------------------------------------

def criterion_1():
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(50):
        rng = _rng("kbo-add", i)
        k = int(rng.integers(2, 9))
        n = 2000
        X = np.column_stack([np.ones(n), rng.normal(size=(n, k - 1)) * rng.uniform(0.5, 3, k - 1)])
        g = rng.random(n) < rng.uniform(0.3, 0.7)
        y = X @ rng.normal(size=k) + 0.3 * g + rng.normal(size=n)
        r = kbo_threefold(y[g], X[g], y[~g], X[~g])
        worst = max(worst,
                    abs(r.components.sum() - r.overall_gap),
                    np.abs(r.per_covariate.sum(axis=0) - r.components).max())
    dt = time.perf_counter() - t0
    return worst <= 1e-10 and dt < 30, f"max additivity/cross-foot error {worst:.2e}, {dt:.1f} s"


# --------------------------------------------------------------------------
# 2. KBO recovery
# --------------------------------------------------------------------------

_BETA = np.array([1.0, 0.3, -0.2, 0.5])


def _kbo_draw(rng, n, shift_a, x1_shift_a):
    half = n // 2

    def covs(m, mu1):
        return np.column_stack([np.ones(m), rng.normal(1.0 + mu1, 1.0, m),
                                rng.random(m) < 0.5, rng.uniform(0, 2, m)]).astype(float)

    Xa, Xb = covs(half, x1_shift_a), covs(n - half, 0.0)
    ya = Xa @ _BETA + shift_a + rng.normal(0, 0.5, half)
    yb = Xb @ _BETA + rng.normal(0, 0.5, n - half)
    return kbo_threefold(ya, Xa, yb, Xb)


def _kbo_mc(shift_a, x1_shift_a, reps=20):
    est = np.array([_kbo_draw(_rng("kbo-rec", i), 50_000, shift_a, x1_shift_a).components
                    for i in range(reps)])
    return est[0], est.std(axis=0, ddof=1), est


def criterion_2():
    # pure discrimination: same X law, group a intercept +0.15
    e0, mcse, all_d = _kbo_mc(0.15, 0.0)
    ok_d = (abs(e0[1] - 0.15) < 4 * mcse[1]) and abs(e0[0]) < 4 * mcse[0]
    ok_d &= bool(np.all(np.abs(all_d[:, 1] - 0.15) < 4 * mcse[1]))
    # pure endowment: same coefficients, x1 mean shifted so the endowment is 0.15
    f0, mcse2, all_e = _kbo_mc(0.0, 0.15 / _BETA[1])
    ok_e = (abs(f0[0] - 0.15) < 4 * mcse2[0]) and abs(f0[1]) < 4 * mcse2[1]
    ok_e &= bool(np.all(np.abs(all_e[:, 0] - 0.15) < 4 * mcse2[0]))
    return ok_d and ok_e, (
        f"discrimination: coef {e0[1]:.4f} (MC SE {mcse[1]:.4f}), endow {e0[0]:.4f} "
        f"(MC SE {mcse[0]:.4f}); endowment DGP: endow {f0[0]:.4f} (MC SE {mcse2[0]:.4f}), "
        f"coef {f0[1]:.4f} (MC SE {mcse2[1]:.4f})")


# --------------------------------------------------------------------------
# 3-4. Matching and IPW on a probit selection design
# --------------------------------------------------------------------------

_GAMMA = np.array([-0.2, 0.5, -0.4, 0.3, 0.0])
_OUT = np.array([1.0, 0.8, 0.5, -0.6, 0.3])


def _psm_draw(seed, tau, n=20_000):
    rng = _rng("psm", seed)
    X = np.column_stack([np.ones(n), rng.normal(size=n), rng.normal(size=n),
                         rng.random(n) < 0.4, rng.random(n) < 0.3]).astype(float)
    # confounded: x1..x3 drive both selection and the outcome
    index = X @ _GAMMA
    D = (index + rng.normal(size=n) > 0).astype(float)
    y = X @ _OUT + tau * D + rng.normal(size=n)
    return X, D, y, ndtr(index)


_PSM_CACHE = {}


def _psm_mc(tau, seeds=20):
    if tau not in _PSM_CACHE:
        att, ipw, bal_ok = [], [], []
        for s in range(seeds):
            X, D, y, p_true = _psm_draw(s, tau)
            design = DesignMatrix(X, ["const", "x1", "x2", "x3", "x4"], True)
            ps = fit_pscore(D, design)
            m = match_att(ps, y, k=5)
            att.append(m.att)
            bal_ok.append(balance(ps, design, m).all_passed)
            ipw.append(ipw_ate(PScoreModel(p_true, D), y).ate)
        _PSM_CACHE[tau] = np.array(att), np.array(ipw), np.array(bal_ok)
    return _PSM_CACHE[tau]


def criterion_3():
    lines, ok = [], True
    bal_all = []
    for tau in (0.5, 0.0):
        att, _, bal = _psm_mc(tau)
        mcse = att.std(ddof=1)
        within = np.abs(att - tau) < 4 * mcse
        ok &= bool(within.all())
        bal_all.append(bal)
        lines.append(f"tau={tau}: ATT[0] {att[0]:.4f}, MC SE {mcse:.4f}, "
                     f"{within.sum()}/{att.size} within 4 MC SE")
    rate = np.concatenate(bal_all).mean()
    ok &= all(b.mean() >= 0.95 for b in bal_all)
    lines.append(f"balance within +-5% in {100 * rate:.0f}% of runs")
    return ok, "; ".join(lines)


def criterion_4():
    lines, ok = [], True
    for tau in (0.5, 0.0):
        _, ipw, _ = _psm_mc(tau)
        mcse = ipw.std(ddof=1)
        within = np.abs(ipw - tau) < 4 * mcse
        ok &= bool(within.all())
        lines.append(f"tau={tau}: IPW[0] {ipw[0]:.4f}, MC SE {mcse:.4f}, "
                     f"{within.sum()}/{ipw.size} within 4 MC SE")
    return ok, "; ".join(lines)


# --------------------------------------------------------------------------
# 5. OLS against the normal equations and the explicit HC1 sandwich
# --------------------------------------------------------------------------

def criterion_5():
    worst_b = worst_v = 0.0
    for i in range(100):
        rng = _rng("ols", i)
        k = int(rng.integers(1, 7))
        n = int(rng.integers(k + 2, 51))
        X = rng.normal(size=(n, k))
        X[:, 0] = 1.0
        y = X @ rng.normal(size=k) + rng.normal(size=n) * rng.uniform(0.1, 2, n)
        fit = ols(y, X)
        XtX = X.T @ X
        b = np.linalg.solve(XtX, X.T @ y)
        worst_b = max(worst_b, np.abs(fit.beta - b).max() / np.abs(b).max())
        e = y - X @ b
        inv = np.linalg.inv(XtX)
        V = n / (n - k) * inv @ (X.T * e**2) @ X @ inv
        worst_v = max(worst_v, np.abs(fit.vcov - V).max() / np.abs(V).max())
    return worst_b <= 1e-10 and worst_v <= 1e-12, (
        f"max relative coefficient error {worst_b:.2e}, HC1 {worst_v:.2e}")


# --------------------------------------------------------------------------
# 6. Probit score and average marginal effects by finite differences
# --------------------------------------------------------------------------

def criterion_6():
    h = 1e-5
    worst_s = worst_a = 0.0
    for i in range(20):
        rng = _rng("probit", i)
        n, k = 300, int(rng.integers(2, 6))
        X = np.column_stack([np.ones(n), rng.normal(size=(n, k - 1))])
        y = (X @ rng.normal(scale=0.7, size=k) + rng.normal(size=n) > 0).astype(float)
        for _ in range(5):
            b = rng.normal(scale=0.5, size=k)
            fd = np.array([(probit_loglik(b + h * e, y, X) - probit_loglik(b - h * e, y, X)) / (2 * h)
                           for e in np.eye(k)])
            s = probit_score(b, y, X)
            worst_s = max(worst_s, np.abs(fd - s).max() / np.abs(s).max())
        fit = probit(y, X)
        d = DesignMatrix(X, [f"x{j}" for j in range(k)], True,
                         column_kinds=["intercept"] + ["numeric"] * (k - 1))
        ame = probit_ame(fit, d).ame
        for j in range(1, k):
            Xp, Xm = X.copy(), X.copy()
            Xp[:, j] += h
            Xm[:, j] -= h
            fd = (ndtr(Xp @ fit.beta).mean() - ndtr(Xm @ fit.beta).mean()) / (2 * h)
            worst_a = max(worst_a, abs(ame[j] - fd) / abs(fd))
    return worst_s <= 1e-6 and worst_a <= 1e-6, (
        f"max relative score error {worst_s:.2e}, AME {worst_a:.2e}")


# --------------------------------------------------------------------------
# 7. Lasso optimality conditions
# --------------------------------------------------------------------------

def criterion_7():
    worst_kkt = worst_ols = 0.0
    zero_ok = True
    for i in range(20):
        rng = _rng("lasso", i)
        k = int(rng.integers(1, 6))
        n = int(rng.integers(20, 120))
        X = np.column_stack([np.ones(n), rng.normal(size=(n, k)) * rng.uniform(0.2, 5, k)])
        y = X[:, 1:] @ (rng.normal(size=k) * (rng.random(k) < 0.6)) + rng.normal(size=n)
        path = lasso_bic(y, X, grid_size=40)
        # stationarity on the standardized scale, rebuilt from X and y
        Z = (X[:, 1:] - X[:, 1:].mean(axis=0)) / X[:, 1:].std(axis=0)
        for lam, b in zip(path.lambda_grid, path.std_coef):
            grad = Z.T @ (y - y.mean() - Z @ b) / n
            act = b != 0
            v = np.r_[np.abs(grad[act] - lam * np.sign(b[act])),
                      np.maximum(np.abs(grad[~act]) - lam, 0.0)]
            worst_kkt = max(worst_kkt, v.max())
        lam_max = np.abs(Z.T @ (y - y.mean()) / n).max()
        big = lasso_bic(y, X, lambdas=[lam_max, 2 * lam_max])
        zero_ok &= bool(np.all(big.coef[:, 1:] == 0.0))
        tiny = lasso_bic(y, X, lambdas=lam_max * np.logspace(0, -10, 60))
        ref = ols(y, X).beta
        worst_ols = max(worst_ols, np.abs(tiny.coef[-1] - ref).max() / max(1.0, np.abs(ref).max()))
    ok = worst_kkt <= 1e-8 and zero_ok and worst_ols <= 1e-6
    return ok, (f"max KKT violation {worst_kkt:.2e}; all-zero above lambda_max: {zero_ok}; "
                f"small-penalty vs OLS {worst_ols:.2e}")


# --------------------------------------------------------------------------
# 8. SSI properties
# --------------------------------------------------------------------------

def _transfer(rng, counts, dom_mask):
    """Move women between two same-group sectors without flipping any sign."""
    c = counts.copy()
    T, J, _ = c.shape
    t = int(rng.integers(T))
    W, M = c[t, :, 0].sum(), c[t, :, 1].sum()
    for grp in (True, False):
        idx = np.flatnonzero(dom_mask[t] == grp)
        if idx.size < 2:
            continue
        i, j = rng.choice(idx, 2, replace=False)
        # slack before w - m changes sign in the donor (fd) or recipient (md)
        if grp:
            room = np.floor(c[t, i, 0] - c[t, i, 1] * W / M) - 1
        else:
            room = np.floor(c[t, j, 1] * W / M - c[t, j, 0]) - 1
        room = min(room, c[t, i, 0])
        if room >= 1:
            d = float(rng.integers(1, room + 1))
            c[t, i, 0] -= d
            c[t, j, 0] += d
    return c


def criterion_8():
    worst = {"range": 0.0, "scale": 0.0, "sum": 0.0, "transfer": 0.0}
    range_ok = True
    for i in range(1000):
        rng = _rng("ssi", i)
        T, J = int(rng.integers(1, 5)), int(rng.integers(2, 12))
        counts = rng.integers(1, 1000, size=(T, J, 2)).astype(float)
        p = SectorPanel([str(t) for t in range(T)], [f"s{j}" for j in range(J)], counts)
        dom = classify_dominance(p)
        s = ssi(p, dom).values
        range_ok &= bool(np.all((s >= 0) & (s <= 1)))
        c = float(rng.uniform(0.01, 100))
        ps = p.scaled(c)
        worst["scale"] = max(worst["scale"], np.abs(ssi(ps, classify_dominance(ps)).values - s).max())
        worst["sum"] = max(worst["sum"], np.abs(s.sum(axis=1) - duncan_index(p)).max())
        moved = SectorPanel(p.times, p.sectors, _transfer(rng, counts, dom.per_time))
        dom2 = classify_dominance(moved)
        assert np.array_equal(dom2.per_time, dom.per_time)
        worst["transfer"] = max(worst["transfer"], np.abs(ssi(moved, dom2).values - s).max())
    ok = range_ok and worst["scale"] <= 1e-14 and worst["sum"] <= 1e-14 and worst["transfer"] <= 1e-15
    return ok, (f"in [0,1]: {range_ok}; scale {worst['scale']:.1e}, fd+md vs Duncan "
                f"{worst['sum']:.1e}, transfer {worst['transfer']:.1e}")


# --------------------------------------------------------------------------
# 9. Shift-share
# --------------------------------------------------------------------------

def _ss_oracle(base, current):
    base, current = np.asarray(base, float), np.asarray(current, float)
    E0, E1 = base.sum(axis=1), current.sum(axis=1)
    between = within = 0.0
    for j in range(len(E0)):
        e0, e1 = E0[j] / E0.sum(), E1[j] / E1.sum()
        f0, f1 = base[j, 0] / E0[j], current[j, 0] / E1[j]
        between += (f0 + f1) / 2 * (e1 - e0)
        within += (e0 + e1) / 2 * (f1 - f0)
    return current[:, 0].sum() / E1.sum() - base[:, 0].sum() / E0.sum(), between, within


def criterion_9():
    from segkit.segregation import DominanceMap
    base, cur = [[40, 60], [10, 90]], [[50, 50], [20, 80]]
    p2 = SectorPanel(["0", "1"], ["A", "B"], np.array([base, cur], float))
    one = DominanceMap(p2.times, p2.sectors, np.ones((2, 2), bool), np.ones(2, bool))
    r2 = shift_share(p2, "F", dominance=one)
    oracle = _ss_oracle(base, cur)
    err2 = max(abs(r2.overall[1, 0] - oracle[0]), abs(r2.between[1, 0] - oracle[1]),
               abs(r2.within[1, 0] - oracle[2]))
    base_zero, worst_res = True, 0.0
    panels = []
    for i in range(200):
        rng = _rng("shift", i)
        T, J = int(rng.integers(2, 6)), int(rng.integers(2, 10))
        panels.append(SectorPanel([str(2000 + t) for t in range(T)], [f"s{j}" for j in range(J)],
                                  rng.integers(1, 500, size=(T, J, 2))))
    panels.append(generate(calibrate_to_paper(n_workers=20_000))[1])
    for p in panels:
        for g in ("F", "M"):
            r = shift_share(p, g)
            b = p.time_index(r.base_time)
            base_zero &= all(np.all(a[b] == 0.0) for a in (r.overall, r.between, r.within, r.residual))
            worst_res = max(worst_res, np.abs(r.residual).max(),
                            np.abs(r.overall - r.between - r.within).max())
    ok = base_zero and err2 <= 1e-14 and worst_res < 1e-12
    return ok, (f"base period zero: {base_zero}; two-sector oracle error {err2:.1e}; "
                f"max residual {worst_res:.1e} over {len(panels)} panels")


# --------------------------------------------------------------------------
# 10. Kolmogorov-Smirnov statistic
# --------------------------------------------------------------------------

def _brute_ks(a, b):
    return max(abs(np.sum(a <= x) / a.size - np.sum(b <= x) / b.size) for x in np.r_[a, b])


def criterion_10():
    worst = 0.0
    for i in range(200):
        rng = _rng("ks", i)
        a = rng.normal(size=int(rng.integers(1, 101)))
        b = rng.normal(0.3, 1.3, size=int(rng.integers(1, 101)))
        if i % 2:
            a, b = np.round(a, 1), np.round(b, 1)
        worst = max(worst, abs(ks_test(a, b).statistic - _brute_ks(a, b)))
    a = _rng("ks-self").normal(size=50)
    self_zero = ks_test(a, a).statistic == 0.0
    disjoint = ks_test(a, a + 100.0).statistic == 1.0
    return worst <= 1e-15 and self_zero and disjoint, (
        f"max error vs brute force {worst:.1e}; D(a,a)=0: {self_zero}; disjoint D=1: {disjoint}")


# --------------------------------------------------------------------------
# 11. Calibration of the synthetic generator
# --------------------------------------------------------------------------

def criterion_11():
    t0 = time.perf_counter()
    spec = calibrate_to_paper(n_workers=200_000)
    frame, panel, _ = generate(spec)
    dt = time.perf_counter() - t0
    c = panel.counts.sum(axis=0)
    share_err = np.abs(c[:, 0] / c.sum(axis=1) - np.asarray(spec.female_share)).max()
    work = frame["inlf"].values == 1
    fem = frame["female"].values == 1
    means = {
        "female log wage": (frame["lnwage"].values[work & fem].mean(), 2.41),
        "female part-time": (frame["parttime"].values[work & fem].mean(), 0.43),
        "male weekly hours": (frame["hours"].values[work & ~fem].mean(), 40.33),
    }
    mean_ok = all(abs(v - t) <= 0.01 for v, t in means.values())
    dom = classify_dominance(panel, "pooled")
    part_ok = dict(zip(panel.sectors, map(bool, dom.pooled))) == UK_SIC_DOMINANCE
    ok = share_err <= 0.01 and mean_ok and part_ok and dt < 60
    detail = ", ".join(f"{k} {v:.4f}" for k, (v, _) in means.items())
    return ok, (f"max sector share error {share_err:.4f}; {detail}; partition exact: {part_ok}; "
                f"{dt:.1f} s")


# --------------------------------------------------------------------------
# 12. Pipeline determinism
# --------------------------------------------------------------------------

def criterion_12():
    with tempfile.TemporaryDirectory() as tmp:
        outs = [Path(tmp) / name for name in ("first", "second")]
        codes = [cli_main(["run", str(shipped_config()), "--deterministic", "--out", str(o)])
                 for o in outs]
        files = sorted(p.relative_to(outs[0]) for p in outs[0].rglob("*")
                       if p.suffix in (".csv", ".json"))
        same = all((outs[0] / f).read_bytes() == (outs[1] / f).read_bytes() for f in files)
        other = sorted(p.relative_to(outs[1]) for p in outs[1].rglob("*")
                       if p.suffix in (".csv", ".json"))
        manifest = json.loads((outs[0] / "manifest.json").read_text())
    ok = codes == [0, 0] and same and files == other and manifest["status"] == "ok"
    return ok, f"exit codes {codes}; {len(files)} CSV/JSON files byte-identical: {same}"


# --------------------------------------------------------------------------

CRITERIA = {i: globals()[f"criterion_{i}"] for i in range(1, 13)}


def _line(i, ok, detail):
    return f"ACCEPTANCE {i:>2} {'PASS' if ok else 'FAIL'}  {detail}"


@pytest.fixture
def emit(capsys):
    def _emit(i, ok, detail):
        with capsys.disabled():
            print("\n" + _line(i, ok, detail))
    return _emit


@pytest.mark.parametrize("i", sorted(CRITERIA))
def test_criterion(i, emit):
    ok, detail = CRITERIA[i]()
    ok = bool(ok)
    emit(i, ok, detail)
    assert ok, detail


if __name__ == "__main__":
    results = []
    for i, fn in CRITERIA.items():
        ok, detail = fn()
        ok = bool(ok)
        results.append(ok)
        print(_line(i, ok, detail), flush=True)
    sys.exit(0 if all(results) else 1)
