"""
Synthetic labour-force microdata with a fully specified data-generating
process and closed-form ground truth.

Workers are first allotted to (period, sector, gender) cells from sector
sizes and female shares. Sector dominance then follows from the shares,
and every other covariate is drawn from a distribution specific to the
worker's (gender, dominance) cell. Sector choice therefore depends on
observables (through Bayes' rule), which gives propensity-score matching
genuine confounding to remove, while cell moments, population regression
coefficients, KBO components and the ATT stay available in closed form.

Log wages follow a Mincerian equation with cell-specific coefficients,
a female-dominated-sector shift ``tau`` and Gaussian noise, optionally
heteroskedastic in part-time status. Labour-force participation follows a
probit in age and benefit receipt; inactive people are added by rejection
sampling so that ``P(inlf | age, benefit)`` is exactly the probit.

``mode="stratified"`` replaces every random draw by its quota or
stratified-quantile counterpart, so sample moments sit on their population
values far inside Monte Carlo error; ``mode="iid"`` draws independently.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import brentq
from scipy.special import ndtr

from .exceptions import InvalidSpec
from .frame import Column, FormulaSpec, Frame, schema_of, write_csv
from .rng import (
    exact_binary,
    exact_categorical,
    quota_counts,
    stratified_normal,
    stratified_uniform,
    substream,
)
from .segregation import SectorPanel, classify_dominance, rank_segregation, ssi

GENDERS = ("fml", "ml")
DOMS = ("fml-dom", "ml-dom")
CELLS = tuple(f"{g}/{d}" for g in GENDERS for d in DOMS)
NATIONALITY = ("native", "EEA", "nonEEA")
OCCUPATIONS = tuple(str(i) for i in range(1, 10))
WAGE_TERMS = ("educ", "exper", "exper^2", "incouple", "kids", "nationality", "parttime",
              "occupation")
WAGE_COLUMNS = (
    ["const", "educ", "exper", "exper^2", "incouple", "kids",
     "nationality=EEA", "nationality=nonEEA", "parttime"]
    + [f"occupation={o}" for o in OCCUPATIONS[1:]]
)
MINCER_SPEC = FormulaSpec("lnwage", WAGE_TERMS)
_K = len(WAGE_COLUMNS)

# Sector employment shares (% of workers) and sector-by-occupation shares,
# SIC 2007 sections without O and U.
_SECTORS = tuple("ABCDEFGHIJKLMNPQRST")
_SECTOR_OCC = np.array([
    [0.04, 0.02, 0.02, 0.05, 0.15, 0.05, 0.02, 0.08, 0.31],
    [0.03, 0.08, 0.07, 0.05, 0.05, 0.00, 0.00, 0.06, 0.02],
    [0.84, 0.79, 1.18, 1.12, 1.58, 0.05, 0.38, 2.38, 1.62],
    [0.04, 0.05, 0.04, 0.06, 0.06, 0.00, 0.12, 0.04, 0.03],
    [0.05, 0.06, 0.06, 0.10, 0.04, 0.00, 0.04, 0.19, 0.20],
    [0.44, 0.59, 0.34, 0.63, 1.64, 0.02, 0.13, 0.55, 1.02],
    [1.02, 0.32, 1.17, 1.28, 0.96, 0.09, 9.80, 1.10, 3.02],
    [0.22, 0.10, 0.21, 0.41, 0.10, 0.20, 0.15, 1.50, 1.38],
    [0.49, 0.03, 0.12, 0.41, 1.27, 0.30, 0.59, 0.22, 7.43],
    [0.30, 1.01, 0.70, 0.30, 0.10, 0.00, 0.42, 0.06, 0.23],
    [0.46, 0.47, 0.83, 1.11, 0.01, 0.02, 0.50, 0.01, 0.10],
    [0.17, 0.09, 0.31, 0.32, 0.04, 0.03, 0.12, 0.02, 0.09],
    [0.57, 1.65, 1.50, 1.58, 0.16, 0.13, 0.34, 0.15, 0.93],
    [0.35, 0.41, 0.72, 0.66, 0.26, 0.28, 0.62, 0.21, 1.55],
    [0.16, 4.47, 0.90, 1.03, 0.08, 2.34, 0.03, 0.03, 1.08],
    [0.63, 2.24, 1.80, 1.57, 0.16, 5.44, 0.21, 0.07, 0.74],
    [0.19, 0.12, 0.54, 0.52, 0.22, 0.46, 0.22, 0.02, 0.87],
    [0.10, 0.16, 0.25, 0.26, 0.11, 0.89, 0.09, 0.06, 0.33],
    [0.00, 0.00, 0.00, 0.01, 0.03, 0.17, 0.00, 0.00, 0.06],
])
_SECTOR_SIZE = np.array([0.73, 0.35, 9.94, 0.43, 0.74, 5.37, 18.76, 4.26, 10.86, 3.11,
                         3.52, 1.19, 7.00, 5.06, 10.13, 12.86, 3.17, 2.25, 0.27])
# female share (%) in 2005, 2010, 2015, 2020 and pooled 2005-2020
_FEMALE_SHARE = np.array([
    [30.8, 25.4, 32.7, 31.9, 29.9], [15.3, 13.8, 15.2, 23.4, 18.0],
    [25.6, 24.6, 25.7, 28.8, 25.9], [24.6, 25.1, 27.1, 26.7, 27.6],
    [21.3, 18.8, 21.7, 23.2, 20.3], [14.6, 16.8, 18.4, 21.1, 16.8],
    [53.4, 51.5, 51.2, 49.3, 51.7], [26.4, 23.0, 25.1, 24.8, 24.5],
    [58.6, 57.9, 56.0, 57.9, 57.5], [27.8, 30.9, 29.5, 32.6, 30.4],
    [54.2, 51.0, 50.1, 48.3, 50.9], [56.2, 63.2, 55.3, 58.3, 57.8],
    [49.8, 47.7, 48.2, 46.8, 48.0], [24.5, 46.9, 49.7, 48.8, 44.6],
    [74.3, 75.6, 74.8, 76.1, 75.3], [80.5, 80.6, 80.3, 79.1, 80.4],
    [50.0, 52.4, 51.3, 50.7, 50.3], [66.1, 61.7, 61.8, 60.6, 62.4],
    [68.6, 78.4, 79.6, 77.1, 74.8],
]) / 100.0
_ANCHOR_YEARS = np.array([2005, 2010, 2015, 2020])

#: calibration targets by gender
TARGETS = {
    "log_wage": {"fml": 2.41, "ml": 2.59},
    "log_wage_sd": {"fml": 0.50, "ml": 0.56},
    "parttime": {"fml": 0.43, "ml": 0.12},
    "weekly_hours": {"fml": 30.89, "ml": 40.33},
    "inlf": {"fml": 0.70, "ml": 0.79},
}


def _dominance_of(cell):
    return cell.split("/")[1]


def _gender_of(cell):
    return cell.split("/")[0]


@dataclass
class DgpSpec:
    """Every parameter of the synthetic data-generating process.

    Per-gender parameters are mappings keyed ``"fml"``/``"ml"``; per-cell
    parameters are keyed ``"<gender>/<dominance>"`` (see :data:`CELLS`).
    ``female_share_dev[t][j]`` shifts sector ``j``'s female share in period
    ``t``; deviations must sum to zero over periods so the pooled share is
    ``female_share[j]``. ``wage_coef`` maps each cell to coefficients on
    :data:`WAGE_COLUMNS` (absent names are zero).
    """

    n_workers: int
    periods: tuple
    sectors: tuple
    sector_sizes: tuple
    female_share: tuple
    occupation_probs: tuple
    covariates: dict
    wage_coef: dict
    female_share_dev: tuple | None = None
    tau: float = 0.0
    noise_sd: dict = field(default_factory=lambda: {"fml": 0.4, "ml": 0.4})
    heteroskedastic: float = 0.0
    educ_sd: float = 2.9
    exper_max: dict = field(default_factory=lambda: {"fml": 47.5, "ml": 48.6})
    parttime: dict = field(default_factory=lambda: {"fml": 0.43, "ml": 0.12})
    hours: dict = field(default_factory=lambda: {
        "pt_mean": 18.0, "ft_mean": {"fml": 40.614, "ml": 43.375}, "log_sd": 0.25})
    participation: dict = field(default_factory=lambda: {
        "const": {"fml": 0.6, "ml": 0.9}, "age": 0.05, "age2": -0.35,
        "benefit": -0.6, "benefit_p": {"fml": 0.46, "ml": 0.20}})
    seed: int = 0
    mode: str = "stratified"

    # ------------------------------------------------------------ checks
    def validate(self):
        """Raise :class:`InvalidSpec` listing every violated constraint."""
        p = []
        J, T = len(self.sectors), len(self.periods)

        def prob(name, v):
            if not (0.0 <= float(v) <= 1.0):
                p.append(f"{name}={v} outside [0, 1]")

        def pos(name, v):
            if not float(v) > 0.0:
                p.append(f"{name}={v} must be > 0")

        if int(self.n_workers) < 1:
            p.append("n_workers must be >= 1")
        if T < 1 or len(set(map(str, self.periods))) != T:
            p.append("periods must be non-empty and unique")
        if J < 2 or len(set(map(str, self.sectors))) != J:
            p.append("need at least two unique sectors")
        if len(self.sector_sizes) != J or any(float(s) < 0 for s in self.sector_sizes) \
                or sum(self.sector_sizes) <= 0:
            p.append("sector_sizes must be J non-negative numbers with a positive sum")
        if len(self.female_share) != J:
            p.append("female_share must have one entry per sector")
        else:
            for s, f in zip(self.sectors, self.female_share):
                prob(f"female_share[{s}]", f)
        if self.female_share_dev is not None:
            dev = np.asarray(self.female_share_dev, dtype=float)
            if dev.shape != (T, J):
                p.append(f"female_share_dev must be {T}x{J}")
            elif len(self.female_share) == J:
                if np.any(np.abs(dev.sum(axis=0)) > 1e-9):
                    p.append("female_share_dev must sum to zero over periods")
                f = np.asarray(self.female_share)[None, :] + dev
                if np.any((f < 0) | (f > 1)):
                    p.append("female_share + female_share_dev leaves [0, 1]")
        occ = np.asarray(self.occupation_probs, dtype=float)
        if occ.shape != (J, len(OCCUPATIONS)) or np.any(occ < 0) or np.any(occ.sum(axis=1) <= 0):
            p.append(f"occupation_probs must be a non-negative {J}x9 table with positive rows")
        for cell in CELLS:
            c = self.covariates.get(cell)
            if c is None:
                p.append(f"covariates missing cell {cell!r}")
                continue
            for key in ("incouple", "kids", "eea", "noneea"):
                prob(f"covariates[{cell}].{key}", c.get(key, -1))
            if c.get("eea", 0) + c.get("noneea", 0) > 1:
                p.append(f"covariates[{cell}]: eea + noneea exceeds 1")
            if "educ_mean" not in c:
                p.append(f"covariates[{cell}] lacks educ_mean")
            coef = self.wage_coef.get(cell)
            if coef is None:
                p.append(f"wage_coef missing cell {cell!r}")
            else:
                bad = sorted(set(coef) - set(WAGE_COLUMNS))
                if bad:
                    p.append(f"wage_coef[{cell}] has unknown columns {bad}")
        for g in GENDERS:
            pos(f"noise_sd[{g}]", self.noise_sd.get(g, 0))
            pos(f"exper_max[{g}]", self.exper_max.get(g, 0))
            prob(f"parttime[{g}]", self.parttime.get(g, -1))
            pos(f"hours.ft_mean[{g}]", self.hours["ft_mean"].get(g, 0))
            prob(f"participation.benefit_p[{g}]", self.participation["benefit_p"].get(g, -1))
        pos("educ_sd", self.educ_sd)
        pos("hours.pt_mean", self.hours["pt_mean"])
        pos("hours.log_sd", self.hours["log_sd"])
        if self.heteroskedastic < 0:
            p.append("heteroskedastic must be >= 0")
        if self.mode not in ("stratified", "iid"):
            p.append(f"mode must be 'stratified' or 'iid', got {self.mode!r}")
        if p:
            raise InvalidSpec("; ".join(p))
        return self

    # ------------------------------------------------------------ derived
    def share_matrix(self):
        """``(T, J)`` female share by period and sector."""
        f = np.tile(np.asarray(self.female_share, dtype=float), (len(self.periods), 1))
        if self.female_share_dev is not None:
            f = f + np.asarray(self.female_share_dev, dtype=float)
        return f

    def expected_panel(self) -> SectorPanel:
        """Population employment counts implied by sizes and shares."""
        T = len(self.periods)
        s = np.asarray(self.sector_sizes, dtype=float)
        s = s / s.sum()
        n_t = self.n_workers / T
        f = self.share_matrix()
        counts = np.stack([n_t * s[None, :] * f, n_t * s[None, :] * (1 - f)], axis=2)
        return SectorPanel(self.periods, self.sectors, counts)

    def to_dict(self):
        d = asdict(self)
        d["periods"] = list(map(str, self.periods))
        d["sectors"] = list(map(str, self.sectors))
        for key in ("sector_sizes", "female_share"):
            d[key] = [float(v) for v in d[key]]
        d["occupation_probs"] = [[float(v) for v in row] for row in self.occupation_probs]
        if self.female_share_dev is not None:
            d["female_share_dev"] = [[float(v) for v in row] for row in self.female_share_dev]
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("periods", "sectors", "sector_sizes", "female_share"):
            if key in d:
                d[key] = tuple(d[key])
        for key in ("occupation_probs", "female_share_dev"):
            if d.get(key) is not None:
                d[key] = tuple(tuple(row) for row in d[key])
        try:
            return cls(**d)
        except TypeError as exc:
            raise InvalidSpec(str(exc)) from None


# --------------------------------------------------------------------------
# Population moments
# --------------------------------------------------------------------------

def _true_dominance(spec):
    return classify_dominance(spec.expected_panel(), "pooled").pooled


def _sector_weights(spec, gender, dom):
    """``P(sector | gender, dominance)`` under the population counts."""
    c = spec.expected_panel().counts.sum(axis=0)[:, 0 if gender == "fml" else 1]
    fem = _true_dominance(spec)
    mask = fem if dom == "fml-dom" else ~fem
    w = np.where(mask, c, 0.0)
    tot = w.sum()
    return w / tot if tot > 0 else w


def _occupation_mix(spec, gender, dom):
    occ = np.asarray(spec.occupation_probs, dtype=float)
    occ = occ / occ.sum(axis=1, keepdims=True)
    return _sector_weights(spec, gender, dom) @ occ


def cell_moments(spec, cell):
    """Mean vector and second-moment matrix ``E[x x']`` of the wage regressors.

    Covariates are independent within a cell, so the covariance is block
    diagonal: education, the experience/experience-squared pair (uniform
    on ``[0, b]``), Bernoullis, and the two multinomial blocks.
    """
    g, d = cell.split("/")
    c = spec.covariates[cell]
    b = float(spec.exper_max[g])
    pt = float(spec.parttime[g])
    occ = _occupation_mix(spec, g, d)
    mu = np.r_[1.0, c["educ_mean"], b / 2, b * b / 3, c["incouple"], c["kids"],
               c["eea"], c["noneea"], pt, occ[1:]]
    cov = np.zeros((_K, _K))
    cov[1, 1] = spec.educ_sd ** 2
    cov[2, 2] = b ** 2 / 12
    cov[2, 3] = cov[3, 2] = b ** 3 / 12
    cov[3, 3] = 4 * b ** 4 / 45
    for j, pj in ((4, c["incouple"]), (5, c["kids"]), (8, pt)):
        cov[j, j] = pj * (1 - pj)
    nat = np.array([c["eea"], c["noneea"]])
    cov[6:8, 6:8] = np.diag(nat) - np.outer(nat, nat)
    po = occ[1:]
    cov[9:, 9:] = np.diag(po) - np.outer(po, po)
    return mu, cov + np.outer(mu, mu)


def _beta(spec, cell, with_tau=True):
    coef = spec.wage_coef[cell]
    b = np.array([float(coef.get(n, 0.0)) for n in WAGE_COLUMNS])
    if with_tau and _dominance_of(cell) == "fml-dom":
        b[0] += spec.tau
    return b


def _cell_probs(spec):
    """``P(dominance | gender)`` from the population counts."""
    c = spec.expected_panel().counts.sum(axis=0)
    fem = _true_dominance(spec)
    out = {}
    for gi, g in enumerate(GENDERS):
        tot = c[:, gi].sum()
        out[f"{g}/fml-dom"] = c[fem, gi].sum() / tot
        out[f"{g}/ml-dom"] = c[~fem, gi].sum() / tot
    return out


def _projection(spec, cells):
    """Population OLS coefficients and regressor means over ``cells`` pooled."""
    probs = _cell_probs(spec)
    w = np.array([probs[c] for c in cells])
    w = w / w.sum()
    M2 = np.zeros((_K, _K))
    Mxy = np.zeros(_K)
    mu = np.zeros(_K)
    for wc, c in zip(w, cells):
        m, S = cell_moments(spec, c)
        M2 += wc * S
        Mxy += wc * S @ _beta(spec, c)
        mu += wc * m
    # occupation levels absent from every pooled cell give zero rows; drop them
    keep = np.diag(M2) > 0
    beta = np.zeros(_K)
    beta[keep] = np.linalg.solve(M2[np.ix_(keep, keep)], Mxy[keep])
    return beta, mu


def _index_moments(spec, gender):
    """Mean and variance of the noiseless log-wage index for one gender."""
    probs = _cell_probs(spec)
    m1 = m2 = 0.0
    for d in DOMS:
        cell = f"{gender}/{d}"
        mu, S = cell_moments(spec, cell)
        b = _beta(spec, cell)
        m1 += probs[cell] * mu @ b
        m2 += probs[cell] * b @ S @ b
    return m1, m2 - m1 * m1


def _noise_var(spec, cell):
    g = _gender_of(cell)
    s2 = spec.noise_sd[g] ** 2
    pt = spec.parttime[g]
    h = spec.heteroskedastic
    return s2 * ((1 - pt) + pt * (1 + h) ** 2)


def _participation_index(spec, gender, age, benefit):
    par = spec.participation
    a = (age - 40.0) / 10.0
    return par["const"][gender] + par["age"] * a + par["age2"] * a * a + par["benefit"] * benefit


_AGE_LO, _AGE_HI = 16.0, 64.0
_GL_X, _GL_W = np.polynomial.legendre.leggauss(64)


def participation_rate(spec, gender):
    """``E[Phi(index)]`` with age uniform on [16, 64] and benefit Bernoulli."""
    age = _AGE_LO + (_GL_X + 1) * (_AGE_HI - _AGE_LO) / 2
    pb = spec.participation["benefit_p"][gender]
    r = 0.0
    for ben, wb in ((0.0, 1 - pb), (1.0, pb)):
        r += wb * (_GL_W @ ndtr(_participation_index(spec, gender, age, ben))) / 2
    return float(r)


@dataclass
class GroundTruth:
    """Population quantities implied by a :class:`DgpSpec`.

    ``beta`` holds each cell's true regression coefficients on
    :data:`WAGE_COLUMNS` (the fd shift ``tau`` folded into the constant).
    ``kbo`` holds population three-fold components, men as group ``a``
    and women as group ``b``, within each dominance group and pooled
    (``"all"``), using population least-squares projections.
    """

    beta: dict
    cell_means: dict
    cell_probs: dict
    att: float
    ate: float
    dominance: dict
    degree: dict
    ssi: dict
    kbo: dict
    mean_log_wage: dict
    participation_rate: dict
    participation_beta: dict

    def to_dict(self):
        return asdict(self)


def ground_truth(spec: DgpSpec) -> GroundTruth:
    spec.validate()
    probs = _cell_probs(spec)
    beta = {c: _beta(spec, c) for c in CELLS}
    means = {c: cell_moments(spec, c)[0] for c in CELLS}

    # treatment = female-dominated sector; effect on log wage
    effect = {g: lambda m, g=g: m @ (_beta(spec, f"{g}/fml-dom") - _beta(spec, f"{g}/ml-dom"))
              for g in GENDERS}
    exp_counts = spec.expected_panel().counts.sum(axis=(0, 1))
    p_g = exp_counts / exp_counts.sum()
    fd_mass = np.array([p_g[i] * probs[f"{g}/fml-dom"] for i, g in enumerate(GENDERS)])
    att = sum(fd_mass[i] * effect[g](means[f"{g}/fml-dom"])
              for i, g in enumerate(GENDERS)) / fd_mass.sum()
    ate = sum(p_g[i] * probs[c] * effect[g](means[c])
              for i, g in enumerate(GENDERS) for c in (f"{g}/fml-dom", f"{g}/ml-dom"))

    kbo = {}
    for label, doms in (("fml-dom", ("fml-dom",)), ("ml-dom", ("ml-dom",)), ("all", DOMS)):
        ba, ma = _projection(spec, [f"ml/{d}" for d in doms])
        bb, mb = _projection(spec, [f"fml/{d}" for d in doms])
        dx, db = ma - mb, ba - bb
        kbo[label] = {
            "overall": float(ma @ ba - mb @ bb),
            "endowment": float(dx @ bb),
            "coefficient": float(mb @ db),
            "interaction": float(dx @ db),
        }

    panel = spec.expected_panel()
    dom = classify_dominance(panel, "pooled")
    series = ssi(panel, dom)
    try:
        degree = dict(zip(spec.sectors, rank_segregation(series).label))
    except Exception:  # a dominance group with < 2 sectors has no ranking
        degree = {}
    pb = {}
    for g in GENDERS:
        par = spec.participation
        c0, ga, ga2 = par["const"][g], par["age"], par["age2"]
        pb[g] = {"const": c0 - 4 * ga + 16 * ga2, "age": ga / 10 - 0.8 * ga2,
                 "age^2": ga2 / 100, "benefit": par["benefit"]}
    return GroundTruth(
        beta={c: dict(zip(WAGE_COLUMNS, map(float, b))) for c, b in beta.items()},
        cell_means={c: dict(zip(WAGE_COLUMNS, map(float, m))) for c, m in means.items()},
        cell_probs={c: float(v) for c, v in probs.items()},
        att=float(att),
        ate=float(ate),
        dominance={s: "fd" if f else "md" for s, f in zip(spec.sectors, dom.pooled)},
        degree=degree,
        ssi={"times": list(series.times),
             "fd": [float(v) for v in series.values[:, 0]],
             "md": [float(v) for v in series.values[:, 1]]},
        kbo=kbo,
        mean_log_wage={g: _index_moments(spec, g)[0] for g in GENDERS},
        participation_rate={g: participation_rate(spec, g) for g in GENDERS},
        participation_beta=pb,
    )


# --------------------------------------------------------------------------
# Sampling
# --------------------------------------------------------------------------

class _Draws:
    """Per-stream draw helpers honouring the stratified/iid mode."""

    def __init__(self, spec):
        self.spec = spec
        self.strat = spec.mode == "stratified"

    def rng(self, name):
        return substream(self.spec.seed, f"synthgen:{name}")

    def normal(self, name, n):
        r = self.rng(name)
        return stratified_normal(r, n) if self.strat else r.standard_normal(n)

    def uniform(self, name, n):
        r = self.rng(name)
        return stratified_uniform(r, n) if self.strat else r.random(n)

    def binary(self, name, n, p):
        r = self.rng(name)
        return exact_binary(r, n, p) if self.strat else (r.random(n) < p).astype(np.int8)

    def categorical(self, name, n, probs):
        r = self.rng(name)
        probs = np.asarray(probs, dtype=float)
        probs = probs / probs.sum()
        return exact_categorical(r, n, probs) if self.strat else r.choice(probs.size, n, p=probs)


def _allocate(spec, draws):
    """Worker (period, sector, female) triples, sorted by period then sector."""
    T, J = len(spec.periods), len(spec.sectors)
    s = np.asarray(spec.sector_sizes, dtype=float)
    s = s / s.sum()
    f = spec.share_matrix()
    if draws.strat:
        n_j = quota_counts(spec.n_workers, s)
        fem_j = np.floor(n_j * np.asarray(spec.female_share) + 0.5).astype(np.int64)
        n_tj = np.stack([quota_counts(n, np.ones(T)) for n in n_j], axis=1)
        F = np.zeros((T, J), dtype=np.int64)
        for j in range(J):
            w = n_tj[:, j] * f[:, j]
            F[:, j] = quota_counts(fem_j[j], w) if w.sum() > 0 else 0
            F[:, j] = np.minimum(F[:, j], n_tj[:, j])
    else:
        r = draws.rng("allocate")
        n_t = r.multinomial(spec.n_workers, np.full(T, 1.0 / T))
        n_tj = np.stack([r.multinomial(n, s) for n in n_t])
        F = r.binomial(n_tj, f)
    counts = np.stack([F, n_tj - F], axis=2)
    t_idx, j_idx, fem = [], [], []
    for t in range(T):
        for j in range(J):
            for gi in (0, 1):
                k = int(counts[t, j, gi])
                t_idx.append(np.full(k, t))
                j_idx.append(np.full(k, j))
                fem.append(np.full(k, 1 - gi, dtype=np.int8))
    return np.concatenate(t_idx), np.concatenate(j_idx), np.concatenate(fem), counts


def _sample_participation(spec, draws, gender, n, active):
    """Ages and benefit flags conditional on (in)activity, by rejection."""
    r = draws.rng(f"participation:{gender}:{int(active)}")
    pb = spec.participation["benefit_p"][gender]
    ages, bens = [], []
    need = n
    while need > 0:
        m = max(2 * need, 64)
        age = r.uniform(_AGE_LO, _AGE_HI, m)
        ben = (r.random(m) < pb).astype(np.int8)
        p = ndtr(_participation_index(spec, gender, age, ben))
        acc = r.random(m) < (p if active else 1 - p)
        ages.append(age[acc][:need])
        bens.append(ben[acc][:need])
        need -= ages[-1].size
    return np.concatenate(ages), np.concatenate(bens)


def _cell_covariates(spec, draws, cell, n):
    g = _gender_of(cell)
    c = spec.covariates[cell]
    educ = c["educ_mean"] + spec.educ_sd * draws.normal(f"educ:{cell}", n)
    exper = spec.exper_max[g] * draws.uniform(f"exper:{cell}", n)
    couple = draws.binary(f"incouple:{cell}", n, c["incouple"])
    kids = draws.binary(f"kids:{cell}", n, c["kids"])
    nat = draws.categorical(f"nationality:{cell}", n,
                            [1 - c["eea"] - c["noneea"], c["eea"], c["noneea"]])
    return educ, exper, couple, kids, nat


def generate(spec: DgpSpec):
    """Draw a person-level frame, its sector panel and the ground truth.

    Returns
    -------
    frame : Frame
        Workers (``inlf = 1``) sorted by period, sector and gender, followed
        by inactive people (``inlf = 0``) whose job variables are missing.
    panel : SectorPanel
        Worker counts by period, sector and gender.
    truth : GroundTruth

    Raises
    ------
    InvalidSpec
    """
    spec.validate()
    truth = ground_truth(spec)
    draws = _Draws(spec)
    t_idx, j_idx, fem, counts = _allocate(spec, draws)
    n = t_idx.size
    fem_dom = np.array([truth.dominance[s] == "fd" for s in spec.sectors])
    fd = fem_dom[j_idx].astype(np.int8)
    cell_of = np.array([f"{'fml' if f else 'ml'}/{'fml-dom' if d else 'ml-dom'}"
                        for f, d in ((1, 1), (1, 0), (0, 1), (0, 0))])
    cell_code = np.where(fem == 1, np.where(fd == 1, 0, 1), np.where(fd == 1, 2, 3))

    educ = np.empty(n)
    exper = np.empty(n)
    couple = np.empty(n, dtype=np.int8)
    kids = np.empty(n, dtype=np.int8)
    nat = np.empty(n, dtype=np.int64)
    pt = np.empty(n, dtype=np.int8)
    eps = np.empty(n)
    hours_z = np.empty(n)
    age = np.empty(n)
    benefit = np.empty(n, dtype=np.int8)
    for code, cell in enumerate(cell_of):
        idx = np.flatnonzero(cell_code == code)
        m = idx.size
        if m == 0:
            continue
        g = _gender_of(cell)
        educ[idx], exper[idx], couple[idx], kids[idx], nat[idx] = \
            _cell_covariates(spec, draws, cell, m)
        pt[idx] = draws.binary(f"parttime:{cell}", m, spec.parttime[g])
        eps[idx] = draws.normal(f"wage-noise:{cell}", m)
        # stratify hours separately within part-time and full-time workers
        for flag in (0, 1):
            sub = idx[pt[idx] == flag]
            hours_z[sub] = draws.normal(f"hours:{cell}:{flag}", sub.size)
        age[idx], benefit[idx] = _sample_participation(spec, draws, g, m, True)

    occ = np.empty(n, dtype=np.int64)
    occ_p = np.asarray(spec.occupation_probs, dtype=float)
    for j in range(len(spec.sectors)):
        for f in (1, 0):
            idx = np.flatnonzero((j_idx == j) & (fem == f))
            if idx.size:
                occ[idx] = draws.categorical(f"occupation:{spec.sectors[j]}:{f}", idx.size, occ_p[j])

    X = np.zeros((n, _K))
    X[:, 0] = 1.0
    X[:, 1] = educ
    X[:, 2] = exper
    X[:, 3] = exper ** 2
    X[:, 4] = couple
    X[:, 5] = kids
    X[:, 6] = nat == 1
    X[:, 7] = nat == 2
    X[:, 8] = pt
    for o in range(1, 9):
        X[:, 8 + o] = occ == o
    B = np.stack([_beta(spec, c) for c in cell_of])
    sd = np.array([spec.noise_sd[_gender_of(c)] for c in cell_of])[cell_code]
    sd = sd * (1 + spec.heteroskedastic * pt)
    lnw = np.einsum("ij,ij->i", X, B[cell_code]) + sd * eps

    hs = spec.hours["log_sd"]
    ft_mean = np.where(fem == 1, spec.hours["ft_mean"]["fml"], spec.hours["ft_mean"]["ml"])
    h_mean = np.where(pt == 1, spec.hours["pt_mean"], ft_mean)
    hours = np.exp(np.log(h_mean) - hs * hs / 2 + hs * hours_z)

    # inactive people
    inact = {}
    for g, f in (("fml", 1), ("ml", 0)):
        n_w = int(np.sum(fem == f))
        rate = truth.participation_rate[g]
        m = int(np.floor(n_w * (1 - rate) / rate + 0.5)) if n_w else 0
        probs = truth.cell_probs
        dom_codes = draws.categorical(f"inactive-dom:{g}", m,
                                      [probs[f"{g}/fml-dom"], probs[f"{g}/ml-dom"]])
        block = {"educ": np.empty(m), "exper": np.empty(m), "couple": np.empty(m, np.int8),
                 "kids": np.empty(m, np.int8), "nat": np.empty(m, np.int64)}
        for k, d in enumerate(DOMS):
            idx = np.flatnonzero(dom_codes == k)
            if idx.size:
                e, x, c, kd, nt = _inactive_covariates(spec, draws, f"{g}/{d}", idx.size)
                block["educ"][idx], block["exper"][idx] = e, x
                block["couple"][idx], block["kids"][idx], block["nat"][idx] = c, kd, nt
        a, b = _sample_participation(spec, draws, g, m, False)
        inact[g] = (m, block, a, b, f)

    m_tot = sum(v[0] for v in inact.values())
    miss_f = np.full(m_tot, np.nan)
    miss_i = np.full(m_tot, -1, dtype=np.int64)
    miss_b = np.full(m_tot, -1, dtype=np.int8)
    cat = np.concatenate

    def stack(key):
        return cat([inact[g][1][key] for g in GENDERS])

    degree = truth.degree
    low = np.array([degree.get(s) == "Low" for s in spec.sectors], dtype=np.int8) if degree \
        else np.zeros(len(spec.sectors), dtype=np.int8)
    # inactive rows carry the period as the allocation did not use one
    r_per = draws.rng("inactive-period")
    per_inact = r_per.integers(0, len(spec.periods), m_tot) if not draws.strat else \
        exact_categorical(r_per, m_tot, np.ones(len(spec.periods)))
    frame = Frame([
        Column("period", "categorical", cat([t_idx, per_inact]), spec.periods),
        Column("sector", "categorical", cat([j_idx, miss_i]), spec.sectors),
        Column("female", "boolean", cat([fem] + [np.full(inact[g][0], inact[g][4], np.int8)
                                                  for g in GENDERS])),
        Column("inlf", "boolean", cat([np.ones(n, np.int8), np.zeros(m_tot, np.int8)])),
        Column("fd", "boolean", cat([fd, miss_b])),
        Column("low_seg", "boolean", cat([low[j_idx], miss_b])),
        Column("age", "numeric", cat([age] + [inact[g][2] for g in GENDERS])),
        Column("benefit", "boolean", cat([benefit] + [inact[g][3] for g in GENDERS])),
        Column("nationality", "categorical", cat([nat, stack("nat")]), NATIONALITY),
        Column("educ", "numeric", cat([educ, stack("educ")])),
        Column("exper", "numeric", cat([exper, stack("exper")])),
        Column("incouple", "boolean", cat([couple, stack("couple")])),
        Column("kids", "boolean", cat([kids, stack("kids")])),
        Column("occupation", "categorical", cat([occ, miss_i]), OCCUPATIONS),
        Column("parttime", "boolean", cat([pt, miss_b])),
        Column("hours", "numeric", cat([hours, miss_f])),
        Column("lnwage", "numeric", cat([lnw, miss_f])),
    ])
    panel = SectorPanel(spec.periods, spec.sectors, counts.astype(float))
    return frame, panel, truth


def _inactive_covariates(spec, draws, cell, n):
    return _cell_covariates(spec, _InactiveDraws(draws), cell, n)


class _InactiveDraws(_Draws):
    """Same draw rules on streams disjoint from the workers'."""

    def __init__(self, base):
        super().__init__(base.spec)

    def rng(self, name):
        return substream(self.spec.seed, f"synthgen:inactive:{name}")


# --------------------------------------------------------------------------
# Calibration
# --------------------------------------------------------------------------

def _anchor_share_dev(periods):
    """Per-period deviations interpolated from the four anchor years and
    centred so the pooled share is unchanged."""
    years = np.array([float(p) for p in periods])
    dev = np.stack([np.interp(years, _ANCHOR_YEARS, row[:4]) for row in _FEMALE_SHARE], axis=1)
    return dev - dev.mean(axis=0, keepdims=True)


_BASE_COEF = {
    "educ": 0.075, "exper": 0.035, "exper^2": -0.0006, "incouple": 0.06, "kids": 0.02,
    "nationality=EEA": -0.08, "nationality=nonEEA": -0.10, "parttime": -0.15,
    "occupation=2": -0.05, "occupation=3": -0.15, "occupation=4": -0.35,
    "occupation=5": -0.35, "occupation=6": -0.50, "occupation=7": -0.55,
    "occupation=8": -0.45, "occupation=9": -0.60,
}
# returns differ by gender only, so the dominance effect on wages is exactly tau
_FEMALE_COEF = {"educ": 0.068, "exper": 0.030, "exper^2": -0.0005, "kids": -0.03}
_CELL_TWEAKS = {
    "ml/ml-dom": {}, "ml/fml-dom": {},
    "fml/ml-dom": _FEMALE_COEF, "fml/fml-dom": _FEMALE_COEF,
}
_COVARIATES = {
    "fml/fml-dom": {"educ_mean": 13.40, "incouple": 0.50, "kids": 0.39, "eea": 0.05, "noneea": 0.10},
    "fml/ml-dom": {"educ_mean": 12.80, "incouple": 0.53, "kids": 0.33, "eea": 0.05, "noneea": 0.09},
    "ml/fml-dom": {"educ_mean": 13.40, "incouple": 0.48, "kids": 0.25, "eea": 0.04, "noneea": 0.10},
    "ml/ml-dom": {"educ_mean": 12.95, "incouple": 0.51, "kids": 0.30, "eea": 0.04, "noneea": 0.09},
}


def calibrate_to_paper(n_workers=200_000, seed=0, mode="stratified", tau=-0.094,
                       periods=None, heteroskedastic=0.0) -> DgpSpec:
    """Default specification matched to published UK moments.

    Sector sizes, pooled and per-year female shares, the occupation mix,
    gender means of log wages, part-time incidence, weekly hours and
    participation are set to their published values; the gender
    intercepts, noise scales and participation constants are solved for so
    the population moments hit those targets exactly.
    """
    periods = tuple(str(y) for y in (periods or range(2005, 2021)))
    coef = {c: {"const": 0.0, **_BASE_COEF, **_CELL_TWEAKS[c]} for c in CELLS}
    spec = DgpSpec(
        n_workers=int(n_workers),
        periods=periods,
        sectors=_SECTORS,
        sector_sizes=tuple(float(v) for v in _SECTOR_SIZE),
        female_share=tuple(float(v) for v in _FEMALE_SHARE[:, 4]),
        female_share_dev=tuple(tuple(float(v) for v in row) for row in _anchor_share_dev(periods)),
        occupation_probs=tuple(tuple(float(v) for v in row) for row in _SECTOR_OCC),
        covariates={c: dict(v) for c, v in _COVARIATES.items()},
        wage_coef=coef,
        tau=float(tau),
        heteroskedastic=float(heteroskedastic),
        parttime=dict(TARGETS["parttime"]),
        seed=int(seed),
        mode=mode,
    )
    spec.validate()
    # full-time hours so the part-time/full-time mixture hits the weekly mean
    pt_mean = spec.hours["pt_mean"]
    spec.hours["ft_mean"] = {
        g: (TARGETS["weekly_hours"][g] - spec.parttime[g] * pt_mean) / (1 - spec.parttime[g])
        for g in GENDERS
    }
    for g in GENDERS:
        m1, var = _index_moments(spec, g)
        shift = TARGETS["log_wage"][g] - m1
        for d in DOMS:
            spec.wage_coef[f"{g}/{d}"]["const"] += shift
        # noise fills the remaining log-wage variance (floor 0.2)
        probs = _cell_probs(spec)
        scale = sum(probs[f"{g}/{d}"] * _noise_var(spec, f"{g}/{d}") for d in DOMS) \
            / spec.noise_sd[g] ** 2
        resid = TARGETS["log_wage_sd"][g] ** 2 - var
        spec.noise_sd[g] = float(np.sqrt(max(resid / scale, 0.04)))
        spec.participation["const"][g] = float(brentq(
            lambda c0: participation_rate(_with_const(spec, g, c0), g) - TARGETS["inlf"][g],
            -5.0, 5.0, xtol=1e-14))
    return spec.validate()


def _with_const(spec, g, c0):
    spec.participation["const"][g] = c0
    return spec


# --------------------------------------------------------------------------
# Output
# --------------------------------------------------------------------------

def write_synth(out_dir, frame, panel, truth, spec=None):
    """Write ``persons.csv``, ``schema.json``, ``panel.csv`` and ``truth.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(frame, out / "persons.csv")
    (out / "schema.json").write_text(json.dumps(schema_of(frame), indent=2) + "\n")
    panel.to_long_csv(out / "panel.csv")
    doc = truth.to_dict()
    if spec is not None:
        doc["spec"] = spec.to_dict()
    (out / "truth.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return out


def synth_schema(spec: DgpSpec) -> dict:
    """Schema of the frame :func:`generate` returns for ``spec``, without generating it."""
    cat = lambda levels: {"kind": "categorical", "levels": [str(v) for v in levels]}  # noqa: E731
    return {
        "period": cat(spec.periods), "sector": cat(spec.sectors),
        "female": "boolean", "inlf": "boolean", "fd": "boolean", "low_seg": "boolean",
        "age": "numeric", "benefit": "boolean", "nationality": cat(NATIONALITY),
        "educ": "numeric", "exper": "numeric", "incouple": "boolean", "kids": "boolean",
        "occupation": cat(OCCUPATIONS), "parttime": "boolean", "hours": "numeric",
        "lnwage": "numeric",
    }
