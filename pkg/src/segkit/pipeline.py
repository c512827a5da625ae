"""
Config-driven analysis runner.

A run reads one TOML file describing the input data (a CSV file with a
schema, or the synthetic generator), the column roles, and a list of
analyses. Analyses are ordered by their dependencies and independent ones
run on a thread pool. Each analysis writes JSON results, tidy CSV tables
and SVG plots into its own sub-directory; every file is written to a
temporary name first and renamed into place.
"""
from __future__ import annotations

import json
import math
import os
import sys
import warnings
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from graphlib import CycleError, TopologicalSorter
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .counterfactual import (
    REFERENCE,
    SUBGROUPS,
    _fit_nonzero,
    cdf_relation,
    decompose_frame,
    ecdf,
    ks_table,
    subgroup_key,
    write_decomp_csv,
)
from .estimators import lasso_bic, probit, probit_ame
from .exceptions import AnalysisFailed, ConfigInvalid, GroupTooSmall, SegkitError
from .frame import FormulaSpec, Frame, _parse_term, build_design, read_csv
from .kbo import COMPONENTS, kbo_by_period, write_kbo_csv
from .matching import balance, estimate_pscore, ipw_ate, match_att
from .rng import substream
from .segregation import GROUPS, SectorPanel, classify_dominance, duncan_index, rank_segregation, ssi
from .shiftshare import shift_share
from .svg import Figure, histogram_polygon
from .synthgen import DgpSpec, calibrate_to_paper, generate, synth_schema

ANALYSES = ("segregation", "shiftshare", "participation_probit", "psm", "mincer", "kbo",
            "counterfactual", "lasso_select")
ENV_OUTPUT = "SEGKIT_OUTPUT_DIR"
DEFAULT_OUTPUT = "segkit-out"
ROLES = {"period": "period", "sector": "sector", "female": "female", "employed": None,
         "dominance": "fd", "outcome": None}
TOP_KEYS = {"seed", "output_dir", "jobs", "input", "columns", "analysis"}
_COMMON = {"name", "id", "after", "formula", "sample"}
OPTIONS = {
    "segregation": {"pooling", "bins"},
    "shiftshare": {"genders", "base_time", "share_base"},
    "participation_probit": {"by"},
    "lasso_select": {"grid_size", "ratio"},
    "psm": {"treatment", "outcome", "k", "common_support", "caliper", "use_lasso", "ipw"},
    "mincer": set(),
    "kbo": {"by_period", "group_a"},
    "counterfactual": {"values", "grid"},
}
NEEDS_FORMULA = {"participation_probit", "lasso_select", "psm", "mincer"}
SYNTH_KEYS = {"n_workers", "mode", "tau", "periods", "heteroskedastic", "spec_file"}


def shipped_config() -> Path:
    """Path of the bundled replication config."""
    return Path(__file__).with_name("configs") / "replica.toml"


# --------------------------------------------------------------------------
# Config
# --------------------------------------------------------------------------

@dataclass
class AnalysisConfig:
    id: str
    kind: str
    options: dict
    formula: FormulaSpec | None = None
    after: tuple = ()
    sample: str = "workers"


@dataclass
class PipelineConfig:
    """Parsed, validated run description."""

    path: Path | None
    seed: int
    input: dict
    schema: dict
    columns: dict
    analyses: list
    order: list
    deps: dict
    output_dir: str | None = None
    jobs: int = 4

    def analysis(self, aid):
        return next(a for a in self.analyses if a.id == aid)


def _load_toml(path):
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise ConfigInvalid(f"{path}: cannot read ({exc.strerror or exc})") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigInvalid(f"{path}: not valid TOML ({exc})") from exc


def _resolve(base, p):
    p = Path(p)
    return p if p.is_absolute() or base is None else base / p


def _synth_spec(opts, seed, base):
    """DgpSpec from an ``[input.synthgen]`` table."""
    if "spec_file" in opts:
        path = _resolve(base, opts["spec_file"])
        raw = _load_toml(path) if path.suffix == ".toml" else json.loads(path.read_text())
        return DgpSpec.from_dict({**raw, "seed": seed})
    kw = {k: opts[k] for k in ("n_workers", "mode", "tau", "periods", "heteroskedastic") if k in opts}
    return calibrate_to_paper(seed=seed, **kw)


def parse_config(raw: dict, path=None, seed=None) -> PipelineConfig:
    """Check a config mapping and return the parsed form.

    Raises
    ------
    ConfigInvalid
        With every problem found listed in ``problems``.
    """
    base = Path(path).resolve().parent if path is not None else None
    problems = []
    for k in sorted(set(raw) - TOP_KEYS):
        problems.append(f"unknown top-level key {k!r}")
    seed = int(seed if seed is not None else raw.get("seed", 0))

    # input and schema
    inp = raw.get("input")
    schema = {}
    if not isinstance(inp, dict):
        problems.append("missing [input] table")
        inp = {}
    elif ("path" in inp) == ("synthgen" in inp):
        problems.append("[input] needs exactly one of 'path' or 'synthgen'")
    elif "synthgen" in inp:
        syn = inp["synthgen"] if isinstance(inp["synthgen"], dict) else {}
        for k in sorted(set(syn) - SYNTH_KEYS):
            problems.append(f"unknown [input.synthgen] key {k!r}")
        if not problems:
            try:
                spec = _synth_spec(syn, seed, base)
                spec.validate()
                schema = synth_schema(spec)
            except (SegkitError, OSError, ValueError, TypeError) as exc:
                problems.append(f"synthetic input: {exc}")
    else:
        if not _resolve(base, inp["path"]).is_file():
            problems.append(f"input file {str(inp['path'])!r} not found")
        sch = inp.get("schema")
        if isinstance(sch, dict):
            schema = dict(sch)
        elif isinstance(sch, str):
            try:
                schema = json.loads(_resolve(base, sch).read_text(encoding="utf-8"))
            except (OSError, ValueError) as exc:
                problems.append(f"schema file {sch!r}: {exc}")
        else:
            problems.append("[input] needs a 'schema' (file name or inline table)")

    def need(col, where):
        if schema and col not in schema:
            problems.append(f"{where}: column {col!r} not in schema")

    # explicitly set roles must exist; defaults only when an analysis uses them
    cols = dict(ROLES)
    for k, v in (raw.get("columns") or {}).items():
        if k not in ROLES:
            problems.append(f"unknown column role {k!r}; roles are {sorted(ROLES)}")
        else:
            cols[k] = v
            need(v, f"[columns] {k}")

    # analyses
    entries = raw.get("analysis") or []
    if not entries:
        problems.append("no [[analysis]] entries")
    analyses, ids = [], set()
    for i, ent in enumerate(entries):
        kind = ent.get("name")
        aid = str(ent.get("id", kind))
        where = f"analysis {aid!r}"
        if kind not in ANALYSES:
            problems.append(f"analysis #{i + 1}: unknown name {kind!r}; valid names are "
                            + ", ".join(ANALYSES))
            continue
        if aid in ids:
            problems.append(f"{where}: duplicate id")
        ids.add(aid)
        for k in sorted(set(ent) - _COMMON - OPTIONS[kind]):
            problems.append(f"{where}: unknown option {k!r}")
        formula = None
        if "formula" in ent:
            try:
                formula = FormulaSpec.from_dict(ent["formula"])
                for c in formula.columns():
                    _parse_term(c)
                    need(c, f"{where} formula")
            except (ValueError, TypeError, AttributeError) as exc:
                problems.append(f"{where}: bad formula ({exc})")
        elif kind in NEEDS_FORMULA:
            problems.append(f"{where}: needs a formula")
        if kind == "mincer" and formula is not None and formula.response is None:
            problems.append(f"{where}: formula needs a response")
        opts = {k: v for k, v in ent.items() if k not in _COMMON}
        sample = ent.get("sample", "all" if kind == "participation_probit" else "workers")
        if sample not in ("workers", "all"):
            problems.append(f"{where}: sample must be 'workers' or 'all'")
        analyses.append(AnalysisConfig(aid, kind, opts, formula,
                                       tuple(str(a) for a in ent.get("after", ())), sample))
        _check_options(kind, opts, cols, where, need, problems)

    # dependencies
    deps = {}
    for a in analyses:
        d = set(a.after)
        for x in a.after:
            if x not in ids:
                problems.append(f"analysis {a.id!r}: 'after' names unknown analysis {x!r}")
        wanted = {"kbo": "mincer", "counterfactual": "mincer"}.get(a.kind)
        if a.kind == "psm" and a.options.get("use_lasso"):
            wanted = "lasso_select"
        if wanted:
            cands = [b.id for b in analyses if b.kind == wanted]
            named = [c for c in cands if c in a.after]
            if not cands:
                problems.append(f"analysis {a.id!r} requires a {wanted!r} analysis")
            elif len(named) == 1 or len(cands) == 1:
                a.options["_source"] = named[0] if named else cands[0]
                d.add(a.options["_source"])
            else:
                problems.append(f"analysis {a.id!r}: several {wanted!r} analyses; "
                                "name one in 'after'")
        deps[a.id] = d
    order = []
    try:
        order = list(TopologicalSorter(deps).static_order())
    except CycleError as exc:
        problems.append("cyclic analysis dependency: " + " -> ".join(map(str, exc.args[1])))
    if problems:
        raise ConfigInvalid(f"{len(problems)} problem(s) in config", problems)
    return PipelineConfig(Path(path) if path else None, seed, dict(inp), schema, cols,
                          analyses, order, deps, raw.get("output_dir"),
                          int(raw.get("jobs", 4)))


def _check_options(kind, o, cols, where, need, problems):
    def bad(msg):
        problems.append(f"{where}: {msg}")

    def role(name):
        if cols[name] is None:
            bad(f"column role {name!r} is unset")
        else:
            need(cols[name], f"{where} ({name} role)")

    if kind in ("segregation", "shiftshare"):
        for r in ("period", "sector", "female"):
            role(r)
    if kind == "segregation" and o.get("pooling", "pooled") not in ("pooled", "per_time"):
        bad("pooling must be 'pooled' or 'per_time'")
    if kind == "shiftshare":
        if not set(o.get("genders", ["F", "M"])) <= {"F", "M"}:
            bad("genders must be drawn from 'F' and 'M'")
        if o.get("share_base", "group") not in ("group", "economy"):
            bad("share_base must be 'group' or 'economy'")
    if kind == "participation_probit" and o.get("by", cols["female"]):
        need(o.get("by", cols["female"]), f"{where} by")
    if kind == "psm":
        t = o.get("treatment", cols["dominance"])
        y = o.get("outcome", cols["outcome"])
        if t is None or y is None:
            bad("needs 'treatment' and 'outcome' (or the dominance/outcome roles)")
        for c in (t, y):
            if c is not None:
                need(c, where)
        k = o.get("k", 5)
        if not isinstance(k, int) or k < 1:
            bad("k must be a positive integer")
    if kind in ("mincer", "kbo", "counterfactual"):
        role("female")
        role("dominance")
        if kind == "kbo" and o.get("by_period", True):
            role("period")


def load_config(path, seed=None) -> PipelineConfig:
    """Read and check a TOML config file."""
    return parse_config(_load_toml(path), path, seed)


def validate(path) -> dict:
    """Schema and ordering checks only; returns an empty problem report.

    Raises
    ------
    ConfigInvalid
    """
    cfg = load_config(path)
    return {"config": str(path), "order": cfg.order, "problems": []}


# --------------------------------------------------------------------------
# Output helpers
# --------------------------------------------------------------------------

def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def dumps(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True) + "\n"


def _num(v):
    v = float(v)
    return repr(v) if math.isfinite(v) or math.isinf(v) else ""


class StageOutput:
    """Atomic file writer bound to one stage directory."""

    def __init__(self, root: Path, name: str, deterministic: bool):
        self.dir = root / name
        self.dir.mkdir(parents=True, exist_ok=True)
        self.deterministic = deterministic
        self.files = []

    def write(self, name, writer):
        """Call ``writer(tmp_path)`` then rename the result to ``name``."""
        tmp = self.dir / f".{name}.tmp"
        writer(tmp)
        os.replace(tmp, self.dir / name)
        self.files.append(name)

    def text(self, name, content):
        self.write(name, lambda p: p.write_text(content, encoding="utf-8"))

    def json(self, name, obj):
        self.text(name, dumps(obj))

    def csv(self, name, header, rows):
        lines = [",".join(header)]
        for r in rows:
            lines.append(",".join(_num(v) if isinstance(v, (float, np.floating)) else str(v)
                                  for v in r))
        self.text(name, "\n".join(lines) + "\n")

    def svg(self, name, fig: Figure):
        self.text(name, fig.to_svg(self.deterministic))


# --------------------------------------------------------------------------
# Stages
# --------------------------------------------------------------------------

@dataclass
class StageContext:
    cfg: PipelineConfig
    analysis: AnalysisConfig
    frame: Frame
    workers: Frame
    out: StageOutput
    rng: np.random.Generator
    upstream: dict = field(default_factory=dict)

    @property
    def data(self):
        return self.frame if self.analysis.sample == "all" else self.workers

    @property
    def col(self):
        return self.cfg.columns


def _panel(ctx):
    c = ctx.col
    return SectorPanel.from_frame(ctx.frame, c["period"], c["sector"], c["female"], c["employed"])


def stage_segregation(ctx):
    o = ctx.analysis.options
    panel = _panel(ctx)
    dom = classify_dominance(panel, o.get("pooling", "pooled"))
    s = ssi(panel, dom)
    rows = []
    for ti, t in enumerate(s.times):
        for gi, g in enumerate(GROUPS):
            for j, sec in enumerate(s.sectors):
                if s.female_mask[ti, j] == (g == "fd"):
                    rows.append((t, g, sec, s.contributions[ti, j]))
            rows.append((t, g, "total", s.values[ti, gi]))
    ctx.out.csv("ssi.csv", ["time", "group", "sector", "value"], rows)
    try:
        degree = rank_segregation(s).as_dict()
    except GroupTooSmall:
        degree = None
    ctx.out.json("results.json", {
        "times": s.times, "sectors": s.sectors,
        "dominance": {sec: ("fd" if f else "md") for sec, f in zip(s.sectors, dom.pooled)},
        "dominance_per_time": {t: {sec: bool(f) for sec, f in zip(s.sectors, row)}
                               for t, row in zip(s.times, dom.per_time)},
        "pooling": dom.mode,
        "ssi": {g: s.values[:, gi] for gi, g in enumerate(GROUPS)},
        "duncan": duncan_index(panel),
        "degree": degree,
    })
    fig = Figure("Sector contributions to the segregation index", "contribution", "density")
    fem = s.female_mask
    lo, hi = float(s.contributions.min()), float(s.contributions.max())
    rng_ = (lo, hi) if hi > lo else None
    for gi, g in enumerate(GROUPS):
        x, y = histogram_polygon(s.contributions[fem == (g == "fd")], o.get("bins", 12), rng_)
        if x.size:
            fig.line(x, y, label=g, style=gi)
    ctx.out.svg("ssi_hist.svg", fig)
    return {"dominance": dom}


def stage_shiftshare(ctx):
    o = ctx.analysis.options
    panel = _panel(ctx)
    dom = classify_dominance(panel, "pooled")
    doc = {}
    for gender in o.get("genders", ["F", "M"]):
        r = shift_share(panel, gender, o.get("base_time"), dom, o.get("share_base", "group"))
        ctx.out.write(f"shiftshare_{gender}.csv", r.to_csv)
        doc[gender] = r.to_dict()
        fig = Figure(f"Change in {gender} employment share since {r.base_time}",
                     "period", "change").categories(r.times)
        x = np.arange(len(r.times))
        for gi, g in enumerate(GROUPS):
            fig.line(x, r.overall[:, gi], label=f"{g} overall", style=gi)
            fig.line(x, r.between[:, gi], label=f"{g} between", style=gi, dash=1)
            fig.line(x, r.within[:, gi], label=f"{g} within", style=gi, dash=3)
        fig.hline(0.0, dash=0)
        ctx.out.svg(f"shiftshare_{gender}.svg", fig)
    ctx.out.json("results.json", doc)
    return doc


def _levels(frame, by):
    """``(label, mask)`` per distinct non-missing value of ``by``."""
    col = frame[by]
    if col.kind == "categorical":
        return [(f"{by}={lab}", col.values == code) for code, lab in enumerate(col.levels)]
    vals = col.as_float()
    return [(f"{by}={v:g}", vals == v) for v in np.unique(vals[~np.isnan(vals)])]


def stage_participation_probit(ctx):
    a = ctx.analysis
    by = a.options.get("by", ctx.col["female"])
    data = ctx.data
    groups = _levels(data, by) if by else [("all", np.ones(data.n_rows, bool))]
    rows, doc = [], {}
    fig = Figure("Average marginal effects on participation", "", "AME")
    names = None
    for gi, (lab, mask) in enumerate(groups):
        y, X = build_design(data.filter(mask), a.formula)
        fit = probit(y, X)
        me = probit_ame(fit, X)
        doc[lab] = {"fit": fit.to_dict(), "ame": me.to_dict(), "mean_response": float(y.mean())}
        for j, n in enumerate(X.column_names):
            rows.append((lab, n, fit.beta[j], fit.se[j], me.ame[j], me.se[j]))
        keep = [j for j, k in enumerate(X.column_kinds) if k != "intercept"]
        names = [X.column_names[j] for j in keep]
        fig.points(np.arange(len(keep)) + 0.1 * gi, me.ame[keep], label=lab, style=gi)
    fig.categories(names or []).hline(0.0, dash=0)
    ctx.out.csv("probit.csv", ["group", "covariate", "coef", "se", "ame", "ame_se"], rows)
    ctx.out.json("results.json", doc)
    ctx.out.svg("ame.svg", fig)
    return doc


def _term_of(column):
    if ":" in column:
        return None
    return column.split("=")[0]


def stage_lasso_select(ctx):
    a = ctx.analysis
    y, X = build_design(ctx.data, a.formula)
    path = lasso_bic(y, X, grid_size=a.options.get("grid_size", 100),
                     ratio=a.options.get("ratio", 1e-4))
    sel = path.selected_columns
    sel_terms = [t for t in a.formula.terms if t in {_term_of(c) for c in sel}]
    rows = [(lam, b, int(d), r) for lam, b, d, r in
            zip(path.lambda_grid, path.bic, path.df, path.rss)]
    ctx.out.csv("lasso_path.csv", ["lambda", "bic", "df", "rss"], rows)
    doc = {"selected_lambda": path.selected_lambda, "selected_columns": sel,
           "selected_terms": sel_terms, "post_ols": path.post_ols.to_dict(),
           "candidates": list(X.column_names)}
    ctx.out.json("results.json", doc)
    ll = np.log10(path.lambda_grid)
    fig = Figure("Lasso path: BIC by penalty", "log10 lambda", "BIC")
    fig.line(ll, path.bic, label="BIC").vline(ll[path.selected_index])
    ctx.out.svg("lasso_bic.svg", fig)
    return {"terms": sel_terms}


def stage_psm(ctx):
    a, o = ctx.analysis, ctx.analysis.options
    treat = o.get("treatment", ctx.col["dominance"])
    outcome = o.get("outcome", ctx.col["outcome"])
    spec = a.formula
    if o.get("use_lasso"):
        chosen = set(ctx.upstream[o["_source"]]["terms"])
        spec = FormulaSpec(None, tuple(t for t in spec.terms if t in chosen), spec.interactions,
                           spec.intercept, spec.reference)
    data = ctx.data
    data = data.filter(~data[outcome].missing)
    ps = estimate_pscore(data, treat, spec)
    y = data[outcome].as_float()[ps.row_index]
    k = o.get("k", 5)
    res = match_att(ps, y, k=k, common_support=o.get("common_support", True),
                    caliper=o.get("caliper"))
    bal = balance(ps, ps.design, res)
    rows = [("nn_match_att", res.att, res.se_naive, res.t_stat, res.n_treated_on_support,
             res.n_untreated_on_support, res.n_treated_off_support)]
    doc = {"treatment": treat, "outcome": outcome, "k": k, "terms": list(spec.terms),
           "match": res.to_dict(), "balance": bal.to_rows(), "balance_passed": bal.all_passed,
           "pscore": ps.fit.to_dict()}
    if o.get("ipw", True):
        ipw = ipw_ate(ps, y)
        rows.append(("ipw_ate", ipw.ate, ipw.se, ipw.ate / ipw.se if ipw.se else float("nan"),
                     ipw.n, "", ""))
        doc["ipw"] = ipw.to_dict()
    ctx.out.csv("att.csv", ["estimator", "estimate", "se", "t", "n_treated_on_support",
                            "n_untreated_on_support", "n_treated_off_support"], rows)
    ctx.out.csv("balance.csv", ["covariate", "bias_before", "bias_after", "pass"],
                [(r["covariate"], r["bias_before"], r["bias_after"], int(r["pass"]))
                 for r in bal.to_rows()])
    ctx.out.csv("pscore.csv", ["covariate", "coef", "se"],
                list(zip(ps.fit.column_names, ps.fit.beta, ps.fit.se)))
    ctx.out.json("results.json", doc)
    x = np.arange(len(bal.names))
    cap = lambda v: np.clip(v, -1e3, 1e3)  # noqa: E731
    fig = Figure("Standardized bias before and after matching", "", "bias (%)")
    fig.categories(bal.names)
    fig.points(x, cap(bal.bias_before), label="before", style=1)
    fig.points(x, cap(bal.bias_after), label="after", style=0)
    fig.hline(5.0).hline(-5.0).hline(0.0, dash=0)
    ctx.out.svg("balance.svg", fig)
    return doc


def _gender_dom_masks(frame, cols):
    fem = frame[cols["female"]].as_float() == 1.0
    fd = frame[cols["dominance"]].as_float() == 1.0
    out = {}
    for g, gm in (("ml", ~fem), ("fml", fem)):
        for d, dm in (("ml-dom", ~fd), ("fml-dom", fd)):
            out[(g, d)] = gm & dm
        out[(g, "all")] = gm
    return out


def stage_mincer(ctx):
    a = ctx.analysis
    data = ctx.data
    y, X = build_design(data, a.formula)
    masks = _gender_dom_masks(data.take(X.row_index), ctx.col)
    rows, doc = [], {}
    fig = Figure("Wage equation coefficients by subgroup", "", "coefficient")
    keep = [j for j, k in enumerate(X.column_kinds) if k != "intercept"]
    for i, (key, m) in enumerate(masks.items()):
        idx = np.flatnonzero(m)
        if idx.size <= X.k:
            continue
        fit = _fit_nonzero(y[idx], X.take(idx))
        yy = y[idx]
        r2 = 1.0 - float(fit.residuals @ fit.residuals) / float(((yy - yy.mean()) ** 2).sum())
        lab = subgroup_key(key)
        doc[lab] = {**fit.to_dict(), "r2": r2, "mean_y": float(yy.mean())}
        rows += [(lab, n, b, s, b / s if s > 0 else float("nan"))
                 for n, b, s in zip(fit.column_names, fit.beta, fit.se)]
        if key in SUBGROUPS:
            fig.points(np.arange(len(keep)) + 0.08 * i, fit.beta[keep], label=lab, style=i)
    fig.categories([X.column_names[j] for j in keep]).hline(0.0, dash=0)
    ctx.out.csv("mincer.csv", ["subgroup", "covariate", "coef", "se", "t"], rows)
    ctx.out.json("results.json", {"formula": a.formula.to_dict(), "fits": doc})
    ctx.out.svg("mincer.svg", fig)
    return {"formula": a.formula}


def _cross_foot(results, tol=1e-10):
    for r in results:
        tot = r.per_covariate.sum(axis=0)
        if np.any(np.abs(tot - r.components) > tol * max(1.0, np.abs(r.components).max())):
            raise ArithmeticError(f"per-covariate rows do not sum to totals in stratum {r.label}")
        if abs(r.components.sum() - r.overall_gap) > tol * max(1.0, abs(r.overall_gap)):
            raise ArithmeticError(f"components do not sum to the gap in stratum {r.label}")


def stage_kbo(ctx):
    o = ctx.analysis.options
    spec = ctx.upstream[o["_source"]]["formula"]
    c = ctx.col
    group_a = o.get("group_a", 0)
    doc = {"group": c["female"], "group_a": group_a, "formula": spec.to_dict(), "strata": {}}
    for key, within in (("fd", (c["dominance"], 1)), ("md", (c["dominance"], 0)), ("all", None)):
        res = kbo_by_period(ctx.data, None, c["female"], spec, group_a, within)
        if o.get("by_period", True):
            res += kbo_by_period(ctx.data, c["period"], c["female"], spec, group_a, within)
        _cross_foot(res)
        ctx.out.write(f"kbo_{key}.csv", lambda p, res=res: write_kbo_csv(res, p))
        doc["strata"][key] = [r.to_dict() for r in res]
        per = [r for r in res if r.label != "all"] or res
        x = np.arange(len(per))
        fig = Figure(f"Three-fold decomposition ({key})", "stratum", "log points")
        fig.categories([r.label for r in per])
        for i, comp in enumerate(COMPONENTS):
            est = np.array([r.components[i] for r in per])
            se = np.array([r.se[i] for r in per])
            fig.band(x, est - 1.96 * se, est + 1.96 * se, style=i)
            fig.line(x, est, label=comp, style=i).points(x, est, style=i)
        fig.line(x, [r.overall_gap for r in per], label="gap", style=6, dash=1)
        fig.hline(0.0, dash=0)
        ctx.out.svg(f"kbo_{key}.svg", fig)
    ctx.out.json("results.json", doc)
    return doc


def stage_counterfactual(ctx):
    o = ctx.analysis.options
    spec = ctx.upstream[o["_source"]]["formula"]
    dec = decompose_frame(ctx.data, spec, ctx.col["female"], ctx.col["dominance"])
    if o.get("values", True):
        ctx.out.write("values.csv", lambda p: write_decomp_csv(dec, p))
    keys = [k for k in SUBGROUPS if k in dec]
    rows, doc = [], {"reference": subgroup_key(REFERENCE), "n": {}, "ks": {}, "relation": {}}
    for k in keys:
        doc["n"][subgroup_key(k)] = dec[k].n
    for kind in ("predicted", "residual", "cf_predicted", "cf_residual"):
        samples = {k: dec[k].series()[kind] for k in keys}
        table = ks_table(samples, keys)
        doc["ks"][kind] = {subgroup_key(r): {subgroup_key(c): table[r][c].to_dict() for c in keys}
                           for r in keys}
        rows += [(kind, subgroup_key(r), subgroup_key(c), t.statistic, t.p_value, t.n1, t.n2)
                 for r in keys for c, t in table[r].items()]
        doc["relation"][kind] = {subgroup_key(k): cdf_relation(samples[k], samples[REFERENCE])
                                 for k in keys if k != REFERENCE and REFERENCE in samples}
        pooled = np.concatenate(list(samples.values()))
        lo, hi = np.quantile(pooled, [0.005, 0.995])
        grid = np.linspace(lo, hi, int(o.get("grid", 256)))
        fig = Figure(f"Empirical CDFs: {kind.replace('_', ' ')}", "log wage", "F(x)",
                     ylim=(0.0, 1.0))
        for i, k in enumerate(keys):
            fig.line(grid, ecdf(samples[k])(grid), label=subgroup_key(k), style=i, step=True)
        ctx.out.svg(f"cdf_{kind}.svg", fig)
    ctx.out.csv("ks.csv", ["kind", "row", "col", "statistic", "p_value", "n1", "n2"], rows)
    ctx.out.json("results.json", doc)
    return doc


STAGES = {
    "segregation": stage_segregation,
    "shiftshare": stage_shiftshare,
    "participation_probit": stage_participation_probit,
    "lasso_select": stage_lasso_select,
    "psm": stage_psm,
    "mincer": stage_mincer,
    "kbo": stage_kbo,
    "counterfactual": stage_counterfactual,
}


# --------------------------------------------------------------------------
# Runner
# --------------------------------------------------------------------------

@dataclass
class RunReport:
    out_dir: Path
    order: list
    files: dict
    warnings: list


def output_dir(cfg: PipelineConfig, override=None) -> Path:
    """``override`` beats ``$SEGKIT_OUTPUT_DIR`` beats the config's ``output_dir``."""
    return Path(override or os.environ.get(ENV_OUTPUT) or cfg.output_dir or DEFAULT_OUTPUT)


def load_input(cfg: PipelineConfig):
    """The frame to analyse, plus the generator's ground truth when synthetic."""
    inp = cfg.input
    base = cfg.path.resolve().parent if cfg.path else None
    if "synthgen" in inp:
        spec = _synth_spec(inp["synthgen"], cfg.seed, base)
        frame, _, truth = generate(spec)
        return frame, truth
    return read_csv(_resolve(base, inp["path"]), cfg.schema), None


def _write_error(out: Path, exc):
    doc = {"status": "error", "error": type(exc).__name__, "message": str(exc)}
    if isinstance(exc, ConfigInvalid):
        doc["problems"] = exc.problems
    if isinstance(exc, AnalysisFailed):
        doc["stage"] = exc.stage
        doc["cause"] = f"{type(exc.cause).__name__}: {exc.cause}"
    out.mkdir(parents=True, exist_ok=True)
    tmp = out / ".error.json.tmp"
    tmp.write_text(dumps(doc), encoding="utf-8")
    os.replace(tmp, out / "error.json")
    return doc


def run(cfg: PipelineConfig, out_dir=None, deterministic=False) -> RunReport:
    """Execute every analysis of ``cfg`` and write its artifacts.

    Raises
    ------
    AnalysisFailed
        Naming the first stage (in dependency order) that raised; an
        ``error.json`` report is written to the output directory first.
    """
    out = output_dir(cfg, out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "error.json").unlink(missing_ok=True)
    log = []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        try:
            try:
                frame, truth = load_input(cfg)
                emp = cfg.columns["employed"]
                workers = frame.filter(frame[emp].values == 1) if emp else frame
            except Exception as exc:
                raise AnalysisFailed("input", exc) from exc
            files = {}
            if truth is not None:
                so = StageOutput(out, "input", deterministic)
                so.json("truth.json", truth.to_dict())
                files["input"] = so.files
            files.update(_execute(cfg, out, frame, workers, deterministic))
        except AnalysisFailed as exc:
            _write_error(out, exc)
            raise
        log = sorted({f"{w.category.__name__}: {w.message}" for w in caught})
    manifest = {"status": "ok", "seed": cfg.seed, "order": cfg.order,
                "files": files, "warnings": log}
    so = StageOutput(out, ".", deterministic)
    so.json("manifest.json", manifest)
    return RunReport(out, cfg.order, files, log)


def _execute(cfg, out, frame, workers, deterministic):
    ts = TopologicalSorter(cfg.deps)
    ts.prepare()
    results, files, failed = {}, {}, {}
    rank = {a: i for i, a in enumerate(cfg.order)}

    def one(aid):
        a = cfg.analysis(aid)
        so = StageOutput(out, aid, deterministic)
        ctx = StageContext(cfg, a, frame, workers, so, substream(cfg.seed, f"stage:{aid}"),
                           {d: results[d] for d in cfg.deps[aid]})
        res = STAGES[a.kind](ctx)
        return res, so.files

    with ThreadPoolExecutor(max_workers=max(1, cfg.jobs)) as pool:
        running = {}
        while ts.is_active() and not failed:
            for aid in ts.get_ready():
                running[pool.submit(one, aid)] = aid
            if not running:
                break
            done, _ = wait(running, return_when=FIRST_COMPLETED)
            for fut in done:
                aid = running.pop(fut)
                exc = fut.exception()
                if exc is not None:
                    failed[aid] = exc
                else:
                    results[aid], files[aid] = fut.result()
                    ts.done(aid)
        for fut in list(running):
            aid = running.pop(fut)
            if fut.exception() is not None:
                failed[aid] = fut.exception()
    if failed:
        aid = min(failed, key=rank.get)
        raise AnalysisFailed(aid, failed[aid]) from failed[aid]
    return files
